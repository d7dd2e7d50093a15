//! End-to-end upscaling: upsample, predict coefficients, assemble filters,
//! filter on the engine.

use std::time::Instant;

use crate::dictionary::{assemble_filters, Dictionary};
use crate::engine::{run_filtering, BlockConfig, HardwareSpec};
use crate::error::{Error, Result};
use crate::ops::{bilinear_upsample, extract_patches};
use crate::predictor::{predict_coefficients, PredictorWeights};
use crate::tensor::Tensor;

/// Wall-clock milliseconds per stage of one upscale.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub upsample_ms: f64,
    pub patches_ms: f64,
    pub predict_ms: f64,
    pub assemble_ms: f64,
    pub filter_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    /// Predictor network time.
    pub fn conv_ms(&self) -> f64 {
        self.predict_ms
    }

    /// Filter assembly plus filtering.
    pub fn dictionary_ms(&self) -> f64 {
        self.assemble_ms + self.filter_ms
    }

    /// Everything outside the network and the dictionary stages.
    pub fn others_ms(&self) -> f64 {
        (self.total_ms - self.conv_ms() - self.dictionary_ms()).max(0.0)
    }

    /// `stage,ms` rows for `Conv`, `Dictionary`, `Others` and `Total`.
    pub fn to_csv(&self) -> String {
        format!(
            "stage,ms\nConv,{:.4}\nDictionary,{:.4}\nOthers,{:.4}\nTotal,{:.4}\n",
            self.conv_ms(),
            self.dictionary_ms(),
            self.others_ms(),
            self.total_ms
        )
    }
}

/// Filter and patch volumes for the filtering stage.
#[derive(Debug, Clone)]
pub struct FilterOperands {
    pub filters: Tensor,
    pub patches: Tensor,
}

fn check_models(x: &Tensor, weights: &PredictorWeights, dict: &Dictionary) -> Result<()> {
    x.require_single_batch("upscale")?;
    x.require_single_channel("upscale")?;
    if weights.coeff_count() != dict.len() {
        return Err(Error::shape(format!(
            "predictor emits {} coefficients but the dictionary has {} filters",
            weights.coeff_count(),
            dict.len()
        )));
    }
    Ok(())
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    *slot = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

fn operands(
    x: &Tensor,
    weights: &PredictorWeights,
    dict: &Dictionary,
    t: &mut StageTimings,
) -> Result<FilterOperands> {
    check_models(x, weights, dict)?;
    let hr = timed(&mut t.upsample_ms, || bilinear_upsample(x, weights.scale()))?;
    let patches = timed(&mut t.patches_ms, || extract_patches(&hr, dict.k()))?;
    let phi = timed(&mut t.predict_ms, || predict_coefficients(x, weights))?;
    let filters = timed(&mut t.assemble_ms, || assemble_filters(&phi, dict))?;
    Ok(FilterOperands { filters, patches })
}

/// Everything up to the filtering stage for LR image `x`.
pub fn prepare_operands(
    x: &Tensor,
    weights: &PredictorWeights,
    dict: &Dictionary,
) -> Result<FilterOperands> {
    operands(x, weights, dict, &mut StageTimings::default())
}

/// Upscales single-channel `x` by the predictor's scale factor.
pub fn upscale(
    x: &Tensor,
    weights: &PredictorWeights,
    dict: &Dictionary,
    cfg: BlockConfig,
    spec: &HardwareSpec,
) -> Result<(Tensor, StageTimings)> {
    let mut t = StageTimings::default();
    let start = Instant::now();
    let ops = operands(x, weights, dict, &mut t)?;
    let out = timed(&mut t.filter_ms, || {
        run_filtering(&ops.filters, &ops.patches, cfg, spec)
    })?;
    t.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((out, t))
}
