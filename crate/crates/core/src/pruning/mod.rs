//! Iterative dictionary selection.
//!
//! Each step lowers the kept fraction `alpha` by `delta_alpha`, samples
//! pixels, solves a LASSO over per-filter contributions with a lambda tuned
//! to hit `alpha * L` surviving filters, refits the survivors by least
//! squares and folds the refit coefficients into the predictor's last layer.

mod lasso;
mod regression;

use std::fmt::Write as _;

pub use lasso::{
    fit_gamma, lasso, lasso_from, search_lambda, LambdaSearch, LassoFit, LassoOptions,
    GAMMA_JITTER, MAX_DOUBLINGS,
};
pub use regression::{build_regression, build_regression_multi, RegressionProblem, RegressionSource};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::ops::{bilinear_upsample, extract_patches};
use crate::predictor::{predict_coefficients, scale_output_channels, PredictorWeights};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-filter selection coefficients. A filter is selected iff its
/// coefficient is nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionVector {
    pub beta: Vec<f64>,
}

impl SelectionVector {
    pub fn new(beta: Vec<f64>) -> Self {
        SelectionVector { beta }
    }

    pub fn support_size(&self) -> usize {
        self.beta.iter().filter(|&&b| b != 0.0).count()
    }

    pub fn support(&self) -> Vec<usize> {
        self.beta
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    /// Final kept fraction of the original dictionary, in `(0, 1)`.
    pub alpha_target: f64,
    pub delta_alpha: f64,
    /// Support tolerance as a fraction of the original `L`.
    pub epsilon: f64,
    pub lambda0: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub lasso_tol: f64,
    pub lasso_max_iters: usize,
    pub bisect_max: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            alpha_target: 0.5,
            delta_alpha: 0.1,
            epsilon: 0.02,
            lambda0: 1e-4,
            sample_count: 4096,
            seed: 0,
            lasso_tol: 1e-6,
            lasso_max_iters: 10_000,
            bisect_max: 32,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_target > 0.0 && self.alpha_target < 1.0) {
            return Err(Error::invalid(format!(
                "alpha target {} must lie in (0, 1)",
                self.alpha_target
            )));
        }
        if !(self.delta_alpha > 0.0 && self.delta_alpha < 1.0) {
            return Err(Error::invalid("delta_alpha must lie in (0, 1)"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < self.delta_alpha) {
            return Err(Error::invalid("epsilon must be in [0, delta_alpha)"));
        }
        if self.lambda0.is_nan() || self.lambda0 <= 0.0 {
            return Err(Error::invalid("lambda0 must be positive"));
        }
        if self.sample_count == 0 || self.lasso_max_iters == 0 {
            return Err(Error::invalid("sample count and iteration cap must be positive"));
        }
        Ok(())
    }

    pub fn lasso_options(&self) -> LassoOptions {
        LassoOptions {
            tol: self.lasso_tol,
            max_iters: self.lasso_max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneStep {
    pub step: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub support_size: usize,
    /// Mean squared error on this step's samples after the refit.
    pub sampled_mse: f64,
    /// Surviving filters as indices into the original dictionary.
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PruneTrace {
    pub steps: Vec<PruneStep>,
}

impl PruneTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,alpha,lambda,support_size,sampled_mse\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{:.6},{:e},{},{:e}",
                s.step, s.alpha, s.lambda, s.support_size, s.sampled_mse
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub dictionary: Dictionary,
    pub predictor: PredictorWeights,
    pub trace: PruneTrace,
}

/// A training pair: low-resolution input and its ground truth.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub lr: Tensor,
    pub hr: Tensor,
}

/// Shrinks `dict` to roughly `alpha_target * L` filters and adapts the
/// predictor to the survivors.
pub fn prune_dictionary(
    predictor: &PredictorWeights,
    dict: &Dictionary,
    dataset: &[TrainingPair],
    cfg: &PruneConfig,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    check_inputs(predictor, dict, dataset)?;
    let patches = dataset_patches(dataset, predictor.scale(), dict.k())?;

    let original_len = dict.len();
    let tolerance = cfg.epsilon * original_len as f64;
    let opts = cfg.lasso_options();
    let mut dict = dict.clone();
    let mut predictor = predictor.clone();
    let mut origin: Vec<usize> = (0..original_len).collect();
    let mut lambda = cfg.lambda0;
    let mut trace = PruneTrace::default();
    let mut alpha = 1.0;
    let mut step = 0;

    while alpha > cfg.alpha_target + 1e-12 {
        step += 1;
        alpha = (1.0 - step as f64 * cfg.delta_alpha).max(cfg.alpha_target);
        let target = alpha * original_len as f64;

        let seed = Rng::derive(cfg.seed, step as u64);
        let prob = sample_problem(&predictor, &dict, dataset, &patches, cfg.sample_count, seed)?;

        let keep = if (dict.len() as f64) <= target {
            (0..dict.len()).collect()
        } else {
            let found = search_lambda(&prob, target, tolerance, lambda, cfg.bisect_max, &opts)?;
            lambda = found.lambda;
            found.selection.support()
        };
        if keep.is_empty() {
            return Err(Error::Numerical(format!(
                "step {step}: selection removed every filter"
            )));
        }
        let gamma = fit_gamma(&prob, &keep)?;
        let mut full_gamma = vec![0.0; dict.len()];
        for (&i, &g) in keep.iter().zip(&gamma) {
            full_gamma[i] = g;
        }
        let sampled_mse = prob.mse(&full_gamma);

        predictor = scale_output_channels(&predictor, &full_gamma, &keep)?;
        dict = dict.select(&keep)?;
        origin = keep.iter().map(|&i| origin[i]).collect();
        log::info!(
            "prune step {step}: alpha {alpha:.3}, lambda {lambda:e}, kept {}, mse {sampled_mse:e}",
            keep.len()
        );
        trace.steps.push(PruneStep {
            step,
            alpha,
            lambda,
            support_size: keep.len(),
            sampled_mse,
            kept: origin.clone(),
        });
    }

    Ok(PruneOutcome {
        dictionary: dict,
        predictor,
        trace,
    })
}

fn dataset_patches(dataset: &[TrainingPair], scale: usize, k: usize) -> Result<Vec<Tensor>> {
    dataset
        .iter()
        .map(|pair| {
            pair.lr.require_single_channel("prune_dictionary")?;
            let b = extract_patches(&bilinear_upsample(&pair.lr, scale)?, k)?;
            if [b.h(), b.w()] != [pair.hr.h(), pair.hr.w()] {
                return Err(Error::shape(format!(
                    "ground truth {}x{} does not match {}x upscale of {}x{}",
                    pair.hr.h(),
                    pair.hr.w(),
                    scale,
                    pair.lr.h(),
                    pair.lr.w()
                )));
            }
            Ok(b)
        })
        .collect()
}

fn sample_problem(
    predictor: &PredictorWeights,
    dict: &Dictionary,
    dataset: &[TrainingPair],
    patches: &[Tensor],
    count: usize,
    seed: u64,
) -> Result<RegressionProblem> {
    let phis: Vec<Tensor> = dataset
        .iter()
        .map(|pair| predict_coefficients(&pair.lr, predictor))
        .collect::<Result<_>>()?;
    let sources: Vec<RegressionSource<'_>> = dataset
        .iter()
        .zip(&phis)
        .zip(patches)
        .map(|((pair, phi), b)| RegressionSource {
            hgt: &pair.hr,
            phi,
            patches: b,
        })
        .collect();
    build_regression_multi(&sources, dict, count, &mut Rng::new(seed))
}

fn check_inputs(predictor: &PredictorWeights, dict: &Dictionary, dataset: &[TrainingPair]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("pruning needs at least one training pair"));
    }
    if predictor.coeff_count() != dict.len() {
        return Err(Error::shape(format!(
            "predictor emits {} coefficients for {} filters",
            predictor.coeff_count(),
            dict.len()
        )));
    }
    Ok(())
}

/// Least-squares refit of every filter's coefficient scale without
/// removing any filter. Returns the rescaled predictor and the sampled
/// MSE after the refit.
pub fn refit_predictor(
    predictor: &PredictorWeights,
    dict: &Dictionary,
    dataset: &[TrainingPair],
    cfg: &PruneConfig,
) -> Result<(PredictorWeights, f64)> {
    cfg.validate()?;
    check_inputs(predictor, dict, dataset)?;
    let patches = dataset_patches(dataset, predictor.scale(), dict.k())?;
    let prob = sample_problem(predictor, dict, dataset, &patches, cfg.sample_count, cfg.seed)?;
    let keep: Vec<usize> = (0..dict.len()).collect();
    let gamma = fit_gamma(&prob, &keep)?;
    Ok((scale_output_channels(predictor, &gamma, &keep)?, prob.mse(&gamma)))
}
