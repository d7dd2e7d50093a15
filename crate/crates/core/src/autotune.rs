//! Block-configuration search: the resource-constrained feasible set and a
//! Gaussian-process Bayesian optimizer over it.

use std::fmt::Write as _;

use nalgebra::{linalg::Cholesky, DMatrix, DVector, Dyn};
use statrs::function::erf::erfc;

use crate::engine::{BlockConfig, HardwareSpec, VolumeDims};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `ceil(threads / warp_size)`.
pub fn warps_per_block(threads: usize, warp_size: usize) -> usize {
    threads.div_ceil(warp_size)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleSet {
    pub dims: VolumeDims,
    pub spec: HardwareSpec,
    /// Lexicographically sorted `(nx, ny, nz)`.
    pub configs: Vec<BlockConfig>,
    /// Warp bound `T` after clamping.
    pub warp_bound: f64,
    /// Largest admissible `nx * ny * nz`.
    pub thread_bound: usize,
}

impl FeasibleSet {
    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn contains(&self, cfg: &BlockConfig) -> bool {
        self.configs.binary_search(cfg).is_ok()
    }
}

/// Warp bound `T = min(T_r, T_sm)` with `T_r = HWC / (S P R)`, clamped
/// to at least one warp.
pub fn warp_bound(dims: VolumeDims, spec: &HardwareSpec) -> f64 {
    let t_r = dims.volume() as f64 / (spec.sm_count * spec.blocks_per_sm * spec.register_file) as f64;
    let t = t_r.min(spec.max_warps as f64);
    if t < 1.0 {
        log::warn!("warp bound {t:.4} below one warp for {dims:?}; clamping to 1");
        1.0
    } else {
        t
    }
}

/// Every in-bounds `(nx, ny, nz)` with `nx * ny * nz <= floor(WS * P * T)`.
pub fn feasible_configs(dims: VolumeDims, spec: &HardwareSpec) -> Result<FeasibleSet> {
    spec.validate()?;
    if dims.h == 0 || dims.w == 0 || dims.c == 0 {
        return Err(Error::invalid("volume dimensions must be positive"));
    }
    let t = warp_bound(dims, spec);
    let bound = ((spec.warp_size * spec.blocks_per_sm) as f64 * t).floor() as usize;
    let mut configs = Vec::new();
    for nx in 1..=dims.h.min(bound) {
        for ny in 1..=dims.w.min(bound / nx) {
            for nz in 1..=dims.c.min(bound / (nx * ny)) {
                configs.push(BlockConfig::new(nx, ny, nz));
            }
        }
    }
    if configs.is_empty() {
        return Err(Error::Infeasible(format!(
            "no block configuration satisfies the constraints for {dims:?}"
        )));
    }
    Ok(FeasibleSet {
        dims,
        spec: *spec,
        configs,
        warp_bound: t,
        thread_bound: bound,
    })
}

/// Squared-exponential kernel hyperparameters in standardized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpHyper {
    pub length_scales: [f64; 3],
    pub signal_var: f64,
    pub noise_var: f64,
}

pub const LENGTH_SCALE_GRID: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const SIGNAL_VAR_GRID: [f64; 3] = [0.5, 1.0, 2.0];
pub const NOISE_VAR_GRID: [f64; 2] = [1e-4, 1e-2];
const FACTOR_JITTER: f64 = 1e-8;

/// All grid points searched by [`gp_fit`], in search order.
pub fn hyper_grid() -> Vec<GpHyper> {
    let mut grid = Vec::new();
    for &l0 in &LENGTH_SCALE_GRID {
        for &l1 in &LENGTH_SCALE_GRID {
            for &l2 in &LENGTH_SCALE_GRID {
                for &signal_var in &SIGNAL_VAR_GRID {
                    for &noise_var in &NOISE_VAR_GRID {
                        grid.push(GpHyper {
                            length_scales: [l0, l1, l2],
                            signal_var,
                            noise_var,
                        });
                    }
                }
            }
        }
    }
    grid
}

/// `(log2 nx, log2 ny, log2 nz)`.
pub fn features(cfg: &BlockConfig) -> [f64; 3] {
    [
        (cfg.nx as f64).log2(),
        (cfg.ny as f64).log2(),
        (cfg.nz as f64).log2(),
    ]
}

fn kernel(a: &[f64; 3], b: &[f64; 3], hyper: &GpHyper) -> f64 {
    let d2: f64 = (0..3)
        .map(|d| {
            let z = (a[d] - b[d]) / hyper.length_scales[d];
            z * z
        })
        .sum();
    hyper.signal_var * (-0.5 * d2).exp()
}

#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<[f64; 3]>,
    observations: Vec<(BlockConfig, f64)>,
    y_mean: f64,
    y_std: f64,
    hyper: GpHyper,
    factor: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    log_marginal: f64,
}

impl GpModel {
    pub fn hyper(&self) -> GpHyper {
        self.hyper
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal
    }

    pub fn observations(&self) -> &[(BlockConfig, f64)] {
        &self.observations
    }

    pub fn standardize(&self, latency: f64) -> f64 {
        (latency - self.y_mean) / self.y_std
    }

    /// Scale that maps standardized values back to latency units.
    pub fn output_scale(&self) -> f64 {
        self.y_std
    }

    pub fn output_mean(&self) -> f64 {
        self.y_mean
    }
}

struct Standardized {
    inputs: Vec<[f64; 3]>,
    ys: DVector<f64>,
    mean: f64,
    std: f64,
}

fn standardize(observations: &[(BlockConfig, f64)]) -> Result<Standardized> {
    if observations.len() < 2 {
        return Err(Error::invalid("GP fit needs at least two observations"));
    }
    if observations.iter().any(|(_, y)| !y.is_finite()) {
        return Err(Error::invalid("GP observations must be finite"));
    }
    let n = observations.len() as f64;
    let mean = observations.iter().map(|(_, y)| y).sum::<f64>() / n;
    let var = observations.iter().map(|(_, y)| (y - mean).powi(2)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    Ok(Standardized {
        inputs: observations.iter().map(|(c, _)| features(c)).collect(),
        ys: DVector::from_iterator(
            observations.len(),
            observations.iter().map(|(_, y)| (y - mean) / std),
        ),
        mean,
        std,
    })
}

fn factorize(inputs: &[[f64; 3]], hyper: &GpHyper) -> Option<Cholesky<f64, Dyn>> {
    let n = inputs.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        kernel(&inputs[i], &inputs[j], hyper) + if i == j { hyper.noise_var } else { 0.0 }
    });
    k.clone().cholesky().or_else(|| {
        let jittered = k + DMatrix::identity(n, n) * FACTOR_JITTER;
        jittered.cholesky()
    })
}

fn fit_fixed(data: &Standardized, observations: &[(BlockConfig, f64)], hyper: GpHyper) -> Option<GpModel> {
    let factor = factorize(&data.inputs, &hyper)?;
    let alpha = factor.solve(&data.ys);
    let n = data.inputs.len() as f64;
    let log_det: f64 = factor.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    let log_marginal =
        -0.5 * data.ys.dot(&alpha) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    if !log_marginal.is_finite() {
        return None;
    }
    Some(GpModel {
        inputs: data.inputs.clone(),
        observations: observations.to_vec(),
        y_mean: data.mean,
        y_std: data.std,
        hyper,
        factor,
        alpha,
        log_marginal,
    })
}

/// Fits a GP with the given hyperparameters.
pub fn gp_fit_with(observations: &[(BlockConfig, f64)], hyper: GpHyper) -> Result<GpModel> {
    let data = standardize(observations)?;
    fit_fixed(&data, observations, hyper)
        .ok_or_else(|| Error::Numerical("kernel matrix is singular after jitter".into()))
}

/// Fits a GP, choosing hyperparameters that maximize the log marginal
/// likelihood over [`hyper_grid`]. Ties keep the earliest grid point.
pub fn gp_fit(observations: &[(BlockConfig, f64)]) -> Result<GpModel> {
    let data = standardize(observations)?;
    let mut best: Option<GpModel> = None;
    for hyper in hyper_grid() {
        if let Some(model) = fit_fixed(&data, observations, hyper) {
            if best
                .as_ref()
                .is_none_or(|b| model.log_marginal > b.log_marginal)
            {
                best = Some(model);
            }
        }
    }
    best.ok_or_else(|| Error::Numerical("kernel matrix is singular after jitter".into()))
}

/// Posterior mean and variance of the latent latency at `cfg`, in latency
/// units.
pub fn gp_predict(model: &GpModel, cfg: &BlockConfig) -> (f64, f64) {
    let x = features(cfg);
    let k_star = DVector::from_iterator(
        model.inputs.len(),
        model.inputs.iter().map(|xi| kernel(xi, &x, &model.hyper)),
    );
    let mean = k_star.dot(&model.alpha);
    let v = model
        .factor
        .l_dirty()
        .solve_lower_triangular(&k_star)
        .unwrap_or_else(|| DVector::zeros(model.inputs.len()));
    let var = (model.hyper.signal_var - v.dot(&v)).max(0.0);
    (
        model.y_mean + model.y_std * mean,
        model.y_std * model.y_std * var,
    )
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected improvement below `best` for a minimization problem.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    let gain = best - mean;
    if sigma == 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    (gain * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneRecord {
    pub config: BlockConfig,
    pub latency: f64,
    /// Expected improvement that selected this config; `None` for the
    /// random initial design.
    pub acquisition: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    /// Lowest latency; ties go to the lexicographically smallest config.
    pub best_config: BlockConfig,
    pub best_latency: f64,
    pub history: Vec<TuneRecord>,
    pub budget_used: usize,
}

impl TuneResult {
    fn from_history(history: Vec<TuneRecord>) -> Self {
        let best = history
            .iter()
            .fold(None::<&TuneRecord>, |b, r| match b {
                Some(b) if (b.latency, b.config) <= (r.latency, r.config) => Some(b),
                _ => Some(r),
            })
            .expect("non-empty history");
        TuneResult {
            best_config: best.config,
            best_latency: best.latency,
            budget_used: history.len(),
            history,
        }
    }

    /// Tuning log: `iteration,nx,ny,nz,latency,acquisition,best_so_far`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,nx,ny,nz,latency,acquisition,best_so_far\n");
        let mut best = f64::INFINITY;
        for (i, r) in self.history.iter().enumerate() {
            best = best.min(r.latency);
            let acq = r.acquisition.map(|a| format!("{a:e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{acq},{}",
                r.config.nx, r.config.ny, r.config.nz, r.latency, best
            );
        }
        out
    }
}

/// Bayesian optimization over an explicit candidate list.
///
/// `init` distinct candidates are drawn uniformly at random and evaluated;
/// afterwards each iteration refits the GP on every observation and
/// evaluates the unevaluated candidate with the largest expected
/// improvement (ties go to the lexicographically smallest config). Stops
/// after `budget` evaluations or when the candidates run out.
pub fn tune_over<F>(
    candidates: &[BlockConfig],
    mut oracle: F,
    budget: usize,
    init: usize,
    seed: u64,
) -> Result<TuneResult>
where
    F: FnMut(BlockConfig) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::Infeasible("no candidate configurations".into()));
    }
    if init == 0 || budget <= init {
        return Err(Error::invalid(format!(
            "budget ({budget}) must exceed the initial sample count ({init} >= 1)"
        )));
    }
    let mut candidates = candidates.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    let mut evaluated = vec![false; candidates.len()];
    let mut history: Vec<TuneRecord> = Vec::with_capacity(budget);

    let mut rng = Rng::new(seed);
    for idx in rng.sample_indices(candidates.len(), init.min(candidates.len())) {
        let latency = oracle(candidates[idx])?;
        evaluated[idx] = true;
        history.push(TuneRecord {
            config: candidates[idx],
            latency,
            acquisition: None,
        });
    }

    while history.len() < budget && history.len() < candidates.len() {
        let obs: Vec<(BlockConfig, f64)> = history.iter().map(|r| (r.config, r.latency)).collect();
        let model = gp_fit(&obs)?;
        let best = obs.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
        let mut pick: Option<(usize, f64)> = None;
        for (i, cfg) in candidates.iter().enumerate() {
            if evaluated[i] {
                continue;
            }
            let (mean, var) = gp_predict(&model, cfg);
            let ei = expected_improvement(mean, var, best);
            if pick.is_none_or(|(_, b)| ei > b) {
                pick = Some((i, ei));
            }
        }
        let (idx, ei) = pick.expect("an unevaluated candidate remains");
        let latency = oracle(candidates[idx])?;
        evaluated[idx] = true;
        history.push(TuneRecord {
            config: candidates[idx],
            latency,
            acquisition: Some(ei),
        });
    }
    Ok(TuneResult::from_history(history))
}

/// Bayesian optimization over the feasible set of `dims` under `spec`.
pub fn tune<F>(
    dims: VolumeDims,
    spec: &HardwareSpec,
    oracle: F,
    budget: usize,
    init: usize,
    seed: u64,
) -> Result<TuneResult>
where
    F: FnMut(BlockConfig) -> Result<f64>,
{
    let set = feasible_configs(dims, spec)?;
    tune_over(&set.configs, oracle, budget, init, seed)
}

/// Evaluates every feasible configuration once.
pub fn exhaustive_tune<F>(dims: VolumeDims, spec: &HardwareSpec, mut oracle: F) -> Result<TuneResult>
where
    F: FnMut(BlockConfig) -> Result<f64>,
{
    let set = feasible_configs(dims, spec)?;
    let history = set
        .configs
        .iter()
        .map(|&config| {
            Ok(TuneRecord {
                config,
                latency: oracle(config)?,
                acquisition: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TuneResult::from_history(history))
}
