//! LASSO selection, the lambda search around it, and the least-squares
//! refit of the surviving filters.

use nalgebra::{DMatrix, DVector};

use super::regression::RegressionProblem;
use super::SelectionVector;
use crate::error::{Error, Result};

/// Upper bound on lambda doublings before the search gives up.
pub const MAX_DOUBLINGS: usize = 64;

/// Jitter added to the normalized Gram diagonal in [`fit_gamma`].
pub const GAMMA_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Stop once the largest coefficient change, relative to the largest
    /// coefficient, drops below this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            tol: 1e-6,
            max_iters: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub selection: SelectionVector,
    pub sweeps: usize,
    pub converged: bool,
}

#[inline]
fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Minimizes `|t - A beta|^2 / M + lambda * |beta|_1` by cyclic coordinate
/// descent starting from zero.
pub fn lasso(prob: &RegressionProblem, lambda: f64, opts: &LassoOptions) -> Result<SelectionVector> {
    Ok(lasso_from(prob, lambda, opts, None)?.selection)
}

/// [`lasso`] with an optional warm start.
pub fn lasso_from(
    prob: &RegressionProblem,
    lambda: f64,
    opts: &LassoOptions,
    init: Option<&[f64]>,
) -> Result<LassoFit> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let l = prob.cols();
    let mut beta = match init {
        Some(b) if b.len() == l => b.to_vec(),
        Some(b) => {
            return Err(Error::shape(format!("warm start has {} entries, L = {l}", b.len())))
        }
        None => vec![0.0; l],
    };
    let dead: Vec<usize> = (0..l).filter(|&i| prob.gram(i, i) == 0.0).collect();
    if !dead.is_empty() {
        log::warn!("lasso: dropping zero-norm columns {dead:?}");
        for &i in &dead {
            beta[i] = 0.0;
        }
    }

    // g = (A^T A / M) beta, maintained incrementally
    let mut g = vec![0.0; l];
    for (i, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            for (gk, &v) in g.iter_mut().zip(prob.gram_row(i)) {
                *gk += v * b;
            }
        }
    }

    let half = lambda / 2.0;
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < opts.max_iters {
        sweeps += 1;
        let mut max_change = 0.0f64;
        for i in 0..l {
            let gii = prob.gram(i, i);
            if gii == 0.0 {
                continue;
            }
            let rho = prob.corr(i) - (g[i] - gii * beta[i]);
            let next = soft_threshold(rho, half) / gii;
            let delta = next - beta[i];
            if delta != 0.0 {
                for (gk, &v) in g.iter_mut().zip(prob.gram_row(i)) {
                    *gk += v * delta;
                }
                beta[i] = next;
                max_change = max_change.max(delta.abs());
            }
        }
        let scale = beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        if max_change == 0.0 || max_change < opts.tol * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("lasso: no convergence after {sweeps} sweeps (lambda = {lambda:e})");
    }
    Ok(LassoFit {
        selection: SelectionVector::new(beta),
        sweeps,
        converged,
    })
}

/// Outcome of [`search_lambda`]. `history` lists every solve as
/// `(lambda, support size)` in the order performed.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSearch {
    pub selection: SelectionVector,
    pub lambda: f64,
    pub history: Vec<(f64, usize)>,
}

/// Finds a lambda whose LASSO support is within `tolerance` of
/// `target_count`.
///
/// Lambda doubles from `lambda_start` until the support is at most the
/// target, then the bracket `[lambda / 2, lambda]` is bisected until
/// `|target - support| <= tolerance` or `bisect_max` solves were spent. In
/// the latter case the solve whose support is largest without exceeding the
/// target is returned.
pub fn search_lambda(
    prob: &RegressionProblem,
    target_count: f64,
    tolerance: f64,
    lambda_start: f64,
    bisect_max: usize,
    opts: &LassoOptions,
) -> Result<LambdaSearch> {
    let l = prob.cols();
    if !(target_count > 0.0 && target_count < l as f64) {
        return Err(Error::invalid(format!(
            "target support {target_count} must lie in (0, {l})"
        )));
    }
    if lambda_start.is_nan() || lambda_start <= 0.0 {
        return Err(Error::invalid("lambda start must be positive"));
    }
    if (0..l).all(|i| prob.gram(i, i) == 0.0) {
        return Err(Error::Numerical(
            "target support unreachable: every regression column is zero".into(),
        ));
    }

    let mut history = Vec::new();
    let mut lambda = lambda_start;
    let mut fit = lasso_from(prob, lambda, opts, None)?;
    history.push((lambda, fit.selection.support_size()));
    let mut doublings = 1;
    while fit.selection.support_size() as f64 > target_count {
        if doublings == MAX_DOUBLINGS {
            return Err(Error::Numerical(format!(
                "support still {} after {MAX_DOUBLINGS} lambda doublings",
                fit.selection.support_size()
            )));
        }
        lambda *= 2.0;
        fit = lasso_from(prob, lambda, opts, Some(&fit.selection.beta))?;
        history.push((lambda, fit.selection.support_size()));
        doublings += 1;
    }

    let off_target = |n: usize| (target_count - n as f64).abs() > tolerance;
    let mut best = (fit.selection.clone(), lambda);
    let (mut lo, mut hi) = (0.5 * lambda, lambda);
    let mut current = fit.selection;
    let mut steps = 0;
    while off_target(current.support_size()) {
        if steps == bisect_max {
            log::debug!("lambda bisection hit its cap of {bisect_max}");
            return Ok(LambdaSearch {
                selection: best.0,
                lambda: best.1,
                history,
            });
        }
        steps += 1;
        lambda = 0.5 * (lo + hi);
        current = lasso_from(prob, lambda, opts, Some(&current.beta))?.selection;
        let n = current.support_size();
        history.push((lambda, n));
        if (n as f64) < target_count {
            // too sparse: shrink lambda
            hi = lambda;
        } else if (n as f64) > target_count {
            lo = lambda;
        }
        if n as f64 <= target_count && n > best.0.support_size() {
            best = (current.clone(), lambda);
        }
    }
    Ok(LambdaSearch {
        selection: current,
        lambda,
        history,
    })
}

/// Ordinary least squares over the kept columns via jittered normal
/// equations. Returns one coefficient per entry of `keep`, in that order.
pub fn fit_gamma(prob: &RegressionProblem, keep: &[usize]) -> Result<Vec<f64>> {
    if keep.is_empty() {
        return Err(Error::invalid("fit_gamma needs at least one column"));
    }
    if let Some(&bad) = keep.iter().find(|&&i| i >= prob.cols()) {
        return Err(Error::invalid(format!("column {bad} out of range")));
    }
    let n = keep.len();
    let gram = DMatrix::from_fn(n, n, |r, c| {
        prob.gram(keep[r], keep[c]) + if r == c { GAMMA_JITTER } else { 0.0 }
    });
    let rhs = DVector::from_fn(n, |r, _| prob.corr(keep[r]));
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Numerical("normal equations are singular; sampling is degenerate".into())
    })?;
    let gamma = chol.solve(&rhs);
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite least-squares solution".into()));
    }
    Ok(gamma.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_problem(seed: u64, m: usize, l: usize) -> RegressionProblem {
        let mut rng = Rng::new(seed);
        let a: Vec<f64> = (0..m * l).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let t: Vec<f64> = (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect();
        RegressionProblem::from_columns(m, l, a, t).unwrap()
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }

    #[test]
    fn kill_condition() {
        let prob = random_problem(1, 64, 6);
        let max_corr = (0..6).map(|i| prob.corr(i).abs()).fold(0.0, f64::max);
        let beta = lasso(&prob, 2.0 * max_corr, &LassoOptions::default()).unwrap();
        assert_eq!(beta.support_size(), 0);
    }

    #[test]
    fn orthogonal_design_closed_form() {
        // columns are disjoint indicator blocks, hence orthogonal
        let (m, l) = (12, 3);
        let mut a = vec![0.0; m * l];
        for i in 0..l {
            for r in 0..4 {
                a[i * m + i * 4 + r] = 1.0 + r as f64 * 0.5;
            }
        }
        let mut rng = Rng::new(2);
        let t: Vec<f64> = (0..m).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let prob = RegressionProblem::from_columns(m, l, a, t).unwrap();
        let lambda = 0.05;
        let beta = lasso(&prob, lambda, &LassoOptions::default()).unwrap();
        for i in 0..l {
            let col = prob.column(i);
            let ata: f64 = col.iter().map(|v| v * v).sum::<f64>() / m as f64;
            let aty: f64 = col.iter().zip(prob.target()).map(|(x, y)| x * y).sum::<f64>() / m as f64;
            let expected = soft_threshold(aty, lambda / 2.0) / ata;
            assert!((beta.beta[i] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_column_is_dropped() {
        let mut rng = Rng::new(3);
        let (m, l) = (32, 4);
        let mut a: Vec<f64> = (0..m * l).map(|_| rng.uniform(-1.0, 1.0)).collect();
        a[2 * m..3 * m].fill(0.0);
        let t: Vec<f64> = (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let prob = RegressionProblem::from_columns(m, l, a, t).unwrap();
        let beta = lasso(&prob, 0.0, &LassoOptions::default()).unwrap();
        assert_eq!(beta.beta[2], 0.0);
        assert_eq!(beta.support_size(), 3);
    }

    #[test]
    fn gamma_single_column_closed_form() {
        let prob = random_problem(4, 50, 5);
        let g = fit_gamma(&prob, &[3]).unwrap();
        let col = prob.column(3);
        let expected = col.iter().zip(prob.target()).map(|(x, y)| x * y).sum::<f64>()
            / col.iter().map(|v| v * v).sum::<f64>();
        assert!((g[0] - expected).abs() < 1e-6 * expected.abs().max(1.0));
    }

    #[test]
    fn gamma_exact_fit() {
        let base = random_problem(5, 40, 6);
        let a: Vec<f64> = (0..6).flat_map(|i| base.column(i).to_vec()).collect();
        let t = base.predict(&[1.0; 6]);
        let prob = RegressionProblem::from_columns(40, 6, a, t).unwrap();
        let g = fit_gamma(&prob, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-5), "{g:?}");
    }

    #[test]
    fn gamma_is_locally_optimal() {
        let prob = random_problem(6, 80, 5);
        let keep = [0, 2, 4];
        let g = fit_gamma(&prob, &keep).unwrap();
        let residual = |coef: &[f64]| {
            let mut full = vec![0.0; 5];
            for (&i, &c) in keep.iter().zip(coef) {
                full[i] = c;
            }
            prob.mse(&full)
        };
        let best = residual(&g);
        for k in 0..keep.len() {
            for step in [-1e-3, 1e-3] {
                let mut p = g.clone();
                p[k] += step;
                assert!(residual(&p) >= best);
            }
        }
    }

    #[test]
    fn gamma_rejects_duplicate_singular_columns() {
        let mut rng = Rng::new(7);
        let col: Vec<f64> = (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let a = [col.clone(), vec![0.0; 10]].concat();
        let t = col.clone();
        let prob = RegressionProblem::from_columns(10, 2, a, t).unwrap();
        // the zero column makes A^T A singular; jitter alone rescues it
        assert!(fit_gamma(&prob, &[0, 1]).is_ok());
        assert!(fit_gamma(&prob, &[]).is_err());
    }

    #[test]
    fn search_returns_immediately_when_start_satisfies() {
        let mut rng = Rng::new(8);
        let (m, l) = (64, 10);
        let mut a: Vec<f64> = (0..m * l).map(|_| rng.uniform(-1.0, 1.0)).collect();
        a[4 * m..5 * m].fill(0.0);
        let t: Vec<f64> = (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let prob = RegressionProblem::from_columns(m, l, a, t).unwrap();
        let out = search_lambda(&prob, 9.0, 0.2, 1e-9, 32, &LassoOptions::default()).unwrap();
        assert_eq!(out.lambda, 1e-9);
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.selection.support_size(), 9);
    }

    #[test]
    fn search_rejects_bad_targets() {
        let prob = random_problem(9, 20, 4);
        let o = LassoOptions::default();
        assert!(search_lambda(&prob, 0.0, 0.1, 1e-4, 8, &o).is_err());
        assert!(search_lambda(&prob, 4.0, 0.1, 1e-4, 8, &o).is_err());
        let zero = RegressionProblem::from_columns(4, 2, vec![0.0; 8], vec![1.0; 4]).unwrap();
        assert!(matches!(
            search_lambda(&zero, 1.0, 0.1, 1e-4, 8, &o),
            Err(Error::Numerical(_))
        ));
    }
}
