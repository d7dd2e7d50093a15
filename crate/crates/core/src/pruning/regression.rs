use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One image's worth of inputs to the selection regression.
#[derive(Debug, Clone, Copy)]
pub struct RegressionSource<'a> {
    /// Ground-truth high-resolution image (`c = 1`).
    pub hgt: &'a Tensor,
    /// Coefficients over the current dictionary (`c = L`).
    pub phi: &'a Tensor,
    /// Patch matrix of the upsampled input (`c = k^2`).
    pub patches: &'a Tensor,
}

/// Sampled least-squares problem `t ~ A beta`.
///
/// Column `i` of `A` holds filter `i`'s contribution to each sampled output
/// pixel, so `A * 1` is the full pipeline output and `A * beta` the output
/// with filter `i` weighted by `beta[i]`. The normalized Gram matrix
/// `A^T A / M` and correlations `A^T t / M` are cached for the solvers.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    rows: usize,
    cols: usize,
    /// Column-major `M x L`.
    a: Vec<f64>,
    t: Vec<f64>,
    /// `(source index, pixel index)` of each row.
    pixel_ids: Vec<(usize, usize)>,
    gram: Vec<f64>,
    corr: Vec<f64>,
}

impl RegressionProblem {
    /// Builds a problem from a column-major design matrix.
    pub fn from_columns(rows: usize, cols: usize, a: Vec<f64>, t: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("regression needs at least one row and column"));
        }
        if a.len() != rows * cols || t.len() != rows {
            return Err(Error::shape(format!(
                "design {}, target {} for {rows}x{cols}",
                a.len(),
                t.len()
            )));
        }
        if a.iter().chain(&t).any(|v| !v.is_finite()) {
            return Err(Error::invalid("regression data must be finite"));
        }
        let pixel_ids = (0..rows).map(|r| (0, r)).collect();
        Ok(RegressionProblem::assemble(rows, cols, a, t, pixel_ids))
    }

    fn assemble(
        rows: usize,
        cols: usize,
        a: Vec<f64>,
        t: Vec<f64>,
        pixel_ids: Vec<(usize, usize)>,
    ) -> Self {
        if rows < cols {
            log::warn!("regression has fewer samples ({rows}) than columns ({cols})");
        }
        let inv_m = 1.0 / rows as f64;
        let mut gram = vec![0.0; cols * cols];
        for i in 0..cols {
            let ci = &a[i * rows..(i + 1) * rows];
            for j in i..cols {
                let cj = &a[j * rows..(j + 1) * rows];
                let v = ci.iter().zip(cj).map(|(x, y)| x * y).sum::<f64>() * inv_m;
                gram[i * cols + j] = v;
                gram[j * cols + i] = v;
            }
        }
        let corr = (0..cols)
            .map(|i| {
                a[i * rows..(i + 1) * rows]
                    .iter()
                    .zip(&t)
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    * inv_m
            })
            .collect();
        RegressionProblem {
            rows,
            cols,
            a,
            t,
            pixel_ids,
            gram,
            corr,
        }
    }

    /// Sample count `M`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Filter count `L`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.a[i * self.rows..(i + 1) * self.rows]
    }

    pub fn target(&self) -> &[f64] {
        &self.t
    }

    pub fn pixel_ids(&self) -> &[(usize, usize)] {
        &self.pixel_ids
    }

    /// `(A^T A / M)[i][j]`.
    pub fn gram(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.cols + j]
    }

    pub(crate) fn gram_row(&self, i: usize) -> &[f64] {
        &self.gram[i * self.cols..(i + 1) * self.cols]
    }

    /// `(A^T t / M)[i]`.
    pub fn corr(&self, i: usize) -> f64 {
        self.corr[i]
    }

    /// `A * beta`.
    pub fn predict(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (i, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (o, &v) in out.iter_mut().zip(self.column(i)) {
                    *o += b * v;
                }
            }
        }
        out
    }

    /// Mean squared residual `|t - A beta|^2 / M`.
    pub fn mse(&self, beta: &[f64]) -> f64 {
        let pred = self.predict(beta);
        pred.iter()
            .zip(&self.t)
            .map(|(p, t)| (t - p) * (t - p))
            .sum::<f64>()
            / self.rows as f64
    }
}

/// Samples `count` pixels without replacement and builds the regression.
pub fn build_regression(
    hgt: &Tensor,
    phi: &Tensor,
    dict: &Dictionary,
    patches: &Tensor,
    count: usize,
    rng: &mut Rng,
) -> Result<RegressionProblem> {
    build_regression_multi(&[RegressionSource { hgt, phi, patches }], dict, count, rng)
}

/// Like [`build_regression`], sampling uniformly from the pooled pixels of
/// several images.
pub fn build_regression_multi(
    sources: &[RegressionSource<'_>],
    dict: &Dictionary,
    count: usize,
    rng: &mut Rng,
) -> Result<RegressionProblem> {
    if sources.is_empty() {
        return Err(Error::invalid("no regression sources"));
    }
    let taps = dict.taps();
    let l = dict.len();
    let mut offsets = Vec::with_capacity(sources.len() + 1);
    offsets.push(0usize);
    for (s, src) in sources.iter().enumerate() {
        src.hgt.require_single_channel("build_regression")?;
        let (h, w) = (src.hgt.h(), src.hgt.w());
        if src.phi.dims() != [1, l, h, w] {
            return Err(Error::shape(format!(
                "source {s}: coefficients {:?}, expected [1, {l}, {h}, {w}]",
                src.phi.dims()
            )));
        }
        if src.patches.dims() != [1, taps, h, w] {
            return Err(Error::shape(format!(
                "source {s}: patches {:?}, expected [1, {taps}, {h}, {w}]",
                src.patches.dims()
            )));
        }
        offsets.push(offsets[s] + h * w);
    }
    let total = *offsets.last().unwrap();
    if count > total {
        return Err(Error::invalid(format!(
            "cannot sample {count} pixels from {total}"
        )));
    }
    if count == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }

    let picks = rng.sample_indices(total, count);
    let mut a = vec![0.0; count * l];
    let mut t = Vec::with_capacity(count);
    let mut pixel_ids = Vec::with_capacity(count);
    for (m, &flat) in picks.iter().enumerate() {
        let s = offsets.partition_point(|&o| o <= flat) - 1;
        let p = flat - offsets[s];
        let src = &sources[s];
        let hw = src.hgt.plane_len();
        let patch: Vec<f64> = (0..taps)
            .map(|j| src.patches.data()[j * hw + p] as f64)
            .collect();
        for i in 0..l {
            let response: f64 = dict
                .row(i)
                .iter()
                .zip(&patch)
                .map(|(&d, &b)| d as f64 * b)
                .sum();
            a[i * count + m] = src.phi.data()[i * hw + p] as f64 * response;
        }
        t.push(src.hgt.data()[p] as f64);
        pixel_ids.push((s, p));
    }
    Ok(RegressionProblem::assemble(count, l, a, t, pixel_ids))
}
