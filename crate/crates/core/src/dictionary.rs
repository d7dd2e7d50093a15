//! Fixed filter dictionary (Gaussian and difference-of-Gaussian taps),
//! per-pixel filter assembly and the reference filtering loop.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ByteReader, Tensor};

pub const DICT_MAGIC: &[u8; 8] = b"SRDICT01";

/// Pixels processed per block in [`assemble_filters`]; keeps the working set
/// of one block of `phi` and `F` in cache.
const ASSEMBLE_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Gaussian,
    Dog,
    /// Arbitrary taps supplied by the caller (delta filters, test fixtures).
    Custom,
}

impl FilterKind {
    fn code(self) -> u8 {
        match self {
            FilterKind::Gaussian => 0,
            FilterKind::Dog => 1,
            FilterKind::Custom => 2,
        }
    }

    fn from_code(code: u8, offset: usize) -> Result<Self> {
        match code {
            0 => Ok(FilterKind::Gaussian),
            1 => Ok(FilterKind::Dog),
            2 => Ok(FilterKind::Custom),
            other => Err(Error::format(offset, format!("unknown filter kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterDescriptor {
    pub kind: FilterKind,
    pub sigma_x: f32,
    pub sigma_y: f32,
    pub theta: f32,
    /// Outer Gaussian width for DoG filters, zero otherwise.
    pub sigma2: f32,
}

impl FilterDescriptor {
    pub fn custom() -> Self {
        FilterDescriptor {
            kind: FilterKind::Custom,
            sigma_x: 0.0,
            sigma_y: 0.0,
            theta: 0.0,
            sigma2: 0.0,
        }
    }
}

/// `L` filters of `k x k` taps stored as `L` row-major rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    k: usize,
    rows: Vec<f32>,
    descriptors: Vec<FilterDescriptor>,
}

/// Parameter grid for [`build_dictionary`].
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryParams {
    pub k: usize,
    pub sigmas: Vec<f64>,
    pub thetas: Vec<f64>,
    pub ratios: Vec<f64>,
    pub dog_pairs: Vec<(f64, f64)>,
}

impl Default for DictionaryParams {
    fn default() -> Self {
        DictionaryParams {
            k: 5,
            sigmas: vec![0.35, 0.7, 1.05, 1.4],
            thetas: vec![0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0],
            ratios: vec![1.0, 2.0, 3.0],
            dog_pairs: vec![
                (0.4, 0.8),
                (0.6, 1.2),
                (0.8, 1.6),
                (1.0, 2.0),
                (1.2, 2.4),
                (1.5, 3.0),
            ],
        }
    }
}

fn gaussian_2d(k: usize, sigma_x: f64, sigma_y: f64, theta: f64) -> Vec<f64> {
    let r = (k / 2) as f64;
    let (sin, cos) = theta.sin_cos();
    let mut taps = Vec::with_capacity(k * k);
    for row in 0..k {
        for col in 0..k {
            let dy = row as f64 - r;
            let dx = col as f64 - r;
            let e = if sigma_x == sigma_y {
                (dx * dx + dy * dy) / (2.0 * sigma_x * sigma_x)
            } else {
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                u * u / (2.0 * sigma_x * sigma_x) + v * v / (2.0 * sigma_y * sigma_y)
            };
            taps.push((-e).exp());
        }
    }
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / sum).collect()
}

/// Builds one anisotropic Gaussian per `(sigma, ratio, theta)` and one DoG
/// per pair. Isotropic (`ratio == 1`) Gaussians are emitted once per sigma
/// since rotation does not change them, so `L` depends on the grid.
pub fn build_dictionary(params: &DictionaryParams) -> Result<Dictionary> {
    let k = params.k;
    if k.is_multiple_of(2) {
        return Err(Error::invalid(format!("filter width must be odd, got {k}")));
    }
    if params.sigmas.is_empty() || params.thetas.is_empty() || params.ratios.is_empty() {
        return Err(Error::invalid("sigma, theta and ratio lists must be non-empty"));
    }
    if params.sigmas.iter().chain(&params.ratios).any(|&v| v.is_nan() || v <= 0.0) {
        return Err(Error::invalid("sigmas and ratios must be positive"));
    }
    for &(s1, s2) in &params.dog_pairs {
        if !(s1 > 0.0 && s1 < s2) {
            return Err(Error::invalid(format!(
                "DoG pair ({s1}, {s2}) needs 0 < sigma1 < sigma2"
            )));
        }
    }

    let mut rows = Vec::new();
    let mut descriptors = Vec::new();
    for &sigma in &params.sigmas {
        for &ratio in &params.ratios {
            for (ti, &theta) in params.thetas.iter().enumerate() {
                if ratio == 1.0 && ti > 0 {
                    continue;
                }
                let (sx, sy) = (sigma * ratio, sigma / ratio);
                let theta = if ratio == 1.0 { 0.0 } else { theta };
                rows.extend(gaussian_2d(k, sx, sy, theta).into_iter().map(|v| v as f32));
                descriptors.push(FilterDescriptor {
                    kind: FilterKind::Gaussian,
                    sigma_x: sx as f32,
                    sigma_y: sy as f32,
                    theta: theta as f32,
                    sigma2: 0.0,
                });
            }
        }
    }
    for &(s1, s2) in &params.dog_pairs {
        let inner = gaussian_2d(k, s1, s1, 0.0);
        let outer = gaussian_2d(k, s2, s2, 0.0);
        rows.extend(inner.iter().zip(&outer).map(|(a, b)| (a - b) as f32));
        descriptors.push(FilterDescriptor {
            kind: FilterKind::Dog,
            sigma_x: s1 as f32,
            sigma_y: s1 as f32,
            theta: 0.0,
            sigma2: s2 as f32,
        });
    }
    Dictionary::new(k, rows, descriptors)
}

impl Dictionary {
    pub fn new(k: usize, rows: Vec<f32>, descriptors: Vec<FilterDescriptor>) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::invalid(format!("filter width must be odd, got {k}")));
        }
        if descriptors.is_empty() {
            return Err(Error::invalid("dictionary needs at least one filter"));
        }
        if rows.len() != descriptors.len() * k * k {
            return Err(Error::shape(format!(
                "{} taps for {} filters of {k}x{k}",
                rows.len(),
                descriptors.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dictionary taps must be finite"));
        }
        Ok(Dictionary {
            k,
            rows,
            descriptors,
        })
    }

    /// Dictionary of caller-supplied rows, all tagged [`FilterKind::Custom`].
    pub fn custom(k: usize, rows: Vec<f32>) -> Result<Self> {
        let count = if k == 0 { 0 } else { rows.len() / (k * k) };
        Dictionary::new(k, rows, vec![FilterDescriptor::custom(); count])
    }

    /// Single-filter dictionary whose only row passes the center tap.
    pub fn delta(k: usize) -> Result<Self> {
        let mut row = vec![0.0; k * k];
        row[k * k / 2] = 1.0;
        Dictionary::custom(k, row)
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn taps(&self) -> usize {
        self.k * self.k
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let t = self.taps();
        &self.rows[i * t..(i + 1) * t]
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn descriptors(&self) -> &[FilterDescriptor] {
        &self.descriptors
    }

    /// Keeps the listed filters in the given order.
    pub fn select(&self, keep: &[usize]) -> Result<Dictionary> {
        if keep.is_empty() {
            return Err(Error::invalid("cannot select an empty dictionary"));
        }
        if let Some(&bad) = keep.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "filter index {bad} out of range for L={}",
                self.len()
            )));
        }
        let rows = keep.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        let descriptors = keep.iter().map(|&i| self.descriptors[i]).collect();
        Dictionary::new(self.k, rows, descriptors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.rows.len() + 17 * self.len());
        out.extend_from_slice(DICT_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for d in &self.descriptors {
            out.push(d.kind.code());
            for v in [d.sigma_x, d.sigma_y, d.theta, d.sigma2] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(DICT_MAGIC)?;
        let l = r.u32()? as usize;
        let k = r.u32()? as usize;
        let rows = r.f32_vec(l * k * k)?;
        let mut descriptors = Vec::with_capacity(l);
        for _ in 0..l {
            let at = r.pos();
            let kind = FilterKind::from_code(r.u8()?, at)?;
            descriptors.push(FilterDescriptor {
                kind,
                sigma_x: r.f32()?,
                sigma_y: r.f32()?,
                theta: r.f32()?,
                sigma2: r.f32()?,
            });
        }
        r.finish()?;
        Dictionary::new(k, rows, descriptors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Dictionary::from_bytes(&fs::read(path)?)
    }
}

/// `F = phi * D`: per pixel, `F[p, j] = sum_i phi[p, i] * D[i, j]` with the
/// sum taken in ascending `i`.
pub fn assemble_filters(phi: &Tensor, dict: &Dictionary) -> Result<Tensor> {
    phi.require_single_batch("assemble_filters")?;
    if phi.c() != dict.len() {
        return Err(Error::shape(format!(
            "coefficients have {} channels, dictionary has {} filters",
            phi.c(),
            dict.len()
        )));
    }
    let taps = dict.taps();
    let hw = phi.plane_len();
    let mut out = Tensor::zeros(1, taps, phi.h(), phi.w());
    let planes: Vec<&[f32]> = (0..dict.len()).map(|i| phi.plane(0, i)).collect();
    let data = out.data_mut();
    let mut start = 0;
    while start < hw {
        let end = (start + ASSEMBLE_CHUNK).min(hw);
        for j in 0..taps {
            let dst = &mut data[j * hw + start..j * hw + end];
            for (i, plane) in planes.iter().enumerate() {
                let d = dict.rows[i * taps + j];
                for (o, &c) in dst.iter_mut().zip(&plane[start..end]) {
                    *o += c * d;
                }
            }
        }
        start = end;
    }
    Ok(out)
}

/// Sequential reference filter: `y[p] = sum_j F[p, j] * B[p, j]` accumulated
/// in ascending `j` from zero.
pub fn apply_filters(f: &Tensor, b: &Tensor) -> Result<Tensor> {
    f.require_single_batch("apply_filters")?;
    if !f.same_dims(b) {
        return Err(Error::shape(format!(
            "filters {:?} and patches {:?} differ",
            f.dims(),
            b.dims()
        )));
    }
    let mut out = Tensor::zeros(1, 1, f.h(), f.w());
    let y = out.data_mut();
    for j in 0..f.c() {
        for ((acc, &fv), &bv) in y.iter_mut().zip(f.plane(0, j)).zip(b.plane(0, j)) {
            *acc += fv * bv;
        }
    }
    Ok(out)
}

/// Element counts of the three operands of the filtering stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootprintReport {
    pub phi_elems: u64,
    pub patch_elems: u64,
    pub dict_elems: u64,
    pub dominance_ratio: f64,
}

impl FootprintReport {
    pub const BYTES_PER_ELEM: u64 = 4;

    pub fn phi_bytes(&self) -> u64 {
        self.phi_elems * Self::BYTES_PER_ELEM
    }
    pub fn patch_bytes(&self) -> u64 {
        self.patch_elems * Self::BYTES_PER_ELEM
    }
    pub fn dict_bytes(&self) -> u64 {
        self.dict_elems * Self::BYTES_PER_ELEM
    }
}

pub fn communication_footprint(
    h: u64,
    w: u64,
    scale: u64,
    filters: u64,
    k: u64,
) -> Result<FootprintReport> {
    if [h, w, scale, filters, k].contains(&0) {
        return Err(Error::invalid("footprint inputs must all be positive"));
    }
    let pixels = h * w * scale * scale;
    let phi_elems = pixels * filters;
    let patch_elems = pixels * k * k;
    let dict_elems = filters * k * k;
    Ok(FootprintReport {
        phi_elems,
        patch_elems,
        dict_elems,
        dominance_ratio: (phi_elems + patch_elems) as f64 / dict_elems as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::extract_patches;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        Tensor::new(1, c, h, w, data).unwrap()
    }

    #[test]
    fn default_grid_row_sums() {
        let d = build_dictionary(&DictionaryParams::default()).unwrap();
        // 4 isotropic + 4 sigmas * 2 anisotropic ratios * 4 angles + 6 DoG
        assert_eq!(d.len(), 42);
        for (i, desc) in d.descriptors().iter().enumerate() {
            let sum: f32 = d.row(i).iter().sum();
            match desc.kind {
                FilterKind::Gaussian => assert!((sum - 1.0).abs() < 1e-6, "row {i}: {sum}"),
                FilterKind::Dog => assert!(sum.abs() < 1e-6, "row {i}: {sum}"),
                FilterKind::Custom => unreachable!(),
            }
        }
    }

    #[test]
    fn isotropic_filters_ignore_rotation() {
        let base = DictionaryParams {
            k: 7,
            sigmas: vec![1.3],
            thetas: vec![0.0],
            ratios: vec![1.0],
            dog_pairs: vec![],
        };
        let a = build_dictionary(&base).unwrap();
        let b = build_dictionary(&DictionaryParams {
            thetas: vec![PI / 2.0],
            ..base.clone()
        })
        .unwrap();
        for (x, y) in a.row(0).iter().zip(b.row(0)) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn narrow_gaussian_peaks_at_center() {
        let d = build_dictionary(&DictionaryParams {
            k: 5,
            sigmas: vec![0.5],
            thetas: vec![0.0],
            ratios: vec![1.0],
            dog_pairs: vec![],
        })
        .unwrap();
        let row = d.row(0);
        let max = row.iter().cloned().fold(f32::MIN, f32::max);
        assert_eq!(row[12], max);
    }

    #[test]
    fn anisotropic_rotation_transposes() {
        let d = build_dictionary(&DictionaryParams {
            k: 5,
            sigmas: vec![1.0],
            thetas: vec![0.0, PI / 2.0],
            ratios: vec![2.0],
            dog_pairs: vec![],
        })
        .unwrap();
        assert_eq!(d.len(), 2);
        for r in 0..5 {
            for c in 0..5 {
                assert!((d.row(0)[r * 5 + c] - d.row(1)[c * 5 + r]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn build_errors() {
        let p = DictionaryParams::default();
        assert!(build_dictionary(&DictionaryParams { k: 4, ..p.clone() }).is_err());
        assert!(build_dictionary(&DictionaryParams { sigmas: vec![], ..p.clone() }).is_err());
        assert!(build_dictionary(&DictionaryParams {
            dog_pairs: vec![(1.0, 0.5)],
            ..p.clone()
        })
        .is_err());
        assert!(build_dictionary(&DictionaryParams { sigmas: vec![-1.0], ..p }).is_err());
    }

    #[test]
    fn file_round_trip() {
        let d = build_dictionary(&DictionaryParams::default()).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..8], DICT_MAGIC);
        assert_eq!(Dictionary::from_bytes(&bytes).unwrap(), d);
        assert!(Dictionary::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[3] = 0;
        assert!(Dictionary::from_bytes(&bad).is_err());
    }

    #[test]
    fn assemble_basis_selection_and_zero() {
        let d = build_dictionary(&DictionaryParams::default()).unwrap();
        let (h, w) = (3, 4);
        let mut phi = Tensor::zeros(1, d.len(), h, w);
        assert!(assemble_filters(&phi, &d).unwrap().data().iter().all(|&v| v == 0.0));
        phi.plane_mut(0, 7).fill(1.0);
        let f = assemble_filters(&phi, &d).unwrap();
        for j in 0..d.taps() {
            assert!(f.plane(0, j).iter().all(|&v| v == d.row(7)[j]));
        }
        assert!(assemble_filters(&Tensor::zeros(1, 3, h, w), &d).is_err());
    }

    #[test]
    fn assemble_matches_matvec_oracle() {
        let mut rng = Rng::new(11);
        let rows: Vec<f32> = (0..4 * 9).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let d = Dictionary::custom(3, rows).unwrap();
        let phi = random(&mut rng, 4, 3, 3);
        let f = assemble_filters(&phi, &d).unwrap();
        for i in 0..3 {
            for jx in 0..3 {
                for t in 0..9 {
                    let expected: f64 = (0..4)
                        .map(|l| phi.at(0, l, i, jx) as f64 * d.row(l)[t] as f64)
                        .sum();
                    assert!((f.at(0, t, i, jx) as f64 - expected).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn apply_delta_uniform_and_oracle() {
        let mut rng = Rng::new(12);
        let hr = random(&mut rng, 1, 5, 6);
        let b = extract_patches(&hr, 3).unwrap();

        let mut delta = Tensor::zeros(1, 9, 5, 6);
        delta.plane_mut(0, 4).fill(1.0);
        assert_eq!(apply_filters(&delta, &b).unwrap().data(), hr.data());

        let uniform = Tensor::filled(1, 9, 5, 6, 1.0 / 9.0);
        let y = apply_filters(&uniform, &b).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let mean: f64 = (0..9).map(|t| b.at(0, t, i, j) as f64).sum::<f64>() / 9.0;
                assert!((y.at(0, 0, i, j) as f64 - mean).abs() < 1e-6);
            }
        }

        let f = random(&mut rng, 9, 4, 4);
        let b = random(&mut rng, 9, 4, 4);
        let y = apply_filters(&f, &b).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0f32;
                for t in 0..9 {
                    acc += f.at(0, t, i, j) * b.at(0, t, i, j);
                }
                assert_eq!(y.at(0, 0, i, j).to_bits(), acc.to_bits());
            }
        }
        assert!(apply_filters(&f, &Tensor::zeros(1, 9, 4, 5)).is_err());
    }

    #[test]
    fn footprint_arithmetic() {
        let r = communication_footprint(64, 64, 2, 72, 5).unwrap();
        assert_eq!((r.phi_elems, r.patch_elems, r.dict_elems), (1_179_648, 409_600, 1_800));
        assert!((r.dominance_ratio - 882.915).abs() < 1e-3);
        assert_eq!(r.phi_bytes(), 4 * 1_179_648);
        let unit = communication_footprint(1, 1, 1, 1, 1).unwrap();
        assert_eq!(unit.dominance_ratio, 2.0);
        let double = communication_footprint(128, 64, 2, 72, 5).unwrap();
        assert_eq!(double.phi_elems, 2 * r.phi_elems);
        assert_eq!(double.patch_elems, 2 * r.patch_elems);
        assert_eq!(double.dict_elems, r.dict_elems);
        assert!(communication_footprint(0, 1, 1, 1, 1).is_err());
    }
}
