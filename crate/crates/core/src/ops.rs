//! Geometric and convolutional primitives of the upscaling pipeline.
//!
//! Every border is handled by replicate padding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    None,
    Relu,
}

/// One axis of a bilinear resampling: the two source taps and the blend
/// factor for each output coordinate.
fn bilinear_axis(src: usize, scale: usize) -> Vec<(usize, usize, f32)> {
    let max = (src - 1) as f32;
    (0..src * scale)
        .map(|o| {
            let x = ((o as f32 + 0.5) / scale as f32 - 0.5).clamp(0.0, max);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, x - lo as f32)
        })
        .collect()
}

/// Upscales every channel by an integer factor using half-pixel-centered
/// bilinear interpolation.
pub fn bilinear_upsample(t: &Tensor, scale: usize) -> Result<Tensor> {
    t.require_single_batch("bilinear_upsample")?;
    if scale < 1 {
        return Err(Error::invalid("upsample scale must be >= 1"));
    }
    let (h, w) = (t.h(), t.w());
    let rows = bilinear_axis(h, scale);
    let cols = bilinear_axis(w, scale);
    let (oh, ow) = (h * scale, w * scale);
    let mut out = Tensor::zeros(1, t.c(), oh, ow);
    for c in 0..t.c() {
        let src = t.plane(0, c);
        let dst = out.plane_mut(0, c);
        for (oi, &(r0, r1, fy)) in rows.iter().enumerate() {
            let top = &src[r0 * w..(r0 + 1) * w];
            let bot = &src[r1 * w..(r1 + 1) * w];
            let row = &mut dst[oi * ow..(oi + 1) * ow];
            for (v, &(c0, c1, fx)) in row.iter_mut().zip(&cols) {
                let a = top[c0] + fx * (top[c1] - top[c0]);
                let b = bot[c0] + fx * (bot[c1] - bot[c0]);
                *v = a + fy * (b - a);
            }
        }
    }
    Ok(out)
}

/// Copies a plane into a buffer padded by `(ph, pw)` on each side with
/// replicated border values.
fn replicate_pad(src: &[f32], h: usize, w: usize, ph: usize, pw: usize) -> Vec<f32> {
    let pwidth = w + 2 * pw;
    let mut out = Vec::with_capacity((h + 2 * ph) * pwidth);
    for pi in 0..h + 2 * ph {
        let i = pi.saturating_sub(ph).min(h - 1);
        let row = &src[i * w..(i + 1) * w];
        out.extend(std::iter::repeat_n(row[0], pw));
        out.extend_from_slice(row);
        out.extend(std::iter::repeat_n(row[w - 1], pw));
    }
    out
}

/// Builds the patch matrix: channel `j` of output pixel `p` is tap `j`
/// (row-major) of the `k x k` window centered on `p`.
pub fn extract_patches(hr: &Tensor, k: usize) -> Result<Tensor> {
    hr.require_single_channel("extract_patches")?;
    if k.is_multiple_of(2) {
        return Err(Error::invalid(format!("patch width must be odd, got {k}")));
    }
    let (h, w) = (hr.h(), hr.w());
    let r = k / 2;
    let padded = replicate_pad(hr.plane(0, 0), h, w, r, r);
    let pw = w + 2 * r;
    let mut out = Tensor::zeros(1, k * k, h, w);
    for dy in 0..k {
        for dx in 0..k {
            let dst = out.plane_mut(0, dy * k + dx);
            for i in 0..h {
                let src = &padded[(i + dy) * pw + dx..(i + dy) * pw + dx + w];
                dst[i * w..(i + 1) * w].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

/// Normalized 1-D Gaussian taps over `[-radius, radius]`.
pub(crate) fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / sum).collect()
}

/// Blurs with a Gaussian of std-dev `sigma` (truncated at `ceil(3 sigma)`)
/// and decimates by `scale`, keeping pixel `(s*i + s/2, s*j + s/2)`.
pub fn degrade(y: &Tensor, scale: usize, sigma: f64) -> Result<Tensor> {
    y.require_single_channel("degrade")?;
    if scale < 1 {
        return Err(Error::invalid("degrade scale must be >= 1"));
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let (h, w) = (y.h(), y.w());
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} image is not divisible by scale {scale}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let taps = gaussian_taps(sigma, radius);
    let src = y.plane(0, 0);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let (oh, ow) = (h / scale, w / scale);
    let off = scale / 2;
    let out_cols: Vec<usize> = (0..ow).map(|j| scale * j + off).collect();

    // horizontal pass only at the retained columns
    let mut horiz = vec![0.0f64; h * ow];
    for i in 0..h {
        let row = &src[i * w..(i + 1) * w];
        for (oj, &j) in out_cols.iter().enumerate() {
            let mut acc = 0.0;
            for (t, &wt) in taps.iter().enumerate() {
                let jj = clamp(j as isize + t as isize - radius as isize, w);
                acc += wt * row[jj] as f64;
            }
            horiz[i * ow + oj] = acc;
        }
    }
    let mut out = Vec::with_capacity(oh * ow);
    for oi in 0..oh {
        let i = scale * oi + off;
        for oj in 0..ow {
            let mut acc = 0.0;
            for (t, &wt) in taps.iter().enumerate() {
                let ii = clamp(i as isize + t as isize - radius as isize, h);
                acc += wt * horiz[ii * ow + oj];
            }
            out.push(acc as f32);
        }
    }
    Ok(Tensor::from_parts(1, 1, oh, ow, out))
}

/// Same-size 2-D convolution with replicate padding.
///
/// `weights` is laid out `(out_c, in_c, kh, kw)`. Each output value starts
/// from its bias and accumulates in ascending `(in_c, ky, kx)` order, so the
/// result is reproducible bit for bit.
pub fn conv2d(
    t: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    activation: Activation,
) -> Result<Tensor> {
    let [out_c, in_c, kh, kw] = weights.dims();
    if in_c != t.c() {
        return Err(Error::shape(format!(
            "conv2d expects {in_c} input channels, got {}",
            t.c()
        )));
    }
    if bias.len() != out_c {
        return Err(Error::shape(format!(
            "conv2d bias has {} entries for {out_c} output channels",
            bias.len()
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(format!("conv2d kernel {kh}x{kw} must be odd")));
    }
    let (h, w) = (t.h(), t.w());
    let (ph, pw) = (kh / 2, kw / 2);
    let pwidth = w + 2 * pw;
    let mut out = Tensor::zeros(t.n(), out_c, h, w);
    for n in 0..t.n() {
        let padded: Vec<Vec<f32>> = (0..in_c)
            .map(|c| replicate_pad(t.plane(n, c), h, w, ph, pw))
            .collect();
        for (oc, &b) in bias.iter().enumerate() {
            let dst = out.plane_mut(n, oc);
            dst.fill(b);
            for (ic, src) in padded.iter().enumerate() {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wt = weights.at(oc, ic, ky, kx);
                        for i in 0..h {
                            let s = &src[(i + ky) * pwidth + kx..(i + ky) * pwidth + kx + w];
                            for (d, &v) in dst[i * w..(i + 1) * w].iter_mut().zip(s) {
                                *d += wt * v;
                            }
                        }
                    }
                }
            }
            if activation == Activation::Relu {
                for d in dst.iter_mut() {
                    *d = d.max(0.0);
                }
            }
        }
    }
    Ok(out)
}

/// Rearranges `c*s^2` channels into `c` channels at `s` times the spatial
/// resolution: `out(c, i*s + a, j*s + b) = in(c*s^2 + a*s + b, i, j)`.
pub fn pixel_shuffle(t: &Tensor, scale: usize) -> Result<Tensor> {
    if scale < 1 {
        return Err(Error::invalid("pixel_shuffle scale must be >= 1"));
    }
    let s2 = scale * scale;
    if !t.c().is_multiple_of(s2) {
        return Err(Error::shape(format!(
            "{} channels not divisible by scale^2 = {s2}",
            t.c()
        )));
    }
    let (h, w) = (t.h(), t.w());
    let oc = t.c() / s2;
    let (oh, ow) = (h * scale, w * scale);
    let mut out = Tensor::zeros(t.n(), oc, oh, ow);
    for n in 0..t.n() {
        for c in 0..oc {
            for a in 0..scale {
                for b in 0..scale {
                    let src = t.plane(n, c * s2 + a * scale + b);
                    let dst = out.plane_mut(n, c);
                    for i in 0..h {
                        let drow = (i * scale + a) * ow;
                        for j in 0..w {
                            dst[drow + j * scale + b] = src[i * w + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
