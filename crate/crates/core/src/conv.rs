//! 2D convolution engines plus pooling, upsampling, and anti-aliased
//! downsampling.
//!
//! Convention, fixed library-wide: `conv2d_*` computes *correlation* (no
//! kernel flip): out[p] = sum_q k[q] * in[p + q - pad]. Callers that need a
//! true convolution (the spatial priors do) pass a 180-degree rotated kernel.
//! `conv2d_direct` is the brute-force reference; `conv2d_fft` must match it
//! to 1e-9 and exists for the large spatial-prior kernels.

use crate::error::{arg_err, shape_err, Result};
use crate::fft;
use crate::tensor::Tensor;

/// Single-channel convolution kernel with odd height and width, so "centered
/// at the center pixel" is well defined.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    weights: Tensor,
}

impl ConvKernel {
    pub fn new(weights: Tensor) -> Result<ConvKernel> {
        let (c, h, w) = weights.shape();
        if c != 1 {
            return Err(arg_err!("kernel must have 1 channel, got {c}"));
        }
        if h % 2 == 0 || w % 2 == 0 || h == 0 || w == 0 {
            return Err(arg_err!("kernel dims must be odd and positive, got {h}x{w}"));
        }
        Ok(ConvKernel { weights })
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<ConvKernel> {
        ConvKernel::new(Tensor::from_vec(1, h, w, data)?)
    }

    /// Centered delta kernel: identity element for same-padded correlation.
    pub fn delta(size: usize) -> ConvKernel {
        let mut t = Tensor::zeros(1, size, size);
        t.set(0, size / 2, size / 2, 1.0);
        ConvKernel { weights: t }
    }

    pub fn height(&self) -> usize {
        self.weights.height()
    }

    pub fn width(&self) -> usize {
        self.weights.width()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn data(&self) -> &[f64] {
        self.weights.data()
    }

    /// 180-degree rotation; correlation with the rotated kernel is a true
    /// convolution with the original.
    pub fn rotated180(&self) -> ConvKernel {
        let mut data = self.weights.data().to_vec();
        data.reverse();
        ConvKernel {
            weights: Tensor::from_vec(1, self.height(), self.width(), data).unwrap(),
        }
    }
}

/// Output geometry for the convolution ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding: output shrinks by kernel-1.
    Valid,
    /// Zero padding of (k-1)/2 per side: output keeps the input size.
    Same,
    /// Zero padding of k-1 per side: output grows by kernel-1.
    Full,
    /// Explicit zero padding of `0` pixels per side.
    Explicit(usize),
}

impl Padding {
    fn amount(&self, k: usize) -> usize {
        match *self {
            Padding::Valid => 0,
            Padding::Same => (k - 1) / 2,
            Padding::Full => k - 1,
            Padding::Explicit(p) => p,
        }
    }
}

/// Zero-pad one channel by (pr, pc) per side.
pub(crate) fn pad_channel(
    ch: &[f64],
    (h, w): (usize, usize),
    (pr, pc): (usize, usize),
) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (h + 2 * pr, w + 2 * pc);
    let mut out = vec![0.0; ph * pw];
    for r in 0..h {
        out[(r + pr) * pw + pc..(r + pr) * pw + pc + w].copy_from_slice(&ch[r * w..(r + 1) * w]);
    }
    (out, ph, pw)
}

/// Valid correlation accumulated into `out` (dims (ih-kh+1) x (iw-kw+1)).
/// Kernel-outer loop order so the inner loop is a contiguous axpy.
pub(crate) fn correlate_valid_acc(
    out: &mut [f64],
    inp: &[f64],
    (ih, iw): (usize, usize),
    k: &[f64],
    (kh, kw): (usize, usize),
) {
    let oh = ih - kh + 1;
    let ow = iw - kw + 1;
    debug_assert_eq!(out.len(), oh * ow);
    for kr in 0..kh {
        for kc in 0..kw {
            let wgt = k[kr * kw + kc];
            if wgt == 0.0 {
                continue;
            }
            for or in 0..oh {
                let src = &inp[(or + kr) * iw + kc..(or + kr) * iw + kc + ow];
                let dst = &mut out[or * ow..(or + 1) * ow];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d += wgt * s;
                }
            }
        }
    }
}

fn output_dims(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    padding: Padding,
) -> Result<(usize, usize, usize, usize)> {
    let pr = padding.amount(kh);
    let pc = padding.amount(kw);
    let (ph, pw) = (h + 2 * pr, w + 2 * pc);
    if ph < kh || pw < kw {
        return Err(shape_err!(
            "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
        ));
    }
    Ok((ph - kh + 1, pw - kw + 1, pr, pc))
}

/// Reference correlation engine: per-channel sliding inner product over the
/// zero-padded input. Serves as the oracle for the FFT path.
pub fn conv2d_direct(input: &Tensor, kernel: &ConvKernel, padding: Padding) -> Result<Tensor> {
    let (ch, h, w) = input.shape();
    let (kh, kw) = (kernel.height(), kernel.width());
    let (oh, ow, pr, pc) = output_dims((h, w), (kh, kw), padding)?;
    let mut out = Tensor::zeros(ch, oh, ow);
    for c in 0..ch {
        if pr == 0 && pc == 0 {
            correlate_valid_acc(out.channel_mut(c), input.channel(c), (h, w), kernel.data(), (kh, kw));
        } else {
            let (padded, ph, pw) = pad_channel(input.channel(c), (h, w), (pr, pc));
            correlate_valid_acc(out.channel_mut(c), &padded, (ph, pw), kernel.data(), (kh, kw));
        }
    }
    Ok(out)
}

/// FFT correlation engine; numerically equal to `conv2d_direct` within 1e-9
/// on inputs bounded by 1. Transforms are zero-padded to powers of two and
/// cropped back to the same output geometry.
pub fn conv2d_fft(input: &Tensor, kernel: &ConvKernel, padding: Padding) -> Result<Tensor> {
    let (ch, h, w) = input.shape();
    let (kh, kw) = (kernel.height(), kernel.width());
    let (oh, ow, pr, pc) = output_dims((h, w), (kh, kw), padding)?;
    // Correlation = full true-convolution with the rotated kernel, cropped at
    // offset (kh-1, kw-1).
    let rot = kernel.rotated180();
    let mut out = Tensor::zeros(ch, oh, ow);
    for c in 0..ch {
        let (padded, ph, pw) = pad_channel(input.channel(c), (h, w), (pr, pc));
        let full = fft::convolve_full_fft(&padded, (ph, pw), rot.data(), (kh, kw));
        let fw = pw + kw - 1;
        let oc_out = out.channel_mut(c);
        for r in 0..oh {
            let src = &full[(r + kh - 1) * fw + (kw - 1)..(r + kh - 1) * fw + (kw - 1) + ow];
            oc_out[r * ow..(r + 1) * ow].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// 2x2 non-overlapping max pool. Returns the pooled map and, per output cell,
/// the flat index of the winning input element (first occurrence on ties) for
/// exact unpooling during backprop.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (ch, h, w) = input.shape();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(arg_err!("maxpool2 needs even positive dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(ch, oh, ow);
    let mut idx = vec![0usize; ch * oh * ow];
    let data = input.data();
    for c in 0..ch {
        let base = c * h * w;
        for orow in 0..oh {
            for ocol in 0..ow {
                let mut best_i = base + (2 * orow) * w + 2 * ocol;
                let mut best_v = data[best_i];
                for (dr, dc) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let i = base + (2 * orow + dr) * w + 2 * ocol + dc;
                    if data[i] > best_v {
                        best_v = data[i];
                        best_i = i;
                    }
                }
                out.set(c, orow, ocol, best_v);
                idx[(c * oh + orow) * ow + ocol] = best_i;
            }
        }
    }
    Ok((out, idx))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMethod {
    Nearest,
    /// Endpoint-preserving linear interpolation per axis
    /// (source position = dst * (in-1)/(out-1)).
    Bilinear,
}

/// Per-axis source interpolation data for bilinear resizing.
fn lin_coords(out_n: usize, in_n: usize) -> Vec<(usize, usize, f64)> {
    (0..out_n)
        .map(|d| {
            if out_n <= 1 || in_n <= 1 {
                return (0, 0, 0.0);
            }
            let pos = d as f64 * (in_n - 1) as f64 / (out_n - 1) as f64;
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(in_n - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub fn upsample(input: &Tensor, factor: usize, method: UpsampleMethod) -> Result<Tensor> {
    if factor == 0 {
        return Err(arg_err!("upsample factor must be >= 1"));
    }
    let (ch, h, w) = input.shape();
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(ch, oh, ow);
    match method {
        UpsampleMethod::Nearest => {
            for c in 0..ch {
                for r in 0..oh {
                    for col in 0..ow {
                        out.set(c, r, col, input.at(c, r / factor, col / factor));
                    }
                }
            }
        }
        UpsampleMethod::Bilinear => {
            let rows = lin_coords(oh, h);
            let cols = lin_coords(ow, w);
            for c in 0..ch {
                for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
                    for (col, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let v = (1.0 - fr) * (1.0 - fc) * input.at(c, r0, c0)
                            + (1.0 - fr) * fc * input.at(c, r0, c1)
                            + fr * (1.0 - fc) * input.at(c, r1, c0)
                            + fr * fc * input.at(c, r1, c1);
                        out.set(c, r, col, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of `upsample`: scatters output-gradient mass back onto the input
/// grid. Needed by the dense multi-bank backward pass.
pub(crate) fn upsample_adjoint(
    grad_out: &Tensor,
    factor: usize,
    method: UpsampleMethod,
    (in_h, in_w): (usize, usize),
) -> Tensor {
    let ch = grad_out.channels();
    let mut out = Tensor::zeros(ch, in_h, in_w);
    if factor == 1 {
        return grad_out.clone();
    }
    match method {
        UpsampleMethod::Nearest => {
            for c in 0..ch {
                for r in 0..grad_out.height() {
                    for col in 0..grad_out.width() {
                        let v = out.at(c, r / factor, col / factor) + grad_out.at(c, r, col);
                        out.set(c, r / factor, col / factor, v);
                    }
                }
            }
        }
        UpsampleMethod::Bilinear => {
            let rows = lin_coords(grad_out.height(), in_h);
            let cols = lin_coords(grad_out.width(), in_w);
            for c in 0..ch {
                for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
                    for (col, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let g = grad_out.at(c, r, col);
                        *out_mut(&mut out, c, r0, c0) += (1.0 - fr) * (1.0 - fc) * g;
                        *out_mut(&mut out, c, r0, c1) += (1.0 - fr) * fc * g;
                        *out_mut(&mut out, c, r1, c0) += fr * (1.0 - fc) * g;
                        *out_mut(&mut out, c, r1, c1) += fr * fc * g;
                    }
                }
            }
        }
    }
    out
}

fn out_mut(t: &mut Tensor, c: usize, r: usize, col: usize) -> &mut f64 {
    let w = t.width();
    let h = t.height();
    &mut t.data_mut()[(c * h + r) * w + col]
}

/// 1D Gaussian taps, normalized to sum 1.
pub(crate) fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian blur with edge-renormalized weights, so constants are
/// preserved exactly at the borders.
pub(crate) fn gaussian_blur_renorm(input: &Tensor, sigma: f64, radius: usize) -> Tensor {
    let taps = gaussian_taps(sigma, radius);
    let (ch, h, w) = input.shape();
    let rad = radius as isize;
    let mut mid = Tensor::zeros(ch, h, w);
    for c in 0..ch {
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (i, &t) in taps.iter().enumerate() {
                    let cc = col as isize + i as isize - rad;
                    if cc >= 0 && (cc as usize) < w {
                        acc += t * input.at(c, r, cc as usize);
                        wsum += t;
                    }
                }
                mid.set(c, r, col, acc / wsum);
            }
        }
    }
    let mut out = Tensor::zeros(ch, h, w);
    for c in 0..ch {
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (i, &t) in taps.iter().enumerate() {
                    let rr = r as isize + i as isize - rad;
                    if rr >= 0 && (rr as usize) < h {
                        acc += t * mid.at(c, rr as usize, col);
                        wsum += t;
                    }
                }
                out.set(c, r, col, acc / wsum);
            }
        }
    }
    out
}

/// Gaussian low-pass (sigma = 0.5 * factor, radius = 2 * factor) followed by
/// decimation. Factor 1 is a blur-only pass.
pub fn antialias_downsample(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(arg_err!("downsample factor must be >= 1"));
    }
    let (ch, h, w) = input.shape();
    if h % factor != 0 || w % factor != 0 {
        return Err(arg_err!("dims {h}x{w} not divisible by factor {factor}"));
    }
    let blurred = gaussian_blur_renorm(input, 0.5 * factor as f64, 2 * factor);
    if factor == 1 {
        return Ok(blurred);
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(ch, oh, ow);
    for c in 0..ch {
        for r in 0..oh {
            for col in 0..ow {
                out.set(c, r, col, blurred.at(c, r * factor, col * factor));
            }
        }
    }
    Ok(out)
}
