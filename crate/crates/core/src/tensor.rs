//! Dense rank-3 tensor (channels x height x width), the carrier for images,
//! feature maps and heat-maps throughout the crate.
//!
//! Tensors are immutable from the public API's point of view: every operation
//! returns a fresh value, and in-place mutation is restricted to owned
//! builders inside the crate. Double precision everywhere; gradient checks
//! depend on it.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Tensor {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Tensor {
        Tensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != channels * height * width {
            return Err(shape_err!(
                "data length {} != {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            ));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    /// Single-channel tensor from nested rows. Handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Tensor {
        let height = rows.len();
        let width = if height == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(height * width);
        for r in rows {
            assert_eq!(r.len(), width, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            channels: 1,
            height,
            width,
            data,
        }
    }

    pub fn random_uniform(
        channels: usize,
        height: usize,
        width: usize,
        lo: f64,
        hi: f64,
        rng: &mut Rng,
    ) -> Tensor {
        let data = (0..channels * height * width)
            .map(|_| rng.uniform_in(lo, hi))
            .collect();
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn random_normal(
        channels: usize,
        height: usize,
        width: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Tensor {
        let data = (0..channels * height * width)
            .map(|_| std * rng.normal())
            .collect();
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, r: usize, col: usize) -> f64 {
        debug_assert!(c < self.channels && r < self.height && col < self.width);
        self.data[(c * self.height + r) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f64) {
        debug_assert!(c < self.channels && r < self.height && col < self.width);
        self.data[(c * self.height + r) * self.width + col] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// New tensor holding one channel of this one.
    pub fn extract_channel(&self, c: usize) -> Tensor {
        Tensor {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.channel(c).to_vec(),
        }
    }

    /// Stack single-geometry tensors along the channel axis.
    pub fn stack_channels(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(arg_err!("stack_channels on empty list"));
        }
        let (h, w) = (parts[0].height, parts[0].width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(shape_err!("stack_channels geometry {}x{} vs {}x{}", p.height, p.width, h, w));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(Tensor {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(|x| x + s)
    }

    /// Elementwise exp. Errors if any output overflows to infinity, so the
    /// finiteness invariant survives.
    pub fn exp(&self) -> Result<Tensor> {
        let out = self.map(f64::exp);
        if let Some(i) = out.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "exp overflow at flat index {i} (input {})",
                self.data[i]
            )));
        }
        Ok(out)
    }

    /// Elementwise natural log. Errors on any non-positive element; this is
    /// the guard that a positivity-preserving stage upstream has failed.
    pub fn ln(&self) -> Result<Tensor> {
        if let Some(i) = self.data.iter().position(|&x| x <= 0.0 || !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "log of non-positive element {} at flat index {i}",
                self.data[i]
            )));
        }
        Ok(self.map(f64::ln))
    }

    /// Location and value of the per-channel maximum. Ties break to the first
    /// occurrence in row-major scan order. Returns (row, col, value).
    pub fn argmax2d(&self, channel: usize) -> Result<(usize, usize, f64)> {
        if self.is_empty() {
            return Err(arg_err!("argmax2d on empty tensor"));
        }
        if channel >= self.channels {
            return Err(arg_err!("channel {channel} >= {}", self.channels));
        }
        let ch = self.channel(channel);
        let mut best = (0usize, ch[0]);
        for (i, &v) in ch.iter().enumerate().skip(1) {
            if v > best.1 {
                best = (i, v);
            }
        }
        Ok((best.0 / self.width, best.0 % self.width, best.1))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// data += other * s  (in-crate accumulation helper)
    pub(crate) fn axpy(&mut self, s: f64, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }
}
