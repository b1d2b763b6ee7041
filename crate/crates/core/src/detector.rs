//! The ConvNet part detector: a multi-resolution pyramid feeds per-bank
//! convolution stages; bank features are upscaled, summed, and pushed through
//! shared fully-connected-as-convolution stages to produce one dense heat-map
//! channel per joint.
//!
//! Geometry. All convolutions inside the network are *valid*; each bank image
//! is zero-padded once, up front, by exactly half its receptive-field
//! overhang. That makes the dense network arithmetically identical to
//! sliding a patch network (the same weights, no padding) over the padded
//! image at the pooling stride, which is what `sliding_window_forward`
//! does patch by patch. The dense path is the fast one; the patchwise path is
//! the reference oracle. With one resolution bank the two agree exactly; with
//! several banks the dense path follows the upscale-and-add approximation, so
//! the lower banks' features are decimated and replicated rather than
//! recomputed per half-pixel offset, and small deviations from the patchwise
//! model are expected.

use crate::conv::Padding;
use crate::conv::UpsampleMethod;
use crate::error::{arg_err, shape_err, Result};
use crate::nn::{self, ConvLayer, Layer, MaxPool2, ReluEps, Upsample};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One convolution stage of a resolution bank.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStageSpec {
    pub kernel: usize,
    pub features: usize,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub num_banks: usize,
    pub num_joints: usize,
    pub in_channels: usize,
    pub stages: Vec<ConvStageSpec>,
    /// Kernel size of the first fully-connected-as-convolution stage; equals
    /// the spatial extent of the per-window feature map it consumes.
    pub fc_kernel: usize,
    pub fc_features: usize,
    pub relu_eps: f64,
}

impl DetectorConfig {
    /// Desk-scale default: two 5x5 conv stages (16 and 32 features, each
    /// followed by 2x2 pooling), 9x9 fully-connected stage with 128 features.
    /// Receptive field 48, pooling factor 4.
    pub fn desk_default(num_joints: usize) -> DetectorConfig {
        DetectorConfig {
            num_banks: 3,
            num_joints,
            in_channels: 1,
            stages: vec![
                ConvStageSpec { kernel: 5, features: 16, pool: true },
                ConvStageSpec { kernel: 5, features: 32, pool: true },
            ],
            fc_kernel: 9,
            fc_features: 128,
            relu_eps: 0.01,
        }
    }

    /// Larger preset in the spirit of the original architecture: 64-pixel
    /// receptive field and 512 fully-connected features.
    pub fn large_preset(num_joints: usize) -> DetectorConfig {
        DetectorConfig {
            num_banks: 3,
            num_joints,
            in_channels: 1,
            stages: vec![
                ConvStageSpec { kernel: 5, features: 64, pool: true },
                ConvStageSpec { kernel: 5, features: 128, pool: true },
            ],
            fc_kernel: 13,
            fc_features: 512,
            relu_eps: 0.01,
        }
    }

    /// Total pooling factor: heat-map stride in image pixels.
    pub fn pooling_factor(&self) -> usize {
        self.stages.iter().filter(|s| s.pool).map(|_| 2).product()
    }

    /// Receptive-field context consumed by the conv stages (in input pixels).
    fn conv_context(&self) -> usize {
        let mut stride = 1;
        let mut ctx = 0;
        for s in &self.stages {
            ctx += (s.kernel - 1) * stride;
            if s.pool {
                stride *= 2;
            }
        }
        ctx
    }

    /// Side length of one detection window: the receptive field of a single
    /// output pixel. The patch network maps a window of this size to a 1x1
    /// per-joint output.
    pub fn window(&self) -> usize {
        self.conv_context() + self.pooling_factor() * self.fc_kernel
    }

    /// Up-front zero padding applied to bank `b` so that the dense output has
    /// exactly input/pooling_factor cells.
    pub fn bank_pad(&self, bank: usize) -> usize {
        let s = self.pooling_factor();
        (self.conv_context() + s * (self.fc_kernel - 1) / (1 << bank)) / 2
    }

    pub fn validate(&self, image_h: usize, image_w: usize) -> Result<()> {
        if self.num_banks == 0 || self.stages.is_empty() || self.num_joints == 0 {
            return Err(arg_err!("detector config has empty banks/stages/joints"));
        }
        for s in &self.stages {
            if s.kernel % 2 == 0 {
                return Err(arg_err!("conv stage kernels must be odd"));
            }
        }
        if self.fc_kernel % 2 == 0 {
            return Err(arg_err!("fc kernel must be odd"));
        }
        nn::check_eps(self.relu_eps)?;
        let s = self.pooling_factor();
        let down = 1 << (self.num_banks - 1);
        for (name, dim) in [("height", image_h), ("width", image_w)] {
            if dim % (s * down) != 0 {
                return Err(arg_err!(
                    "image {name} {dim} must be divisible by pooling factor {s} times 2^(banks-1) = {}",
                    s * down
                ));
            }
            let cells = dim / s;
            if (cells + self.fc_kernel - 1) % down != 0 {
                return Err(arg_err!(
                    "bank feature maps not integral: ({cells} + {}) not divisible by {down}",
                    self.fc_kernel - 1
                ));
            }
        }
        for b in 0..self.num_banks {
            let spread = s * (self.fc_kernel - 1);
            if spread % (1 << b) != 0 || (self.conv_context() + spread / (1 << b)) % 2 != 0 {
                return Err(arg_err!("bank {b} padding not integral"));
            }
            // simulate the cascade: every pool needs an even input
            let mut x = image_h / (1 << b) + 2 * self.bank_pad(b);
            for st in &self.stages {
                x -= st.kernel - 1;
                if st.pool {
                    if x % 2 != 0 {
                        return Err(arg_err!("bank {b}: pool input {x} is odd"));
                    }
                    x /= 2;
                }
            }
        }
        Ok(())
    }
}

/// Multi-resolution input: bank b is the image anti-alias downsampled by 2^b
/// and then contrast normalized, an approximate Laplacian pyramid.
#[derive(Clone, Debug)]
pub struct PyramidInput {
    pub banks: Vec<Tensor>,
}

pub fn build_pyramid(image: &Tensor, num_banks: usize) -> Result<PyramidInput> {
    if num_banks == 0 {
        return Err(arg_err!("pyramid needs at least one bank"));
    }
    let down = 1 << (num_banks - 1);
    if image.height() % down != 0 || image.width() % down != 0 {
        return Err(arg_err!(
            "image {}x{} not divisible by 2^(banks-1) = {down}",
            image.height(),
            image.width()
        ));
    }
    let mut banks = Vec::with_capacity(num_banks);
    banks.push(nn::lcn(image)?); // bank 0 keeps the native resolution
    for b in 1..num_banks {
        let low = crate::conv::antialias_downsample(image, 1 << b)?;
        banks.push(nn::lcn(&low)?);
    }
    Ok(PyramidInput { banks })
}

/// Per-joint 2D maps on the heat-map grid, plus the grid geometry: cell (r,c)
/// covers image pixels [r*stride, (r+1)*stride), and its center sits at
/// image coordinate r*stride + (stride-1)/2.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMapSet {
    pub maps: Tensor,
    pub stride: usize,
}

impl HeatMapSet {
    pub fn num_joints(&self) -> usize {
        self.maps.channels()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.maps.height(), self.maps.width())
    }

    pub fn scale_factor_to_image(&self) -> usize {
        self.stride
    }

    /// Image coordinate (u = column, v = row) of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let half = (self.stride - 1) as f64 / 2.0;
        (
            col as f64 * self.stride as f64 + half,
            row as f64 * self.stride as f64 + half,
        )
    }

    /// Nearest heat-map cell for an image coordinate, clamped to the grid.
    pub fn nearest_cell(&self, u: f64, v: f64) -> (usize, usize) {
        let half = (self.stride - 1) as f64 / 2.0;
        let r = ((v - half) / self.stride as f64)
            .round()
            .clamp(0.0, (self.maps.height() - 1) as f64);
        let c = ((u - half) / self.stride as f64)
            .round()
            .clamp(0.0, (self.maps.width() - 1) as f64);
        (r as usize, c as usize)
    }
}

/// Predicted joint location in image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPrediction {
    pub joint: usize,
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

/// Per-joint argmax mapped back to image coordinates via the cell centers.
pub fn extract_joints(hm: &HeatMapSet) -> Result<Vec<JointPrediction>> {
    let mut out = Vec::with_capacity(hm.num_joints());
    for j in 0..hm.num_joints() {
        let (r, c, value) = hm.maps.argmax2d(j)?;
        let (u, v) = hm.cell_center(r, c);
        out.push(JointPrediction {
            joint: j,
            u,
            v,
            confidence: value,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct BankStage {
    conv: ConvLayer,
    relu: ReluEps,
    pool: Option<MaxPool2>,
}

/// The part detector network. Training-mode forward/backward live on the
/// struct (layer caches); evaluation uses the stateless `apply` paths, which
/// are safe to run concurrently on shared frozen parameters.
#[derive(Clone, Debug)]
pub struct DetectorNet {
    pub config: DetectorConfig,
    banks: Vec<Vec<BankStage>>,
    upsample: Vec<Upsample>,
    fc1: ConvLayer,
    fc_relu: ReluEps,
    fc2: ConvLayer,
}

impl DetectorNet {
    pub fn new(config: DetectorConfig, rng: &mut Rng) -> Result<DetectorNet> {
        let mut banks = Vec::new();
        for _ in 0..config.num_banks {
            let mut stages = Vec::new();
            let mut in_ch = config.in_channels;
            for s in &config.stages {
                let mut conv = ConvLayer::new(in_ch, s.features, s.kernel, s.kernel, Padding::Valid);
                conv.init_random(rng);
                stages.push(BankStage {
                    conv,
                    relu: ReluEps::new(config.relu_eps)?,
                    pool: if s.pool { Some(MaxPool2::new()) } else { None },
                });
                in_ch = s.features;
            }
            banks.push(stages);
        }
        let feat_ch = config.stages.last().unwrap().features;
        let mut fc1 = ConvLayer::new(
            feat_ch,
            config.fc_features,
            config.fc_kernel,
            config.fc_kernel,
            Padding::Valid,
        );
        fc1.init_random(rng);
        let mut fc2 = ConvLayer::new(config.fc_features, config.num_joints, 1, 1, Padding::Valid);
        fc2.init_random(rng);
        let upsample = (0..config.num_banks)
            .map(|b| Upsample::new(1 << b, UpsampleMethod::Nearest))
            .collect();
        Ok(DetectorNet {
            config,
            banks,
            upsample,
            fc1,
            fc_relu: ReluEps::new(0.01)?,
            fc2,
        })
    }

    pub fn heat_stride(&self) -> usize {
        self.config.pooling_factor()
    }

    fn pad_bank(&self, bank: &Tensor, b: usize) -> Tensor {
        let p = self.config.bank_pad(b);
        let (ch, h, w) = bank.shape();
        let mut out = Tensor::zeros(ch, h + 2 * p, w + 2 * p);
        for c in 0..ch {
            let (padded, _, _) = crate::conv::pad_channel(bank.channel(c), (h, w), (p, p));
            out.channel_mut(c).copy_from_slice(&padded);
        }
        out
    }

    /// Training-mode dense forward; caches activations for `backward`.
    pub fn dense_forward(&mut self, pyramid: &PyramidInput) -> Result<HeatMapSet> {
        if pyramid.banks.len() != self.config.num_banks {
            return Err(shape_err!(
                "pyramid has {} banks, config wants {}",
                pyramid.banks.len(),
                self.config.num_banks
            ));
        }
        self.config
            .validate(pyramid.banks[0].height(), pyramid.banks[0].width())?;
        let mut summed: Option<Tensor> = None;
        for b in 0..self.config.num_banks {
            let mut x = self.pad_bank(&pyramid.banks[b], b);
            for stage in self.banks[b].iter_mut() {
                x = stage.conv.forward(&x)?;
                x = stage.relu.forward(&x)?;
                if let Some(pool) = stage.pool.as_mut() {
                    x = pool.forward(&x)?;
                }
            }
            let up = self.upsample[b].forward(&x)?;
            summed = Some(match summed {
                None => up,
                Some(s) => s.add(&up)?,
            });
        }
        let s = summed.unwrap();
        let y = self.fc1.forward(&s)?;
        let y = self.fc_relu.forward(&y)?;
        let y = self.fc2.forward(&y)?;
        Ok(HeatMapSet {
            maps: y,
            stride: self.heat_stride(),
        })
    }

    /// Backward through the whole dense network; accumulates parameter
    /// gradients. The image itself gets no gradient (nothing upstream).
    pub fn backward(&mut self, grad_heat: &Tensor) -> Result<()> {
        let g = self.fc2.backward(grad_heat)?;
        let g = self.fc_relu.backward(&g)?;
        let g_sum = self.fc1.backward(&g)?;
        for b in 0..self.config.num_banks {
            let mut g = self.upsample[b].backward(&g_sum)?;
            for (i, stage) in self.banks[b].iter_mut().enumerate().rev() {
                if let Some(pool) = stage.pool.as_mut() {
                    g = pool.backward(&g)?;
                }
                g = stage.relu.backward(&g)?;
                g = stage.conv.backward_with(&g, i > 0)?;
            }
        }
        Ok(())
    }

    /// Stateless dense forward for evaluation.
    pub fn dense_apply(&self, pyramid: &PyramidInput) -> Result<HeatMapSet> {
        self.config
            .validate(pyramid.banks[0].height(), pyramid.banks[0].width())?;
        let mut summed: Option<Tensor> = None;
        for b in 0..self.config.num_banks {
            let mut x = self.pad_bank(&pyramid.banks[b], b);
            for stage in self.banks[b].iter() {
                x = stage.conv.apply(&x)?;
                x = nn::relu_eps_fwd(&x, stage.relu.eps)?;
                if stage.pool.is_some() {
                    x = crate::conv::maxpool2(&x)?.0;
                }
            }
            let up = crate::conv::upsample(&x, 1 << b, UpsampleMethod::Nearest)?;
            summed = Some(match summed {
                None => up,
                Some(s) => s.add(&up)?,
            });
        }
        let s = summed.unwrap();
        let y = self.fc1.apply(&s)?;
        let y = nn::relu_eps_fwd(&y, self.fc_relu.eps)?;
        let y = self.fc2.apply(&y)?;
        Ok(HeatMapSet {
            maps: y,
            stride: self.heat_stride(),
        })
    }

    /// Convenience: pyramid + stateless dense forward.
    pub fn infer(&self, image: &Tensor) -> Result<HeatMapSet> {
        let pyr = build_pyramid(image, self.config.num_banks)?;
        self.dense_apply(&pyr)
    }

    /// Run the patch network on one window per bank (each `window x window`),
    /// producing one value per joint: the sliding-window model's unit of work.
    pub fn patch_forward(&self, windows: &[Tensor]) -> Result<Vec<f64>> {
        if windows.len() != self.config.num_banks {
            return Err(shape_err!("expected {} windows", self.config.num_banks));
        }
        let w = self.config.window();
        let mut summed: Option<Tensor> = None;
        for (b, win) in windows.iter().enumerate() {
            if win.height() != w || win.width() != w {
                return Err(shape_err!(
                    "window must be {w}x{w}, got {}x{}",
                    win.height(),
                    win.width()
                ));
            }
            let mut x = win.clone();
            for stage in self.banks[b].iter() {
                x = stage.conv.apply(&x)?;
                x = nn::relu_eps_fwd(&x, stage.relu.eps)?;
                if stage.pool.is_some() {
                    x = crate::conv::maxpool2(&x)?.0;
                }
            }
            summed = Some(match summed {
                None => x,
                Some(s) => s.add(&x)?,
            });
        }
        let s = summed.unwrap();
        let y = self.fc1.apply(&s)?;
        let y = nn::relu_eps_fwd(&y, self.fc_relu.eps)?;
        let y = self.fc2.apply(&y)?;
        if y.height() != 1 || y.width() != 1 {
            return Err(shape_err!("patch output not 1x1: {:?}", y.shape()));
        }
        Ok((0..y.channels()).map(|j| y.at(j, 0, 0)).collect())
    }

    /// Reference oracle: evaluate the patch network at every output grid
    /// position, cropping one window per bank from the padded pyramid.
    /// Identical to `dense_apply` for a single bank; for several banks it is
    /// the patchwise model that the dense network approximates.
    pub fn sliding_window_forward(&self, image: &Tensor) -> Result<HeatMapSet> {
        if image.height() < self.config.pooling_factor()
            || image.width() < self.config.pooling_factor()
        {
            return Err(arg_err!("image smaller than one heat-map cell"));
        }
        let pyr = build_pyramid(image, self.config.num_banks)?;
        self.sliding_window_on_pyramid(&pyr)
    }

    /// Patchwise evaluation over an already-built pyramid.
    pub fn sliding_window_on_pyramid(&self, pyr: &PyramidInput) -> Result<HeatMapSet> {
        let cfg = &self.config;
        let image_h = pyr.banks[0].height();
        let image_w = pyr.banks[0].width();
        cfg.validate(image_h, image_w)?;
        let s = cfg.pooling_factor();
        let w = cfg.window();
        let (cells_h, cells_w) = (image_h / s, image_w / s);

        // Window start for output cell p in bank-b coordinates (may be
        // negative): the bank-0 window covers [s*p - pad0, s*p - pad0 + w).
        let start = |p: usize, b: usize| -> isize {
            ((s * p + s / 2) >> b) as isize - (w / 2) as isize
        };
        // Pad each bank (asymmetrically) so every window is in bounds.
        let mut padded: Vec<(Tensor, usize)> = Vec::new();
        for b in 0..cfg.num_banks {
            let bank = &pyr.banks[b];
            let min_r = start(0, b);
            let max_r = start(cells_h - 1, b) + w as isize;
            let max_c = start(cells_w - 1, b) + w as isize;
            let pad_before = (-min_r).max(0) as usize;
            let pad_after_r = (max_r - bank.height() as isize).max(0) as usize;
            let pad_after_c = (max_c - bank.width() as isize).max(0) as usize;
            let pad_after = pad_after_r.max(pad_after_c);
            let (ch, bh, bw) = bank.shape();
            let (nh, nw) = (bh + pad_before + pad_after, bw + pad_before + pad_after);
            let mut big = Tensor::zeros(ch, nh, nw);
            for c in 0..ch {
                for r in 0..bh {
                    let dst_base = (c * nh + r + pad_before) * nw + pad_before;
                    big.data_mut()[dst_base..dst_base + bw]
                        .copy_from_slice(&bank.channel(c)[r * bw..(r + 1) * bw]);
                }
            }
            padded.push((big, pad_before));
        }

        let mut heat = Tensor::zeros(cfg.num_joints, cells_h, cells_w);
        let mut windows: Vec<Tensor> = Vec::with_capacity(cfg.num_banks);
        for pr in 0..cells_h {
            for pc in 0..cells_w {
                windows.clear();
                for (b, (big, off)) in padded.iter().enumerate() {
                    let r0 = (start(pr, b) + *off as isize) as usize;
                    let c0 = (start(pc, b) + *off as isize) as usize;
                    windows.push(crop(big, r0, c0, w, w));
                }
                let vals = self.patch_forward(&windows)?;
                for (j, &v) in vals.iter().enumerate() {
                    heat.set(j, pr, pc, v);
                }
            }
        }
        Ok(HeatMapSet {
            maps: heat,
            stride: s,
        })
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &mut Tensor)) {
        for bank in self.banks.iter_mut() {
            for stage in bank.iter_mut() {
                stage.conv.visit_params(f);
            }
        }
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, g| g.fill(0.0));
    }

    /// Parameters in serialization order.
    pub fn param_tensors(&mut self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_params(&mut |p, _| out.push(p.clone()));
        out
    }

    pub fn load_param_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        let mut idx = 0;
        let mut bad = false;
        self.visit_params(&mut |p, _| {
            if bad {
                return;
            }
            if idx >= tensors.len() || tensors[idx].shape() != p.shape() {
                bad = true;
                return;
            }
            *p = tensors[idx].clone();
            idx += 1;
        });
        if bad || idx != tensors.len() {
            return Err(shape_err!("parameter list mismatch loading detector"));
        }
        Ok(())
    }

    /// Smallest top-2 gap over every pooling block for this input. Finite
    /// difference checks through pooling are only meaningful when no argmax
    /// can flip under the probe perturbation; tests assert this margin first.
    pub fn pool_tie_margin(&self, pyramid: &PyramidInput) -> Result<f64> {
        let mut margin = f64::INFINITY;
        for b in 0..self.config.num_banks {
            let mut x = self.pad_bank(&pyramid.banks[b], b);
            for stage in self.banks[b].iter() {
                x = stage.conv.apply(&x)?;
                x = nn::relu_eps_fwd(&x, stage.relu.eps)?;
                if stage.pool.is_some() {
                    let (ch, h, w) = x.shape();
                    let eps = stage.relu.eps;
                    for c in 0..ch {
                        for r in (0..h).step_by(2) {
                            for col in (0..w).step_by(2) {
                                let mut vals = [
                                    x.at(c, r, col),
                                    x.at(c, r, col + 1),
                                    x.at(c, r + 1, col),
                                    x.at(c, r + 1, col + 1),
                                ];
                                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                                // a block pinned at the relu floor has zero
                                // gradient everywhere: exact ties there are
                                // harmless
                                if vals[0] > eps {
                                    margin = margin.min(vals[0] - vals[1]);
                                }
                            }
                        }
                    }
                    x = crate::conv::maxpool2(&x)?.0;
                }
            }
        }
        Ok(margin)
    }

    /// Smallest distance of any cached ReLU pre-activation to its kink;
    /// gradient tests verify this margin before trusting finite differences.
    pub fn min_kink_distance(&self) -> f64 {
        let mut m = f64::INFINITY;
        for bank in &self.banks {
            for stage in bank {
                if let Some(d) = stage.relu.min_kink_distance() {
                    m = m.min(d);
                }
            }
        }
        if let Some(d) = self.fc_relu.min_kink_distance() {
            m = m.min(d);
        }
        m
    }
}

fn crop(t: &Tensor, r0: usize, c0: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(t.channels(), h, w);
    for c in 0..t.channels() {
        let src = t.channel(c);
        let dst = out.channel_mut(c);
        for r in 0..h {
            let s = (r0 + r) * t.width() + c0;
            dst[r * w..(r + 1) * w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

/// Gradient-checkable wrapper: the whole detector as one `Layer` over a fixed
/// pre-built pyramid. Only used by tests.
pub struct DetectorAsLayer {
    pub net: DetectorNet,
    pub pyramid: PyramidInput,
}

impl Layer for DetectorAsLayer {
    fn forward(&mut self, _input: &Tensor) -> Result<Tensor> {
        Ok(self.net.dense_forward(&self.pyramid)?.maps)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        self.net.backward(grad_out)?;
        Ok(Tensor::zeros(1, 1, 1))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &mut Tensor)) {
        self.net.visit_params(f);
    }
}
