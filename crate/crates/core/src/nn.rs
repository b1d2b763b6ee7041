//! Composable differentiable layers with explicit forward/backward passes,
//! the MSE criterion, local contrast normalization, and a finite-difference
//! gradient checker.
//!
//! No taping or graph capture: the layer set is fixed and every backward is
//! hand-derived, then verified against central differences.

use crate::conv::{self, Padding, UpsampleMethod};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Scalar activation helpers
// ---------------------------------------------------------------------------

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !(0.5..=2.0).contains(&beta) {
        return Err(arg_err!("beta {beta} outside [0.5, 2]"));
    }
    Ok(())
}

pub(crate) fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 0.01) {
        return Err(arg_err!("eps {eps} outside (0, 0.01]"));
    }
    Ok(())
}

/// Numerically stable logistic function.
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// (1/beta) * log(1 + exp(beta*x)), computed without overflow for large |x|.
pub fn softplus_scalar(x: f64, beta: f64) -> f64 {
    let t = beta * x;
    (t.max(0.0) + (-t.abs()).exp().ln_1p()) / beta
}

/// Inverse of `softplus_scalar` for y > 0.
pub fn softplus_inv_scalar(y: f64, beta: f64) -> f64 {
    debug_assert!(y > 0.0);
    let t = beta * y;
    if t > 30.0 {
        // exp(t) - 1 == exp(t) to double precision
        return y;
    }
    t.exp_m1().ln() / beta
}

pub fn softplus_fwd(x: &Tensor, beta: f64) -> Result<Tensor> {
    check_beta(beta)?;
    Ok(x.map(|v| softplus_scalar(v, beta)))
}

/// d softplus / dx = logistic(beta * x), chained with `grad_out`.
pub fn softplus_bwd(x: &Tensor, grad_out: &Tensor, beta: f64) -> Result<Tensor> {
    check_beta(beta)?;
    grad_out.mul(&x.map(|v| logistic(beta * v)))
}

/// max(x, eps): the positivity guard in front of every log stage.
pub fn relu_eps_fwd(x: &Tensor, eps: f64) -> Result<Tensor> {
    check_eps(eps)?;
    Ok(x.map(|v| v.max(eps)))
}

/// Subgradient: 0 below eps, 1 above; 1 at the kink (fixed tie rule).
pub fn relu_eps_bwd(x: &Tensor, grad_out: &Tensor, eps: f64) -> Result<Tensor> {
    check_eps(eps)?;
    grad_out.mul(&x.map(|v| if v >= eps { 1.0 } else { 0.0 }))
}

pub fn log_stage_fwd(x: &Tensor) -> Result<Tensor> {
    x.ln()
}

pub fn log_stage_bwd(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.mul(&x.map(|v| 1.0 / v))
}

pub fn exp_stage_fwd(x: &Tensor) -> Result<Tensor> {
    x.exp()
}

/// Takes the forward *output* (exp(x)) rather than the input.
pub fn exp_stage_bwd(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.mul(output)
}

/// Collapse all channels into one by summation.
pub fn sum_channels(x: &Tensor) -> Tensor {
    let (ch, h, w) = x.shape();
    let mut out = Tensor::zeros(1, h, w);
    for c in 0..ch {
        for (o, &v) in out.data_mut().iter_mut().zip(x.channel(c).iter()) {
            *o += v;
        }
    }
    out
}

/// Mean squared error over every element, with its gradient 2*(pred-target)/N.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(shape_err!("mse {:?} vs {:?}", pred.shape(), target.shape()));
    }
    let n = pred.len() as f64;
    let diff = pred.sub(target)?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

// ---------------------------------------------------------------------------
// Local contrast normalization
// ---------------------------------------------------------------------------

const LCN_RADIUS: usize = 4; // 9x9 window
const LCN_SIGMA: f64 = 2.0;

/// Gaussian-weighted local mean with per-pixel edge renormalization.
fn local_weighted_mean(ch: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let rad = LCN_RADIUS as isize;
    let side = 2 * LCN_RADIUS + 1;
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for dr in -rad..=rad {
                let rr = r + dr;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for dc in -rad..=rad {
                    let cc = c + dc;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    let t = taps[(dr + rad) as usize * side + (dc + rad) as usize];
                    acc += t * ch[rr as usize * w + cc as usize];
                    wsum += t;
                }
            }
            out[(r * w as isize + c) as usize] = acc / wsum;
        }
    }
    out
}

/// Local contrast normalization: subtract the Gaussian-weighted local mean
/// (9x9, sigma 2, edge-renormalized), then divide by
/// max(local weighted sigma, image mean of local sigma). Channels are
/// normalized independently. Invariant to a global additive constant.
pub fn lcn(input: &Tensor) -> Result<Tensor> {
    let (ch, h, w) = input.shape();
    if h < 2 * LCN_RADIUS + 1 || w < 2 * LCN_RADIUS + 1 {
        return Err(arg_err!("input {h}x{w} smaller than the 9x9 LCN kernel"));
    }
    let side = 2 * LCN_RADIUS + 1;
    let g1 = conv::gaussian_taps(LCN_SIGMA, LCN_RADIUS);
    let mut taps = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            taps[r * side + c] = g1[r] * g1[c];
        }
    }
    let mut out = Tensor::zeros(ch, h, w);
    for c in 0..ch {
        let chan = input.channel(c);
        let mean = local_weighted_mean(chan, h, w, &taps);
        let centered: Vec<f64> = chan.iter().zip(mean.iter()).map(|(&x, &m)| x - m).collect();
        let sq: Vec<f64> = centered.iter().map(|v| v * v).collect();
        let var = local_weighted_mean(&sq, h, w, &taps);
        let sigma: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
        let sigma_mean = sigma.iter().sum::<f64>() / sigma.len() as f64;
        // A channel with no measurable contrast stays zero; dividing by a
        // sigma made of rounding noise would amplify that noise to O(1).
        let scale = chan.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        if sigma_mean <= 1e-12 * (1.0 + scale) {
            continue;
        }
        let out_ch = out.channel_mut(c);
        for i in 0..centered.len() {
            let denom = sigma[i].max(sigma_mean);
            out_ch[i] = centered[i] / denom;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// A differentiable stage with an explicit backward pass. `backward` must be
/// called only after `forward` on the same input (each layer caches what it
/// needs). Parameter gradients accumulate across calls until `zero_grads`.
pub trait Layer {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor>;
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor>;
    /// Visit (parameter, accumulated gradient) pairs in a fixed order.
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Tensor, &mut Tensor)) {}
    fn zero_grads(&mut self) {
        self.visit_params(&mut |_, g| g.fill(0.0));
    }
}

/// Multi-channel convolution (correlation) with per-output-channel bias.
/// Weight layout: channel o*in_ch+i holds the kernel applied to input channel
/// i for output channel o.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: Padding,
    pub weights: Tensor,
    pub bias: Tensor,
    wgrad: Tensor,
    bgrad: Tensor,
    cached_input: Option<Tensor>,
}

impl ConvLayer {
    pub fn new(in_ch: usize, out_ch: usize, kh: usize, kw: usize, padding: Padding) -> ConvLayer {
        ConvLayer {
            in_ch,
            out_ch,
            kh,
            kw,
            padding,
            weights: Tensor::zeros(out_ch * in_ch, kh, kw),
            bias: Tensor::zeros(out_ch, 1, 1),
            wgrad: Tensor::zeros(out_ch * in_ch, kh, kw),
            bgrad: Tensor::zeros(out_ch, 1, 1),
            cached_input: None,
        }
    }

    /// Gaussian init scaled by 1/sqrt(fan-in); biases zero.
    pub fn init_random(&mut self, rng: &mut Rng) {
        let std = 1.0 / ((self.in_ch * self.kh * self.kw) as f64).sqrt();
        for v in self.weights.data_mut() {
            *v = std * rng.normal();
        }
        self.bias.fill(0.0);
    }

    /// Replace weights/bias wholesale (model loading).
    pub fn set_params(&mut self, weights: Tensor, bias: Tensor) -> Result<()> {
        if weights.shape() != self.weights.shape() || bias.shape() != self.bias.shape() {
            return Err(shape_err!("conv set_params shape"));
        }
        self.weights = weights;
        self.bias = bias;
        Ok(())
    }

    fn pad_amounts(&self) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((self.kh - 1) / 2, (self.kw - 1) / 2),
            Padding::Full => (self.kh - 1, self.kw - 1),
            Padding::Explicit(p) => (p, p),
        }
    }

    /// Stateless forward; used by evaluation paths that must stay reentrant.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let (ch, h, w) = input.shape();
        if ch != self.in_ch {
            return Err(shape_err!("conv expects {} channels, got {ch}", self.in_ch));
        }
        let (pr, pc) = self.pad_amounts();
        let (ph, pw) = (h + 2 * pr, w + 2 * pc);
        if ph < self.kh || pw < self.kw {
            return Err(shape_err!(
                "kernel {}x{} larger than padded input {ph}x{pw}",
                self.kh,
                self.kw
            ));
        }
        let (oh, ow) = (ph - self.kh + 1, pw - self.kw + 1);
        let padded: Vec<Vec<f64>> = (0..ch)
            .map(|i| {
                if pr == 0 && pc == 0 {
                    input.channel(i).to_vec()
                } else {
                    conv::pad_channel(input.channel(i), (h, w), (pr, pc)).0
                }
            })
            .collect();
        let mut out = Tensor::zeros(self.out_ch, oh, ow);
        for o in 0..self.out_ch {
            let b = self.bias.at(o, 0, 0);
            out.channel_mut(o).iter_mut().for_each(|v| *v = b);
            for i in 0..self.in_ch {
                let k = self.weights.channel(o * self.in_ch + i).to_vec();
                conv::correlate_valid_acc(out.channel_mut(o), &padded[i], (ph, pw), &k, (self.kh, self.kw));
            }
        }
        Ok(out)
    }

    /// Backward with the option to skip the input gradient (the first layer
    /// of a net has nothing upstream to feed).
    pub fn backward_with(&mut self, grad_out: &Tensor, need_input_grad: bool) -> Result<Tensor> {
        let input = self
            .cached_input
            .take()
            .ok_or_else(|| arg_err!("conv backward before forward"))?;
        let (ch, h, w) = input.shape();
        let (pr, pc) = self.pad_amounts();
        let (ph, pw) = (h + 2 * pr, w + 2 * pc);
        let (oh, ow) = (grad_out.height(), grad_out.width());
        if grad_out.channels() != self.out_ch || oh != ph - self.kh + 1 || ow != pw - self.kw + 1 {
            return Err(shape_err!("conv backward grad shape {:?}", grad_out.shape()));
        }
        let padded: Vec<Vec<f64>> = (0..ch)
            .map(|i| {
                if pr == 0 && pc == 0 {
                    input.channel(i).to_vec()
                } else {
                    conv::pad_channel(input.channel(i), (h, w), (pr, pc)).0
                }
            })
            .collect();
        // bias grads
        for o in 0..self.out_ch {
            let s: f64 = grad_out.channel(o).iter().sum();
            let v = self.bgrad.at(o, 0, 0) + s;
            self.bgrad.set(o, 0, 0, v);
        }
        // weight grads: dW[o,i] = valid correlation of padded input i with grad o
        for o in 0..self.out_ch {
            for i in 0..self.in_ch {
                conv::correlate_valid_acc(
                    self.wgrad.channel_mut(o * self.in_ch + i),
                    &padded[i],
                    (ph, pw),
                    grad_out.channel(o),
                    (oh, ow),
                );
            }
        }
        if !need_input_grad {
            return Ok(Tensor::zeros(ch, h, w));
        }
        // Input grads: full convolution of the grad with the unflipped kernel,
        // computed as valid correlation of the (k-1)-padded grad with
        // rot180(kernel), then the forward padding is cropped back off.
        let mut din = Tensor::zeros(ch, h, w);
        for i in 0..self.in_ch {
            let mut dpad = vec![0.0; ph * pw];
            for o in 0..self.out_ch {
                let (gpad, gph, gpw) =
                    conv::pad_channel(grad_out.channel(o), (oh, ow), (self.kh - 1, self.kw - 1));
                let k = self.weights.channel(o * self.in_ch + i);
                let mut rot = k.to_vec();
                rot.reverse();
                conv::correlate_valid_acc(&mut dpad, &gpad, (gph, gpw), &rot, (self.kh, self.kw));
            }
            let dch = din.channel_mut(i);
            for r in 0..h {
                dch[r * w..(r + 1) * w]
                    .copy_from_slice(&dpad[(r + pr) * pw + pc..(r + pr) * pw + pc + w]);
            }
        }
        Ok(din)
    }
}

impl Layer for ConvLayer {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.apply(input)?;
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        self.backward_with(grad_out, true)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &mut Tensor)) {
        f(&mut self.weights, &mut self.wgrad);
        f(&mut self.bias, &mut self.bgrad);
    }
}

#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, (usize, usize, usize))>,
}

impl MaxPool2 {
    pub fn new() -> MaxPool2 {
        MaxPool2::default()
    }
}

impl Layer for MaxPool2 {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (out, idx) = conv::maxpool2(input)?;
        self.cache = Some((idx, input.shape()));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (idx, (ch, h, w)) = self
            .cache
            .take()
            .ok_or_else(|| arg_err!("maxpool backward before forward"))?;
        if grad_out.len() != idx.len() {
            return Err(shape_err!("maxpool grad len {}", grad_out.len()));
        }
        let mut din = Tensor::zeros(ch, h, w);
        for (&i, &g) in idx.iter().zip(grad_out.data().iter()) {
            din.data_mut()[i] += g;
        }
        Ok(din)
    }
}

#[derive(Clone, Debug)]
pub struct ReluEps {
    pub eps: f64,
    cache: Option<Tensor>,
}

impl ReluEps {
    pub fn new(eps: f64) -> Result<ReluEps> {
        check_eps(eps)?;
        Ok(ReluEps { eps, cache: None })
    }

    /// Distance from the cached pre-activations to the kink at eps; gradient
    /// tests use this to confirm they are not probing a subgradient point.
    pub fn min_kink_distance(&self) -> Option<f64> {
        self.cache
            .as_ref()
            .map(|t| t.data().iter().fold(f64::INFINITY, |m, &x| m.min((x - self.eps).abs())))
    }
}

impl Layer for ReluEps {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = relu_eps_fwd(input, self.eps)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| arg_err!("relu backward before forward"))?;
        relu_eps_bwd(&input, grad_out, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct SoftPlusBeta {
    pub beta: f64,
    cache: Option<Tensor>,
}

impl SoftPlusBeta {
    pub fn new(beta: f64) -> Result<SoftPlusBeta> {
        check_beta(beta)?;
        Ok(SoftPlusBeta { beta, cache: None })
    }
}

impl Layer for SoftPlusBeta {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = softplus_fwd(input, self.beta)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| arg_err!("softplus backward before forward"))?;
        softplus_bwd(&input, grad_out, self.beta)
    }
}

#[derive(Clone, Debug)]
pub struct Upsample {
    pub factor: usize,
    pub method: UpsampleMethod,
    cache: Option<(usize, usize)>,
}

impl Upsample {
    pub fn new(factor: usize, method: UpsampleMethod) -> Upsample {
        Upsample {
            factor,
            method,
            cache: None,
        }
    }
}

impl Layer for Upsample {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = conv::upsample(input, self.factor, self.method)?;
        self.cache = Some((input.height(), input.width()));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let dims = self
            .cache
            .take()
            .ok_or_else(|| arg_err!("upsample backward before forward"))?;
        Ok(conv::upsample_adjoint(grad_out, self.factor, self.method, dims))
    }
}

/// Layers run in order; handy for gradient-checking small stacks.
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Sequential {
        Sequential { layers }
    }
}

impl Layer for Sequential {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for l in self.layers.iter_mut() {
            x = l.forward(&x)?;
        }
        Ok(x)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &mut Tensor)) {
        for l in self.layers.iter_mut() {
            l.visit_params(f);
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

pub const GRAD_CHECK_H: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Compare the layer's analytic gradients (for the scalarized loss
/// sum(c * output), with random fixed coefficients c) against central finite
/// differences over every input element and every parameter. Returns the
/// worst relative error.
pub fn grad_check_layer(layer: &mut dyn Layer, input: &Tensor, seed: u64) -> Result<f64> {
    let h = GRAD_CHECK_H;
    let out0 = layer.forward(input)?;
    if !out0.all_finite() {
        return Err(Error::NonFinite("grad check forward output".into()));
    }
    let mut rng = Rng::seed_from(seed ^ 0xc0ffee);
    // Coefficients bounded away from zero so no output is silently ignored.
    let (oc, oh, ow) = out0.shape();
    let cdata: Vec<f64> = (0..out0.len())
        .map(|_| {
            let v = rng.uniform_in(0.5, 1.5);
            if rng.chance(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let coeffs = Tensor::from_vec(oc, oh, ow, cdata)?;

    // Analytic pass.
    layer.zero_grads();
    layer.forward(input)?;
    let din = layer.backward(&coeffs)?;
    let mut analytic_params: Vec<Tensor> = Vec::new();
    layer.visit_params(&mut |_, g| analytic_params.push(g.clone()));

    let loss_with = |layer: &mut dyn Layer, input: &Tensor| -> Result<f64> {
        let y = layer.forward(input)?;
        Ok(y.data()
            .iter()
            .zip(coeffs.data().iter())
            .map(|(&a, &c)| a * c)
            .sum())
    };

    let mut worst = 0.0f64;
    // Input gradient.
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let lp = loss_with(layer, &x)?;
        x.data_mut()[i] = orig - h;
        let lm = loss_with(layer, &x)?;
        x.data_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        worst = worst.max(rel_err(din.data()[i], numeric));
    }
    // Parameter gradients.
    for (pi, analytic) in analytic_params.iter().enumerate() {
        for j in 0..analytic.len() {
            let set = |layer: &mut dyn Layer, delta: f64| {
                let mut k = 0;
                layer.visit_params(&mut |p, _| {
                    if k == pi {
                        p.data_mut()[j] += delta;
                    }
                    k += 1;
                });
            };
            set(layer, h);
            let lp = loss_with(layer, input)?;
            set(layer, -2.0 * h);
            let lm = loss_with(layer, input)?;
            set(layer, h);
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_closed_forms() {
        let x = Tensor::from_vec(1, 1, 1, vec![0.0]).unwrap();
        let y = softplus_fwd(&x, 1.0).unwrap();
        assert!((y.data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let y2 = softplus_fwd(&x, 2.0).unwrap();
        assert!((y2.data()[0] - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
        let big = Tensor::from_vec(1, 1, 1, vec![50.0]).unwrap();
        let yb = softplus_fwd(&big, 1.0).unwrap();
        assert!((yb.data()[0] - 50.0).abs() < 1e-12);
    }

    #[test]
    fn softplus_positive_and_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for i in -200..200 {
            let x = i as f64 * 0.1;
            let y = softplus_scalar(x, 0.7);
            assert!(y > 0.0);
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for &beta in &[0.5, 1.0, 2.0] {
            for &y in &[1e-6, 0.01, 0.5, 3.0, 40.0] {
                let x = softplus_inv_scalar(y, beta);
                assert!((softplus_scalar(x, beta) - y).abs() < 1e-9 * y.max(1.0));
            }
        }
    }

    #[test]
    fn softplus_beta_out_of_range_errors() {
        let x = Tensor::zeros(1, 1, 1);
        assert!(softplus_fwd(&x, 0.4).is_err());
        assert!(softplus_fwd(&x, 2.5).is_err());
    }

    #[test]
    fn relu_eps_floors() {
        let x = Tensor::from_vec(1, 1, 3, vec![-5.0, 3.0, 0.005]).unwrap();
        let y = relu_eps_fwd(&x, 0.01).unwrap();
        assert_eq!(y.data(), &[0.01, 3.0, 0.01]);
        assert!(relu_eps_fwd(&x, 0.0).is_err());
        assert!(relu_eps_fwd(&x, 0.05).is_err());
    }

    #[test]
    fn relu_eps_output_always_at_least_eps() {
        let mut rng = Rng::seed_from(8);
        let x = Tensor::random_uniform(1, 8, 8, -3.0, 3.0, &mut rng);
        let y = relu_eps_fwd(&x, 0.01).unwrap();
        assert!(y.data().iter().all(|&v| v >= 0.01));
    }

    #[test]
    fn mse_trivials() {
        let mut rng = Rng::seed_from(10);
        let a = Tensor::random_uniform(2, 3, 3, -1.0, 1.0, &mut rng);
        let (l, _) = mse_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        let b = a.add_scalar(0.3);
        let (l2, _) = mse_loss(&b, &a).unwrap();
        assert!((l2 - 0.09).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_scalar_loop() {
        let mut rng = Rng::seed_from(11);
        let a = Tensor::random_uniform(2, 4, 5, -1.0, 1.0, &mut rng);
        let b = Tensor::random_uniform(2, 4, 5, -1.0, 1.0, &mut rng);
        let (l, g) = mse_loss(&a, &b).unwrap();
        let mut acc = 0.0;
        for i in 0..a.len() {
            let d = a.data()[i] - b.data()[i];
            acc += d * d;
        }
        acc /= a.len() as f64;
        assert!((l - acc).abs() < 1e-12);
        for i in 0..a.len() {
            let expect = 2.0 * (a.data()[i] - b.data()[i]) / a.len() as f64;
            assert!((g.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn lcn_constant_is_zero() {
        let x = Tensor::filled(1, 12, 12, 0.8);
        let y = lcn(&x).unwrap();
        assert!(y.max_abs() < 1e-12);
    }

    #[test]
    fn lcn_shift_invariant() {
        let mut rng = Rng::seed_from(14);
        let x = Tensor::random_uniform(1, 16, 16, 0.0, 1.0, &mut rng);
        let y = lcn(&x).unwrap();
        let y2 = lcn(&x.add_scalar(13.7)).unwrap();
        assert!(y.max_abs_diff(&y2).unwrap() < 1e-9);
    }

    #[test]
    fn lcn_checkerboard_unit_response() {
        let n = 16;
        let mut x = Tensor::zeros(1, n, n);
        for r in 0..n {
            for c in 0..n {
                x.set(0, r, c, if (r + c) % 2 == 0 { 1.0 } else { -1.0 });
            }
        }
        let y = lcn(&x).unwrap();
        // closed-form local stats at the center: weighted mean magnitude on
        // a checkerboard is (alternating Gaussian sum)^2, nearly zero, and
        // sigma is close to 1, so the response has unit scale.
        let g = conv::gaussian_taps(LCN_SIGMA, LCN_RADIUS);
        let alt: f64 = g
            .iter()
            .enumerate()
            .map(|(i, &t)| if (i + LCN_RADIUS) % 2 == 0 { t } else { -t })
            .sum();
        let mean_cc = alt * alt;
        let c = n / 2;
        let v = 1.0 - mean_cc; // center pixel has value +1
        let sigma = (1.0 - mean_cc * mean_cc).sqrt();
        let expect = v / sigma;
        assert!(
            (y.at(0, c, c) - expect).abs() < 0.05,
            "{} vs {expect}",
            y.at(0, c, c)
        );
        assert!(y.at(0, c, c).abs() > 0.9);
    }

    #[test]
    fn conv_layer_zero_weights_gives_bias() {
        let mut layer = ConvLayer::new(2, 3, 3, 3, Padding::Same);
        layer.bias.data_mut()[1] = 0.7;
        let x = Tensor::filled(2, 4, 4, 0.5);
        let y = layer.apply(&x).unwrap();
        assert_eq!(y.shape(), (3, 4, 4));
        assert!(y.channel(0).iter().all(|&v| v == 0.0));
        assert!(y.channel(1).iter().all(|&v| v == 0.7));
    }

    #[test]
    fn conv_layer_delta_passthrough() {
        let mut layer = ConvLayer::new(1, 1, 3, 3, Padding::Same);
        layer.weights.set(0, 1, 1, 1.0);
        let mut rng = Rng::seed_from(15);
        let x = Tensor::random_uniform(1, 5, 6, -1.0, 1.0, &mut rng);
        let y = layer.apply(&x).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn grad_check_linear_conv_is_machine_exact() {
        let mut rng = Rng::seed_from(16);
        let mut layer = ConvLayer::new(2, 2, 1, 1, Padding::Valid);
        layer.init_random(&mut rng);
        let x = Tensor::random_uniform(2, 3, 3, -1.0, 1.0, &mut rng);
        let err = grad_check_layer(&mut layer, &x, 1).unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn grad_check_conv_layers() {
        for seed in 0..3u64 {
            let mut rng = Rng::seed_from(100 + seed);
            let mut layer = ConvLayer::new(2, 3, 3, 3, Padding::Valid);
            layer.init_random(&mut rng);
            let x = Tensor::random_uniform(2, 5, 5, -1.0, 1.0, &mut rng);
            let err = grad_check_layer(&mut layer, &x, seed).unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");

            let mut same = ConvLayer::new(1, 2, 5, 5, Padding::Same);
            same.init_random(&mut rng);
            let x2 = Tensor::random_uniform(1, 6, 6, -1.0, 1.0, &mut rng);
            let err2 = grad_check_layer(&mut same, &x2, seed).unwrap();
            assert!(err2 < 1e-4, "seed {seed}: same-pad rel err {err2}");
        }
    }

    #[test]
    fn grad_check_softplus_conv_stack() {
        for seed in 0..3u64 {
            let mut rng = Rng::seed_from(200 + seed);
            let mut conv_l = ConvLayer::new(1, 2, 3, 3, Padding::Valid);
            conv_l.init_random(&mut rng);
            let mut stack = Sequential::new(vec![
                Box::new(conv_l),
                Box::new(SoftPlusBeta::new(1.0).unwrap()),
            ]);
            let x = Tensor::random_uniform(1, 5, 5, -1.0, 1.0, &mut rng);
            let err = grad_check_layer(&mut stack, &x, seed).unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn grad_check_pool_upsample_relu() {
        for seed in 0..3u64 {
            let mut rng = Rng::seed_from(300 + seed);
            // values kept away from the relu kink at eps
            let x = Tensor::random_uniform(2, 4, 4, 0.2, 1.0, &mut rng)
                .map(|v| if v > 0.6 { v } else { v - 1.0 });
            let mut pool = MaxPool2::new();
            let err = grad_check_layer(&mut pool, &x, seed).unwrap();
            assert!(err < 1e-6, "pool rel err {err}");

            let mut up_n = Upsample::new(2, UpsampleMethod::Nearest);
            let err = grad_check_layer(&mut up_n, &x, seed).unwrap();
            assert!(err < 1e-6, "nearest rel err {err}");

            let mut up_b = Upsample::new(2, UpsampleMethod::Bilinear);
            let err = grad_check_layer(&mut up_b, &x, seed).unwrap();
            assert!(err < 1e-6, "bilinear rel err {err}");

            let mut relu = ReluEps::new(0.01).unwrap();
            let err = grad_check_layer(&mut relu, &x, seed).unwrap();
            assert!(err < 1e-6, "relu rel err {err}");
        }
    }

    #[test]
    fn grad_check_log_exp_stages() {
        let mut rng = Rng::seed_from(17);
        let x = Tensor::random_uniform(1, 3, 3, 0.5, 2.0, &mut rng);
        let g = Tensor::filled(1, 3, 3, 1.0);
        let dx = log_stage_bwd(&x, &g).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let n = (log_stage_fwd(&xp).unwrap().sum() - log_stage_fwd(&xm).unwrap().sum()) / (2.0 * h);
            assert!((dx.data()[i] - n).abs() < 1e-6);
        }
        let y = log_stage_fwd(&x).unwrap();
        let ey = exp_stage_fwd(&y).unwrap();
        let dey = exp_stage_bwd(&ey, &g).unwrap();
        assert!(dey.max_abs_diff(&ey).unwrap() < 1e-12);
    }

    #[test]
    fn sum_channels_collapses() {
        let x = Tensor::from_vec(2, 1, 2, vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        let s = sum_channels(&x);
        assert_eq!(s.data(), &[11.0, 22.0]);
    }
}
