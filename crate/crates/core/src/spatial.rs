//! The spatial model. Two routes to the same structure:
//!
//! * `mrf_oracle` computes the exact single-round sum-product marginal: for
//!   each joint, the normalized pixelwise product over all incoming messages
//!   (pairwise prior convolved with the sender's unary map, plus a background
//!   bias). Probability domain, direct convolution only; this is the
//!   reference the trained network is checked against.
//! * `SpatialNet` is the trainable energy form: biases and kernel weights
//!   pass through SoftPlus, unaries through a floored ReLU, the per-pair
//!   message maps through a log, the per-joint sums through an exp. No
//!   partition function anywhere. Every stage keeps its inputs strictly
//!   positive, and the log-space sum decouples the message gradients.
//!
//! Prior kernels are stored so that the cell at (center + d) holds the mass
//! for displacement d = location(A) - location(v); applying a prior is a true
//! convolution, i.e. correlation with the 180-degree-rotated kernel.

use crate::conv::{self, ConvKernel, Padding};
use crate::data::Annotation;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::nn::{self, softplus_inv_scalar, softplus_scalar};
use crate::tensor::Tensor;

/// Ordered set of output joints plus an optional extra input channel carrying
/// the torso map, which marks the labeled person in multi-figure scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSet {
    pub names: Vec<String>,
    pub torso_input: bool,
}

impl JointSet {
    pub fn new(names: Vec<String>, torso_input: bool) -> Result<JointSet> {
        if names.is_empty() {
            return Err(arg_err!("joint set must not be empty"));
        }
        let mut seen = names.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != names.len() {
            return Err(arg_err!("joint names must be unique"));
        }
        Ok(JointSet { names, torso_input })
    }

    /// Number of marginal maps the model produces.
    pub fn num_out(&self) -> usize {
        self.names.len()
    }

    /// Number of unary input channels (joints, plus torso map if enabled).
    pub fn num_in(&self) -> usize {
        self.names.len() + usize::from(self.torso_input)
    }

    pub fn input_name(&self, v: usize) -> &str {
        if v < self.names.len() {
            &self.names[v]
        } else {
            "torso"
        }
    }
}

/// One end of an ordered prior pair: a real joint or the virtual torso.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairEnd {
    Joint(usize),
    Torso,
}

/// Probability-domain priors for the exact oracle: one nonnegative kernel and
/// bias per ordered (target joint, source channel) pair.
#[derive(Clone, Debug)]
pub struct OraclePriors {
    pub num_out: usize,
    pub num_in: usize,
    pub kernels: Vec<ConvKernel>,
    pub biases: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SpatialOracleResult {
    /// One normalized marginal map per target joint.
    pub marginals: Tensor,
    /// Per-joint partition value (the pixel sum divided out above).
    pub partition: Vec<f64>,
}

/// True convolution with `same` geometry: full zero padding cropped back to
/// the map size.
fn prior_convolve_direct(map: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    conv::conv2d_direct(map, &kernel.rotated180(), Padding::Same)
}

fn prior_convolve_fft(map: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    conv::conv2d_fft(map, &kernel.rotated180(), Padding::Same)
}

/// Exact single-round sum-product marginals: for each target joint, the
/// normalized pixelwise product over all source channels of (prior convolved
/// with source unary, plus bias).
pub fn mrf_oracle(unaries: &Tensor, priors: &OraclePriors) -> Result<SpatialOracleResult> {
    let (ch, h, w) = unaries.shape();
    if ch != priors.num_in {
        return Err(shape_err!(
            "oracle expects {} unary channels, got {ch}",
            priors.num_in
        ));
    }
    if priors.kernels.len() != priors.num_out * priors.num_in
        || priors.biases.len() != priors.kernels.len()
    {
        return Err(shape_err!("oracle prior table size"));
    }
    if unaries.data().iter().any(|&x| x < 0.0) {
        return Err(arg_err!("oracle unaries must be nonnegative"));
    }
    for k in &priors.kernels {
        if k.data().iter().any(|&x| x < 0.0) {
            return Err(arg_err!("oracle priors must be nonnegative"));
        }
    }
    if priors.biases.iter().any(|&b| b < 0.0) {
        return Err(arg_err!("oracle biases must be nonnegative"));
    }
    let mut marginals = Tensor::zeros(priors.num_out, h, w);
    let mut partition = Vec::with_capacity(priors.num_out);
    for a in 0..priors.num_out {
        let mut prod = Tensor::filled(1, h, w, 1.0);
        for v in 0..priors.num_in {
            let idx = a * priors.num_in + v;
            let msg = prior_convolve_direct(&unaries.extract_channel(v), &priors.kernels[idx])?
                .add_scalar(priors.biases[idx]);
            prod = prod.mul(&msg)?;
        }
        let z = prod.sum();
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::NonFinite(format!(
                "oracle partition for joint {a} is {z}"
            )));
        }
        partition.push(z);
        marginals
            .channel_mut(a)
            .copy_from_slice(prod.scale(1.0 / z).data());
    }
    Ok(SpatialOracleResult { marginals, partition })
}

/// How message convolutions are executed inside the trained network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvRoute {
    /// FFT when kernel x map work is large, direct otherwise.
    Auto,
    Direct,
    Fft,
}

impl ConvRoute {
    fn use_fft(&self, kernel: usize, h: usize, w: usize) -> bool {
        match self {
            ConvRoute::Direct => false,
            ConvRoute::Fft => true,
            ConvRoute::Auto => kernel * kernel * h * w >= (1 << 22),
        }
    }
}

/// Forward variant: `Standard` is the trained energy network; `Bypass` skips
/// SoftPlus/ReLU (demanding already-positive weights and maps) so the output
/// equals the unnormalized oracle product exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialMode {
    Standard,
    Bypass,
}

struct SpatialCache {
    unaries: Tensor,
    relu_u: Vec<Tensor>,
    soft_k: Vec<ConvKernel>,
    messages: Vec<Tensor>,
    out: Tensor,
}

/// Trainable convolutional spatial model. Weights and biases live in
/// pre-SoftPlus space and are reparameterized on every forward pass.
pub struct SpatialNet {
    pub joints: JointSet,
    pub kernel_size: usize,
    pub beta: f64,
    pub eps: f64,
    pub route: ConvRoute,
    priors_raw: Vec<Tensor>,
    biases_raw: Vec<f64>,
    prior_grads: Vec<Tensor>,
    bias_grads: Vec<f64>,
    cache: Option<SpatialCache>,
}

impl Clone for SpatialNet {
    fn clone(&self) -> Self {
        SpatialNet {
            joints: self.joints.clone(),
            kernel_size: self.kernel_size,
            beta: self.beta,
            eps: self.eps,
            route: self.route,
            priors_raw: self.priors_raw.clone(),
            biases_raw: self.biases_raw.clone(),
            prior_grads: self.prior_grads.clone(),
            bias_grads: self.bias_grads.clone(),
            cache: None,
        }
    }
}

impl SpatialNet {
    /// Uniform-prior initialization: every kernel starts as the uniform
    /// distribution 1/k^2 (in SoftPlus-domain storage), biases at a small
    /// positive background.
    pub fn new(joints: JointSet, kernel_size: usize, beta: f64, eps: f64) -> Result<SpatialNet> {
        nn::check_beta(beta)?;
        nn::check_eps(eps)?;
        if kernel_size % 2 == 0 || kernel_size == 0 {
            return Err(arg_err!("kernel size must be odd, got {kernel_size}"));
        }
        let pairs = joints.num_out() * joints.num_in();
        let uniform = softplus_inv_scalar(1.0 / (kernel_size * kernel_size) as f64, beta);
        let priors_raw = vec![Tensor::filled(1, kernel_size, kernel_size, uniform); pairs];
        let bias = softplus_inv_scalar(1e-3, beta);
        Ok(SpatialNet {
            prior_grads: vec![Tensor::zeros(1, kernel_size, kernel_size); pairs],
            bias_grads: vec![0.0; pairs],
            priors_raw,
            biases_raw: vec![bias; pairs],
            joints,
            kernel_size,
            beta,
            eps,
            route: ConvRoute::Auto,
            cache: None,
        })
    }

    pub fn pair_index(&self, a: usize, v: usize) -> usize {
        a * self.joints.num_in() + v
    }

    pub fn prior_raw(&self, a: usize, v: usize) -> &Tensor {
        &self.priors_raw[a * self.joints.num_in() + v]
    }

    pub fn prior_grad(&self, a: usize, v: usize) -> &Tensor {
        &self.prior_grads[a * self.joints.num_in() + v]
    }

    pub fn bias_grad(&self, a: usize, v: usize) -> f64 {
        self.bias_grads[a * self.joints.num_in() + v]
    }

    pub fn set_prior_raw(&mut self, a: usize, v: usize, raw: Tensor) -> Result<()> {
        let idx = self.pair_index(a, v);
        if raw.shape() != self.priors_raw[idx].shape() {
            return Err(shape_err!("prior shape"));
        }
        self.priors_raw[idx] = raw;
        Ok(())
    }

    pub fn bias_raw(&self, a: usize, v: usize) -> f64 {
        self.biases_raw[a * self.joints.num_in() + v]
    }

    pub fn set_bias_raw(&mut self, a: usize, v: usize, raw: f64) {
        let idx = self.pair_index(a, v);
        self.biases_raw[idx] = raw;
    }

    /// Install a probability-domain prior (e.g. a displacement histogram) by
    /// mapping it through the inverse SoftPlus.
    pub fn set_prior_distribution(&mut self, a: usize, v: usize, prob: &Tensor) -> Result<()> {
        if prob.data().iter().any(|&p| p <= 0.0) {
            return Err(arg_err!("prior distribution must be strictly positive"));
        }
        let beta = self.beta;
        self.set_prior_raw(a, v, prob.map(|p| softplus_inv_scalar(p, beta)))
    }

    /// Background bias from the mean unary mass: SoftPlus(raw) = 0.01 * mean.
    pub fn set_biases_for_background(&mut self, mean_unary: f64) {
        let target = (0.01 * mean_unary).max(1e-9);
        let raw = softplus_inv_scalar(target, self.beta);
        self.biases_raw.iter_mut().for_each(|b| *b = raw);
    }

    /// Rescale every pairwise kernel so its message *peaks* at unit scale
    /// over the given sample of unary stacks. Histogram priors normalize to
    /// sum 1, which leaves every message well below 1; the pixelwise product
    /// over all incoming messages then collapses toward zero and every
    /// gradient (each carries a factor of the output) collapses with it.
    /// With unit peaks, geometrically consistent unaries make all messages
    /// peak at the same cell, so the product starts near target scale exactly
    /// where the targets are bright, while the background stays small.
    pub fn calibrate_message_scale(&mut self, unary_samples: &[Tensor]) -> Result<()> {
        if unary_samples.is_empty() {
            return Ok(());
        }
        let priors = self.oracle_priors();
        let num_in = self.joints.num_in();
        for a in 0..self.joints.num_out() {
            for v in 0..num_in {
                let idx = a * num_in + v;
                let mut peak_sum = 0.0;
                for u in unary_samples {
                    let relu = nn::relu_eps_fwd(&u.extract_channel(v), self.eps)?;
                    let m = prior_convolve_direct(&relu, &priors.kernels[idx])?;
                    peak_sum += m.data().iter().fold(0.0f64, |mx, &x| mx.max(x));
                }
                let mean_peak = peak_sum / unary_samples.len() as f64;
                let gamma = (1.0 / mean_peak.max(1e-12)).clamp(1e-3, 1e4);
                let beta = self.beta;
                self.priors_raw[idx] = priors.kernels[idx]
                    .weights()
                    .map(|p| softplus_inv_scalar((p * gamma).max(1e-12), beta));
            }
        }
        Ok(())
    }

    /// The raw parameters reinterpreted as oracle priors, for comparing
    /// `Bypass`-mode output against the exact oracle. Requires nonnegative
    /// raw weights and biases (the bypass precondition).
    pub fn raw_as_oracle_priors(&self) -> Result<OraclePriors> {
        let mut kernels = Vec::with_capacity(self.priors_raw.len());
        for t in &self.priors_raw {
            if t.data().iter().any(|&x| x < 0.0) {
                return Err(arg_err!("raw priors must be nonnegative for the bypass view"));
            }
            kernels.push(ConvKernel::new(t.clone())?);
        }
        if self.biases_raw.iter().any(|&b| b < 0.0) {
            return Err(arg_err!("raw biases must be nonnegative for the bypass view"));
        }
        Ok(OraclePriors {
            num_out: self.joints.num_out(),
            num_in: self.joints.num_in(),
            kernels,
            biases: self.biases_raw.clone(),
        })
    }

    /// The probability-domain view of the current parameters, as consumed by
    /// the exact oracle.
    pub fn oracle_priors(&self) -> OraclePriors {
        OraclePriors {
            num_out: self.joints.num_out(),
            num_in: self.joints.num_in(),
            kernels: self
                .priors_raw
                .iter()
                .map(|t| ConvKernel::new(t.map(|x| softplus_scalar(x, self.beta))).unwrap())
                .collect(),
            biases: self
                .biases_raw
                .iter()
                .map(|&b| softplus_scalar(b, self.beta))
                .collect(),
        }
    }

    fn convolve(&self, map: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
        if self.route.use_fft(self.kernel_size, map.height(), map.width()) {
            prior_convolve_fft(map, kernel)
        } else {
            prior_convolve_direct(map, kernel)
        }
    }

    pub fn forward(&mut self, unaries: &Tensor) -> Result<Tensor> {
        self.forward_mode(unaries, SpatialMode::Standard)
    }

    /// Energy-domain forward: out_a = exp(sum_v log(SoftPlus(K) conv
    /// ReLU(u_v) + SoftPlus(b))). In `Bypass` mode SoftPlus and ReLU become
    /// identities (requiring positive weights and maps), reducing to the
    /// unnormalized oracle product.
    pub fn forward_mode(&mut self, unaries: &Tensor, mode: SpatialMode) -> Result<Tensor> {
        let (ch, h, w) = unaries.shape();
        if ch != self.joints.num_in() {
            return Err(shape_err!(
                "spatial expects {} unary channels, got {ch}",
                self.joints.num_in()
            ));
        }
        let relu_u: Vec<Tensor> = match mode {
            SpatialMode::Standard => {
                let mut out = Vec::with_capacity(ch);
                for v in 0..ch {
                    out.push(nn::relu_eps_fwd(&unaries.extract_channel(v), self.eps)?);
                }
                out
            }
            SpatialMode::Bypass => {
                if unaries.data().iter().any(|&x| x <= 0.0) {
                    return Err(arg_err!("bypass mode requires strictly positive unaries"));
                }
                (0..ch).map(|v| unaries.extract_channel(v)).collect()
            }
        };
        let num_out = self.joints.num_out();
        let num_in = self.joints.num_in();
        let mut soft_k = Vec::with_capacity(num_out * num_in);
        let mut soft_b = Vec::with_capacity(num_out * num_in);
        for idx in 0..num_out * num_in {
            match mode {
                SpatialMode::Standard => {
                    soft_k.push(ConvKernel::new(
                        self.priors_raw[idx].map(|x| softplus_scalar(x, self.beta)),
                    )?);
                    soft_b.push(softplus_scalar(self.biases_raw[idx], self.beta));
                }
                SpatialMode::Bypass => {
                    if self.priors_raw[idx].data().iter().any(|&x| x < 0.0)
                        || self.biases_raw[idx] < 0.0
                    {
                        return Err(arg_err!("bypass mode requires nonnegative raw parameters"));
                    }
                    soft_k.push(ConvKernel::new(self.priors_raw[idx].clone())?);
                    soft_b.push(self.biases_raw[idx]);
                }
            }
        }
        let mut messages = Vec::with_capacity(num_out * num_in);
        let mut out = Tensor::zeros(num_out, h, w);
        for a in 0..num_out {
            let mut log_sum = Tensor::zeros(1, h, w);
            for v in 0..num_in {
                let idx = a * num_in + v;
                let msg = self
                    .convolve(&relu_u[v], &soft_k[idx])?
                    .add_scalar(soft_b[idx]);
                let logged = msg.ln().map_err(|e| {
                    Error::NonFinite(format!(
                        "log stage for pair ({}, {}): {e}",
                        self.joints.names[a],
                        self.joints.input_name(v)
                    ))
                })?;
                log_sum = log_sum.add(&logged)?;
                messages.push(msg);
            }
            let e = log_sum.exp().map_err(|e| {
                Error::NonFinite(format!("exp stage for joint {}: {e}", self.joints.names[a]))
            })?;
            out.channel_mut(a).copy_from_slice(e.data());
        }
        if mode == SpatialMode::Standard {
            self.cache = Some(SpatialCache {
                unaries: unaries.clone(),
                relu_u,
                soft_k,
                messages,
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Message map for pair (a, v) from the last Standard forward.
    pub fn cached_message(&self, a: usize, v: usize) -> Option<&Tensor> {
        self.cache
            .as_ref()
            .map(|c| &c.messages[a * self.joints.num_in() + v])
    }

    /// Gradients of the loss w.r.t. the unaries, kernels (raw), and biases
    /// (raw), given the loss gradient at the output. Consumes the forward
    /// cache; parameter gradients accumulate.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| arg_err!("spatial backward before forward"))?;
        if grad_out.shape() != cache.out.shape() {
            return Err(shape_err!("spatial grad shape {:?}", grad_out.shape()));
        }
        // exp stage adjoint
        let dz = grad_out.mul(&cache.out)?;
        self.backward_from_logsum_with(&dz, cache)
    }

    /// Backward entry below the exp stage: `dz` is the loss gradient w.r.t.
    /// the per-joint log-sum maps. Split out because the log-space addition
    /// makes each message's gradient depend only on its own value and `dz`,
    /// a property tests probe directly.
    pub fn backward_from_logsum(&mut self, dz: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| arg_err!("spatial backward before forward"))?;
        self.backward_from_logsum_with(dz, cache)
    }

    fn backward_from_logsum_with(&mut self, dz: &Tensor, cache: SpatialCache) -> Result<Tensor> {
        let num_out = self.joints.num_out();
        let num_in = self.joints.num_in();
        let (_, h, w) = cache.unaries.shape();
        let mut d_unaries = Tensor::zeros(num_in, h, w);
        for a in 0..num_out {
            let dza = dz.extract_channel(a);
            for v in 0..num_in {
                let idx = a * num_in + v;
                // log stage: dm = dz / m
                let dm = dza.mul(&cache.messages[idx].map(|m| 1.0 / m))?;
                // bias: sum of dm through the softplus derivative
                let db: f64 = dm.sum();
                self.bias_grads[idx] += db * nn::logistic(self.beta * self.biases_raw[idx]);
                // kernel grad in softplus domain, then chain to raw weights
                let dk = kernel_grad_same(&dm, &cache.relu_u[v], self.kernel_size);
                let beta = self.beta;
                let chained = dk.mul(&self.priors_raw[idx].map(|x| nn::logistic(beta * x)))?;
                self.prior_grads[idx].axpy(1.0, &chained);
                // unary grad: correlation of dm with the softplus'd kernel
                // (adjoint of the true convolution), masked by the relu
                let du = conv::conv2d_direct(&dm, &cache.soft_k[idx], Padding::Same)?;
                let eps = self.eps;
                let mask = cache
                    .unaries
                    .extract_channel(v)
                    .map(|x| if x >= eps { 1.0 } else { 0.0 });
                d_unaries
                    .channel_mut(v)
                    .iter_mut()
                    .zip(du.mul(&mask)?.data().iter())
                    .for_each(|(o, &g)| *o += g);
            }
        }
        Ok(d_unaries)
    }

    pub fn zero_grads(&mut self) {
        for g in self.prior_grads.iter_mut() {
            g.fill(0.0);
        }
        self.bias_grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Visit kernel (parameter, gradient) pairs in pair order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &mut Tensor)) {
        for (p, g) in self.priors_raw.iter_mut().zip(self.prior_grads.iter_mut()) {
            f(p, g);
        }
    }

    /// Scalar bias parameters and their gradients, as parallel slices.
    pub fn biases_and_grads(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.biases_raw, &mut self.bias_grads)
    }

    /// Parameters in serialization order: kernels in pair order, then the
    /// biases packed into one trailing tensor.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        let mut out = self.priors_raw.clone();
        let b = Tensor::from_vec(1, 1, self.biases_raw.len(), self.biases_raw.clone()).unwrap();
        out.push(b);
        out
    }

    pub fn load_param_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != self.priors_raw.len() + 1 {
            return Err(shape_err!("spatial parameter list length"));
        }
        for (i, t) in tensors[..self.priors_raw.len()].iter().enumerate() {
            if t.shape() != self.priors_raw[i].shape() {
                return Err(shape_err!("spatial prior {i} shape"));
            }
            self.priors_raw[i] = t.clone();
        }
        let b = &tensors[self.priors_raw.len()];
        if b.len() != self.biases_raw.len() {
            return Err(shape_err!("spatial bias count"));
        }
        self.biases_raw.copy_from_slice(b.data());
        Ok(())
    }
}

/// d(loss)/d(kernel) for m = kernel (true-)convolved with map, same padding:
/// dK[q] = sum_p dm[p] * map[p + center - q], zero outside.
fn kernel_grad_same(dm: &Tensor, map: &Tensor, k: usize) -> Tensor {
    let (h, w) = (dm.height(), dm.width());
    let c = (k / 2) as isize;
    let mut out = Tensor::zeros(1, k, k);
    for qr in 0..k {
        for qc in 0..k {
            let dr = c - qr as isize;
            let dc = c - qc as isize;
            let mut acc = 0.0;
            let r0 = (-dr).max(0) as usize;
            let r1 = ((h as isize).min(h as isize - dr)).max(0) as usize;
            let c0 = (-dc).max(0) as usize;
            let c1 = ((w as isize).min(w as isize - dc)).max(0) as usize;
            for pr in r0..r1 {
                let mr = (pr as isize + dr) as usize;
                let dm_row = &dm.data()[pr * w..(pr + 1) * w];
                let map_row = &map.data()[mr * w..(mr + 1) * w];
                for pc in c0..c1 {
                    acc += dm_row[pc] * map_row[(pc as isize + dc) as usize];
                }
            }
            out.set(0, qr, qc, acc);
        }
    }
    out
}

/// Empirical displacement histogram for initializing one pairwise prior.
/// Displacements are (d_row, d_col) in heat-map cells: location(A) minus
/// location(v). Out-of-kernel displacements clamp to the border (the count is
/// returned so callers can warn). A uniform floor of 1/k^2 keeps every cell
/// strictly positive before normalizing to sum 1.
pub fn histogram_prior(
    displacements: &[(f64, f64)],
    kernel_size: usize,
) -> Result<(Tensor, usize)> {
    if displacements.is_empty() {
        return Err(arg_err!("histogram prior needs at least one example"));
    }
    if kernel_size % 2 == 0 {
        return Err(arg_err!("kernel size must be odd"));
    }
    let k = kernel_size as isize;
    let c = k / 2;
    let mut hist = Tensor::zeros(1, kernel_size, kernel_size);
    let mut clamped = 0usize;
    for &(dr, dc) in displacements {
        let mut r = c + dr.round() as isize;
        let mut col = c + dc.round() as isize;
        if r < 0 || r >= k || col < 0 || col >= k {
            clamped += 1;
            r = r.clamp(0, k - 1);
            col = col.clamp(0, k - 1);
        }
        let v = hist.at(0, r as usize, col as usize) + 1.0;
        hist.set(0, r as usize, col as usize, v);
    }
    let floor = 1.0 / (kernel_size * kernel_size) as f64;
    let hist = hist.add_scalar(floor);
    let total = hist.sum();
    Ok((hist.scale(1.0 / total), clamped))
}

/// Displacements (heat-map cells) between two pair ends over a dataset.
pub fn pair_displacements(
    annotations: &[Annotation],
    a: PairEnd,
    v: PairEnd,
    stride: usize,
) -> Vec<(f64, f64)> {
    let s = stride as f64;
    let pos = |ann: &Annotation, end: PairEnd| -> Option<(f64, f64)> {
        match end {
            PairEnd::Joint(j) => {
                let jp = &ann.joints[j];
                jp.visible.then_some((jp.v, jp.u))
            }
            PairEnd::Torso => {
                let (cu, cv) = ann.torso_box.center();
                Some((cv, cu))
            }
        }
    };
    annotations
        .iter()
        .filter_map(|ann| {
            let (ar, ac) = pos(ann, a)?;
            let (vr, vc) = pos(ann, v)?;
            Some(((ar - vr) / s, (ac - vc) / s))
        })
        .collect()
}

/// Initialize every pairwise prior of `net` from the dataset's empirical
/// joint-displacement histograms. Returns the number of clamped samples.
pub fn init_from_histograms(
    net: &mut SpatialNet,
    annotations: &[Annotation],
    stride: usize,
) -> Result<usize> {
    let num_in = net.joints.num_in();
    let num_out = net.joints.num_out();
    let mut total_clamped = 0;
    for a in 0..num_out {
        for v in 0..num_in {
            let v_end = if v < num_out {
                PairEnd::Joint(v)
            } else {
                PairEnd::Torso
            };
            let disp = pair_displacements(annotations, PairEnd::Joint(a), v_end, stride);
            let (prob, clamped) = histogram_prior(&disp, net.kernel_size)?;
            total_clamped += clamped;
            net.set_prior_distribution(a, v, &prob)?;
        }
    }
    Ok(total_clamped)
}
