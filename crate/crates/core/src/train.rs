//! Optimization and the three-stage training protocol: part detector alone,
//! spatial model on stored heat-maps, then unified fine-tuning with
//! backpropagation through the whole stack.
//!
//! The reference loop is single-threaded and bitwise deterministic for a
//! fixed seed. The optional parallel batch mode computes per-sample gradients
//! concurrently and reduces them in sample order, so it produces the same
//! bits as the sequential loop.

use std::path::Path;

use crate::data::{gaussian_cell_map, render_torso_map, Annotation, Dataset, TorsoBox};
use crate::detector::{build_pyramid, extract_joints, DetectorConfig, DetectorNet, HeatMapSet};
use crate::error::{arg_err, Error, Result};
use crate::eval::{detection_rate, PosePrediction};
use crate::model_io;
use crate::nn::mse_loss;
use crate::rng::Rng;
use crate::spatial::{init_from_histograms, JointSet, SpatialNet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    /// Nesterov momentum coefficient.
    pub momentum: f64,
    pub batch_size: usize,
    /// Epochs for (detector, spatial, unified) stages.
    pub epochs: (usize, usize, usize),
    /// Spatial-stage rate; defaults to `lr` when unset. The spatial model's
    /// reparameterized weights tolerate (and want) larger steps than the
    /// detector's raw convolution weights.
    pub spatial_lr: Option<f64>,
    /// Unified fine-tuning rate; defaults to lr * 0.1 when unset.
    pub stage3_lr: Option<f64>,
    /// Target Gaussian sigma, in heat-map cells.
    pub target_sigma: f64,
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    pub seed: u64,
    /// Radii for the per-epoch detection-rate metric.
    pub radii: Vec<f64>,
    /// Worker threads for the parallel batch mode (1 = sequential).
    pub threads: usize,
}

impl TrainConfig {
    pub fn desk_default() -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            batch_size: 10,
            epochs: (8, 20, 3),
            spatial_lr: None,
            stage3_lr: None,
            target_sigma: 1.0,
            flip_prob: 0.5,
            scale_range: (0.9, 1.1),
            seed: 1,
            radii: vec![0.25, 0.5],
            threads: 1,
        }
    }

    pub fn spatial_lr(&self) -> f64 {
        self.spatial_lr.unwrap_or(self.lr)
    }

    pub fn stage3_lr(&self) -> f64 {
        self.stage3_lr.unwrap_or(self.lr * 0.1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(arg_err!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.target_sigma <= 0.0 {
            return Err(arg_err!("target sigma must be positive"));
        }
        if self.scale_range.0 > self.scale_range.1
            || self.scale_range.0 < 0.7
            || self.scale_range.1 > 1.3
        {
            return Err(arg_err!("scale range must lie within [0.7, 1.3]"));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return Err(arg_err!("batch size and threads must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(arg_err!("flip prob outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SpatialTrainConfig {
    /// Prior kernel side; default 2 * max(heat dims) + 1 covers every
    /// displacement the heat map can express.
    pub kernel_size: Option<usize>,
    pub beta: f64,
    pub eps: f64,
    pub use_torso: bool,
}

impl SpatialTrainConfig {
    pub fn desk_default() -> SpatialTrainConfig {
        SpatialTrainConfig {
            kernel_size: None,
            beta: 1.0,
            eps: 0.01,
            use_torso: true,
        }
    }

    pub fn kernel_for(&self, cells_h: usize, cells_w: usize) -> usize {
        self.kernel_size.unwrap_or(2 * cells_h.max(cells_w) + 1)
    }
}

// ---------------------------------------------------------------------------
// Nesterov momentum
// ---------------------------------------------------------------------------

/// One Nesterov update in the lookahead-gradient form: the gradient must have
/// been evaluated at (param + momentum * velocity); then
/// v <- momentum * v - lr * grad and param <- param + v.
pub fn nesterov_step(
    param: &mut [f64],
    velocity: &mut [f64],
    grad_at_lookahead: &[f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grad_at_lookahead.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient in nesterov step".into()));
    }
    for ((p, v), &g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad_at_lookahead) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Anything with a flat view of (parameter, gradient) slices, visited in a
/// stable order.
pub trait ParamVisit {
    fn visit_param_slices(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64]));

    fn zero_all_grads(&mut self) {
        self.visit_param_slices(&mut |_, g| g.iter_mut().for_each(|x| *x = 0.0));
    }
}

impl ParamVisit for DetectorNet {
    fn visit_param_slices(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.visit_params(&mut |p, g| f(p.data_mut(), g.data_mut()));
    }
}

impl ParamVisit for SpatialNet {
    fn visit_param_slices(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.visit_params(&mut |p, g| f(p.data_mut(), g.data_mut()));
        let (b, g) = self.biases_and_grads();
        f(b, g);
    }
}

/// Stateful optimizer over a `ParamVisit` stream. The training loop keeps
/// parameters *at the lookahead point* while gradients are computed:
/// `lookahead` adds momentum * velocity, and `step` (with gradients in place)
/// applies param -= lr * grad; velocity = momentum * velocity - lr * grad,
/// which lands the parameters exactly where `nesterov_step` on the base
/// parameters would.
pub struct Nesterov {
    pub lr: f64,
    pub momentum: f64,
    vel: Vec<Vec<f64>>,
}

impl Nesterov {
    pub fn new(lr: f64, momentum: f64) -> Nesterov {
        Nesterov {
            lr,
            momentum,
            vel: Vec::new(),
        }
    }

    pub fn lookahead(&mut self, model: &mut dyn ParamVisit) {
        if self.vel.is_empty() {
            model.visit_param_slices(&mut |p, _| self.vel.push(vec![0.0; p.len()]));
        }
        let mu = self.momentum;
        let mut i = 0;
        let vel = &mut self.vel;
        model.visit_param_slices(&mut |p, _| {
            for (x, v) in p.iter_mut().zip(vel[i].iter()) {
                *x += mu * v;
            }
            i += 1;
        });
    }

    pub fn step(&mut self, model: &mut dyn ParamVisit) -> Result<()> {
        let (lr, mu) = (self.lr, self.momentum);
        let mut i = 0;
        let vel = &mut self.vel;
        let mut bad = false;
        model.visit_param_slices(&mut |p, g| {
            for ((x, v), gi) in p.iter_mut().zip(vel[i].iter_mut()).zip(g.iter()) {
                if !gi.is_finite() {
                    bad = true;
                    return;
                }
                *x -= lr * gi;
                *v = mu * *v - lr * gi;
            }
            i += 1;
        });
        if bad {
            return Err(Error::NonFinite("gradient in optimizer step".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Targets and augmentation
// ---------------------------------------------------------------------------

/// Per-joint target maps: a peak-1 Gaussian at each visible joint's nearest
/// heat-map cell; invisible joints get an all-zero map.
pub fn render_target(
    ann: &Annotation,
    cells_h: usize,
    cells_w: usize,
    stride: usize,
    sigma_cells: f64,
) -> Tensor {
    let mut maps = Tensor::zeros(ann.joints.len(), cells_h, cells_w);
    for (j, joint) in ann.joints.iter().enumerate() {
        if !joint.visible {
            continue;
        }
        let bump = gaussian_cell_map(cells_h, cells_w, stride, sigma_cells, joint.u, joint.v);
        maps.channel_mut(j).copy_from_slice(bump.data());
    }
    maps
}

/// Flip (mirroring columns and swapping symmetric channel pairs) followed by
/// an isotropic scale about the grid center, with zero fill outside. Works
/// for both image tensors and heat-map stacks since the center maps onto
/// itself across the two grids.
pub fn transform_tensor(t: &Tensor, flip: bool, scale: f64, swap: &[(usize, usize)]) -> Tensor {
    let (ch, h, w) = t.shape();
    let mut src = t.clone();
    if flip {
        let mut flipped = Tensor::zeros(ch, h, w);
        for c in 0..ch {
            for r in 0..h {
                for col in 0..w {
                    flipped.set(c, r, col, src.at(c, r, w - 1 - col));
                }
            }
        }
        for &(a, b) in swap {
            let tmp_a = flipped.channel(a).to_vec();
            let tmp_b = flipped.channel(b).to_vec();
            flipped.channel_mut(a).copy_from_slice(&tmp_b);
            flipped.channel_mut(b).copy_from_slice(&tmp_a);
        }
        src = flipped;
    }
    if (scale - 1.0).abs() < 1e-12 {
        return src;
    }
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let mut out = Tensor::zeros(ch, h, w);
    for c in 0..ch {
        for r in 0..h {
            for col in 0..w {
                // pull: sample the source at the inverse-transformed point
                let sr = (r as f64 - cy) / scale + cy;
                let sc = (col as f64 - cx) / scale + cx;
                if sr < 0.0 || sc < 0.0 || sr > (h - 1) as f64 || sc > (w - 1) as f64 {
                    continue;
                }
                let r0 = sr.floor() as usize;
                let c0 = sc.floor() as usize;
                let r1 = (r0 + 1).min(h - 1);
                let c1 = (c0 + 1).min(w - 1);
                let fr = sr - r0 as f64;
                let fc = sc - c0 as f64;
                let v = (1.0 - fr) * (1.0 - fc) * src.at(c, r0, c0)
                    + (1.0 - fr) * fc * src.at(c, r0, c1)
                    + fr * (1.0 - fc) * src.at(c, r1, c0)
                    + fr * fc * src.at(c, r1, c1);
                out.set(c, r, col, v);
            }
        }
    }
    out
}

/// Annotation coordinates under the same flip-then-scale transform.
pub fn transform_annotation(
    ann: &Annotation,
    flip: bool,
    scale: f64,
    width: usize,
    height: usize,
    symmetry: &[(usize, usize)],
) -> Annotation {
    let mut out = ann.clone();
    let wm1 = (width - 1) as f64;
    if flip {
        for j in out.joints.iter_mut() {
            j.u = wm1 - j.u;
        }
        for &(a, b) in symmetry {
            out.joints.swap(a, b);
        }
        out.torso_box.u = wm1 - (out.torso_box.u + out.torso_box.w);
    }
    let (cx, cy) = (wm1 / 2.0, (height - 1) as f64 / 2.0);
    for j in out.joints.iter_mut() {
        j.u = cx + scale * (j.u - cx);
        j.v = cy + scale * (j.v - cy);
    }
    out.torso_box = TorsoBox {
        u: cx + scale * (out.torso_box.u - cx),
        v: cy + scale * (out.torso_box.v - cy),
        w: scale * out.torso_box.w,
        h: scale * out.torso_box.h,
    };
    out
}

/// Draw a flip/scale pair, rejecting draws that push any visible joint out of
/// frame; after `max_tries` rejections the sample passes through unchanged.
pub fn draw_augmentation(
    ann: &Annotation,
    width: usize,
    height: usize,
    symmetry: &[(usize, usize)],
    flip_prob: f64,
    scale_range: (f64, f64),
    rng: &mut Rng,
    max_tries: usize,
) -> (bool, f64) {
    for _ in 0..max_tries {
        let flip = rng.chance(flip_prob);
        let scale = rng.uniform_in(scale_range.0, scale_range.1);
        let t = transform_annotation(ann, flip, scale, width, height, symmetry);
        let ok = t.joints.iter().all(|j| {
            !j.visible
                || (j.u >= 0.0 && j.u <= (width - 1) as f64 && j.v >= 0.0 && j.v <= (height - 1) as f64)
        });
        if ok {
            return (flip, scale);
        }
    }
    (false, 1.0)
}

// ---------------------------------------------------------------------------
// Staged training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub stage: usize,
    pub epoch: usize,
    pub split: String,
    pub mse: f64,
    pub rates: Vec<f64>,
}

/// CSV: stage, epoch, split, mse, then one det_rate@r column per radius.
/// Rows without rate measurements (train split) leave those cells blank.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow], radii: &[f64]) -> Result<()> {
    let mut out = String::from("stage,epoch,split,mse");
    for r in radii {
        out.push_str(&format!(",det_rate@{r}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{},{},{}", row.stage, row.epoch, row.split, row.mse));
        for i in 0..radii.len() {
            match row.rates.get(i) {
                Some(r) => out.push_str(&format!(",{r}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub struct StagedResult {
    /// Stage-1 artifact: the detector trained alone.
    pub detector: DetectorNet,
    /// Stage-2 artifact: the spatial model trained on stored heat-maps.
    pub spatial: SpatialNet,
    /// Stage-3 artifacts: both models after unified fine-tuning.
    pub unified_detector: DetectorNet,
    pub unified_spatial: SpatialNet,
    pub metrics: Vec<MetricRow>,
    /// Mean unaugmented train loss of the composed model at the start of
    /// stage 3; equals the frozen stage-1 + stage-2 composition.
    pub initial_unified_loss: f64,
}

#[derive(Default)]
pub struct StagedOptions {
    /// Write per-image stage-2 heat-map caches here.
    pub cache_dir: Option<std::path::PathBuf>,
    /// Skip stage 1 and use this detector (resume support).
    pub initial_detector: Option<DetectorNet>,
    /// Skip stage 2 and use this spatial model (resume support).
    pub initial_spatial: Option<SpatialNet>,
}

enum StageModel {
    Det(DetectorNet),
    Spa(SpatialNet),
    Uni(DetectorNet, SpatialNet),
}

impl Clone for StageModel {
    fn clone(&self) -> Self {
        match self {
            StageModel::Det(d) => StageModel::Det(d.clone()),
            StageModel::Spa(s) => StageModel::Spa(s.clone()),
            StageModel::Uni(d, s) => StageModel::Uni(d.clone(), s.clone()),
        }
    }
}

impl ParamVisit for StageModel {
    fn visit_param_slices(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        match self {
            StageModel::Det(d) => d.visit_param_slices(f),
            StageModel::Spa(s) => s.visit_param_slices(f),
            StageModel::Uni(d, s) => {
                d.visit_param_slices(f);
                s.visit_param_slices(f);
            }
        }
    }
}

impl StageModel {
    fn zero_grads(&mut self) {
        match self {
            StageModel::Det(d) => d.zero_grads(),
            StageModel::Spa(s) => s.zero_grads(),
            StageModel::Uni(d, s) => {
                d.zero_grads();
                s.zero_grads();
            }
        }
    }

    fn grad_snapshot(&mut self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        self.visit_param_slices(&mut |_, g| out.push(g.to_vec()));
        out
    }

    fn add_grads(&mut self, grads: &[Vec<f64>]) {
        let mut i = 0;
        self.visit_param_slices(&mut |_, g| {
            for (a, b) in g.iter_mut().zip(grads[i].iter()) {
                *a += b;
            }
            i += 1;
        });
    }
}

/// Run one batch: compute each sample's gradient in isolation and reduce the
/// per-sample gradients in sample order, so the sequential path and the
/// parallel path (model clones per worker) produce bitwise-identical sums.
/// Returns the summed loss.
fn run_batch<F>(model: &mut StageModel, indices: &[usize], threads: usize, per_sample: F) -> Result<f64>
where
    F: Fn(&mut StageModel, usize) -> Result<f64> + Sync,
    StageModel: Send,
{
    if indices.len() <= 1 {
        model.zero_grads();
        let mut loss = 0.0;
        for &idx in indices {
            loss += per_sample(model, idx)?;
        }
        return Ok(loss);
    }
    let mut slots: Vec<Option<Result<(f64, Vec<Vec<f64>>)>>> = Vec::new();
    slots.resize_with(indices.len(), || None);
    if threads <= 1 {
        for (k, &idx) in indices.iter().enumerate() {
            model.zero_grads();
            let r = per_sample(model, idx).map(|loss| (loss, model.grad_snapshot()));
            slots[k] = Some(r);
        }
    } else {
        let template = model.clone();
        let workers = threads.min(indices.len());
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for t in 0..workers {
                let template = &template;
                let per_sample = &per_sample;
                handles.push(scope.spawn(move || {
                    let mut results = Vec::new();
                    let mut local = template.clone();
                    let mut k = t;
                    while k < indices.len() {
                        local.zero_grads();
                        let r = per_sample(&mut local, indices[k])
                            .map(|loss| (loss, local.grad_snapshot()));
                        results.push((k, r));
                        k += workers;
                    }
                    results
                }));
            }
            for h in handles {
                for (k, r) in h.join().expect("batch worker panicked") {
                    slots[k] = Some(r);
                }
            }
        });
    }
    model.zero_grads();
    let mut loss = 0.0;
    for slot in slots {
        let (l, grads) = slot.expect("missing batch slot")?;
        loss += l;
        model.add_grads(&grads);
    }
    Ok(loss)
}

fn augment_rng(seed: u64, stage: u64, epoch: usize, idx: usize) -> Rng {
    Rng::seed_from(seed).fork((stage << 40) | ((epoch as u64) << 20) | idx as u64)
}

struct StageContext<'a> {
    train: &'a Dataset,
    tcfg: &'a TrainConfig,
    cells_h: usize,
    cells_w: usize,
    stride: usize,
}

impl StageContext<'_> {
    fn target_for(&self, ann: &Annotation) -> Tensor {
        render_target(ann, self.cells_h, self.cells_w, self.stride, self.tcfg.target_sigma)
    }

    fn torso_for(&self, ann: &Annotation) -> Result<Tensor> {
        render_torso_map(ann, self.cells_h, self.cells_w, self.stride, self.tcfg.target_sigma)
    }

    fn epoch_order(&self, stage: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = Rng::seed_from(self.tcfg.seed).fork((stage << 50) | epoch as u64);
        rng.shuffle(&mut order);
        order
    }
}

fn detector_predictions(net: &DetectorNet, ds: &Dataset) -> Result<Vec<PosePrediction>> {
    let mut out = Vec::with_capacity(ds.len());
    for (i, img) in ds.images.iter().enumerate() {
        let hm = net.infer(img)?;
        let joints = extract_joints(&hm)?
            .into_iter()
            .map(|p| (p.u, p.v))
            .collect();
        out.push(PosePrediction {
            image_id: i,
            joints,
        });
    }
    Ok(out)
}

/// Unary stack for the spatial model: detector heat-maps plus (optionally)
/// the torso map rendered from the annotation.
pub fn compose_unaries(heat: &HeatMapSet, torso: Option<&Tensor>) -> Result<Tensor> {
    match torso {
        None => Ok(heat.maps.clone()),
        Some(t) => Tensor::stack_channels(&[&heat.maps, t]),
    }
}

fn spatial_predictions(
    det: &DetectorNet,
    spa: &mut SpatialNet,
    ds: &Dataset,
    ctx: &StageContext,
) -> Result<Vec<PosePrediction>> {
    let mut out = Vec::with_capacity(ds.len());
    let use_torso = spa.joints.torso_input;
    for (i, img) in ds.images.iter().enumerate() {
        let hm = det.infer(img)?;
        let torso = if use_torso {
            Some(ctx.torso_for(&ds.annotations[i])?)
        } else {
            None
        };
        let unaries = compose_unaries(&hm, torso.as_ref())?;
        let maps = spa.forward(&unaries)?;
        let sp_hm = HeatMapSet {
            maps,
            stride: hm.stride,
        };
        let joints = extract_joints(&sp_hm)?
            .into_iter()
            .map(|p| (p.u, p.v))
            .collect();
        out.push(PosePrediction {
            image_id: i,
            joints,
        });
    }
    Ok(out)
}

fn metric_row(
    stage: usize,
    epoch: usize,
    split: &str,
    mse: f64,
    preds: &[PosePrediction],
    ds: &Dataset,
    radii: &[f64],
) -> Result<MetricRow> {
    let pairs: Vec<(usize, &Annotation)> = ds.annotations.iter().enumerate().collect();
    let curve = detection_rate(preds, &pairs, &ds.joint_names, radii)?;
    Ok(MetricRow {
        stage,
        epoch,
        split: split.to_string(),
        mse,
        rates: curve.average.clone(),
    })
}

/// Mean spatial-stage MSE of a frozen detector + spatial composition over a
/// dataset, without augmentation. Used to pin the stage-3 starting point.
pub fn composed_loss(
    det: &DetectorNet,
    spa: &mut SpatialNet,
    ds: &Dataset,
    tcfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (img, ann) in ds.images.iter().zip(ds.annotations.iter()) {
        let hm = det.infer(img)?;
        let (ch, cw) = (hm.maps.height(), hm.maps.width());
        let torso = if spa.joints.torso_input {
            Some(render_torso_map(ann, ch, cw, hm.stride, tcfg.target_sigma)?)
        } else {
            None
        };
        let unaries = compose_unaries(&hm, torso.as_ref())?;
        let out = spa.forward(&unaries)?;
        let target = render_target(ann, ch, cw, hm.stride, tcfg.target_sigma);
        let (loss, _) = mse_loss(&out, &target)?;
        total += loss;
    }
    Ok(total / ds.len() as f64)
}

/// The full protocol. Stage 1 trains the detector against Gaussian targets;
/// stage 2 stores the detector's heat-maps and trains the spatial model on
/// them (with flip/scale augmentation of the stored maps); stage 3 installs
/// both and backpropagates through the entire network at a reduced rate.
pub fn train_staged(
    train: &Dataset,
    val: &Dataset,
    dcfg: &DetectorConfig,
    scfg: &SpatialTrainConfig,
    tcfg: &TrainConfig,
    options: &StagedOptions,
) -> Result<StagedResult> {
    tcfg.validate()?;
    if train.is_empty() {
        return Err(arg_err!("empty training set"));
    }
    let (h, w) = (train.images[0].height(), train.images[0].width());
    dcfg.validate(h, w)?;
    if dcfg.num_joints != train.joint_names.len() {
        return Err(arg_err!(
            "detector config has {} joints, dataset has {}",
            dcfg.num_joints,
            train.joint_names.len()
        ));
    }
    let stride = dcfg.pooling_factor();
    let ctx = StageContext {
        train,
        tcfg,
        cells_h: h / stride,
        cells_w: w / stride,
        stride,
    };
    let mut metrics = Vec::new();
    let mut rng = Rng::seed_from(tcfg.seed);

    // ---- stage 1: part detector on Gaussian targets -----------------------
    let mut detector = match &options.initial_detector {
        Some(d) => d.clone(),
        None => DetectorNet::new(dcfg.clone(), &mut rng)?,
    };
    if options.initial_detector.is_none() {
        let mut model = StageModel::Det(detector);
        let mut opt = Nesterov::new(tcfg.lr, tcfg.momentum);
        for epoch in 0..tcfg.epochs.0 {
            let order = ctx.epoch_order(1, epoch);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(tcfg.batch_size) {
                opt.lookahead(&mut model);
                model.zero_grads();
                let inv = 1.0 / batch.len() as f64;
                let loss = run_batch(&mut model, batch, tcfg.threads, |m, idx| {
                    let StageModel::Det(net) = m else { unreachable!() };
                    let mut arng = augment_rng(tcfg.seed, 1, epoch, idx);
                    let ann = &train.annotations[idx];
                    let (flip, scale) = draw_augmentation(
                        ann, w, h, &train.symmetry, tcfg.flip_prob, tcfg.scale_range, &mut arng, 10,
                    );
                    let img = transform_tensor(&train.images[idx], flip, scale, &[]);
                    let ann = transform_annotation(ann, flip, scale, w, h, &train.symmetry);
                    let pyr = build_pyramid(&img, net.config.num_banks)?;
                    let hm = net.dense_forward(&pyr)?;
                    let target = ctx.target_for(&ann);
                    let (loss, grad) = mse_loss(&hm.maps, &target)?;
                    if !loss.is_finite() {
                        return Err(Error::Diverged { stage: 1, epoch });
                    }
                    net.backward(&grad.scale(inv))?;
                    Ok(loss)
                })?;
                epoch_loss += loss;
                opt.step(&mut model).map_err(|_| Error::Diverged { stage: 1, epoch })?;
            }
            let StageModel::Det(net) = &model else { unreachable!() };
            let train_mse = epoch_loss / train.len() as f64;
            let val_preds = detector_predictions(net, val)?;
            let val_mse = detector_mse(net, val, &ctx)?;
            metrics.push(MetricRow {
                stage: 1,
                epoch,
                split: "train".into(),
                mse: train_mse,
                rates: vec![],
            });
            metrics.push(metric_row(1, epoch, "val", val_mse, &val_preds, val, &tcfg.radii)?);
        }
        let StageModel::Det(net) = model else { unreachable!() };
        detector = net;
    }

    // ---- stage 1 -> 2 handoff: store the heat-maps ------------------------
    let mut heat_cache: Vec<Tensor> = Vec::with_capacity(train.len());
    for (i, img) in train.images.iter().enumerate() {
        let hm = detector.infer(img)?;
        if let Some(dir) = &options.cache_dir {
            std::fs::create_dir_all(dir)?;
            model_io::save_tensors(
                &dir.join(format!("heat_{i:05}.pgrf")),
                &format!("kind=heatcache\nimage={i}\nstride={stride}\n"),
                std::slice::from_ref(&hm.maps),
            )?;
        }
        heat_cache.push(hm.maps);
    }

    // ---- stage 2: spatial model on the stored heat-maps -------------------
    let joints = JointSet::new(train.joint_names.clone(), scfg.use_torso)?;
    let kernel = scfg.kernel_for(ctx.cells_h, ctx.cells_w);
    let mut spatial = match &options.initial_spatial {
        Some(s) => s.clone(),
        None => {
            let mut net = SpatialNet::new(joints.clone(), kernel, scfg.beta, scfg.eps)?;
            let clamped = init_from_histograms(&mut net, &train.annotations, stride)?;
            if clamped > 0 {
                eprintln!("warning: {clamped} displacement samples clamped into the {kernel}x{kernel} prior window");
            }
            // mean unary mass = average per-map sum of the stored heat-maps
            let mean_unary_mass = heat_cache
                .iter()
                .map(|t| {
                    t.data().iter().map(|&x| x.max(0.0)).sum::<f64>()
                        / t.channels() as f64
                })
                .sum::<f64>()
                / heat_cache.len().max(1) as f64;
            net.set_biases_for_background(mean_unary_mass);
            // unit-scale calibration over a small sample of unary stacks
            let calib_n = heat_cache.len().min(16);
            let mut calib = Vec::with_capacity(calib_n);
            for i in 0..calib_n {
                let torso = if scfg.use_torso {
                    Some(ctx.torso_for(&train.annotations[i])?)
                } else {
                    None
                };
                calib.push(match &torso {
                    None => heat_cache[i].clone(),
                    Some(t) => Tensor::stack_channels(&[&heat_cache[i], t])?,
                });
            }
            net.calibrate_message_scale(&calib)?;
            net
        }
    };
    if options.initial_spatial.is_none() {
        let mut model = StageModel::Spa(spatial);
        let mut opt = Nesterov::new(tcfg.spatial_lr(), tcfg.momentum);
        for epoch in 0..tcfg.epochs.1 {
            let order = ctx.epoch_order(2, epoch);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(tcfg.batch_size) {
                opt.lookahead(&mut model);
                model.zero_grads();
                let inv = 1.0 / batch.len() as f64;
                let loss = run_batch(&mut model, batch, tcfg.threads, |m, idx| {
                    let StageModel::Spa(net) = m else { unreachable!() };
                    let mut arng = augment_rng(tcfg.seed, 2, epoch, idx);
                    let ann = &train.annotations[idx];
                    // the stored heat-map inputs are themselves augmented
                    let (flip, scale) = draw_augmentation(
                        ann, w, h, &train.symmetry, tcfg.flip_prob, tcfg.scale_range, &mut arng, 10,
                    );
                    let maps = transform_tensor(&heat_cache[idx], flip, scale, &train.symmetry);
                    let ann = transform_annotation(ann, flip, scale, w, h, &train.symmetry);
                    let torso = if net.joints.torso_input {
                        Some(ctx.torso_for(&ann)?)
                    } else {
                        None
                    };
                    let unaries = match &torso {
                        None => maps,
                        Some(t) => Tensor::stack_channels(&[&maps, t])?,
                    };
                    let out = net.forward(&unaries)?;
                    let target = ctx.target_for(&ann);
                    let (loss, grad) = mse_loss(&out, &target)?;
                    if !loss.is_finite() {
                        return Err(Error::Diverged { stage: 2, epoch });
                    }
                    net.backward(&grad.scale(inv))?;
                    Ok(loss)
                })?;
                epoch_loss += loss;
                opt.step(&mut model).map_err(|_| Error::Diverged { stage: 2, epoch })?;
            }
            let StageModel::Spa(net) = &mut model else { unreachable!() };
            let train_mse = epoch_loss / train.len() as f64;
            let val_preds = spatial_predictions(&detector, net, val, &ctx)?;
            let val_mse = composed_loss(&detector, net, val, tcfg)?;
            metrics.push(MetricRow {
                stage: 2,
                epoch,
                split: "train".into(),
                mse: train_mse,
                rates: vec![],
            });
            metrics.push(metric_row(2, epoch, "val", val_mse, &val_preds, val, &tcfg.radii)?);
        }
        let StageModel::Spa(net) = model else { unreachable!() };
        spatial = net;
    }

    // ---- stage 3: unified fine-tuning --------------------------------------
    let mut uni_det = detector.clone();
    let mut uni_spa = spatial.clone();
    let initial_unified_loss = composed_loss(&uni_det, &mut uni_spa, train, tcfg)?;
    {
        let mut model = StageModel::Uni(uni_det, uni_spa);
        let mut opt = Nesterov::new(tcfg.stage3_lr(), tcfg.momentum);
        let num_joints = train.joint_names.len();
        for epoch in 0..tcfg.epochs.2 {
            let order = ctx.epoch_order(3, epoch);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(tcfg.batch_size) {
                opt.lookahead(&mut model);
                model.zero_grads();
                let inv = 1.0 / batch.len() as f64;
                let loss = run_batch(&mut model, batch, tcfg.threads, |m, idx| {
                    let StageModel::Uni(det, spa) = m else { unreachable!() };
                    let mut arng = augment_rng(tcfg.seed, 3, epoch, idx);
                    let ann = &train.annotations[idx];
                    let (flip, scale) = draw_augmentation(
                        ann, w, h, &train.symmetry, tcfg.flip_prob, tcfg.scale_range, &mut arng, 10,
                    );
                    let img = transform_tensor(&train.images[idx], flip, scale, &[]);
                    let ann = transform_annotation(ann, flip, scale, w, h, &train.symmetry);
                    let pyr = build_pyramid(&img, det.config.num_banks)?;
                    let hm = det.dense_forward(&pyr)?;
                    let torso = if spa.joints.torso_input {
                        Some(ctx.torso_for(&ann)?)
                    } else {
                        None
                    };
                    let unaries = compose_unaries(&hm, torso.as_ref())?;
                    let out = spa.forward(&unaries)?;
                    let target = ctx.target_for(&ann);
                    let (loss, grad) = mse_loss(&out, &target)?;
                    if !loss.is_finite() {
                        return Err(Error::Diverged { stage: 3, epoch });
                    }
                    let d_unaries = spa.backward(&grad.scale(inv))?;
                    // the torso channel is rendered input; its gradient stops here
                    let mut d_heat = Tensor::zeros(num_joints, d_unaries.height(), d_unaries.width());
                    for j in 0..num_joints {
                        d_heat.channel_mut(j).copy_from_slice(d_unaries.channel(j));
                    }
                    det.backward(&d_heat)?;
                    Ok(loss)
                })?;
                epoch_loss += loss;
                opt.step(&mut model).map_err(|_| Error::Diverged { stage: 3, epoch })?;
            }
            let StageModel::Uni(det, spa) = &mut model else { unreachable!() };
            let train_mse = epoch_loss / train.len() as f64;
            let val_preds = spatial_predictions(det, spa, val, &ctx)?;
            let val_mse = composed_loss(det, spa, val, tcfg)?;
            metrics.push(MetricRow {
                stage: 3,
                epoch,
                split: "train".into(),
                mse: train_mse,
                rates: vec![],
            });
            metrics.push(metric_row(3, epoch, "val", val_mse, &val_preds, val, &tcfg.radii)?);
        }
        let StageModel::Uni(det, spa) = model else { unreachable!() };
        uni_det = det;
        uni_spa = spa;
    }

    Ok(StagedResult {
        detector,
        spatial,
        unified_detector: uni_det,
        unified_spatial: uni_spa,
        metrics,
        initial_unified_loss,
    })
}

fn detector_mse(net: &DetectorNet, ds: &Dataset, ctx: &StageContext) -> Result<f64> {
    let mut total = 0.0;
    for (img, ann) in ds.images.iter().zip(ds.annotations.iter()) {
        let hm = net.infer(img)?;
        let target = ctx.target_for(ann);
        let (loss, _) = mse_loss(&hm.maps, &target)?;
        total += loss;
    }
    Ok(total / ds.len().max(1) as f64)
}

/// Detection curve of the plain detector on a dataset.
pub fn evaluate_detector(
    net: &DetectorNet,
    ds: &Dataset,
    radii: &[f64],
) -> Result<crate::eval::DetectionCurve> {
    let preds = detector_predictions(net, ds)?;
    let pairs: Vec<(usize, &Annotation)> = ds.annotations.iter().enumerate().collect();
    detection_rate(&preds, &pairs, &ds.joint_names, radii)
}

/// Detection curve of detector + spatial model (with torso map if enabled).
pub fn evaluate_composed(
    det: &DetectorNet,
    spa: &SpatialNet,
    ds: &Dataset,
    sigma_cells: f64,
    radii: &[f64],
) -> Result<crate::eval::DetectionCurve> {
    let mut spa = spa.clone();
    let mut preds = Vec::with_capacity(ds.len());
    for (i, img) in ds.images.iter().enumerate() {
        let hm = det.infer(img)?;
        let torso = if spa.joints.torso_input {
            Some(render_torso_map(
                &ds.annotations[i],
                hm.maps.height(),
                hm.maps.width(),
                hm.stride,
                sigma_cells,
            )?)
        } else {
            None
        };
        let unaries = compose_unaries(&hm, torso.as_ref())?;
        let maps = spa.forward(&unaries)?;
        let sp_hm = HeatMapSet {
            maps,
            stride: hm.stride,
        };
        let joints = extract_joints(&sp_hm)?
            .into_iter()
            .map(|p| (p.u, p.v))
            .collect();
        preds.push(PosePrediction {
            image_id: i,
            joints,
        });
    }
    let pairs: Vec<(usize, &Annotation)> = ds.annotations.iter().enumerate().collect();
    detection_rate(&preds, &pairs, &ds.joint_names, radii)
}
