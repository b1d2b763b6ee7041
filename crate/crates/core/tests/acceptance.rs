//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers (run with `--nocapture` to see them).

use std::time::Instant;

use posegraph::conv::{conv2d_direct, conv2d_fft, ConvKernel, Padding, UpsampleMethod};
use posegraph::data::{generate_dataset, Annotation, JointAnnotation, SyntheticSceneConfig, TorsoBox};
use posegraph::detector::{DetectorConfig, DetectorNet};
use posegraph::eval::{detection_rate, PosePrediction};
use posegraph::nn::{self, grad_check_layer, Layer};
use posegraph::rng::Rng;
use posegraph::spatial::{mrf_oracle, JointSet, SpatialMode, SpatialNet};
use posegraph::tensor::Tensor;
use posegraph::train::{
    evaluate_composed, evaluate_detector, train_staged, SpatialTrainConfig, StagedOptions,
    TrainConfig,
};

struct SpatialAsLayer(SpatialNet);

impl Layer for SpatialAsLayer {
    fn forward(&mut self, x: &Tensor) -> posegraph::Result<Tensor> {
        self.0.forward(x)
    }
    fn backward(&mut self, g: &Tensor) -> posegraph::Result<Tensor> {
        self.0.backward(g)
    }
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &mut Tensor)) {
        self.0.visit_params(f);
    }
}

/// Criterion 1: analytic gradients of every layer and of the full spatial
/// network match central finite differences (h = 1e-5) with relative error
/// below 1e-4 over 5 seeds, within 60 seconds.
#[test]
fn acceptance_1_gradient_suite() {
    let t0 = Instant::now();
    let mut worst_layers = 0.0f64;
    let mut worst_spatial = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = Rng::seed_from(9000 + seed);

        // linear map: exact up to rounding
        let mut linear = nn::ConvLayer::new(2, 2, 1, 1, Padding::Valid);
        linear.init_random(&mut rng);
        let x = Tensor::random_uniform(2, 3, 3, -1.0, 1.0, &mut rng);
        let err = grad_check_layer(&mut linear, &x, seed).unwrap();
        assert!(err < 1e-8, "linear layer rel err {err}");

        // convolution stacks
        let mut conv_v = nn::ConvLayer::new(2, 3, 3, 3, Padding::Valid);
        conv_v.init_random(&mut rng);
        let x = Tensor::random_uniform(2, 5, 5, -1.0, 1.0, &mut rng);
        worst_layers = worst_layers.max(grad_check_layer(&mut conv_v, &x, seed).unwrap());

        let mut conv_s = nn::ConvLayer::new(1, 2, 5, 5, Padding::Same);
        conv_s.init_random(&mut rng);
        let x = Tensor::random_uniform(1, 6, 6, -1.0, 1.0, &mut rng);
        worst_layers = worst_layers.max(grad_check_layer(&mut conv_s, &x, seed).unwrap());

        let mut conv_sp = nn::ConvLayer::new(1, 2, 3, 3, Padding::Valid);
        conv_sp.init_random(&mut rng);
        let mut stack = nn::Sequential::new(vec![
            Box::new(conv_sp),
            Box::new(nn::SoftPlusBeta::new(1.0).unwrap()),
        ]);
        let x = Tensor::random_uniform(1, 5, 5, -1.0, 1.0, &mut rng);
        worst_layers = worst_layers.max(grad_check_layer(&mut stack, &x, seed).unwrap());

        // pointwise and resampling layers; inputs kept off the relu kink
        let x = Tensor::random_uniform(2, 4, 4, 0.2, 1.0, &mut rng)
            .map(|v| if v > 0.6 { v } else { v - 1.2 });
        worst_layers =
            worst_layers.max(grad_check_layer(&mut nn::MaxPool2::new(), &x, seed).unwrap());
        worst_layers = worst_layers.max(
            grad_check_layer(&mut nn::Upsample::new(2, UpsampleMethod::Nearest), &x, seed).unwrap(),
        );
        worst_layers = worst_layers.max(
            grad_check_layer(&mut nn::Upsample::new(2, UpsampleMethod::Bilinear), &x, seed)
                .unwrap(),
        );
        let mut relu = nn::ReluEps::new(0.01).unwrap();
        worst_layers = worst_layers.max(grad_check_layer(&mut relu, &x, seed).unwrap());
        let mut softplus = nn::SoftPlusBeta::new(2.0).unwrap();
        worst_layers = worst_layers.max(grad_check_layer(&mut softplus, &x, seed).unwrap());

        // the full spatial network on 8x8 maps (kernels, biases, unaries)
        let joints = JointSet::new(vec!["a".into(), "b".into()], true).unwrap();
        let mut net = SpatialNet::new(joints, 5, 1.0, 0.01).unwrap();
        for idx in 0..6 {
            let (a, v) = (idx / 3, idx % 3);
            net.set_prior_raw(a, v, Tensor::random_uniform(1, 5, 5, -3.0, 0.5, &mut rng))
                .unwrap();
            net.set_bias_raw(a, v, rng.uniform_in(-3.0, 0.5));
        }
        let unaries = Tensor::random_uniform(3, 8, 8, 0.05, 1.0, &mut rng);
        let mut wrapped = SpatialAsLayer(net);
        worst_spatial = worst_spatial.max(grad_check_layer(&mut wrapped, &unaries, seed).unwrap());

        // bias parameters, finite-differenced by hand
        let net = &mut wrapped.0;
        let coeffs = Tensor::random_uniform(2, 8, 8, 0.5, 1.5, &mut rng);
        net.zero_grads();
        net.forward(&unaries).unwrap();
        net.backward(&coeffs).unwrap();
        let h = nn::GRAD_CHECK_H;
        for idx in 0..6 {
            let (a, v) = (idx / 3, idx % 3);
            let analytic = net.bias_grad(a, v);
            let orig = net.bias_raw(a, v);
            net.set_bias_raw(a, v, orig + h);
            let lp: f64 = net.forward(&unaries).unwrap().mul(&coeffs).unwrap().sum();
            net.set_bias_raw(a, v, orig - h);
            let lm: f64 = net.forward(&unaries).unwrap().mul(&coeffs).unwrap().sum();
            net.set_bias_raw(a, v, orig);
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
            worst_spatial = worst_spatial.max(rel);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(worst_layers < 1e-4, "layer rel err {worst_layers}");
    assert!(worst_spatial < 1e-4, "spatial rel err {worst_spatial}");
    assert!(secs < 60.0, "gradient suite took {secs:.1}s");
    println!(
        "ACCEPTANCE 1 PASS: gradient suite, worst layer rel err {worst_layers:.2e}, \
         worst spatial rel err {worst_spatial:.2e}, {secs:.1}s"
    );
}

/// Criterion 2: FFT convolution equals the direct reference within 1e-9
/// max-abs over 20 random cases spanning kernel sizes 3..65, including a
/// kernel larger than the input, within 30 seconds.
#[test]
fn acceptance_2_convolution_oracle() {
    let t0 = Instant::now();
    let mut rng = Rng::seed_from(7100);
    let kernel_sizes = [3usize, 9, 17, 33, 65];
    let mut worst = 0.0f64;
    let mut cases = 0;
    for round in 0..4 {
        for &k in &kernel_sizes {
            let size = [32usize, 48, 24, 40][round % 4];
            let input = Tensor::random_uniform(1, size, size, -1.0, 1.0, &mut rng);
            let kdata: Vec<f64> = (0..k * k).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let kernel = ConvKernel::from_vec(k, k, kdata).unwrap();
            let padding = if k > size {
                Padding::Full // kernel larger than input
            } else {
                [Padding::Same, Padding::Valid, Padding::Full, Padding::Explicit(3)][round % 4]
            };
            let direct = conv2d_direct(&input, &kernel, padding).unwrap();
            let fft = conv2d_fft(&input, &kernel, padding).unwrap();
            worst = worst.max(direct.max_abs_diff(&fft).unwrap());
            cases += 1;
        }
    }
    assert_eq!(cases, 20);
    let secs = t0.elapsed().as_secs_f64();
    assert!(worst < 1e-9, "fft vs direct max abs diff {worst}");
    assert!(secs < 30.0, "convolution oracle took {secs:.1}s");
    println!("ACCEPTANCE 2 PASS: fft-vs-direct over {cases} cases, max abs diff {worst:.2e}, {secs:.1}s");
}

/// Criterion 3: with a single resolution bank, the dense network equals the
/// patchwise sliding-window model within 1e-6 at every output pixel, for 3
/// parameter seeds on 64x64 input, within 120 seconds.
#[test]
fn acceptance_3_dense_equals_sliding_window() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let mut rng = Rng::seed_from(7300 + seed);
        let mut cfg = DetectorConfig::desk_default(4);
        cfg.num_banks = 1;
        let net = DetectorNet::new(cfg, &mut rng).unwrap();
        let img = Tensor::random_uniform(1, 64, 64, 0.0, 1.0, &mut rng);
        let dense = net.infer(&img).unwrap();
        let slid = net.sliding_window_forward(&img).unwrap();
        assert_eq!(dense.maps.shape(), slid.maps.shape());
        worst = worst.max(dense.maps.max_abs_diff(&slid.maps).unwrap());
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(worst < 1e-6, "dense vs sliding max abs diff {worst}");
    assert!(secs < 120.0, "equivalence check took {secs:.1}s");
    println!("ACCEPTANCE 3 PASS: dense vs sliding window, max abs diff {worst:.2e}, {secs:.1}s");
}

/// Criterion 4: bypass-mode spatial forward equals the unnormalized exact
/// sum-product marginal within 1e-10 relative, on 8x8 maps with 3 joints,
/// 10 seeds.
#[test]
fn acceptance_4_energy_matches_exact_marginal() {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = Rng::seed_from(7400 + seed);
        let joints =
            JointSet::new(vec!["a".into(), "b".into(), "c".into()], false).unwrap();
        let mut net = SpatialNet::new(joints, 5, 1.0, 0.01).unwrap();
        for a in 0..3 {
            for v in 0..3 {
                net.set_prior_raw(a, v, Tensor::random_uniform(1, 5, 5, 0.0, 1.0, &mut rng))
                    .unwrap();
                net.set_bias_raw(a, v, rng.uniform_in(0.01, 0.3));
            }
        }
        let unaries = Tensor::random_uniform(3, 8, 8, 0.02, 1.0, &mut rng);
        let bypass = net.forward_mode(&unaries, SpatialMode::Bypass).unwrap();
        let oracle = mrf_oracle(&unaries, &net.raw_as_oracle_priors().unwrap()).unwrap();
        for a in 0..3 {
            for i in 0..64 {
                let unnorm = oracle.marginals.channel(a)[i] * oracle.partition[a];
                let rel = (bypass.channel(a)[i] - unnorm).abs() / unnorm.abs().max(1e-300);
                worst = worst.max(rel);
            }
        }
    }
    assert!(worst < 1e-10, "bypass vs oracle rel diff {worst}");
    println!("ACCEPTANCE 4 PASS: energy network vs exact marginal, worst rel diff {worst:.2e}");
}

/// Criteria 5 and 6, one training run.
///
/// 5: on 200 test scenes with 2 distractor figures, the detection rate at
/// normalized radius 0.25 of detector+spatial(+torso map) must exceed the
/// measured detector-only baseline, with the margin recorded. Budget: 500
/// train images at 32x32, 30 minutes single-threaded.
///
/// 6: after unified fine-tuning, the validation rate at 0.25 must not drop
/// more than 0.01 below the stage-2 value, with the achieved delta recorded.
#[test]
fn acceptance_5_and_6_spatial_benefit_and_unified_fine_tuning() {
    let t0 = Instant::now();
    let mut scene = SyntheticSceneConfig::desk_default();
    scene.num_distractors = 2;
    let train_ds = generate_dataset(&scene, 500, 1001).unwrap();
    let val_ds = generate_dataset(&scene, 60, 2002).unwrap();
    let test_ds = generate_dataset(&scene, 200, 3003).unwrap();

    let mut dcfg = DetectorConfig::desk_default(train_ds.joint_names.len());
    dcfg.num_banks = 2;
    let tcfg = TrainConfig {
        lr: 0.03,
        momentum: 0.9,
        batch_size: 10,
        epochs: (8, 10, 2),
        spatial_lr: Some(0.1),
        stage3_lr: None,
        target_sigma: 1.0,
        flip_prob: 0.5,
        scale_range: (0.9, 1.1),
        seed: 42,
        radii: vec![0.25],
        threads: 1,
    };
    let res = train_staged(
        &train_ds,
        &val_ds,
        &dcfg,
        &SpatialTrainConfig::desk_default(),
        &tcfg,
        &StagedOptions::default(),
    )
    .unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    assert!(
        train_secs < 30.0 * 60.0,
        "training budget exceeded: {train_secs:.0}s"
    );

    // criterion 5: measured baseline first, then the spatial model
    let detector_only = evaluate_detector(&res.detector, &test_ds, &[0.25]).unwrap().average[0];
    let with_spatial =
        evaluate_composed(&res.detector, &res.spatial, &test_ds, 1.0, &[0.25]).unwrap().average[0];
    let margin = with_spatial - detector_only;
    assert!(
        margin > 0.0,
        "spatial model did not help: detector {detector_only:.4}, with spatial {with_spatial:.4}"
    );

    // criterion 6: last stage-2 vs last stage-3 validation rate at 0.25
    let val_rate = |stage: usize| -> f64 {
        res.metrics
            .iter()
            .filter(|m| m.stage == stage && m.split == "val")
            .last()
            .expect("stage rows present")
            .rates[0]
    };
    let stage2 = val_rate(2);
    let stage3 = val_rate(3);
    let delta = stage3 - stage2;
    assert!(
        stage3 >= stage2 - 0.01,
        "unified fine-tuning regressed: stage2 {stage2:.4} -> stage3 {stage3:.4}"
    );

    println!(
        "ACCEPTANCE 5 PASS: rate@0.25 detector-only {detector_only:.4}, with spatial+torso \
         {with_spatial:.4}, margin +{margin:.4} (200 scenes, 2 distractors; trained in {train_secs:.0}s)"
    );
    println!(
        "ACCEPTANCE 6 PASS: unified fine-tuning val rate@0.25 {stage2:.4} -> {stage3:.4}, \
         delta {delta:+.4} (threshold -0.01)"
    );
}

/// Criterion 7: with a false-negative shoulder unary (zero at the true
/// location) and a positive background bias, the face marginal keeps a
/// maximum above 10 * eps.
#[test]
fn acceptance_7_bias_rescue() {
    let joints = JointSet::new(vec!["face".into(), "shoulder".into()], false).unwrap();
    let mut net = SpatialNet::new(joints, 7, 1.0, 0.01).unwrap();
    let mut face_prior = Tensor::filled(1, 7, 7, 1e-4);
    face_prior.set(0, 3, 3, 0.8);
    net.set_prior_distribution(0, 0, &face_prior).unwrap();
    let mut fs = Tensor::filled(1, 7, 7, 1e-4);
    fs.set(0, 1, 3, 0.8);
    net.set_prior_distribution(0, 1, &fs).unwrap();
    for v in 0..2 {
        net.set_bias_raw(0, v, nn::softplus_inv_scalar(0.2, 1.0));
    }
    let mut unaries = Tensor::zeros(2, 9, 9);
    unaries.set(0, 3, 4, 1.0);
    // shoulder channel all zero: the false negative
    let out = net.forward(&unaries).unwrap();
    let (r, c, peak) = out.argmax2d(0).unwrap();
    assert!(peak > 10.0 * net.eps, "face marginal collapsed: {peak}");
    assert_eq!((r, c), (3, 4));
    println!(
        "ACCEPTANCE 7 PASS: bias rescue keeps the face peak at {peak:.4} \
         (> {:.2}) at the detected location",
        10.0 * net.eps
    );
}

/// Criterion 8: the detection-rate metric matches an independent counting
/// oracle exactly on 100 randomized mini test sets, and every curve is
/// monotone in the radius.
#[test]
fn acceptance_8_metric_matches_counting_oracle() {
    let mut rng = Rng::seed_from(7800);
    for case in 0..100 {
        let num_joints = 1 + rng.below(4);
        let num_images = 1 + rng.below(8);
        let names: Vec<String> = (0..num_joints).map(|j| format!("j{j}")).collect();
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for i in 0..num_images {
            let torso_h = rng.uniform_in(4.0, 16.0);
            let joints: Vec<JointAnnotation> = (0..num_joints)
                .map(|_| JointAnnotation {
                    u: rng.uniform_in(0.0, 32.0),
                    v: rng.uniform_in(0.0, 32.0),
                    visible: rng.chance(0.85),
                })
                .collect();
            let pj: Vec<(f64, f64)> = joints
                .iter()
                .map(|j| {
                    (
                        j.u + rng.uniform_in(-6.0, 6.0),
                        j.v + rng.uniform_in(-6.0, 6.0),
                    )
                })
                .collect();
            gts.push(Annotation {
                joints,
                torso_box: TorsoBox {
                    u: 0.0,
                    v: 0.0,
                    w: torso_h / 2.0,
                    h: torso_h,
                },
                person_id: 0,
            });
            preds.push(PosePrediction {
                image_id: i,
                joints: pj,
            });
        }
        let radii: Vec<f64> = (0..6).map(|i| i as f64 * 0.12).collect();
        let pairs: Vec<(usize, &Annotation)> = gts.iter().enumerate().collect();
        let curve = detection_rate(&preds, &pairs, &names, &radii).unwrap();

        // independent counting oracle
        for (ri, &r) in radii.iter().enumerate() {
            for j in 0..num_joints {
                let mut hits = 0usize;
                let mut total = 0usize;
                for (img, gt) in gts.iter().enumerate() {
                    if !gt.joints[j].visible {
                        continue;
                    }
                    total += 1;
                    let du = preds[img].joints[j].0 - gt.joints[j].u;
                    let dv = preds[img].joints[j].1 - gt.joints[j].v;
                    if (du * du + dv * dv).sqrt() / gt.torso_box.h <= r {
                        hits += 1;
                    }
                }
                let expect = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
                assert_eq!(
                    curve.rates[ri][j], expect,
                    "case {case} radius {r} joint {j}"
                );
            }
        }
        for j in 0..num_joints {
            for ri in 1..radii.len() {
                assert!(curve.rates[ri][j] >= curve.rates[ri - 1][j], "not monotone");
            }
        }
    }
    println!("ACCEPTANCE 8 PASS: detection metric matches the counting oracle on 100 random sets");
}
