//! The five subcommands: gen, train, eval, infer, selftest.

use std::path::Path;

use posegraph::conv::{conv2d_direct, conv2d_fft, ConvKernel, Padding};
use posegraph::data::{self, read_dataset, write_dataset, Dataset, SyntheticSceneConfig, TorsoBox};
use posegraph::detector::{extract_joints, DetectorConfig, DetectorNet, HeatMapSet};
use posegraph::error::{Error, Result};
use posegraph::eval::{detection_rate, emit_curves, PosePrediction};
use posegraph::model_io;
use posegraph::nn;
use posegraph::rng::Rng;
use posegraph::spatial::{self, JointSet, SpatialMode, SpatialNet};
use posegraph::tensor::Tensor;
use posegraph::train::{
    self, train_staged, SpatialTrainConfig, StagedOptions, TrainConfig,
};

use crate::config::Config;

fn cli_err(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    command: String,
    seed: u64,
    config_hash: String,
}

fn write_manifest(out: &Path, command: &str, cfg: &Config) -> Result<()> {
    let m = Manifest {
        command: command.to_string(),
        seed: cfg.get_usize("seed")? as u64,
        config_hash: format!("{:016x}", cfg.hash()),
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| cli_err(e.to_string()))?;
    std::fs::write(out.join("manifest.json"), text + "\n")?;
    Ok(())
}

/// For resumable commands: an existing manifest must match the effective
/// config hash exactly, otherwise the run refuses to reuse the directory.
fn check_manifest(out: &Path, command: &str, cfg: &Config) -> Result<bool> {
    let path = out.join("manifest.json");
    if !path.exists() {
        return Ok(false);
    }
    let text = std::fs::read_to_string(&path)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let want = format!("{:016x}", cfg.hash());
    if m.command != command || m.config_hash != want || m.seed != cfg.get_usize("seed")? as u64 {
        return Err(cli_err(format!(
            "output directory {} holds a manifest for a different run \
             (command {} seed {} hash {}); refusing to resume",
            out.display(),
            m.command,
            m.seed,
            m.config_hash
        )));
    }
    Ok(true)
}

fn echo_config(out: &Path, cfg: &Config) -> Result<()> {
    std::fs::write(out.join("effective.ini"), cfg.canonical_ini())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub fn cmd_gen(cfg: &Config, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut scene = SyntheticSceneConfig::desk_default();
    let size = cfg.get_usize("gen.image_size")?;
    scene.width = size;
    scene.height = size;
    scene.num_distractors = cfg.get_usize("gen.distractors")?;
    scene.noise = cfg.get_f64("gen.noise")?;
    scene.min_separation = cfg.get_f64("gen.min_separation")?;
    let maxval = cfg.get_usize("gen.maxval")?;
    if maxval != 255 && maxval != 65535 {
        return Err(cli_err("gen.maxval must be 255 or 65535"));
    }
    scene.quant_maxval = maxval as u16;
    let count = cfg.get_usize("gen.count")?;
    let seed = cfg.get_usize("seed")? as u64;
    let ds = data::generate_dataset(&scene, count, seed)?;
    write_dataset(out, &ds, scene.quant_maxval)?;
    write_manifest(out, "gen", cfg)?;
    echo_config(out, cfg)?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn detector_config_from(cfg: &Config, num_joints: usize) -> Result<DetectorConfig> {
    let mut dcfg = match cfg.get("detector.preset") {
        "desk" => DetectorConfig::desk_default(num_joints),
        "large" => DetectorConfig::large_preset(num_joints),
        other => return Err(cli_err(format!("unknown detector.preset `{other}`"))),
    };
    dcfg.num_banks = cfg.get_usize("detector.banks")?;
    Ok(dcfg)
}

fn spatial_config_from(cfg: &Config) -> Result<SpatialTrainConfig> {
    Ok(SpatialTrainConfig {
        kernel_size: match cfg.get("spatial.kernel_size") {
            "auto" => None,
            v => Some(v.parse().map_err(|_| cli_err("spatial.kernel_size: bad value"))?),
        },
        beta: cfg.get_f64("spatial.beta")?,
        eps: cfg.get_f64("spatial.eps")?,
        use_torso: cfg.get_bool("spatial.torso")?,
    })
}

fn train_config_from(cfg: &Config, threads: usize) -> Result<TrainConfig> {
    Ok(TrainConfig {
        lr: cfg.get_f64("train.lr")?,
        momentum: cfg.get_f64("train.momentum")?,
        batch_size: cfg.get_usize("train.batch")?,
        epochs: (
            cfg.get_usize("train.epochs1")?,
            cfg.get_usize("train.epochs2")?,
            cfg.get_usize("train.epochs3")?,
        ),
        spatial_lr: match cfg.get("train.spatial_lr") {
            "auto" => None,
            v => Some(v.parse().map_err(|_| cli_err("train.spatial_lr: bad value"))?),
        },
        stage3_lr: match cfg.get("train.stage3_lr") {
            "auto" => None,
            v => Some(v.parse().map_err(|_| cli_err("train.stage3_lr: bad value"))?),
        },
        target_sigma: cfg.get_f64("train.sigma")?,
        flip_prob: cfg.get_f64("train.flip_prob")?,
        scale_range: (cfg.get_f64("train.scale_min")?, cfg.get_f64("train.scale_max")?),
        seed: cfg.get_usize("seed")? as u64,
        radii: cfg.get_f64_list("train.radii")?,
        threads,
    })
}

/// Deterministic split: the trailing fraction becomes validation.
fn split_dataset(ds: Dataset, fraction: f64) -> (Dataset, Dataset) {
    let n = ds.len();
    let val_n = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let cut = n - val_n;
    let val = Dataset {
        joint_names: ds.joint_names.clone(),
        symmetry: ds.symmetry.clone(),
        images: ds.images[cut..].to_vec(),
        annotations: ds.annotations[cut..].to_vec(),
    };
    let train = Dataset {
        joint_names: ds.joint_names,
        symmetry: ds.symmetry,
        images: ds.images[..cut].to_vec(),
        annotations: ds.annotations[..cut].to_vec(),
    };
    (train, val)
}

pub fn cmd_train(cfg: &Config, out: &Path, threads: usize) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let resuming = check_manifest(out, "train", cfg)?;
    let ds_path = cfg.get("train.dataset");
    if ds_path.is_empty() {
        return Err(cli_err("train.dataset must point at a dataset directory"));
    }
    let full = read_dataset(Path::new(ds_path))?;
    let (train_ds, val_ds) = match cfg.get("train.val_dataset") {
        "" => split_dataset(full, cfg.get_f64("train.val_fraction")?),
        vpath => (full, read_dataset(Path::new(vpath))?),
    };
    let dcfg = detector_config_from(cfg, train_ds.joint_names.len())?;
    let scfg = spatial_config_from(cfg)?;
    let tcfg = train_config_from(cfg, threads)?;

    let detector_path = out.join("detector.model");
    let spatial_path = out.join("spatial.model");
    let mut options = StagedOptions {
        cache_dir: Some(out.join("heatcache")),
        ..Default::default()
    };
    if resuming && detector_path.exists() {
        let (net, joints) = model_io::load_detector(&detector_path)?;
        if joints != train_ds.joint_names {
            return Err(cli_err("resumed detector joint set differs from the dataset"));
        }
        println!("resuming: stage 1 artifact found, skipping detector training");
        options.initial_detector = Some(net);
        if spatial_path.exists() {
            println!("resuming: stage 2 artifact found, skipping spatial training");
            options.initial_spatial = Some(model_io::load_spatial(&spatial_path)?);
        }
    } else {
        write_manifest(out, "train", cfg)?;
    }
    echo_config(out, cfg)?;

    let mut result = train_staged(&train_ds, &val_ds, &dcfg, &scfg, &tcfg, &options)?;
    if options.initial_detector.is_none() {
        model_io::save_detector(&detector_path, &mut result.detector, &train_ds.joint_names)?;
    }
    if options.initial_spatial.is_none() {
        model_io::save_spatial(&spatial_path, &result.spatial)?;
    }
    model_io::save_unified(
        &out.join("unified.model"),
        &mut result.unified_detector,
        &result.unified_spatial,
        &train_ds.joint_names,
    )?;
    train::write_metrics_csv(&out.join("metrics.csv"), &result.metrics, &tcfg.radii)?;
    println!(
        "trained on {} images ({} val); artifacts in {}",
        train_ds.len(),
        val_ds.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

enum Model {
    Detector(DetectorNet, Vec<String>),
    Unified(DetectorNet, SpatialNet, Vec<String>),
}

fn load_model(path: &Path) -> Result<Model> {
    let (header, _) = model_io::load_tensors(path)?;
    match model_io::header_get(&header, "kind") {
        Some("detector") => {
            let (net, joints) = model_io::load_detector(path)?;
            Ok(Model::Detector(net, joints))
        }
        Some("unified") => {
            let (det, spa, joints) = model_io::load_unified(path)?;
            Ok(Model::Unified(det, spa, joints))
        }
        other => Err(cli_err(format!("{}: unsupported model kind {other:?}", path.display()))),
    }
}

pub fn cmd_eval(cfg: &Config, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let ds = read_dataset(Path::new(cfg.get("eval.dataset")))?;
    let radii = cfg.get_f64_list("eval.radii")?;
    let sigma = cfg.get_f64("train.sigma")?;
    let model = load_model(Path::new(cfg.get("eval.model")))?;
    let curve = match &model {
        Model::Detector(net, joints) => {
            ensure_joints(joints, &ds)?;
            train::evaluate_detector(net, &ds, &radii)?
        }
        Model::Unified(det, spa, joints) => {
            ensure_joints(joints, &ds)?;
            train::evaluate_composed(det, spa, &ds, sigma, &radii)?
        }
    };
    let path = out.join("curves.csv");
    emit_curves(&curve, &path, cfg.get("eval.tag"))?;
    write_manifest(out, "eval", cfg)?;
    echo_config(out, cfg)?;
    for (i, r) in curve.radii.iter().enumerate() {
        println!("det_rate@{r} = {:.4}", curve.average[i]);
    }
    println!("curves written to {}", path.display());
    Ok(())
}

fn ensure_joints(model_joints: &[String], ds: &Dataset) -> Result<()> {
    if model_joints != ds.joint_names.as_slice() {
        return Err(cli_err(format!(
            "model joints {model_joints:?} do not match dataset joints {:?}",
            ds.joint_names
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(serde::Serialize)]
struct InferJoint {
    name: String,
    u: f64,
    v: f64,
    confidence: f64,
}

#[derive(serde::Serialize)]
struct InferOutput {
    model: String,
    joints: Vec<InferJoint>,
}

fn parse_torso(cfg: &Config) -> Result<Option<TorsoBox>> {
    let raw = cfg.get("infer.torso");
    if raw.is_empty() {
        return Ok(None);
    }
    let parts: Vec<f64> = raw
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| cli_err("infer.torso: expected u,v,w,h")))
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        return Err(cli_err("infer.torso: expected u,v,w,h"));
    }
    Ok(Some(TorsoBox {
        u: parts[0],
        v: parts[1],
        w: parts[2],
        h: parts[3],
    }))
}

pub fn cmd_infer(cfg: &Config, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let image = read_pgm_image(Path::new(cfg.get("infer.image")))?;
    let model = load_model(Path::new(cfg.get("infer.model")))?;
    let sigma = cfg.get_f64("train.sigma")?;
    let (heat, joints, tag) = match &model {
        Model::Detector(net, joints) => (net.infer(&image)?, joints.clone(), "detector"),
        Model::Unified(det, spa, joints) => {
            let hm = det.infer(&image)?;
            let torso = if spa.joints.torso_input {
                let tb = parse_torso(cfg)?.ok_or_else(|| {
                    cli_err("this unified model needs infer.torso=u,v,w,h for the torso map")
                })?;
                let ann = posegraph::data::Annotation {
                    joints: vec![],
                    torso_box: tb,
                    person_id: 0,
                };
                Some(data::render_torso_map(
                    &ann,
                    hm.maps.height(),
                    hm.maps.width(),
                    hm.stride,
                    sigma,
                )?)
            } else {
                None
            };
            let unaries = train::compose_unaries(&hm, torso.as_ref())?;
            let mut spa = spa.clone();
            let maps = spa.forward(&unaries)?;
            (
                HeatMapSet {
                    maps,
                    stride: hm.stride,
                },
                joints.clone(),
                "unified",
            )
        }
    };
    if !cfg.get("infer.dump_heat").is_empty() {
        model_io::save_tensors(
            Path::new(cfg.get("infer.dump_heat")),
            &format!("kind=heatdump\nstride={}\n", heat.stride),
            std::slice::from_ref(&heat.maps),
        )?;
    }
    let preds = extract_joints(&heat)?;
    let output = InferOutput {
        model: tag.to_string(),
        joints: preds
            .iter()
            .zip(joints.iter())
            .map(|(p, name)| InferJoint {
                name: name.clone(),
                u: p.u,
                v: p.v,
                confidence: p.confidence,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&output).map_err(|e| cli_err(e.to_string()))? + "\n";
    std::fs::write(out.join("infer.json"), &text)?;
    print!("{text}");
    Ok(())
}

fn read_pgm_image(path: &Path) -> Result<Tensor> {
    data::read_pgm_file(path)
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

/// Dataset-free verification suite: oracle equivalences and gradient checks.
/// The `POSEGRAPH_SELFTEST_SABOTAGE_FFT` env var perturbs the FFT result
/// before comparison; it exists so tests can confirm this suite actually
/// detects a broken FFT path.
pub fn cmd_selftest() -> Result<bool> {
    let mut all_ok = true;
    let mut check = |name: &str, result: Result<bool>| {
        let ok = matches!(result, Ok(true));
        if !ok {
            all_ok = false;
        }
        match result {
            Ok(true) => println!("check {name} ... ok"),
            Ok(false) => println!("check {name} ... FAIL"),
            Err(e) => println!("check {name} ... FAIL ({e})"),
        }
    };

    let sabotage = std::env::var("POSEGRAPH_SELFTEST_SABOTAGE_FFT").is_ok();

    check("fft-vs-direct convolution", {
        let mut rng = Rng::seed_from(0xFF7);
        let mut worst = 0.0f64;
        for &(size, k) in &[(16usize, 5usize), (32, 17), (32, 65)] {
            let input = Tensor::random_uniform(1, size, size, -1.0, 1.0, &mut rng);
            let kdata: Vec<f64> = (0..k * k).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let kernel = ConvKernel::from_vec(k, k, kdata)?;
            let pad = if k > size { Padding::Full } else { Padding::Same };
            let a = conv2d_direct(&input, &kernel, pad)?;
            let mut b = conv2d_fft(&input, &kernel, pad)?;
            if sabotage {
                b = b.add_scalar(1e-3); // test hook, see doc comment
            }
            worst = worst.max(a.max_abs_diff(&b)?);
        }
        Ok(worst < 1e-9)
    });

    check("conv layer gradients", {
        let mut rng = Rng::seed_from(0xC0);
        let mut layer = nn::ConvLayer::new(2, 3, 3, 3, Padding::Valid);
        layer.init_random(&mut rng);
        let x = Tensor::random_uniform(2, 5, 5, -1.0, 1.0, &mut rng);
        Ok(nn::grad_check_layer(&mut layer, &x, 1)? < 1e-4)
    });

    check("softplus/relu stack gradients", {
        let mut rng = Rng::seed_from(0xC1);
        let mut conv = nn::ConvLayer::new(1, 2, 3, 3, Padding::Same);
        conv.init_random(&mut rng);
        let mut stack = nn::Sequential::new(vec![
            Box::new(conv),
            Box::new(nn::SoftPlusBeta::new(1.0)?),
        ]);
        let x = Tensor::random_uniform(1, 5, 5, -1.0, 1.0, &mut rng);
        Ok(nn::grad_check_layer(&mut stack, &x, 2)? < 1e-4)
    });

    check("spatial network gradients", {
        let mut rng = Rng::seed_from(0xC2);
        let joints = JointSet::new(vec!["a".into(), "b".into()], false)?;
        let mut net = SpatialNet::new(joints, 5, 1.0, 0.01)?;
        for a in 0..2 {
            for v in 0..2 {
                net.set_prior_raw(a, v, Tensor::random_uniform(1, 5, 5, -3.0, 0.5, &mut rng))?;
            }
        }
        let unaries = Tensor::random_uniform(2, 6, 6, 0.05, 1.0, &mut rng);
        struct S(SpatialNet);
        impl nn::Layer for S {
            fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
                self.0.forward(x)
            }
            fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
                self.0.backward(g)
            }
            fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &mut Tensor)) {
                self.0.visit_params(f);
            }
        }
        let mut wrapped = S(net);
        Ok(nn::grad_check_layer(&mut wrapped, &unaries, 3)? < 1e-4)
    });

    check("bypass equals sum-product oracle", {
        let mut rng = Rng::seed_from(0xC3);
        let joints = JointSet::new(vec!["a".into(), "b".into()], false)?;
        let mut net = SpatialNet::new(joints, 3, 1.0, 0.01)?;
        for a in 0..2 {
            for v in 0..2 {
                net.set_prior_raw(a, v, Tensor::random_uniform(1, 3, 3, 0.0, 1.0, &mut rng))?;
                net.set_bias_raw(a, v, rng.uniform_in(0.01, 0.2));
            }
        }
        let unaries = Tensor::random_uniform(2, 6, 6, 0.05, 1.0, &mut rng);
        let bypass = net.forward_mode(&unaries, SpatialMode::Bypass)?;
        let oracle = spatial::mrf_oracle(&unaries, &net.raw_as_oracle_priors()?)?;
        let mut worst = 0.0f64;
        for a in 0..2 {
            for i in 0..36 {
                let unnorm = oracle.marginals.channel(a)[i] * oracle.partition[a];
                let rel = (bypass.channel(a)[i] - unnorm).abs() / unnorm.abs().max(1e-300);
                worst = worst.max(rel);
            }
        }
        Ok(worst < 1e-10)
    });

    check("dense equals sliding window (single bank)", {
        let mut rng = Rng::seed_from(0xC4);
        let mut dcfg = DetectorConfig::desk_default(2);
        dcfg.num_banks = 1;
        let net = DetectorNet::new(dcfg, &mut rng)?;
        let img = Tensor::random_uniform(1, 32, 32, 0.0, 1.0, &mut rng);
        let dense = net.infer(&img)?;
        let slid = net.sliding_window_forward(&img)?;
        Ok(dense.maps.max_abs_diff(&slid.maps)? < 1e-6)
    });

    check("nesterov converges on a quadratic bowl", {
        let (lr, mu) = (0.1, 0.9);
        let mut x = [1.0f64];
        let mut v = [0.0f64];
        for _ in 0..100 {
            let g = [2.0 * (x[0] + mu * v[0])];
            train::nesterov_step(&mut x, &mut v, &g, lr, mu)?;
        }
        Ok(x[0].abs() < 1e-3)
    });

    check("detection metric counting", {
        use posegraph::data::{Annotation, JointAnnotation};
        let names = vec!["a".to_string()];
        let gts: Vec<Annotation> = (0..4)
            .map(|_| Annotation {
                joints: vec![JointAnnotation { u: 0.0, v: 0.0, visible: true }],
                torso_box: TorsoBox { u: 0.0, v: 0.0, w: 5.0, h: 10.0 },
                person_id: 0,
            })
            .collect();
        let errs = [1.0, 2.0, 4.0, 8.0];
        let preds: Vec<PosePrediction> = errs
            .iter()
            .enumerate()
            .map(|(i, &e)| PosePrediction {
                image_id: i,
                joints: vec![(e, 0.0)],
            })
            .collect();
        let pairs: Vec<(usize, &Annotation)> = gts.iter().enumerate().collect();
        let curve = detection_rate(&preds, &pairs, &names, &[0.25])?;
        Ok((curve.rates[0][0] - 0.5).abs() < 1e-12)
    });

    Ok(all_ok)
}
