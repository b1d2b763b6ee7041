//! Flat binary container for parameters and cached heat-maps.
//!
//! Layout: magic `PGRF`, u32 version, u32 header length, UTF-8 header text
//! (key=value lines describing the model the tensors belong to), u32 tensor
//! count, then per tensor a (channels, height, width) u32 triple and the raw
//! f64 data, all little-endian. Round trips are bit-exact.

use std::io::Read;
use std::path::Path;

use crate::detector::{ConvStageSpec, DetectorConfig, DetectorNet};
use crate::error::{Error, Result};
use crate::spatial::{JointSet, SpatialNet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PGRF";
const VERSION: u32 = 1;

fn parse_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        detail: detail.into(),
    }
}

pub fn save_tensors(path: &Path, header: &str, tensors: &[Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let (c, h, w) = t.shape();
        buf.extend_from_slice(&(c as u32).to_le_bytes());
        buf.extend_from_slice(&(h as u32).to_le_bytes());
        buf.extend_from_slice(&(w as u32).to_le_bytes());
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<(String, Vec<Tensor>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > raw.len() {
            return Err(parse_err(path, format!("truncated at offset {}", *pos)));
        }
        let s = &raw[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(parse_err(path, "bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]);
    let version = u32_at(take(&mut pos, 4)?);
    if version != VERSION {
        return Err(parse_err(path, format!("unsupported version {version}")));
    }
    let hlen = u32_at(take(&mut pos, 4)?) as usize;
    let header = std::str::from_utf8(take(&mut pos, hlen)?)
        .map_err(|_| parse_err(path, "non-utf8 header"))?
        .to_string();
    let count = u32_at(take(&mut pos, 4)?) as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let c = u32_at(take(&mut pos, 4)?) as usize;
        let h = u32_at(take(&mut pos, 4)?) as usize;
        let w = u32_at(take(&mut pos, 4)?) as usize;
        let n = c * h * w;
        let bytes = take(&mut pos, n * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
            .collect();
        tensors.push(
            Tensor::from_vec(c, h, w, data).map_err(|e| parse_err(path, format!("tensor {i}: {e}")))?,
        );
    }
    if pos != raw.len() {
        return Err(parse_err(path, format!("{} trailing bytes", raw.len() - pos)));
    }
    Ok((header, tensors))
}

/// Tiny key=value header block helper.
pub fn header_get<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    header.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k == key).then_some(v)
    })
}

fn header_req<'a>(path: &Path, header: &'a str, key: &str) -> Result<&'a str> {
    header_get(header, key).ok_or_else(|| parse_err(path, format!("missing header key {key}")))
}

fn detector_header(cfg: &DetectorConfig, joints: &[String]) -> String {
    let stages: Vec<String> = cfg
        .stages
        .iter()
        .map(|s| format!("{}:{}:{}", s.kernel, s.features, if s.pool { "p" } else { "-" }))
        .collect();
    format!(
        "kind=detector\nnum_banks={}\nin_channels={}\nstages={}\nfc_kernel={}\nfc_features={}\nrelu_eps={}\njoints={}\n",
        cfg.num_banks,
        cfg.in_channels,
        stages.join(","),
        cfg.fc_kernel,
        cfg.fc_features,
        cfg.relu_eps,
        joints.join(",")
    )
}

fn parse_detector_header(path: &Path, header: &str) -> Result<(DetectorConfig, Vec<String>)> {
    let num = |k: &str| -> Result<usize> {
        header_req(path, header, k)?
            .parse()
            .map_err(|_| parse_err(path, format!("bad {k}")))
    };
    let joints: Vec<String> = header_req(path, header, "joints")?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut stages = Vec::new();
    for part in header_req(path, header, "stages")?.split(',') {
        let fields: Vec<&str> = part.split(':').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, format!("bad stage spec {part}")));
        }
        stages.push(ConvStageSpec {
            kernel: fields[0].parse().map_err(|_| parse_err(path, "bad stage kernel"))?,
            features: fields[1].parse().map_err(|_| parse_err(path, "bad stage features"))?,
            pool: fields[2] == "p",
        });
    }
    let cfg = DetectorConfig {
        num_banks: num("num_banks")?,
        num_joints: joints.len(),
        in_channels: num("in_channels")?,
        stages,
        fc_kernel: num("fc_kernel")?,
        fc_features: num("fc_features")?,
        relu_eps: header_req(path, header, "relu_eps")?
            .parse()
            .map_err(|_| parse_err(path, "bad relu_eps"))?,
    };
    Ok((cfg, joints))
}

fn spatial_header(net: &SpatialNet) -> String {
    format!(
        "kind=spatial\njoints={}\ntorso={}\nkernel_size={}\nbeta={}\neps={}\n",
        net.joints.names.join(","),
        net.joints.torso_input,
        net.kernel_size,
        net.beta,
        net.eps
    )
}

fn parse_spatial_header(path: &Path, header: &str) -> Result<SpatialNet> {
    let names: Vec<String> = header_req(path, header, "joints")?
        .split(',')
        .map(str::to_string)
        .collect();
    let torso = header_req(path, header, "torso")? == "true";
    let kernel: usize = header_req(path, header, "kernel_size")?
        .parse()
        .map_err(|_| parse_err(path, "bad kernel_size"))?;
    let beta: f64 = header_req(path, header, "beta")?
        .parse()
        .map_err(|_| parse_err(path, "bad beta"))?;
    let eps: f64 = header_req(path, header, "eps")?
        .parse()
        .map_err(|_| parse_err(path, "bad eps"))?;
    let joints = JointSet::new(names, torso).map_err(|e| parse_err(path, e.to_string()))?;
    SpatialNet::new(joints, kernel, beta, eps).map_err(|e| parse_err(path, e.to_string()))
}

/// Detector model file: config header block plus parameters in visit order.
pub fn save_detector(path: &Path, net: &mut DetectorNet, joints: &[String]) -> Result<()> {
    let header = detector_header(&net.config, joints);
    save_tensors(path, &header, &net.param_tensors())
}

pub fn load_detector(path: &Path) -> Result<(DetectorNet, Vec<String>)> {
    let (header, tensors) = load_tensors(path)?;
    if header_get(&header, "kind") != Some("detector") {
        return Err(parse_err(path, "not a detector model"));
    }
    let (cfg, joints) = parse_detector_header(path, &header)?;
    let mut rng = crate::rng::Rng::seed_from(0);
    let mut net = DetectorNet::new(cfg, &mut rng).map_err(|e| parse_err(path, e.to_string()))?;
    net.load_param_tensors(&tensors)
        .map_err(|e| parse_err(path, e.to_string()))?;
    Ok((net, joints))
}

/// Spatial model file: pair table is implicit in the joint order (kernels in
/// (target, source) order, biases packed last).
pub fn save_spatial(path: &Path, net: &SpatialNet) -> Result<()> {
    save_tensors(path, &spatial_header(net), &net.param_tensors())
}

pub fn load_spatial(path: &Path) -> Result<SpatialNet> {
    let (header, tensors) = load_tensors(path)?;
    if header_get(&header, "kind") != Some("spatial") {
        return Err(parse_err(path, "not a spatial model"));
    }
    let mut net = parse_spatial_header(path, &header)?;
    net.load_param_tensors(&tensors)
        .map_err(|e| parse_err(path, e.to_string()))?;
    Ok(net)
}

/// Unified model file: detector then spatial, with both header blocks.
pub fn save_unified(
    path: &Path,
    det: &mut DetectorNet,
    spa: &SpatialNet,
    joints: &[String],
) -> Result<()> {
    let det_params = det.param_tensors();
    let spa_params = spa.param_tensors();
    let header = format!(
        "kind=unified\ndetector_tensors={}\n--detector--\n{}--spatial--\n{}",
        det_params.len(),
        detector_header(&det.config, joints),
        spatial_header(spa)
    );
    let mut all = det_params;
    all.extend(spa_params);
    save_tensors(path, &header, &all)
}

pub fn load_unified(path: &Path) -> Result<(DetectorNet, SpatialNet, Vec<String>)> {
    let (header, tensors) = load_tensors(path)?;
    if header_get(&header, "kind") != Some("unified") {
        return Err(parse_err(path, "not a unified model"));
    }
    let det_count: usize = header_req(path, &header, "detector_tensors")?
        .parse()
        .map_err(|_| parse_err(path, "bad detector_tensors"))?;
    if det_count > tensors.len() {
        return Err(parse_err(path, "detector tensor count out of range"));
    }
    let (det_part, spa_part) = header
        .split_once("--spatial--\n")
        .ok_or_else(|| parse_err(path, "missing spatial section"))?;
    let (cfg, joints) = parse_detector_header(path, det_part)?;
    let mut rng = crate::rng::Rng::seed_from(0);
    let mut det = DetectorNet::new(cfg, &mut rng).map_err(|e| parse_err(path, e.to_string()))?;
    det.load_param_tensors(&tensors[..det_count])
        .map_err(|e| parse_err(path, e.to_string()))?;
    let mut spa = parse_spatial_header(path, spa_part)?;
    spa.load_param_tensors(&tensors[det_count..])
        .map_err(|e| parse_err(path, e.to_string()))?;
    Ok((det, spa, joints))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = Rng::seed_from(1);
        let tensors = vec![
            Tensor::random_normal(2, 3, 4, 1.0, &mut rng),
            Tensor::random_uniform(1, 1, 7, -5.0, 5.0, &mut rng),
            // awkward values must survive exactly
            Tensor::from_vec(1, 1, 4, vec![0.1 + 0.2, f64::MIN_POSITIVE, 1e300, -0.0]).unwrap(),
        ];
        let header = "kind=test\nnum=3\n";
        let dir = std::env::temp_dir().join(format!("posegraph_io_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgrf");
        save_tensors(&path, header, &tensors).unwrap();
        let (h2, t2) = load_tensors(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(t2.len(), tensors.len());
        for (a, b) in tensors.iter().zip(t2.iter()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(header_get(&h2, "kind"), Some("test"));
        assert_eq!(header_get(&h2, "missing"), None);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn model_save_load_roundtrip() {
        use crate::detector::DetectorConfig;
        use crate::spatial::{JointSet, SpatialNet};
        let mut rng = Rng::seed_from(2);
        let joints: Vec<String> = vec!["a".into(), "b".into()];
        let mut cfg = DetectorConfig::desk_default(2);
        cfg.num_banks = 1;
        let mut det = crate::detector::DetectorNet::new(cfg, &mut rng).unwrap();
        let mut spa = SpatialNet::new(JointSet::new(joints.clone(), true).unwrap(), 5, 1.0, 0.01).unwrap();
        spa.set_prior_raw(0, 1, Tensor::random_normal(1, 5, 5, 1.0, &mut rng)).unwrap();

        let dir = std::env::temp_dir().join(format!("posegraph_models_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let dpath = dir.join("detector.model");
        save_detector(&dpath, &mut det, &joints).unwrap();
        let (mut det2, joints2) = load_detector(&dpath).unwrap();
        assert_eq!(joints2, joints);
        assert_eq!(det2.config, det.config);
        assert_eq!(det2.param_tensors(), det.param_tensors());

        let spath = dir.join("spatial.model");
        save_spatial(&spath, &spa).unwrap();
        let spa2 = load_spatial(&spath).unwrap();
        assert_eq!(spa2.joints, spa.joints);
        assert_eq!(spa2.param_tensors(), spa.param_tensors());

        let upath = dir.join("unified.model");
        save_unified(&upath, &mut det, &spa, &joints).unwrap();
        let (mut det3, spa3, joints3) = load_unified(&upath).unwrap();
        assert_eq!(joints3, joints);
        assert_eq!(det3.param_tensors(), det.param_tensors());
        assert_eq!(spa3.param_tensors(), spa.param_tensors());

        // kind mismatch is rejected
        assert!(load_spatial(&dpath).is_err());
        assert!(load_detector(&spath).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupt_files_error() {
        let dir = std::env::temp_dir().join(format!("posegraph_io_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.pgrf");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_tensors(&path).is_err());
        std::fs::write(&path, b"PGRF\x01\x00\x00\x00\xff\xff\xff\xff").unwrap();
        assert!(load_tensors(&path).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
