//! Synthetic articulated-skeleton scenes and dataset I/O.
//!
//! Each scene renders one labeled stick figure plus optional unlabeled
//! distractor figures drawn from the same skeleton distribution, which is
//! what makes the torso-map input channel earn its keep: the per-joint
//! evidence alone cannot tell the figures apart. Images are grayscale PGM
//! (P5), annotations one JSON object per line with a header line carrying
//! the joint order and the left/right symmetry table.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct JointAnnotation {
    /// Column coordinate, pixels.
    pub u: f64,
    /// Row coordinate, pixels.
    pub v: f64,
    pub visible: bool,
}

/// Axis-aligned torso box: top-left corner plus size, pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct TorsoBox {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub h: f64,
}

impl TorsoBox {
    pub fn center(&self) -> (f64, f64) {
        (self.u + self.w / 2.0, self.v + self.h / 2.0)
    }

    pub fn height(&self) -> f64 {
        self.h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    /// Aligned with the dataset's joint_names order.
    pub joints: Vec<JointAnnotation>,
    pub torso_box: TorsoBox,
    pub person_id: u32,
}

/// One joint of the kinematic chain. `parent` indexes a previous joint;
/// `None` attaches to the torso root. Angles are absolute radians with 0
/// pointing right (+u) and pi/2 pointing down (+v).
#[derive(Clone, Debug, PartialEq)]
pub struct LimbSpec {
    pub name: String,
    pub parent: Option<usize>,
    pub length: (f64, f64),
    pub angle: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSpec {
    pub joints: Vec<LimbSpec>,
    /// Left/right joint name pairs swapped under horizontal flips.
    pub symmetry: Vec<(String, String)>,
}

fn deg(d: f64) -> f64 {
    d * std::f64::consts::PI / 180.0
}

impl SkeletonSpec {
    /// Seven upper-body joints: head, shoulders, elbows, wrists.
    pub fn upper_body() -> SkeletonSpec {
        let limb = |name: &str, parent: Option<usize>, len: (f64, f64), ang: (f64, f64)| LimbSpec {
            name: name.into(),
            parent,
            length: len,
            angle: ang,
        };
        SkeletonSpec {
            joints: vec![
                limb("head", None, (5.0, 6.5), (deg(-110.0), deg(-70.0))),
                limb("l_shoulder", None, (3.2, 4.2), (deg(160.0), deg(200.0))),
                limb("r_shoulder", None, (3.2, 4.2), (deg(-20.0), deg(20.0))),
                limb("l_elbow", Some(1), (3.5, 4.8), (deg(100.0), deg(220.0))),
                limb("r_elbow", Some(2), (3.5, 4.8), (deg(-40.0), deg(80.0))),
                limb("l_wrist", Some(3), (3.2, 4.5), (deg(30.0), deg(270.0))),
                limb("r_wrist", Some(4), (3.2, 4.5), (deg(-90.0), deg(150.0))),
            ],
            symmetry: vec![
                ("l_shoulder".into(), "r_shoulder".into()),
                ("l_elbow".into(), "r_elbow".into()),
                ("l_wrist".into(), "r_wrist".into()),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, j) in self.joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= i {
                    return Err(arg_err!("joint {i} parent {p} must come earlier (tree order)"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneConfig {
    pub width: usize,
    pub height: usize,
    pub skeleton: SkeletonSpec,
    pub num_distractors: usize,
    /// Std of additive Gaussian background noise.
    pub noise: f64,
    pub limb_thickness: f64,
    pub intensity: f64,
    /// Labeled joints stay at least this far from the border.
    pub margin: f64,
    /// Minimum distance between the labeled root and distractor roots.
    pub min_separation: f64,
    pub figure_scale: (f64, f64),
    /// Torso box size at scale 1.
    pub torso_size: (f64, f64),
    /// Pixel values snap to this grid (PGM maxval), so writes are lossless.
    pub quant_maxval: u16,
}

impl SyntheticSceneConfig {
    pub fn desk_default() -> SyntheticSceneConfig {
        SyntheticSceneConfig {
            width: 32,
            height: 32,
            skeleton: SkeletonSpec::upper_body(),
            num_distractors: 0,
            noise: 0.02,
            limb_thickness: 1.4,
            intensity: 1.0,
            margin: 1.5,
            min_separation: 11.0,
            figure_scale: (0.85, 1.15),
            torso_size: (7.0, 12.0),
            quant_maxval: 255,
        }
    }
}

struct Figure {
    root: (f64, f64),
    scale: f64,
    /// Joint positions (u, v), aligned with the skeleton order.
    joints: Vec<(f64, f64)>,
}

fn resolve_figure(
    skeleton: &SkeletonSpec,
    root: (f64, f64),
    scale: f64,
    rng: &mut Rng,
) -> Figure {
    let mut joints = Vec::with_capacity(skeleton.joints.len());
    for spec in &skeleton.joints {
        let (pu, pv) = match spec.parent {
            None => root,
            Some(p) => joints[p],
        };
        let len = scale * rng.uniform_in(spec.length.0, spec.length.1);
        let ang = rng.uniform_in(spec.angle.0, spec.angle.1);
        joints.push((pu + len * ang.cos(), pv + len * ang.sin()));
    }
    Figure { root, scale, joints }
}

fn dist_point_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn render_figure(img: &mut Tensor, fig: &Figure, skeleton: &SkeletonSpec, cfg: &SyntheticSceneConfig) {
    let (h, w) = (img.height(), img.width());
    let half = cfg.limb_thickness * fig.scale / 2.0;
    let mut splat = |a: (f64, f64), b: (f64, f64), radius: f64| {
        let lo_u = (a.0.min(b.0) - radius - 1.0).floor().max(0.0) as usize;
        let hi_u = (a.0.max(b.0) + radius + 1.0).ceil().min((w - 1) as f64) as usize;
        let lo_v = (a.1.min(b.1) - radius - 1.0).floor().max(0.0) as usize;
        let hi_v = (a.1.max(b.1) + radius + 1.0).ceil().min((h - 1) as f64) as usize;
        for r in lo_v..=hi_v {
            for c in lo_u..=hi_u {
                let d = dist_point_segment((c as f64, r as f64), a, b);
                let coverage = (0.5 + radius - d).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let v = cfg.intensity * coverage;
                    if v > img.at(0, r, c) {
                        img.set(0, r, c, v);
                    }
                }
            }
        }
    };
    for (i, spec) in skeleton.joints.iter().enumerate() {
        let parent = match spec.parent {
            None => fig.root,
            Some(p) => fig.joints[p],
        };
        splat(parent, fig.joints[i], half);
        // joint dot, slightly larger for the head
        let dot = if skeleton.joints[i].name == "head" { half * 1.8 } else { half * 1.1 };
        splat(fig.joints[i], fig.joints[i], dot);
    }
}

/// Render one labeled figure plus distractors; the annotation covers only the
/// labeled figure. Deterministic for a given rng state.
pub fn generate_scene(cfg: &SyntheticSceneConfig, rng: &mut Rng) -> Result<(Tensor, Annotation)> {
    cfg.skeleton.validate()?;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let m = cfg.margin;
    // the root needs clearance for the whole figure
    let reach: f64 = 8.0;
    let labeled = (0..50)
        .find_map(|_| {
            let scale = rng.uniform_in(cfg.figure_scale.0, cfg.figure_scale.1);
            let root = (
                rng.uniform_in(m + reach * 0.6, w - 1.0 - m - reach * 0.6),
                rng.uniform_in(m + reach * 0.6, h - 1.0 - m - reach * 0.6),
            );
            let fig = resolve_figure(&cfg.skeleton, root, scale, rng);
            let ok = fig
                .joints
                .iter()
                .all(|&(u, v)| u >= m && u <= w - 1.0 - m && v >= m && v <= h - 1.0 - m);
            ok.then_some(fig)
        })
        .ok_or_else(|| arg_err!("unplaceable labeled figure after 50 tries"))?;

    let mut img = Tensor::zeros(1, cfg.height, cfg.width);
    render_figure(&mut img, &labeled, &cfg.skeleton, cfg);

    for _ in 0..cfg.num_distractors {
        let fig = (0..50).find_map(|_| {
            let scale = rng.uniform_in(cfg.figure_scale.0, cfg.figure_scale.1);
            let root = (rng.uniform_in(m, w - 1.0 - m), rng.uniform_in(m, h - 1.0 - m));
            let du = root.0 - labeled.root.0;
            let dv = root.1 - labeled.root.1;
            ((du * du + dv * dv).sqrt() >= cfg.min_separation)
                .then(|| resolve_figure(&cfg.skeleton, root, scale, rng))
        });
        match fig {
            Some(f) => render_figure(&mut img, &f, &cfg.skeleton, cfg),
            None => return Err(arg_err!("unplaceable distractor after 50 tries")),
        }
    }

    if cfg.noise > 0.0 {
        for v in img.data_mut() {
            *v += cfg.noise * rng.normal();
        }
    }
    let q = cfg.quant_maxval as f64;
    for v in img.data_mut() {
        *v = (v.clamp(0.0, 1.0) * q).round() / q;
    }

    let torso_box = TorsoBox {
        u: labeled.root.0 - cfg.torso_size.0 * labeled.scale / 2.0,
        v: labeled.root.1 - cfg.torso_size.1 * labeled.scale / 2.0,
        w: cfg.torso_size.0 * labeled.scale,
        h: cfg.torso_size.1 * labeled.scale,
    };
    let ann = Annotation {
        joints: labeled
            .joints
            .iter()
            .map(|&(u, v)| JointAnnotation { u, v, visible: true })
            .collect(),
        torso_box,
        person_id: 0,
    };
    Ok((img, ann))
}

/// Gaussian bump (peak 1 at the nearest cell center) on the heat-map grid;
/// sigma is measured in heat-map cells.
pub fn gaussian_cell_map(
    cells_h: usize,
    cells_w: usize,
    stride: usize,
    sigma_cells: f64,
    u: f64,
    v: f64,
) -> Tensor {
    let half = (stride - 1) as f64 / 2.0;
    let cr = ((v - half) / stride as f64)
        .round()
        .clamp(0.0, (cells_h - 1) as f64);
    let cc = ((u - half) / stride as f64)
        .round()
        .clamp(0.0, (cells_w - 1) as f64);
    let mut out = Tensor::zeros(1, cells_h, cells_w);
    for r in 0..cells_h {
        for c in 0..cells_w {
            let dr = r as f64 - cr;
            let dc = c as f64 - cc;
            out.set(0, r, c, (-(dr * dr + dc * dc) / (2.0 * sigma_cells * sigma_cells)).exp());
        }
    }
    out
}

/// The extra unary channel marking the labeled person: a Gaussian bump at the
/// torso-box center on the heat-map grid.
pub fn render_torso_map(
    ann: &Annotation,
    cells_h: usize,
    cells_w: usize,
    stride: usize,
    sigma_cells: f64,
) -> Result<Tensor> {
    if ann.torso_box.h <= 0.0 || ann.torso_box.w <= 0.0 {
        return Err(arg_err!("torso box must have positive size"));
    }
    let (u, v) = ann.torso_box.center();
    Ok(gaussian_cell_map(cells_h, cells_w, stride, sigma_cells, u, v))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub joint_names: Vec<String>,
    /// Index pairs swapped under horizontal flips.
    pub symmetry: Vec<(usize, usize)>,
    pub images: Vec<Tensor>,
    pub annotations: Vec<Annotation>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Generate `count` scenes with per-scene forked rng streams.
pub fn generate_dataset(cfg: &SyntheticSceneConfig, count: usize, seed: u64) -> Result<Dataset> {
    let base = Rng::seed_from(seed);
    let joint_names: Vec<String> = cfg.skeleton.joints.iter().map(|j| j.name.clone()).collect();
    let name_index = |n: &str| -> Result<usize> {
        joint_names
            .iter()
            .position(|j| j == n)
            .ok_or_else(|| arg_err!("symmetry names unknown joint {n}"))
    };
    let mut symmetry = Vec::new();
    for (a, b) in &cfg.skeleton.symmetry {
        symmetry.push((name_index(a)?, name_index(b)?));
    }
    let mut images = Vec::with_capacity(count);
    let mut annotations = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = base.fork(i as u64);
        let (img, ann) = generate_scene(cfg, &mut rng)?;
        images.push(img);
        annotations.push(ann);
    }
    Ok(Dataset {
        joint_names,
        symmetry,
        images,
        annotations,
    })
}

// ---------------------------------------------------------------------------
// PGM + JSON-lines dataset files
// ---------------------------------------------------------------------------

fn write_pgm(path: &Path, img: &Tensor, maxval: u16) -> Result<()> {
    let (ch, h, w) = img.shape();
    if ch != 1 {
        return Err(arg_err!("PGM writer expects 1 channel, got {ch}"));
    }
    let mut buf = Vec::with_capacity(32 + h * w * 2);
    write!(&mut buf, "P5\n{w} {h}\n{maxval}\n")?;
    let q = maxval as f64;
    for &x in img.data() {
        let v = (x.clamp(0.0, 1.0) * q).round() as u32;
        if maxval > 255 {
            buf.extend_from_slice(&(v as u16).to_be_bytes());
        } else {
            buf.push(v as u8);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn parse_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Read a single binary PGM (P5) file into a 1-channel tensor in [0, 1].
pub fn read_pgm_file(path: &Path) -> Result<Tensor> {
    read_pgm(path)
}

fn read_pgm(path: &Path) -> Result<Tensor> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    // header: magic, width, height, maxval separated by whitespace/comments
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < raw.len() && (raw[pos].is_ascii_whitespace() || raw[pos] == b'#') {
            if raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, "truncated PGM header"));
        }
        fields.push(
            std::str::from_utf8(&raw[start..pos])
                .map_err(|_| parse_err(path, "non-utf8 header"))?
                .to_string(),
        );
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P5" {
        return Err(parse_err(path, format!("expected P5, got {}", fields[0])));
    }
    let w: usize = fields[1].parse().map_err(|_| parse_err(path, "bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| parse_err(path, "bad height"))?;
    let maxval: u32 = fields[3].parse().map_err(|_| parse_err(path, "bad maxval"))?;
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err(path, format!("maxval {maxval} out of range")));
    }
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let need = h * w * bytes_per;
    if raw.len() < pos + need {
        return Err(parse_err(path, format!("pixel data truncated: {} < {need}", raw.len() - pos)));
    }
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let v = if bytes_per == 2 {
            u16::from_be_bytes([raw[pos + 2 * i], raw[pos + 2 * i + 1]]) as f64
        } else {
            raw[pos + i] as f64
        };
        data.push(v / maxval as f64);
    }
    Tensor::from_vec(1, h, w, data)
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    joint_names: Vec<String>,
    symmetry: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    image: String,
    person_id: u32,
    /// [u, v, w, h]
    torso_box: [f64; 4],
    joints: std::collections::BTreeMap<String, (f64, f64, bool)>,
}

pub fn image_file_name(index: usize) -> String {
    format!("img_{index:05}.pgm")
}

/// Directory layout: `images/img_#####.pgm` plus `annotations.jsonl` whose
/// first line is a header with the joint order and symmetry table.
pub fn write_dataset(dir: &Path, ds: &Dataset, maxval: u16) -> Result<()> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut out = String::new();
    let header = HeaderLine {
        joint_names: ds.joint_names.clone(),
        symmetry: ds
            .symmetry
            .iter()
            .map(|&(a, b)| (ds.joint_names[a].clone(), ds.joint_names[b].clone()))
            .collect(),
    };
    out.push_str(&serde_json::to_string(&header).map_err(|e| arg_err!("header: {e}"))?);
    out.push('\n');
    for (i, (img, ann)) in ds.images.iter().zip(ds.annotations.iter()).enumerate() {
        let name = image_file_name(i);
        write_pgm(&img_dir.join(&name), img, maxval)?;
        let line = AnnotationLine {
            image: format!("images/{name}"),
            person_id: ann.person_id,
            torso_box: [ann.torso_box.u, ann.torso_box.v, ann.torso_box.w, ann.torso_box.h],
            joints: ds
                .joint_names
                .iter()
                .zip(ann.joints.iter())
                .map(|(n, j)| (n.clone(), (j.u, j.v, j.visible)))
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| arg_err!("annotation {i}: {e}"))?);
        out.push('\n');
    }
    std::fs::write(dir.join("annotations.jsonl"), out)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let ann_path = dir.join("annotations.jsonl");
    let text = std::fs::read_to_string(&ann_path)?;
    let mut lines = text.lines();
    let header: HeaderLine = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| parse_err(&ann_path, "missing header line"))?,
    )
    .map_err(|e| parse_err(&ann_path, format!("header: {e}")))?;
    let joint_names = header.joint_names;
    let mut symmetry = Vec::new();
    for (a, b) in &header.symmetry {
        let find = |n: &str| {
            joint_names
                .iter()
                .position(|j| j == n)
                .ok_or_else(|| parse_err(&ann_path, format!("symmetry references unknown joint {n}")))
        };
        symmetry.push((find(a)?, find(b)?));
    }
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AnnotationLine = serde_json::from_str(line)
            .map_err(|e| parse_err(&ann_path, format!("line {}: {e}", i + 2)))?;
        let img = read_pgm(&dir.join(&parsed.image))?;
        let mut joints = Vec::with_capacity(joint_names.len());
        for n in &joint_names {
            let &(u, v, visible) = parsed.joints.get(n).ok_or_else(|| {
                parse_err(&ann_path, format!("image {}: missing joint {n}", parsed.image))
            })?;
            joints.push(JointAnnotation { u, v, visible });
        }
        let [bu, bv, bw, bh] = parsed.torso_box;
        if bh <= 0.0 {
            return Err(parse_err(
                &ann_path,
                format!("image {}: torso_box height must be positive", parsed.image),
            ));
        }
        annotations.push(Annotation {
            joints,
            torso_box: TorsoBox { u: bu, v: bv, w: bw, h: bh },
            person_id: parsed.person_id,
        });
        images.push(img);
    }
    Ok(Dataset {
        joint_names,
        symmetry,
        images,
        annotations,
    })
}
