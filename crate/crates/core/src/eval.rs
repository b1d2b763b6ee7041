//! Detection-rate metric: the fraction of test joints whose predicted
//! location falls within a radius of the ground truth, with the radius
//! normalized by each sample's torso height.

use std::path::Path;

use crate::data::Annotation;
use crate::error::{arg_err, Error, Result};

/// Predicted joint locations for one image, aligned with the dataset's joint
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct PosePrediction {
    pub image_id: usize,
    /// (u, v) per joint.
    pub joints: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionCurve {
    pub radii: Vec<f64>,
    pub joint_names: Vec<String>,
    /// rates[radius_idx][joint_idx]
    pub rates: Vec<Vec<f64>>,
    /// Pooled over all visible joints, per radius.
    pub average: Vec<f64>,
}

/// Default radius grid: 0.0 to 0.5 in steps of 0.05.
pub fn default_radii() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.05).collect()
}

/// Count, for every radius and joint, the fraction of images whose predicted
/// location lies within radius * torso_height of the ground truth. Invisible
/// joints are excluded from numerator and denominator. Predictions and
/// annotations align by image id.
pub fn detection_rate(
    predictions: &[PosePrediction],
    annotations: &[(usize, &Annotation)],
    joint_names: &[String],
    radii: &[f64],
) -> Result<DetectionCurve> {
    if predictions.len() != annotations.len() {
        return Err(arg_err!(
            "{} predictions vs {} annotations",
            predictions.len(),
            annotations.len()
        ));
    }
    let num_joints = joint_names.len();
    let mut hits = vec![vec![0usize; num_joints]; radii.len()];
    let mut visible = vec![0usize; num_joints];
    for (pred, &(id, ann)) in predictions.iter().zip(annotations.iter()) {
        if pred.image_id != id {
            return Err(arg_err!("prediction id {} vs annotation id {id}", pred.image_id));
        }
        if pred.joints.len() != num_joints || ann.joints.len() != num_joints {
            return Err(arg_err!("joint count mismatch on image {id}"));
        }
        let torso_h = ann.torso_box.height();
        if !(torso_h > 0.0) {
            return Err(arg_err!("image {id}: torso height must be positive"));
        }
        for j in 0..num_joints {
            if !ann.joints[j].visible {
                continue;
            }
            visible[j] += 1;
            let du = pred.joints[j].0 - ann.joints[j].u;
            let dv = pred.joints[j].1 - ann.joints[j].v;
            let norm = (du * du + dv * dv).sqrt() / torso_h;
            for (ri, &r) in radii.iter().enumerate() {
                if norm <= r {
                    hits[ri][j] += 1;
                }
            }
        }
    }
    let mut rates = Vec::with_capacity(radii.len());
    let mut average = Vec::with_capacity(radii.len());
    let total_visible: usize = visible.iter().sum();
    for row in &hits {
        let rate_row: Vec<f64> = row
            .iter()
            .zip(visible.iter())
            .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
            .collect();
        let pooled: usize = row.iter().sum();
        average.push(if total_visible == 0 {
            0.0
        } else {
            pooled as f64 / total_visible as f64
        });
        rates.push(rate_row);
    }
    Ok(DetectionCurve {
        radii: radii.to_vec(),
        joint_names: joint_names.to_vec(),
        rates,
        average,
    })
}

/// CSV columns: radius, joint, rate, model_tag. Rows ordered by radius, then
/// joint order, with the pooled rate last under the joint name `all`.
pub fn emit_curves(curve: &DetectionCurve, path: &Path, model_tag: &str) -> Result<()> {
    let mut out = String::from("radius,joint,rate,model_tag\n");
    for (ri, &r) in curve.radii.iter().enumerate() {
        for (j, name) in curve.joint_names.iter().enumerate() {
            out.push_str(&format!("{r},{name},{},{model_tag}\n", curve.rates[ri][j]));
        }
        out.push_str(&format!("{r},all,{},{model_tag}\n", curve.average[ri]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a curve CSV back; the inverse of `emit_curves` for a single tag.
pub fn read_curves(path: &Path) -> Result<(DetectionCurve, String)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "radius,joint,rate,model_tag" {
        return Err(Error::Parse {
            file: path.display().to_string(),
            detail: format!("unexpected header {header}"),
        });
    }
    let mut radii: Vec<f64> = Vec::new();
    let mut joint_names: Vec<String> = Vec::new();
    let mut rates: Vec<Vec<f64>> = Vec::new();
    let mut average: Vec<f64> = Vec::new();
    let mut tag = String::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                file: path.display().to_string(),
                detail: format!("line {}: expected 4 fields", i + 2),
            });
        }
        let bad = |what: &str| Error::Parse {
            file: path.display().to_string(),
            detail: format!("line {}: bad {what}", i + 2),
        };
        let r: f64 = fields[0].parse().map_err(|_| bad("radius"))?;
        let rate: f64 = fields[2].parse().map_err(|_| bad("rate"))?;
        tag = fields[3].to_string();
        if radii.last() != Some(&r) {
            radii.push(r);
            rates.push(Vec::new());
        }
        if fields[1] == "all" {
            average.push(rate);
        } else {
            if radii.len() == 1 {
                joint_names.push(fields[1].to_string());
            }
            rates.last_mut().unwrap().push(rate);
        }
    }
    Ok((
        DetectionCurve {
            radii,
            joint_names,
            rates,
            average,
        },
        tag,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{JointAnnotation, TorsoBox};
    use crate::rng::Rng;

    fn ann(joints: &[(f64, f64)], torso_h: f64) -> Annotation {
        Annotation {
            joints: joints
                .iter()
                .map(|&(u, v)| JointAnnotation { u, v, visible: true })
                .collect(),
            torso_box: TorsoBox {
                u: 0.0,
                v: 0.0,
                w: torso_h / 2.0,
                h: torso_h,
            },
            person_id: 0,
        }
    }

    #[test]
    fn perfect_predictions_rate_one_everywhere() {
        let names = vec!["a".to_string(), "b".to_string()];
        let gt = ann(&[(3.0, 4.0), (10.0, 2.0)], 8.0);
        let preds = vec![PosePrediction {
            image_id: 0,
            joints: vec![(3.0, 4.0), (10.0, 2.0)],
        }];
        let curve = detection_rate(&preds, &[(0, &gt)], &names, &[0.0, 0.25, 0.5]).unwrap();
        for row in &curve.rates {
            assert!(row.iter().all(|&r| r == 1.0));
        }
        assert!(curve.average.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn rate_steps_exactly_at_error_over_torso() {
        let names = vec!["a".to_string()];
        let gt = ann(&[(10.0, 10.0)], 8.0);
        // error 4 px = 0.5 * torso height
        let preds = vec![PosePrediction {
            image_id: 0,
            joints: vec![(14.0, 10.0)],
        }];
        let curve =
            detection_rate(&preds, &[(0, &gt)], &names, &[0.49, 0.5, 0.51]).unwrap();
        assert_eq!(curve.rates[0][0], 0.0);
        assert_eq!(curve.rates[1][0], 1.0);
        assert_eq!(curve.rates[2][0], 1.0);
    }

    #[test]
    fn counting_oracle_four_images() {
        let names = vec!["a".to_string()];
        // normalized errors 0.1, 0.2, 0.4, 0.8 against torso height 10
        let gts: Vec<Annotation> = (0..4).map(|_| ann(&[(0.0, 0.0)], 10.0)).collect();
        let errors = [1.0, 2.0, 4.0, 8.0];
        let preds: Vec<PosePrediction> = errors
            .iter()
            .enumerate()
            .map(|(i, &e)| PosePrediction {
                image_id: i,
                joints: vec![(e, 0.0)],
            })
            .collect();
        let pairs: Vec<(usize, &Annotation)> = gts.iter().enumerate().collect();
        let curve = detection_rate(&preds, &pairs, &names, &[0.25]).unwrap();
        assert_eq!(curve.rates[0][0], 0.5);
    }

    #[test]
    fn invisible_joints_excluded() {
        let names = vec!["a".to_string(), "b".to_string()];
        let mut gt = ann(&[(0.0, 0.0), (5.0, 5.0)], 10.0);
        gt.joints[1].visible = false;
        let preds = vec![PosePrediction {
            image_id: 0,
            joints: vec![(0.0, 0.0), (100.0, 100.0)],
        }];
        let curve = detection_rate(&preds, &[(0, &gt)], &names, &[0.1]).unwrap();
        assert_eq!(curve.rates[0][0], 1.0);
        assert_eq!(curve.rates[0][1], 0.0); // no visible samples -> 0 by convention
        assert_eq!(curve.average[0], 1.0); // pooled over the 1 visible joint
    }

    #[test]
    fn id_mismatch_errors() {
        let names = vec!["a".to_string()];
        let gt = ann(&[(0.0, 0.0)], 10.0);
        let preds = vec![PosePrediction {
            image_id: 7,
            joints: vec![(0.0, 0.0)],
        }];
        assert!(detection_rate(&preds, &[(0, &gt)], &names, &[0.1]).is_err());
    }

    #[test]
    fn monotone_in_radius_and_scale_invariant() {
        let mut rng = Rng::seed_from(3);
        let names: Vec<String> = (0..3).map(|j| format!("j{j}")).collect();
        let gts: Vec<Annotation> = (0..20)
            .map(|_| {
                ann(
                    &[
                        (rng.uniform_in(0.0, 30.0), rng.uniform_in(0.0, 30.0)),
                        (rng.uniform_in(0.0, 30.0), rng.uniform_in(0.0, 30.0)),
                        (rng.uniform_in(0.0, 30.0), rng.uniform_in(0.0, 30.0)),
                    ],
                    rng.uniform_in(6.0, 14.0),
                )
            })
            .collect();
        let preds: Vec<PosePrediction> = gts
            .iter()
            .enumerate()
            .map(|(i, gt)| PosePrediction {
                image_id: i,
                joints: gt
                    .joints
                    .iter()
                    .map(|j| (j.u + rng.uniform_in(-4.0, 4.0), j.v + rng.uniform_in(-4.0, 4.0)))
                    .collect(),
            })
            .collect();
        let pairs: Vec<(usize, &Annotation)> = gts.iter().enumerate().collect();
        let radii = default_radii();
        let curve = detection_rate(&preds, &pairs, &names, &radii).unwrap();
        for j in 0..3 {
            for ri in 1..radii.len() {
                assert!(curve.rates[ri][j] >= curve.rates[ri - 1][j]);
            }
        }
        // scaling the whole scene by a common factor leaves the curve alone
        let k = 3.7;
        let gts2: Vec<Annotation> = gts
            .iter()
            .map(|g| {
                let mut g2 = g.clone();
                for j in g2.joints.iter_mut() {
                    j.u *= k;
                    j.v *= k;
                }
                g2.torso_box.u *= k;
                g2.torso_box.v *= k;
                g2.torso_box.w *= k;
                g2.torso_box.h *= k;
                g2
            })
            .collect();
        let preds2: Vec<PosePrediction> = preds
            .iter()
            .map(|p| PosePrediction {
                image_id: p.image_id,
                joints: p.joints.iter().map(|&(u, v)| (u * k, v * k)).collect(),
            })
            .collect();
        let pairs2: Vec<(usize, &Annotation)> = gts2.iter().enumerate().collect();
        let curve2 = detection_rate(&preds2, &pairs2, &names, &radii).unwrap();
        for ri in 0..radii.len() {
            for j in 0..3 {
                assert!((curve.rates[ri][j] - curve2.rates[ri][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_roundtrip() {
        let curve = DetectionCurve {
            radii: vec![0.1, 0.25],
            joint_names: vec!["head".into(), "wrist".into()],
            rates: vec![vec![0.25, 0.5], vec![0.625, 1.0]],
            average: vec![0.375, 0.8125],
        };
        let dir = std::env::temp_dir().join(format!("posegraph_csv_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("curve.csv");
        emit_curves(&curve, &path, "detector").unwrap();
        let (back, tag) = read_curves(&path).unwrap();
        assert_eq!(back, curve);
        assert_eq!(tag, "detector");

        // header-only file for an empty radius list
        let empty = DetectionCurve {
            radii: vec![],
            joint_names: vec!["head".into()],
            rates: vec![],
            average: vec![],
        };
        let path2 = dir.join("empty.csv");
        emit_curves(&empty, &path2, "x").unwrap();
        let text = std::fs::read_to_string(&path2).unwrap();
        assert_eq!(text, "radius,joint,rate,model_tag\n");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
