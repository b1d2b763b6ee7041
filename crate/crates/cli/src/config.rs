//! Flat INI-style configuration with a published key schema, flag overrides,
//! and a stable hash for resume safety.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use posegraph::error::{Error, Result};

/// Every recognized key with its default and a one-line description.
/// Keys are `section.name`; the file groups them under `[section]`.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("gen.count", "200", "number of scenes to generate"),
    ("gen.image_size", "32", "square image side in pixels"),
    ("gen.distractors", "0", "unlabeled figures per scene"),
    ("gen.noise", "0.02", "background Gaussian noise std"),
    ("gen.min_separation", "11.0", "minimum distance between figure roots"),
    ("gen.maxval", "255", "PGM maxval (255 or 65535)"),
    ("detector.banks", "2", "resolution banks"),
    ("detector.preset", "desk", "architecture preset: desk or large"),
    ("spatial.kernel_size", "auto", "prior kernel side (odd) or auto"),
    ("spatial.beta", "1.0", "SoftPlus beta"),
    ("spatial.eps", "0.01", "ReLU floor epsilon"),
    ("spatial.torso", "true", "feed the torso map as an extra unary channel"),
    ("train.dataset", "", "training dataset directory"),
    ("train.val_dataset", "", "validation dataset directory (empty: split train)"),
    ("train.val_fraction", "0.2", "validation fraction when splitting"),
    ("train.lr", "0.05", "learning rate for stages 1-2"),
    ("train.spatial_lr", "auto", "spatial stage rate (auto = lr)"),
    ("train.stage3_lr", "auto", "unified stage rate (auto = 0.1 * lr)"),
    ("train.momentum", "0.9", "Nesterov momentum"),
    ("train.batch", "10", "batch size"),
    ("train.epochs1", "8", "detector epochs"),
    ("train.epochs2", "20", "spatial epochs"),
    ("train.epochs3", "3", "unified epochs"),
    ("train.sigma", "1.0", "target Gaussian sigma in heat-map cells"),
    ("train.flip_prob", "0.5", "horizontal flip probability"),
    ("train.scale_min", "0.9", "augmentation scale lower bound"),
    ("train.scale_max", "1.1", "augmentation scale upper bound"),
    ("train.radii", "0.25,0.5", "detection radii logged per epoch"),
    ("eval.dataset", "", "evaluation dataset directory"),
    ("eval.model", "", "model file (detector.model or unified.model)"),
    ("eval.radii", "0,0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5", "curve radii"),
    ("eval.tag", "model", "model_tag column value"),
    ("infer.model", "", "model file"),
    ("infer.image", "", "input PGM image"),
    ("infer.torso", "", "torso box u,v,w,h for unified models"),
    ("infer.dump_heat", "", "optional path for the raw heat-map dump"),
    ("seed", "1", "global RNG seed"),
];

#[derive(Clone, Debug)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn config_err(msg: String) -> Error {
    Error::InvalidArgument(msg)
}

impl Config {
    pub fn defaults() -> Config {
        Config {
            values: SCHEMA
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }

    fn known(key: &str) -> bool {
        SCHEMA.iter().any(|(k, _, _)| *k == key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !Config::known(key) {
            return Err(config_err(format!(
                "unknown config key `{key}` (see the schema in README or --help)"
            )));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key {key} not in schema"))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| config_err(format!("{key}: expected an integer, got `{}`", self.get(key))))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| config_err(format!("{key}: expected a number, got `{}`", self.get(key))))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            v => Err(config_err(format!("{key}: expected true/false, got `{v}`"))),
        }
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| config_err(format!("{key}: bad number `{s}`")))
            })
            .collect()
    }

    /// Parse an INI file: `[section]` headers, `key=value` lines, `#`/`;`
    /// comments. Keys are validated against the schema.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: path.display().to_string(),
                detail: format!("line {}: expected key=value", ln + 1),
            })?;
            let full = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&full, v.trim()).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                detail: format!("line {}: {e}", ln + 1),
            })?;
        }
        Ok(())
    }

    /// Canonical INI text: sections sorted, keys sorted. This is what gets
    /// echoed to the output directory and hashed into manifests.
    pub fn canonical_ini(&self) -> String {
        let mut by_section: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
        for (k, v) in &self.values {
            let (section, name) = k.split_once('.').unwrap_or(("", k.as_str()));
            by_section.entry(section).or_default().push((name, v));
        }
        let mut out = String::new();
        for (section, keys) in by_section {
            if !section.is_empty() {
                let _ = writeln!(out, "[{section}]");
            }
            for (name, value) in keys {
                let _ = writeln!(out, "{name}={value}");
            }
            let _ = writeln!(out);
        }
        out
    }

    /// FNV-1a over the canonical form.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical_ini().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_schema_and_reject_unknowns() {
        let mut cfg = Config::defaults();
        assert_eq!(cfg.get("train.batch"), "10");
        assert!(cfg.set("train.batch", "4").is_ok());
        assert_eq!(cfg.get_usize("train.batch").unwrap(), 4);
        assert!(cfg.set("train.nope", "1").is_err());
    }

    #[test]
    fn ini_roundtrip_and_hash_stability() {
        let mut cfg = Config::defaults();
        let dir = std::env::temp_dir().join(format!("posegraph_cfg_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.ini");
        std::fs::write(&path, "# comment\n[train]\nbatch = 7\n\n[gen]\ncount=5\n").unwrap();
        cfg.load_file(&path).unwrap();
        assert_eq!(cfg.get("train.batch"), "7");
        assert_eq!(cfg.get("gen.count"), "5");
        let h1 = cfg.hash();
        let mut cfg2 = Config::defaults();
        cfg2.load_file(&path).unwrap();
        assert_eq!(h1, cfg2.hash());
        cfg2.set("train.batch", "8").unwrap();
        assert_ne!(h1, cfg2.hash());

        // malformed line names the file and line
        let bad = dir.join("bad.ini");
        std::fs::write(&bad, "[train]\nthis is not a pair\n").unwrap();
        let err = cfg.load_file(&bad).unwrap_err().to_string();
        assert!(err.contains("bad.ini") && err.contains("line 2"), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
