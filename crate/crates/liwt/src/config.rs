//! Run configuration: plain-text `key = value` files with `[section]`
//! headers, strict about unknown keys so a typo in a hyperparameter name
//! fails loudly instead of silently training with a default.
//!
//! Three sections are recognized: `[model]`, `[data]`, `[train]`. Lines
//! starting with `#` or `;` are comments. A rendered config parses back
//! to an identical value, which is how run manifests echo their settings.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value` or `[section]`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key `{key}` in section [{section}]")]
    UnknownKey {
        line: usize,
        key: String,
        section: String,
    },
    #[error("line {line}: key `{key}` outside any [section]")]
    KeyOutsideSection { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Network shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature channels C carried through the whole pipeline.
    pub feature_width: usize,
    /// Residual blocks in the encoder.
    pub encoder_blocks: usize,
    /// Chained wavelet enhancement blocks.
    pub werb_count: usize,
    /// Attention heads; must divide `feature_width`.
    pub attention_heads: usize,
    /// Frequency octaves in the positional encoding.
    pub encoding_depth: usize,
}

/// Data sourcing and batch synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Directory of training PNGs.
    pub image_dir: String,
    /// Low-resolution patch side; even, because the analysis transform
    /// halves it.
    pub patch: usize,
    pub batch: usize,
    /// Epoch fractions at which the scale range widens.
    pub curriculum_boundaries: [f64; 2],
    /// Upper scale bound per curriculum stage.
    pub curriculum_caps: [f64; 3],
    /// When set, every batch uses exactly this scale and the curriculum
    /// is bypassed.
    pub fixed_scale: Option<f64>,
}

/// Optimization schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Checkpoint every k epochs in addition to the final one; 0 keeps
    /// only the final checkpoint.
    pub checkpoint_every: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    /// Desk-scale defaults: small enough that a full training epoch and
    /// the test suite run in seconds on a laptop CPU.
    fn default() -> Self {
        Config {
            model: ModelConfig {
                feature_width: 32,
                encoder_blocks: 4,
                werb_count: 4,
                attention_heads: 8,
                encoding_depth: 10,
            },
            data: DataConfig {
                image_dir: String::new(),
                patch: 24,
                batch: 4,
                curriculum_boundaries: [0.25, 0.5],
                curriculum_caps: [4.0, 6.0, 8.0],
                fixed_scale: None,
            },
            train: TrainConfig {
                epochs: 100,
                steps_per_epoch: 16,
                lr_init: 1e-4,
                lr_decay_factor: 0.5,
                lr_decay_every: 200,
                checkpoint_every: 50,
                seed: 0,
            },
        }
    }
}

impl Config {
    /// Full-size preset matching the published training recipe.
    pub fn paper() -> Self {
        let mut c = Config::default();
        c.model.feature_width = 64;
        c.model.encoder_blocks = 16;
        c.data.patch = 48;
        c.data.batch = 32;
        c.train.epochs = 1000;
        c.train.steps_per_epoch = 1000;
        c
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') || t.starts_with(';') {
                continue;
            }
            if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !matches!(name, "model" | "data" | "train") {
                    return Err(ConfigError::UnknownSection {
                        line,
                        name: name.to_string(),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = t.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: t.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let section = section.as_deref().ok_or_else(|| ConfigError::KeyOutsideSection {
                line,
                key: key.to_string(),
            })?;
            cfg.set(section, key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |reason: String| ConfigError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
            reason,
        };
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| bad(e.to_string()))?
            };
        }
        match (section, key) {
            ("model", "feature_width") => self.model.feature_width = num!(usize),
            ("model", "encoder_blocks") => self.model.encoder_blocks = num!(usize),
            ("model", "werb_count") => self.model.werb_count = num!(usize),
            ("model", "attention_heads") => self.model.attention_heads = num!(usize),
            ("model", "encoding_depth") => self.model.encoding_depth = num!(usize),
            ("data", "image_dir") => self.data.image_dir = value.to_string(),
            ("data", "patch") => self.data.patch = num!(usize),
            ("data", "batch") => self.data.batch = num!(usize),
            ("data", "curriculum_boundaries") => {
                let v = parse_list(value).map_err(&bad)?;
                self.data.curriculum_boundaries =
                    v.try_into().map_err(|_| bad("need exactly 2 values".into()))?;
            }
            ("data", "curriculum_caps") => {
                let v = parse_list(value).map_err(&bad)?;
                self.data.curriculum_caps =
                    v.try_into().map_err(|_| bad("need exactly 3 values".into()))?;
            }
            ("data", "fixed_scale") => self.data.fixed_scale = Some(num!(f64)),
            ("train", "epochs") => self.train.epochs = num!(usize),
            ("train", "steps_per_epoch") => self.train.steps_per_epoch = num!(usize),
            ("train", "lr_init") => self.train.lr_init = num!(f64),
            ("train", "lr_decay_factor") => self.train.lr_decay_factor = num!(f64),
            ("train", "lr_decay_every") => self.train.lr_decay_every = num!(usize),
            ("train", "checkpoint_every") => self.train.checkpoint_every = num!(usize),
            ("train", "seed") => self.train.seed = num!(u64),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                    section: section.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |msg: String| Err(ConfigError::Invalid(msg));
        let m = &self.model;
        if m.feature_width == 0 || m.attention_heads == 0 {
            return err("feature_width and attention_heads must be positive".into());
        }
        if m.feature_width % m.attention_heads != 0 {
            return err(format!(
                "feature_width ({}) must be divisible by attention_heads ({})",
                m.feature_width, m.attention_heads
            ));
        }
        if m.werb_count == 0 {
            return err("werb_count must be at least 1".into());
        }
        if m.encoding_depth == 0 {
            return err("encoding_depth must be at least 1".into());
        }
        let d = &self.data;
        if d.patch < 2 || d.patch % 2 != 0 {
            return err(format!("patch ({}) must be even and at least 2", d.patch));
        }
        if d.batch == 0 {
            return err("batch must be at least 1".into());
        }
        let [b0, b1] = d.curriculum_boundaries;
        if !(0.0 < b0 && b0 < b1 && b1 < 1.0) {
            return err(format!(
                "curriculum_boundaries ({b0}, {b1}) must be ascending inside (0, 1)"
            ));
        }
        let [c0, c1, c2] = d.curriculum_caps;
        if !(1.0 < c0 && c0 <= c1 && c1 <= c2) {
            return err(format!(
                "curriculum_caps ({c0}, {c1}, {c2}) must be at least 1 and non-decreasing"
            ));
        }
        if let Some(s) = d.fixed_scale {
            if !(s >= 1.0 && s.is_finite()) {
                return err(format!("fixed_scale ({s}) must be a finite value >= 1"));
            }
        }
        let t = &self.train;
        if t.steps_per_epoch == 0 {
            return err("steps_per_epoch must be at least 1".into());
        }
        if !(t.lr_init > 0.0 && t.lr_init.is_finite()) {
            return err(format!("lr_init ({}) must be positive", t.lr_init));
        }
        if !(0.0 < t.lr_decay_factor && t.lr_decay_factor <= 1.0) {
            return err(format!(
                "lr_decay_factor ({}) must be in (0, 1]",
                t.lr_decay_factor
            ));
        }
        if t.lr_decay_every == 0 {
            return err("lr_decay_every must be at least 1".into());
        }
        Ok(())
    }

    /// Renders the config in the same format `parse` accepts; the
    /// round trip is exact because floats print with full precision.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        writeln!(s, "[model]").unwrap();
        writeln!(s, "feature_width = {}", m.feature_width).unwrap();
        writeln!(s, "encoder_blocks = {}", m.encoder_blocks).unwrap();
        writeln!(s, "werb_count = {}", m.werb_count).unwrap();
        writeln!(s, "attention_heads = {}", m.attention_heads).unwrap();
        writeln!(s, "encoding_depth = {}", m.encoding_depth).unwrap();
        let d = &self.data;
        writeln!(s, "\n[data]").unwrap();
        writeln!(s, "image_dir = {}", d.image_dir).unwrap();
        writeln!(s, "patch = {}", d.patch).unwrap();
        writeln!(s, "batch = {}", d.batch).unwrap();
        writeln!(
            s,
            "curriculum_boundaries = {}, {}",
            d.curriculum_boundaries[0], d.curriculum_boundaries[1]
        )
        .unwrap();
        writeln!(
            s,
            "curriculum_caps = {}, {}, {}",
            d.curriculum_caps[0], d.curriculum_caps[1], d.curriculum_caps[2]
        )
        .unwrap();
        if let Some(fs) = d.fixed_scale {
            writeln!(s, "fixed_scale = {fs}").unwrap();
        }
        let t = &self.train;
        writeln!(s, "\n[train]").unwrap();
        writeln!(s, "epochs = {}", t.epochs).unwrap();
        writeln!(s, "steps_per_epoch = {}", t.steps_per_epoch).unwrap();
        writeln!(s, "lr_init = {}", t.lr_init).unwrap();
        writeln!(s, "lr_decay_factor = {}", t.lr_decay_factor).unwrap();
        writeln!(s, "lr_decay_every = {}", t.lr_decay_every).unwrap();
        writeln!(s, "checkpoint_every = {}", t.checkpoint_every).unwrap();
        writeln!(s, "seed = {}", t.seed).unwrap();
        s
    }
}

fn parse_list(value: &str) -> Result<Vec<f64>, String> {
    value
        .split(',')
        .map(|part| part.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect()
}

/// Parses a magnification argument: either one factor like `2.2` applied
/// to both axes, or `HxW` like `2x3` for anisotropic scaling. Factors
/// must be finite and at least 1.
pub fn parse_scale(text: &str) -> Result<(f64, f64), ConfigError> {
    let one = |p: &str| {
        p.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 1.0)
    };
    let parts: Vec<&str> = text.split('x').collect();
    let pair = match parts.as_slice() {
        [a] => one(a).map(|v| (v, v)),
        [h, w] => one(h).zip(one(w)),
        _ => None,
    };
    pair.ok_or_else(|| {
        ConfigError::Invalid(format!(
            "bad scale '{text}': expected a factor >= 1 such as '2.2', or height x width such as '2x3'"
        ))
    })
}
