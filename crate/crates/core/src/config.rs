//! Run configuration: one JSON document, overridable by dotted
//! `key=value` assignments and the `FLEXINET_SEED` environment variable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentConfig;
use crate::dataset::SyntheticSpec;
use crate::distill::{FitOptions, FusionMode, KdConfig};
use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::model::{preset, ArchConfig};

pub const SEED_ENV: &str = "FLEXINET_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub fusion: FusionMode,
    /// Teacher logits file (line or JSON format).
    pub logits: Option<PathBuf>,
    /// Fitted fusion parameters, required for `fusion = "fitted"`.
    pub fusion_params: Option<PathBuf>,
    /// Expected number of teachers; checked against logits files when set.
    pub teachers: Option<usize>,
    pub kd: KdConfig,
    pub fit: FitOptions,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            fusion: FusionMode::None,
            logits: None,
            fusion_params: None,
            teachers: None,
            kd: KdConfig::default(),
            fit: FitOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    /// Train with simulated quantization for the tail of training.
    pub enable: bool,
    /// Fraction of epochs after which fake quantization starts.
    pub start_fraction: f64,
    /// Fraction of epochs after which observers stop updating.
    pub freeze_fraction: f64,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            enable: false,
            start_fraction: 0.75,
            freeze_fraction: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, decayed along a cosine to zero.
    pub learning_rate: f64,
    /// Decoupled weight decay applied to conv weights.
    pub weight_decay: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 256,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            seed: 42,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// TAU-layout metadata file; the synthetic corpus is used when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus: None,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Named architecture that replaces `arch` when set.
    pub preset: Option<String>,
    pub arch: ArchConfig,
    pub features: MelConfig,
    pub augment: AugmentConfig,
    pub distill: DistillSection,
    pub quant: QuantSection,
    pub train: TrainSection,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            arch: ArchConfig::default(),
            features: MelConfig::default(),
            augment: AugmentConfig::default(),
            distill: DistillSection::default(),
            quant: QuantSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
        }
    }
}

/// Applies `a.b.c=value` to a JSON tree. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{assignment}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(format!("override '{assignment}' has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("'{}' is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("split yields at least one part")
}

impl RunConfig {
    /// Parses a config document (unknown keys are errors), applies
    /// overrides, the seed environment variable and the preset, and
    /// validates the result.
    pub fn resolve(doc: Option<&str>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut tree = match doc {
            Some(text) => serde_json::from_str::<Value>(text).map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?,
            None => Value::Object(Default::default()),
        };
        // Start from the defaults so overrides can reach into any section.
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge(&mut base, tree.take());
        for o in overrides {
            apply_override(&mut base, o)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        if let Some(s) = env_seed {
            cfg.train.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}='{s}' is not an unsigned integer")))?;
        }
        if let Some(name) = cfg.preset.take() {
            let mut arch = preset(&name)?;
            arch.resnorm = cfg.arch.resnorm;
            cfg.arch = arch;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
            ),
            None => None,
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(text.as_deref(), overrides, env.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.features.validate()?;
        self.augment.validate()?;
        self.distill.kd.validate()?;
        self.data.synthetic.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::config("train.epochs and train.batch_size must be positive"));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate must be positive"));
        }
        let q = &self.quant;
        if !(0.0..=1.0).contains(&q.start_fraction) || !(q.start_fraction..=1.0).contains(&q.freeze_fraction) {
            return Err(Error::config(
                "quant fractions must satisfy 0 <= start_fraction <= freeze_fraction <= 1",
            ));
        }
        if (self.features.n_mels, self.features.frames) != self.arch.input_size {
            return Err(Error::config(format!(
                "features produce {}x{} maps but arch.input_size is {:?}",
                self.features.n_mels, self.features.frames, self.arch.input_size
            )));
        }
        match self.distill.fusion {
            FusionMode::None => {}
            mode => {
                if self.distill.logits.is_none() {
                    return Err(Error::config("distillation is enabled but distill.logits is not set"));
                }
                if mode == FusionMode::Fitted && self.distill.fusion_params.is_none() {
                    return Err(Error::config(
                        "distill.fusion = \"fitted\" requires distill.fusion_params",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the resolved config as `config.json` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), self.to_json()?)?;
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`. Keys absent from `base` are
/// inserted so deserialization can reject them.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}
