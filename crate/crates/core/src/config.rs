//! Run configuration: flat `section.key = value` text with `#` comments.
//!
//! Every key has a default; unknown keys are rejected. [`RunConfig::to_text`]
//! writes the fully resolved configuration in the same format, so an echoed
//! file reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{AugConfig, SamplerConfig};
use crate::error::{Error, Result};
use crate::loss::{LossFamily, MarginConfig};
use crate::nn::BackboneConfig;
use crate::optim::{ScheduleConfig, SgdConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub pairs: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub test_per_identity: usize,
    pub masked_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub family: LossFamily,
    pub scale: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaConfig {
    pub enabled: bool,
    pub decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub far_targets: Vec<f64>,
    pub primary_far: f64,
    pub batch_size: usize,
    pub normalize_parts: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub preset: String,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    pub schedule: ScheduleConfig,
    pub ema: EmaConfig,
    pub sampler: SamplerConfig,
    pub aug: AugConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                manifest: "data/manifest.csv".into(),
                train_manifest: "data/train.csv".into(),
                test_manifest: "data/test.csv".into(),
                pairs: "data/pairs.csv".into(),
            },
            synth: SynthConfig {
                identities: 16,
                images_per_identity: 20,
                test_per_identity: 6,
                masked_fraction: 0.3,
            },
            preset: "toy".into(),
            backbone: BackboneConfig::toy(),
            loss: LossConfig {
                family: LossFamily::ArcFace,
                scale: 32.0,
                margin: LossFamily::ArcFace.default_margin(),
            },
            sgd: SgdConfig::default(),
            schedule: ScheduleConfig {
                base_lr: 0.1,
                warmup_epochs: 1.0,
                decay_epochs: 6.0,
                total_epochs: 8.0,
                lr_min: 1e-5,
                steps_per_epoch: 1,
                restart_peak: 0.01,
                restart_len: 1.0,
            },
            ema: EmaConfig {
                enabled: true,
                decay: 0.9,
            },
            sampler: SamplerConfig::default(),
            aug: AugConfig::default(),
            train: TrainConfig { batch_size: 16 },
            eval: EvalConfig {
                far_targets: vec![1e-1, 1e-2, 1e-3, 1e-4],
                primary_far: 1e-4,
                batch_size: 32,
                normalize_parts: true,
            },
        }
    }
}

/// Keys applied before all others because they reset dependent defaults.
const LEADING_KEYS: [&str; 2] = ["model.preset", "loss.family"];

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| format!("invalid value '{value}' for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid boolean '{value}' for {key}")),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn margin(&self, class_count: usize) -> MarginConfig {
        MarginConfig {
            family: self.loss.family,
            s: self.loss.scale,
            m: self.loss.margin,
            class_count,
        }
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let b = &mut self.backbone;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.manifest" => self.data.manifest = v.into(),
            "data.train_manifest" => self.data.train_manifest = v.into(),
            "data.test_manifest" => self.data.test_manifest = v.into(),
            "data.pairs" => self.data.pairs = v.into(),
            "synth.identities" => self.synth.identities = parse(key, v)?,
            "synth.images_per_identity" => self.synth.images_per_identity = parse(key, v)?,
            "synth.test_per_identity" => self.synth.test_per_identity = parse(key, v)?,
            "synth.masked_fraction" => self.synth.masked_fraction = parse(key, v)?,
            "model.preset" => {
                *b = match v {
                    "toy" => BackboneConfig::toy(),
                    "resnet34" => BackboneConfig::resnet34(),
                    _ => return Err(format!("unknown model.preset '{v}' (expected toy or resnet34)")),
                };
                self.preset = v.into();
            }
            "model.stem_channels" => b.stem_channels = parse(key, v)?,
            "model.widths" => b.widths = parse_list(key, v)?,
            "model.blocks" => b.blocks = parse_list(key, v)?,
            "model.strides" => b.strides = parse_list(key, v)?,
            "model.se" => b.se_enabled = parse_bool(key, v)?,
            "model.se_reduction" => b.se_reduction = parse(key, v)?,
            "model.dropblock_stages" => b.dropblock_stages = parse_list(key, v)?,
            "model.dropblock_prob" => b.dropblock.drop_prob = parse(key, v)?,
            "model.dropblock_size" => b.dropblock.block_size = parse(key, v)?,
            "model.embedding_dim" => b.embedding_dim = parse(key, v)?,
            "loss.family" => {
                self.loss.family = v.parse::<LossFamily>().map_err(|e| e.to_string())?;
                self.loss.margin = self.loss.family.default_margin();
            }
            "loss.scale" => self.loss.scale = parse(key, v)?,
            "loss.margin" => self.loss.margin = parse(key, v)?,
            "optim.base_lr" => self.schedule.base_lr = parse(key, v)?,
            "optim.momentum" => self.sgd.momentum = parse(key, v)?,
            "optim.weight_decay" => self.sgd.weight_decay = parse(key, v)?,
            "optim.wd_skip_norm" => self.sgd.skip_norm_decay = parse_bool(key, v)?,
            "optim.warmup_epochs" => self.schedule.warmup_epochs = parse(key, v)?,
            "optim.decay_epochs" => self.schedule.decay_epochs = parse(key, v)?,
            "optim.total_epochs" => self.schedule.total_epochs = parse(key, v)?,
            "optim.lr_min" => self.schedule.lr_min = parse(key, v)?,
            "optim.restart_peak" => self.schedule.restart_peak = parse(key, v)?,
            "optim.restart_len" => self.schedule.restart_len = parse(key, v)?,
            "ema.enabled" => self.ema.enabled = parse_bool(key, v)?,
            "ema.decay" => self.ema.decay = parse(key, v)?,
            "sampler.mask_ratio_cap" => self.sampler.mask_ratio_cap = parse(key, v)?,
            "sampler.shuffle" => self.sampler.shuffle = parse_bool(key, v)?,
            "aug.p_hflip" => self.aug.p_hflip = parse(key, v)?,
            "aug.p_blur" => self.aug.p_blur = parse(key, v)?,
            "aug.p_rgb_shift" => self.aug.p_rgb_shift = parse(key, v)?,
            "aug.p_compress" => self.aug.p_compress = parse(key, v)?,
            "aug.rgb_shift_max" => self.aug.rgb_shift_max = parse(key, v)?,
            "aug.crop_pad" => self.aug.crop_pad = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "eval.far_targets" => self.eval.far_targets = parse_list(key, v)?,
            "eval.primary_far" => self.eval.primary_far = parse(key, v)?,
            "eval.batch_size" => self.eval.batch_size = parse(key, v)?,
            "eval.normalize_parts" => self.eval.normalize_parts = parse_bool(key, v)?,
            _ => return Err(format!("unknown configuration key '{key}'")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in output order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = &self.backbone;
        let p = |v: &Path| v.display().to_string();
        vec![
            ("seed", self.seed.to_string()),
            ("data.manifest", p(&self.data.manifest)),
            ("data.train_manifest", p(&self.data.train_manifest)),
            ("data.test_manifest", p(&self.data.test_manifest)),
            ("data.pairs", p(&self.data.pairs)),
            ("synth.identities", self.synth.identities.to_string()),
            ("synth.images_per_identity", self.synth.images_per_identity.to_string()),
            ("synth.test_per_identity", self.synth.test_per_identity.to_string()),
            ("synth.masked_fraction", self.synth.masked_fraction.to_string()),
            ("model.preset", self.preset.clone()),
            ("model.stem_channels", b.stem_channels.to_string()),
            ("model.widths", join(&b.widths)),
            ("model.blocks", join(&b.blocks)),
            ("model.strides", join(&b.strides)),
            ("model.se", b.se_enabled.to_string()),
            ("model.se_reduction", b.se_reduction.to_string()),
            ("model.dropblock_stages", join(&b.dropblock_stages)),
            ("model.dropblock_prob", b.dropblock.drop_prob.to_string()),
            ("model.dropblock_size", b.dropblock.block_size.to_string()),
            ("model.embedding_dim", b.embedding_dim.to_string()),
            ("loss.family", self.loss.family.to_string()),
            ("loss.scale", self.loss.scale.to_string()),
            ("loss.margin", self.loss.margin.to_string()),
            ("optim.base_lr", self.schedule.base_lr.to_string()),
            ("optim.momentum", self.sgd.momentum.to_string()),
            ("optim.weight_decay", self.sgd.weight_decay.to_string()),
            ("optim.wd_skip_norm", self.sgd.skip_norm_decay.to_string()),
            ("optim.warmup_epochs", self.schedule.warmup_epochs.to_string()),
            ("optim.decay_epochs", self.schedule.decay_epochs.to_string()),
            ("optim.total_epochs", self.schedule.total_epochs.to_string()),
            ("optim.lr_min", self.schedule.lr_min.to_string()),
            ("optim.restart_peak", self.schedule.restart_peak.to_string()),
            ("optim.restart_len", self.schedule.restart_len.to_string()),
            ("ema.enabled", self.ema.enabled.to_string()),
            ("ema.decay", self.ema.decay.to_string()),
            ("sampler.mask_ratio_cap", self.sampler.mask_ratio_cap.to_string()),
            ("sampler.shuffle", self.sampler.shuffle.to_string()),
            ("aug.p_hflip", self.aug.p_hflip.to_string()),
            ("aug.p_blur", self.aug.p_blur.to_string()),
            ("aug.p_rgb_shift", self.aug.p_rgb_shift.to_string()),
            ("aug.p_compress", self.aug.p_compress.to_string()),
            ("aug.rgb_shift_max", self.aug.rgb_shift_max.to_string()),
            ("aug.crop_pad", self.aug.crop_pad.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("eval.far_targets", join(&self.eval.far_targets)),
            ("eval.primary_far", self.eval.primary_far.to_string()),
            ("eval.batch_size", self.eval.batch_size.to_string()),
            ("eval.normalize_parts", self.eval.normalize_parts.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Parses `text` over the defaults. `origin` names the source in errors.
    pub fn parse_str(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line: line as u64,
            msg,
        };
        let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(perr(i + 1, format!("expected 'key = value', got '{line}'")));
            };
            let k = k.trim().to_string();
            if let Some((prev, _)) = pairs.get(&k) {
                return Err(perr(i + 1, format!("key '{k}' already set on line {prev}")));
            }
            pairs.insert(k, (i + 1, v.trim().to_string()));
        }
        let mut cfg = Self::default();
        let mut ordered: Vec<(&String, &(usize, String))> = pairs.iter().collect();
        ordered.sort_by_key(|(k, (line, _))| (!LEADING_KEYS.contains(&k.as_str()), *line));
        for (k, (line, v)) in ordered {
            cfg.set(k, v).map_err(|m| perr(*line, m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, &path.display().to_string())
    }

    /// Applies a single `key=value` override. Call [`RunConfig::validate`]
    /// once all overrides are in, since some keys constrain each other.
    pub fn set_override(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value).map_err(Error::Config)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.backbone.validate().map_err(cfg)?;
        MarginConfig {
            class_count: 1,
            ..self.margin(1)
        }
        .validate()
        .map_err(cfg)?;
        self.sgd.validate().map_err(cfg)?;
        self.schedule.validate().map_err(cfg)?;
        self.sampler.validate().map_err(cfg)?;
        self.aug.validate().map_err(cfg)?;
        if self.ema.enabled && !(self.ema.decay > 0.0 && self.ema.decay < 1.0) {
            return Err(Error::Config(format!("ema.decay must be in (0, 1), got {}", self.ema.decay)));
        }
        if self.train.batch_size < 2 || self.eval.batch_size == 0 {
            return Err(Error::Config(format!(
                "train.batch_size must be at least 2 and eval.batch_size positive (got {}, {})",
                self.train.batch_size, self.eval.batch_size
            )));
        }
        if self.schedule.total_epochs.fract() != 0.0 {
            return Err(Error::Config(format!(
                "optim.total_epochs must be a whole number, got {}",
                self.schedule.total_epochs
            )));
        }
        if let Some(f) = self.eval.far_targets.iter().chain([&self.eval.primary_far]).find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::Config(format!("FAR target {f} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&self.synth.masked_fraction) {
            return Err(Error::Config(format!(
                "synth.masked_fraction must be in [0, 1], got {}",
                self.synth.masked_fraction
            )));
        }
        if self.synth.identities == 0 || self.synth.test_per_identity >= self.synth.images_per_identity {
            return Err(Error::Config(
                "synth needs identities > 0 and test_per_identity < images_per_identity".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set_override("loss.family", "cosface").unwrap();
        c.set_override("eval.far_targets", "0.1,0.001").unwrap();
        let back = RunConfig::parse_str(&c.to_text(), "echo").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        match RunConfig::parse_str("seed = 1\n# c\nfoo.bar = 2\n", "cfg") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("foo.bar"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn family_sets_default_margin_regardless_of_order() {
        let c = RunConfig::parse_str("loss.margin = 0.2\nloss.family = cosface\n", "cfg").unwrap();
        assert_eq!(c.loss.margin, 0.2);
        let c = RunConfig::parse_str("loss.family = cosface\n", "cfg").unwrap();
        assert_eq!(c.loss.margin, 0.35);
    }

    #[test]
    fn preset_applies_before_overrides() {
        let c = RunConfig::parse_str("model.se = false\nmodel.preset = resnet34\n", "cfg").unwrap();
        assert_eq!(c.backbone.widths, vec![64, 128, 256, 512]);
        assert!(!c.backbone.se_enabled);
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(RunConfig::parse_str("optim.momentum = fast\n", "cfg").is_err());
        assert!(RunConfig::parse_str("sampler.mask_ratio_cap = 1.0\n", "cfg").is_err());
        assert!(RunConfig::parse_str("just text\n", "cfg").is_err());
    }
}
