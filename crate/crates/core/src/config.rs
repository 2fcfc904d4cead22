//! TOML experiment configuration with defaults for every key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Split, SynthConfig};
use crate::error::{Error, Result};
use crate::pipeline::{FinetuneVariant, ModelConfig};
use crate::sr::{RdbConfig, SrNetConfig};
use crate::train::StepSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// VOC-layout directory; empty selects the synthetic generator.
    pub root: String,
    /// Split used by `eval`.
    pub split: Split,
    pub hr_size: usize,
    pub alpha: usize,
    pub class_names: Vec<String>,
    pub augment: bool,
    pub synth: SynthConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: String::new(),
            split: Split::Test,
            hr_size: 512,
            alpha: 4,
            class_names: vec!["ship".into()],
            augment: true,
            synth: SynthConfig::default(),
        }
    }
}

/// Optimization settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied every `lr_step_epochs`.
    pub lr_factor: f64,
    pub lr_step_epochs: usize,
    /// Epoch interval between checkpoints (0 writes only the final one).
    pub checkpoint_every: usize,
}

impl StageConfig {
    pub fn schedule(&self) -> StepSchedule {
        StepSchedule { base_lr: self.lr, factor: self.lr_factor, every: self.lr_step_epochs }
    }

    fn of(epochs: usize, s: StepSchedule, checkpoint_every: usize) -> Self {
        Self { epochs, batch_size: 4, lr: s.base_lr, lr_factor: s.factor, lr_step_epochs: s.every, checkpoint_every }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub sr: StageConfig,
    /// Detector pretraining on HR images, the starting point of every detector.
    pub detector: StageConfig,
    pub finetune: StageConfig,
    /// Weight of an SR L1 term added to the detection loss during fine-tuning.
    pub l1_weight: f64,
    pub freeze_sr: bool,
    pub freeze_detector: bool,
    pub freeze_adapters: bool,
    pub match_iou: f64,
    pub neg_pos_ratio: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            seed: 0,
            sr: StageConfig::of(450, StepSchedule::SR, 50),
            detector: StageConfig::of(24, StepSchedule::FINETUNE, 0),
            finetune: StageConfig::of(24, StepSchedule::FINETUNE, 0),
            l1_weight: 0.0,
            freeze_sr: false,
            freeze_detector: false,
            freeze_adapters: false,
            match_iou: 0.5,
            neg_pos_ratio: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iou_threshold: f64,
    /// VOC2007 11-point interpolation instead of all points.
    pub eleven_point: bool,
    pub out_dir: String,
    /// Seeds of the ablation runs.
    pub seeds: Vec<u64>,
    pub latency_lr_size: usize,
    pub latency_warmup: usize,
    pub latency_iterations: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            eleven_point: false,
            out_dir: "runs".into(),
            seeds: vec![0],
            latency_lr_size: 128,
            latency_warmup: 3,
            latency_iterations: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: FinetuneVariant,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Small synthetic setting that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.dataset.hr_size = 64;
        c.dataset.synth = SynthConfig {
            train_count: 200,
            test_count: 50,
            canvas: 128,
            ships_min: 1,
            ships_max: 3,
            length_min: 28.0,
            length_max: 64.0,
            beam_min: 0.22,
            beam_max: 0.32,
            swell: 0.06,
            clutter: 0.03,
            max_retries: 100,
            seed: 0,
        };
        c.model.sr = SrNetConfig { num_blocks: 3, base_channels: 16, rdb: RdbConfig { num_layers: 3, growth: 8 } };
        c.model.detector = crate::detect::DetectorConfig::tiny();
        c.train.sr = StageConfig { epochs: 40, batch_size: 4, lr: 1e-3, lr_factor: 0.5, lr_step_epochs: 20, checkpoint_every: 10 };
        c.train.detector = StageConfig { epochs: 30, batch_size: 4, lr: 1e-3, lr_factor: 0.1, lr_step_epochs: 20, checkpoint_every: 0 };
        c.train.finetune = StageConfig { epochs: 6, batch_size: 4, lr: 2e-4, lr_factor: 0.1, lr_step_epochs: 4, checkpoint_every: 0 };
        c.eval.seeds = vec![0, 1, 2];
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.alpha != self.model.alpha {
            return Err(Error::Config(format!(
                "dataset.alpha = {} but model.alpha = {}; both must name the same scale",
                self.dataset.alpha, self.model.alpha
            )));
        }
        if !self.dataset.root.is_empty() && !Path::new(&self.dataset.root).is_dir() {
            return Err(Error::Config(format!("dataset.root {:?} is not a directory", self.dataset.root)));
        }
        if self.dataset.class_names.len() != self.model.detector.num_classes {
            return Err(Error::Config(format!(
                "{} class names for a detector with {} classes",
                self.dataset.class_names.len(),
                self.model.detector.num_classes
            )));
        }
        let hr = self.dataset.hr_size;
        if hr % self.model.alpha != 0 {
            return Err(Error::Config(format!("dataset.hr_size {hr} is not a multiple of alpha {}", self.model.alpha)));
        }
        if self.dataset.root.is_empty() {
            if self.dataset.synth.canvas != 2 * hr {
                return Err(Error::Config(format!("dataset.synth.canvas must be 2 * hr_size = {}", 2 * hr)));
            }
            self.dataset.synth.validate()?;
        }
        for (name, s) in [("sr", &self.train.sr), ("detector", &self.train.detector), ("finetune", &self.train.finetune)] {
            s.schedule().validate().map_err(|e| Error::Config(format!("train.{name}: {e}")))?;
            if s.batch_size == 0 {
                return Err(Error::Config(format!("train.{name}.batch_size must be positive")));
            }
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) || !(self.train.match_iou > 0.0 && self.train.match_iou <= 1.0) {
            return Err(Error::Config("IoU thresholds must lie in (0, 1]".into()));
        }
        if self.eval.latency_iterations < 10 || self.eval.latency_warmup < 3 {
            return Err(Error::Config("latency needs at least 3 warmup and 10 timed iterations".into()));
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.detector.map_sizes((hr, hr)).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Reads and validates a config file; keys absent from the file take their defaults.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = parse_config_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses config text over [`ExperimentConfig::default`] without validating it.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    parse_over(text, &ExperimentConfig::default())
}

/// Parses config text over an arbitrary base config.
pub fn parse_over(text: &str, base: &ExperimentConfig) -> Result<ExperimentConfig> {
    let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string().trim_end().to_string()))?;
    let mut merged = toml::Table::try_from(base).expect("config serializes");
    merge(&mut merged, user, &mut Vec::new(), text)?;
    toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string().trim_end().to_string()))
}

fn type_name(v: &toml::Value) -> &'static str {
    v.type_str()
}

fn merge(base: &mut toml::Table, user: toml::Table, path: &mut Vec<String>, text: &str) -> Result<()> {
    for (key, value) in user {
        path.push(key.clone());
        let dotted = path.join(".");
        let at = key_line(text, path).map(|l| format!(" (line {l})")).unwrap_or_default();
        match base.get_mut(&key) {
            None => {
                let hint = strsim_nearest(&key, base.keys().map(String::as_str))
                    .map(|k| format!("; did you mean {:?}?", k))
                    .unwrap_or_default();
                return Err(Error::Config(format!("unknown key {dotted:?}{at}{hint}")));
            }
            Some(toml::Value::Table(b)) => match value {
                toml::Value::Table(u) => merge(b, u, path, text)?,
                other => {
                    return Err(Error::Config(format!("{dotted}{at}: expected a table, found {}", type_name(&other))));
                }
            },
            Some(slot) => {
                let value = match (&*slot, value) {
                    (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                    (s, v) if std::mem::discriminant(s) == std::mem::discriminant(&v) => v,
                    (s, v) => {
                        return Err(Error::Config(format!("{dotted}{at}: expected {}, found {}", type_name(s), type_name(&v))));
                    }
                };
                *slot = value;
            }
        }
        path.pop();
    }
    Ok(())
}

fn strsim_nearest<'a>(key: &str, candidates: impl Iterator<Item = &'a str>) -> Option<&'a str> {
    candidates
        .map(|c| (strsim::jaro_winkler(key, c), c))
        .filter(|(s, _)| *s > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}

/// 1-based line of `a.b.key = ...` under plain `[table]` headers.
fn key_line(text: &str, path: &[String]) -> Option<usize> {
    let mut table: Vec<String> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            let inner = t.trim_start_matches('[').split(']').next().unwrap_or("");
            table = inner.split('.').map(|s| s.trim().trim_matches('"').to_string()).collect();
            continue;
        }
        let Some((lhs, _)) = t.split_once('=') else { continue };
        if t.starts_with('#') {
            continue;
        }
        let mut full = table.clone();
        full.extend(lhs.split('.').map(|s| s.trim().trim_matches('"').to_string()));
        if full == path {
            return Some(n + 1);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.sr.batch_size, 4);
        assert_eq!(c.train.sr.lr, 1e-4);
        assert_eq!((c.train.sr.epochs, c.train.finetune.epochs), (450, 24));
        assert_eq!(c.model.alpha, 4);
        assert_eq!(c.eval.iou_threshold, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn override_merges_with_defaults() {
        let c = parse_config_str("[train.sr]\nepochs = 2\nlr = 1\n").unwrap();
        assert_eq!(c.train.sr.epochs, 2);
        assert_eq!(c.train.sr.lr, 1.0);
        assert_eq!(c.train.sr.lr_step_epochs, 200);
        assert_eq!(c.train.finetune, ExperimentConfig::default().train.finetune);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let e = parse_config_str("[train]\nsed = 3\n").unwrap_err().to_string();
        assert!(e.contains("train.sed") && e.contains("\"seed\"") && e.contains("line 2"), "{e}");
    }

    #[test]
    fn errors_cite_line_numbers() {
        let e = parse_config_str("variant = \"no_integration\"\n[model]\nalpha = \"four\"\n").unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("model.alpha"), "{e}");
        let e = parse_config_str("[train]\nseed = 1\nepochs = = 2\n").unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
    }

    #[test]
    fn desk_round_trips_through_toml() {
        let d = ExperimentConfig::desk();
        d.validate().unwrap();
        assert_eq!(parse_config_str(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn alpha_mismatch_is_rejected() {
        let mut c = ExperimentConfig::default();
        c.dataset.alpha = 2;
        assert!(c.validate().unwrap_err().to_string().contains("alpha"));
    }
}
