//! The flat run configuration shared by every command.

use std::path::{Path, PathBuf};

use crate::config::{apply_all, parse_kv, render_kv, ConfigError, KvConfig};
use crate::datagen::SynthConfig;
use crate::features::AugmentPolicy;
use crate::lm::{LmConfig, LmTrainConfig};
use crate::model::ModelConfig;
use crate::search::{FusionWeights, LmMode};
use crate::trainer::TrainConfig;

/// Paths, tokenizer and decoding settings that belong to no other section.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub bpe_vocab: usize,
    pub bpe_min_pair_frequency: usize,
    pub model_seed: u64,
    /// Corpus directory; empty means `<run>/data`.
    pub data_dir: String,
    /// Empty paths mean the default location under `<run>/checkpoints`.
    pub bpe_path: String,
    pub model_path: String,
    pub lm_path: String,
    pub decode_split: String,
    pub lm_mode: LmMode,
    pub nbest: usize,
    /// Comma-separated beam widths for `sweep-beam`.
    pub sweep_beams: String,
}

crate::kv_config!(RunSettings {
    bpe_vocab,
    bpe_min_pair_frequency,
    model_seed,
    data_dir,
    bpe_path,
    model_path,
    lm_path,
    decode_split,
    lm_mode,
    nbest,
    sweep_beams,
});

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            bpe_vocab: 600,
            bpe_min_pair_frequency: 2,
            model_seed: 1,
            data_dir: String::new(),
            bpe_path: String::new(),
            model_path: String::new(),
            lm_path: String::new(),
            decode_split: "test".into(),
            lm_mode: LmMode::CrossUtterance,
            nbest: 1,
            sweep_beams: "1,2,4,8,16".into(),
        }
    }
}

/// Every section of a run. Keys are unique across sections.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run: RunSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    pub fusion: FusionWeights,
    pub lm: LmConfig,
    pub lm_train: LmTrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSettings::default(),
            model: ModelConfig::full(),
            train: TrainConfig::default(),
            augment: AugmentPolicy::default(),
            fusion: FusionWeights::default(),
            lm: LmConfig { lm_projection: 0, ..LmConfig::full() },
            lm_train: LmTrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Configuration files shipped with the crate.
pub const BUNDLED: &[(&str, &str)] = &[
    ("full", include_str!("../../configs/full.conf")),
    ("small", include_str!("../../configs/small.conf")),
    ("lm-large", include_str!("../../configs/lm-large.conf")),
    ("toy", include_str!("../../configs/toy.conf")),
];

impl RunConfig {
    fn sections(&mut self) -> [&mut dyn KvConfig; 8] {
        [&mut self.run, &mut self.model, &mut self.train, &mut self.augment, &mut self.fusion, &mut self.lm, &mut self.lm_train, &mut self.synth]
    }

    /// Defaults overridden by `key = value` text.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_kv(text)?)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::invalid(&path.display().to_string(), e.to_string()))?;
        Self::from_text(&text)
    }

    pub fn bundled(name: &str) -> Result<Self, ConfigError> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ConfigError::invalid("config", format!("no bundled config `{}`", name)))?;
        Self::from_text(text)
    }

    pub fn apply(&mut self, entries: &[(String, String)]) -> Result<(), ConfigError> {
        apply_all(&mut self.sections(), entries)?;
        self.validate()
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        let entries = overrides
            .iter()
            .map(|o| {
                o.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| ConfigError::Syntax { line: 0, text: o.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.apply(&entries)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.apply(&[(key.to_string(), value.to_string())])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate().map_err(|e| ConfigError::invalid("augment", e.to_string()))?;
        self.fusion.validate()?;
        self.lm.validate()?;
        self.synth.validate()?;
        if self.run.bpe_vocab == 0 {
            return Err(ConfigError::invalid("bpe_vocab", "must be positive"));
        }
        self.beams()?;
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut me = self.clone();
        me.sections().iter().flat_map(|s| s.entries()).collect()
    }

    pub fn to_text(&self) -> String {
        render_kv(&self.entries())
    }

    /// Keys whose values differ between two configs, in key order.
    pub fn diff(&self, other: &RunConfig) -> Vec<String> {
        self.entries().into_iter().zip(other.entries()).filter(|(a, b)| a != b).map(|(a, _)| a.0).collect()
    }

    pub fn beams(&self) -> Result<Vec<usize>, ConfigError> {
        let beams: Vec<usize> = self
            .run
            .sweep_beams
            .split(',')
            .map(|s| crate::config::parse_value::<usize>("sweep_beams", s.trim()))
            .collect::<Result<_, _>>()?;
        if beams.is_empty() || beams.contains(&0) {
            return Err(ConfigError::invalid("sweep_beams", "need positive beam widths"));
        }
        Ok(beams)
    }
}

/// Fixed layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        let dir = RunDir { root: root.to_path_buf() };
        for d in [dir.configs(), dir.checkpoints(), dir.logs(), dir.reports()] {
            std::fs::create_dir_all(d)?;
        }
        Ok(dir)
    }

    pub fn configs(&self) -> PathBuf {
        self.root.join("configs")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
}
