//! Experiment configuration.
//!
//! A TOML document whose keys may be written flat with dotted section
//! prefixes (`loss.alpha = 0.1`) or as tables. Every field has a default
//! and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{
    gen_synthetic_manifolds, load_idx, DatasetError, DatasetPair, MemoryPolicy, Split, SyntheticConfig, TaskProtocol,
};
use crate::losses::LossConfig;
use crate::memory::Selection;
use crate::model::{DecoderActivation, ErrorNorm};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Softmax head with distillation, classified by nearest mean of exemplars.
    Nme,
    /// Auto-encoder head without the separation term.
    AeOnly,
    /// Auto-encoder head with the separation term.
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Nme, Ablation::AeOnly, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Nme => "nme",
            Ablation::AeOnly => "ae_only",
            Ablation::Full => "full",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub seed: u64,
    pub num_classes: usize,
    pub clusters_per_class: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub cluster_separation: f64,
    /// IDX files; relative paths resolve against the config file's directory.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            kind: DatasetKind::Synthetic,
            seed: s.seed,
            num_classes: s.num_classes,
            clusters_per_class: s.clusters_per_class,
            dim: s.dim,
            samples_per_class: s.samples_per_class,
            cluster_spread: s.cluster_spread,
            cluster_separation: s.cluster_separation,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

impl DatasetConfig {
    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.seed,
            num_classes: self.num_classes,
            clusters_per_class: self.clusters_per_class,
            dim: self.dim,
            samples_per_class: self.samples_per_class,
            cluster_spread: self.cluster_spread,
            cluster_separation: self.cluster_separation,
        }
    }

    /// Builds or loads the train/test pair.
    pub fn load(&self, base_dir: &Path) -> Result<DatasetPair, ConfigError> {
        let wrap = |e: DatasetError| ConfigError::Invalid(e.to_string());
        match self.kind {
            DatasetKind::Synthetic => gen_synthetic_manifolds(&self.synthetic()).map_err(wrap),
            DatasetKind::Idx => {
                let path = |p: &Option<PathBuf>, key: &str| -> Result<PathBuf, ConfigError> {
                    let p = p
                        .as_ref()
                        .ok_or_else(|| ConfigError::Invalid(format!("dataset.{key} is required for idx datasets")))?;
                    Ok(if p.is_absolute() { p.clone() } else { base_dir.join(p) })
                };
                let train = load_idx(&path(&self.train_images, "train_images")?, &path(&self.train_labels, "train_labels")?, Split::Train)
                    .map_err(wrap)?;
                let test = load_idx(&path(&self.test_images, "test_images")?, &path(&self.test_labels, "test_labels")?, Split::Test)
                    .map_err(wrap)?;
                DatasetPair::new(train, test).map_err(wrap)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    #[default]
    PerClass,
    FixedTotal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub base: usize,
    pub increment: usize,
    /// Explicit class order; absent means a shuffle seeded by `seed`.
    pub class_order: Option<Vec<usize>>,
    pub memory: MemoryKind,
    /// Exemplars per class (`per_class`) or in total (`fixed_total`).
    pub memory_size: usize,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            base: 0,
            increment: 2,
            class_order: None,
            memory: MemoryKind::PerClass,
            memory_size: 20,
            selection: Selection::Herding,
            seed: 1993,
        }
    }
}

impl ProtocolConfig {
    pub fn policy(&self) -> MemoryPolicy {
        match self.memory {
            MemoryKind::PerClass => MemoryPolicy::PerClass(self.memory_size),
            MemoryKind::FixedTotal => MemoryPolicy::FixedTotal(self.memory_size),
        }
    }

    pub fn task_protocol(&self) -> TaskProtocol {
        TaskProtocol {
            base_classes: self.base,
            increment: self.increment,
            class_order: self.class_order.clone(),
            memory: self.policy(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub decoder_activation: DecoderActivation,
    pub error_norm: ErrorNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            feature_dim: 64,
            latent_dim: 32,
            decoder_activation: DecoderActivation::Tanh,
            error_norm: ErrorNorm::L2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_epochs: usize,
    pub incremental_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplicative decay applied at each milestone.
    pub lr_gamma: f64,
    /// Milestones as fractions of each stage's epoch budget.
    pub lr_milestones: Vec<f64>,
    /// Rows per class in the fine-tuning subset; absent means the memory quota.
    pub finetune_per_class: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_epochs: 60,
            incremental_epochs: 40,
            finetune_epochs: 20,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            lr_gamma: 0.1,
            lr_milestones: vec![0.6, 0.8],
            finetune_per_class: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Run seed: initialisation, batch order, random selection.
    pub seed: u64,
    pub ablation: Ablation,
    pub dataset: DatasetConfig,
    pub protocol: ProtocolConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ablation: Ablation::Full,
            dataset: DatasetConfig::default(),
            protocol: ProtocolConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.train;
        if t.initial_epochs == 0 || t.incremental_epochs == 0 {
            return invalid("training epoch counts must be at least 1 (finetune_epochs = 0 skips fine-tuning)".into());
        }
        if t.batch_size < 2 {
            return invalid(format!("train.batch_size must be at least 2, got {}", t.batch_size));
        }
        if !(t.learning_rate > 0.0) || !(0.0..1.0).contains(&t.momentum) || !(t.weight_decay >= 0.0) {
            return invalid("need learning_rate > 0, momentum in [0, 1), weight_decay >= 0".into());
        }
        if !(t.lr_gamma > 0.0) || t.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return invalid("lr_gamma must be positive and milestones fractions in [0, 1]".into());
        }
        if t.finetune_per_class == Some(0) {
            return invalid("train.finetune_per_class must be at least 1".into());
        }
        let m = &self.model;
        if m.feature_dim == 0 || m.latent_dim == 0 || m.hidden.contains(&0) {
            return invalid("model widths must be positive".into());
        }
        if m.latent_dim >= m.feature_dim {
            return invalid(format!(
                "model.latent_dim ({}) must be smaller than model.feature_dim ({})",
                m.latent_dim, m.feature_dim
            ));
        }
        if self.protocol.memory_size == 0 {
            return invalid("protocol.memory_size must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_parse() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 3\nablation = \"ae_only\"\nloss.alpha = 0.5\nprotocol.base = 5\nprotocol.increment = 1\nmodel.hidden = [16]\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.ablation, Ablation::AeOnly);
        assert_eq!(cfg.loss.alpha, 0.5);
        assert_eq!(cfg.loss.beta, 2.0);
        assert_eq!(cfg.protocol.base, 5);
        assert_eq!(cfg.model.hidden, vec![16]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("loss.alpa = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, ConfigError::Parse(_)));
        assert!(msg.contains("alpa"), "{msg}");
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.protocol.class_order = Some(vec![1, 0, 3, 2, 4, 5, 6, 7, 8, 9]);
        cfg.train.finetune_per_class = Some(7);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation() {
        assert!(ExperimentConfig::from_toml_str("train.batch_size = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("model.latent_dim = 64").is_err());
        assert!(ExperimentConfig::from_toml_str("loss.tau_r = -1.0").is_err());
    }
}
