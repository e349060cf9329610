//! Experiment configuration.
//!
//! Configs load from JSON with every field optional; defaults reproduce the
//! reference setup (32-dim embeddings, a (32, 16, 8) tower, 20 rounds of
//! 256-client batches, epsilon 5, top-30 augmentation, both contrastive
//! terms at weight 0.5). Unknown keys are rejected so typos fail loudly
//! instead of silently running the default.

use crate::error::{Error, Result};
use crate::model::{Activation, AdamConfig, ModelDims};
use crate::privacy::PrivacyConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Where interactions come from: generated on the fly, or parsed from files.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Built-in clustered generator; `seed` here controls only the dataset.
    #[serde(rename_all = "snake_case")]
    Synthetic {
        #[serde(default = "defaults::synth_users")]
        users: usize,
        #[serde(default = "defaults::synth_items")]
        items: usize,
        #[serde(default = "defaults::synth_clusters")]
        clusters: usize,
        #[serde(default = "defaults::synth_seed")]
        seed: u64,
    },
    /// `user::item::rating::timestamp` ratings plus `id::title::genres`
    /// titles and a word-vector table for item similarity.
    #[serde(rename_all = "snake_case")]
    Files {
        ratings: String,
        titles: String,
        word_vectors: String,
        #[serde(default = "defaults::separator")]
        separator: String,
    },
    /// Ratings plus a precomputed item-item similarity CSV.
    #[serde(rename_all = "snake_case")]
    FilesWithSimilarity {
        ratings: String,
        similarity: String,
        #[serde(default = "defaults::separator")]
        separator: String,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            users: defaults::synth_users(),
            items: defaults::synth_items(),
            clusters: defaults::synth_clusters(),
            seed: defaults::synth_seed(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Fraction of each user's interactions kept for training.
    pub train_frac: f64,
    /// Sampled negatives per training positive.
    pub neg_ratio: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::default(),
            train_frac: 0.8,
            neg_ratio: 4,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 32,
            hidden: vec![32, 16, 8],
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            embedding_dim: self.embedding_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Federated rounds.
    pub rounds: usize,
    /// Clients aggregated per batch within a round.
    pub clients_per_batch: usize,
    /// Local (and auxiliary) epochs per round.
    pub local_epochs: usize,
    pub lr: f64,
    /// Minibatch size for client-local training; full batch when absent.
    pub local_batch: Option<usize>,
    /// Minibatch size for server-side auxiliary training.
    pub aux_batch_size: usize,
    /// Weight aggregation by local training-set size instead of uniformly.
    pub weighted_aggregation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 20,
            clients_per_batch: 256,
            local_epochs: 5,
            lr: 0.001,
            local_batch: Some(16),
            aux_batch_size: 1024,
            weighted_aggregation: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacySettings {
    pub epsilon: f64,
    /// Overrides the similarity-range sensitivity when set.
    pub delta_override: Option<f64>,
}

impl Default for PrivacySettings {
    fn default() -> Self {
        PrivacySettings {
            epsilon: 5.0,
            delta_override: None,
        }
    }
}

impl PrivacySettings {
    pub fn mechanism(&self) -> PrivacyConfig {
        PrivacyConfig {
            epsilon: self.epsilon,
            delta: self.delta_override,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Auxiliary-ranked items appended per client; 0 disables augmentation.
    pub top_alpha: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { top_alpha: 30 }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Weight of the server-side item-embedding term.
    pub beta: f64,
    /// Weight of the client-side user-embedding term.
    pub lambda: f64,
    pub tau: f64,
    /// Cap on contrast items per server step; the full catalog when absent.
    pub item_sample: Option<usize>,
    /// Cap on denominator rows for the client-side user term; the full user
    /// table when absent.
    pub user_sample: Option<usize>,
    /// Optimizer steps applied to the item term after each aggregation.
    pub item_cl_steps: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            beta: 0.5,
            lambda: 0.5,
            tau: 0.2,
            item_sample: None,
            user_sample: None,
            item_cl_steps: 1,
        }
    }
}

/// Feature switches for ablations. All on is the full method; all off is
/// the plain federated baseline.
#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureFlags {
    pub augmentation: bool,
    pub item_cl: bool,
    pub user_cl: bool,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        FeatureFlags {
            augmentation: true,
            item_cl: true,
            user_cl: true,
        }
    }
}

impl FeatureFlags {
    /// Anything that needs the perturbed store and auxiliary model.
    pub fn needs_aux(&self) -> bool {
        self.augmentation || self.item_cl || self.user_cl
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 20 }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub privacy: PrivacySettings,
    pub augment: AugmentConfig,
    pub contrastive: ContrastiveConfig,
    pub features: FeatureFlags,
    pub eval: EvalConfig,
    pub seed: u64,
    /// Write the perturbed uploads next to the metrics when set.
    pub dump_contributions: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            privacy: PrivacySettings::default(),
            augment: AugmentConfig::default(),
            contrastive: ContrastiveConfig::default(),
            features: FeatureFlags::default(),
            eval: EvalConfig::default(),
            seed: 0,
            dump_contributions: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.train_frac > 0.0 && self.data.train_frac < 1.0) {
            return Err(Error::Config(format!(
                "data.train_frac {} must lie strictly between 0 and 1",
                self.data.train_frac
            )));
        }
        match &self.data.source {
            DataSource::Synthetic {
                users,
                items,
                clusters,
                ..
            } => {
                if *users == 0 || *items == 0 {
                    return Err(Error::Config(
                        "data.source users and items must be positive".into(),
                    ));
                }
                if *clusters == 0 || clusters > items {
                    return Err(Error::Config(format!(
                        "data.source clusters {clusters} must lie in 1..={items}"
                    )));
                }
            }
            DataSource::Files { separator, .. }
            | DataSource::FilesWithSimilarity { separator, .. } => {
                if separator.is_empty() {
                    return Err(Error::Config(
                        "data.source separator must be nonempty".into(),
                    ));
                }
            }
        }
        if self.model.embedding_dim == 0 {
            return Err(Error::Config("model.embedding_dim must be positive".into()));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::Config(
                "model.hidden must list positive layer widths".into(),
            ));
        }
        if self.train.clients_per_batch == 0 {
            return Err(Error::Config(
                "train.clients_per_batch must be positive".into(),
            ));
        }
        if self.train.local_epochs == 0 {
            return Err(Error::Config("train.local_epochs must be positive".into()));
        }
        if self.train.aux_batch_size == 0 {
            return Err(Error::Config("train.aux_batch_size must be positive".into()));
        }
        if !(self.train.lr > 0.0) || !self.train.lr.is_finite() {
            return Err(Error::Config(format!(
                "train.lr {} must be a finite positive number",
                self.train.lr
            )));
        }
        self.privacy.mechanism().validate()?;
        for (key, value) in [
            ("contrastive.beta", self.contrastive.beta),
            ("contrastive.lambda", self.contrastive.lambda),
        ] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(Error::Config(format!(
                    "{key} {value} must be a finite non-negative number"
                )));
            }
        }
        if !(self.contrastive.tau > 0.0) || !self.contrastive.tau.is_finite() {
            return Err(Error::Config(format!(
                "contrastive.tau {} must be a finite positive number",
                self.contrastive.tau
            )));
        }
        if self.contrastive.item_sample == Some(0) {
            return Err(Error::Config(
                "contrastive.item_sample must be positive when set".into(),
            ));
        }
        if self.contrastive.user_sample == Some(0) {
            return Err(Error::Config(
                "contrastive.user_sample must be positive when set".into(),
            ));
        }
        if self.train.local_batch == Some(0) {
            return Err(Error::Config(
                "train.local_batch must be positive when set".into(),
            ));
        }
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be positive".into()));
        }
        Ok(())
    }

    /// Human-readable variant name derived from the feature switches.
    pub fn label(&self) -> String {
        let f = self.features;
        match (f.augmentation, f.item_cl, f.user_cl) {
            (true, true, true) => "PDC-FRS".into(),
            (false, false, false) => "FedNCF".into(),
            (true, false, false) => "FedNCF+Aug".into(),
            (false, true, true) => "FedNCF+CL".into(),
            _ => {
                let mut parts = vec!["FedNCF"];
                if f.augmentation {
                    parts.push("Aug");
                }
                if f.item_cl {
                    parts.push("ItemCL");
                }
                if f.user_cl {
                    parts.push("UserCL");
                }
                parts.join("+")
            }
        }
    }
}

mod defaults {
    pub fn synth_users() -> usize {
        400
    }
    pub fn synth_items() -> usize {
        120
    }
    pub fn synth_clusters() -> usize {
        6
    }
    pub fn synth_seed() -> u64 {
        7
    }
    pub fn separator() -> String {
        "::".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default_config() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.model.embedding_dim, 32);
        assert_eq!(cfg.model.hidden, vec![32, 16, 8]);
        assert_eq!(cfg.train.rounds, 20);
        assert_eq!(cfg.train.clients_per_batch, 256);
        assert_eq!(cfg.train.local_epochs, 5);
        assert_eq!(cfg.privacy.epsilon, 5.0);
        assert_eq!(cfg.augment.top_alpha, 30);
        assert_eq!(cfg.contrastive.beta, 0.5);
        assert_eq!(cfg.contrastive.lambda, 0.5);
        assert_eq!(cfg.eval.k, 20);
        assert_eq!(cfg.data.neg_ratio, 4);
        assert!(cfg.dump_contributions);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"train": {"roundz": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("roundz"), "{err}");
    }

    #[test]
    fn validation_names_the_offending_key() {
        let err = ExperimentConfig::from_json(r#"{"contrastive": {"tau": 0.0}}"#).unwrap_err();
        assert!(err.to_string().contains("contrastive.tau"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"privacy": {"epsilon": -1.0}}"#).unwrap_err();
        assert!(err.to_string().contains("epsilon"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"data": {"train_frac": 1.0}}"#).unwrap_err();
        assert!(err.to_string().contains("train_frac"), "{err}");
    }

    #[test]
    fn labels_follow_the_feature_switches() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.label(), "PDC-FRS");
        cfg.features = FeatureFlags {
            augmentation: false,
            item_cl: false,
            user_cl: false,
        };
        assert_eq!(cfg.label(), "FedNCF");
        cfg.features.augmentation = true;
        assert_eq!(cfg.label(), "FedNCF+Aug");
        cfg.features = FeatureFlags {
            augmentation: false,
            item_cl: true,
            user_cl: true,
        };
        assert_eq!(cfg.label(), "FedNCF+CL");
        cfg.features.user_cl = false;
        assert_eq!(cfg.label(), "FedNCF+ItemCL");
    }

    #[test]
    fn file_configs_round_trip_through_json() {
        let cfg = ExperimentConfig {
            seed: 123,
            ..ExperimentConfig::default()
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_source_parses_with_custom_separator() {
        let cfg = ExperimentConfig::from_json(
            r#"{"data": {"source": {"files": {"ratings": "r.dat", "titles": "t.dat",
                 "word_vectors": "w.txt", "separator": "\t"}}, "neg_ratio": 2}}"#,
        )
        .unwrap();
        match &cfg.data.source {
            DataSource::Files { separator, .. } => assert_eq!(separator, "\t"),
            other => panic!("unexpected source {other:?}"),
        }
        assert_eq!(cfg.data.neg_ratio, 2);
    }

    #[test]
    fn synthetic_source_fills_field_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"data": {"source": {"synthetic": {"users": 12}}}}"#,
        )
        .unwrap();
        match cfg.data.source {
            DataSource::Synthetic {
                users,
                items,
                clusters,
                seed,
            } => {
                assert_eq!(users, 12);
                assert_eq!(items, 120);
                assert_eq!(clusters, 6);
                assert_eq!(seed, 7);
            }
            other => panic!("unexpected source {other:?}"),
        }
    }
}
