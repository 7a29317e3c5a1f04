use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ExpertActivation;
use crate::pretrain::EncoderConfig;
use crate::tasks::{default_task_names, TaskConfig};

/// Everything one training run depends on. Serialized into checkpoints and
/// reports so runs are comparable and reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub fusion_epochs: usize,
    pub lr: f64,
    /// Weight of the summed pretext losses in the fusion objective.
    pub lambda1: f64,
    /// Weight of the clustering alignment loss.
    pub lambda2: f64,
    /// Percentile for the pseudo-label confidence threshold.
    pub percentile: f64,
    /// Cluster count; falls back to the label class count when absent.
    pub n_clusters: Option<usize>,
    /// Pretext tasks, in expert order.
    pub tasks: Vec<String>,
    pub encoder: EncoderConfig,
    pub task_config: TaskConfig,
    /// Stage-one multiplier on the summed pretext losses.
    pub ssl_weight_pretrain: f64,
    /// Score all N² adjacency entries during pretraining.
    pub full_reconstruction: bool,
    pub expert_activation: ExpertActivation,
    /// Ablation switch for the pseudo-label loss.
    pub use_pseudo_label_loss: bool,
    /// Ablation switch for the graph-structure loss.
    pub use_structure_loss: bool,
    /// Recompute pseudo labels from the fused assignment every this many
    /// epochs; frozen for the whole run when absent.
    pub refresh_pseudo_every: Option<usize>,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    /// When set, the gate matrix is written as CSV into this directory
    /// every `gate_dump_every` epochs.
    pub gate_dump_dir: Option<std::path::PathBuf>,
    pub gate_dump_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_epochs: 100,
            fusion_epochs: 200,
            lr: 1e-3,
            lambda1: 0.1,
            lambda2: 1.0,
            percentile: 50.0,
            n_clusters: None,
            tasks: default_task_names(),
            encoder: EncoderConfig::default(),
            task_config: TaskConfig::default(),
            ssl_weight_pretrain: 1.0,
            full_reconstruction: false,
            expert_activation: ExpertActivation::Relu,
            use_pseudo_label_loss: true,
            use_structure_loss: true,
            refresh_pseudo_every: None,
            kmeans_restarts: 10,
            kmeans_max_iter: 100,
            gate_dump_dir: None,
            gate_dump_every: 50,
        }
    }
}

impl RunConfig {
    /// Named per-dataset presets for the trade-off weights.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match name {
            "cora" | "cs" => {}
            "citeseer" => cfg.percentile = 40.0,
            "photo" | "computers" => cfg.lambda1 = 0.01,
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}'; available: cora, citeseer, photo, computers, cs"
                )))
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.pretrain_epochs == 0 {
            return Err(Error::Config("pretrain_epochs must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(0.0 < self.percentile && self.percentile < 100.0) {
            return Err(Error::Config(format!(
                "percentile must lie in (0, 100), got {}",
                self.percentile
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config(
                "at least one pretext task is required".into(),
            ));
        }
        if self.n_clusters == Some(0) || self.n_clusters.map_or(false, |c| c < 2) {
            return Err(Error::Config("n_clusters must be at least 2".into()));
        }
        Ok(())
    }
}
