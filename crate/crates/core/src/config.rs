use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relation::KlMode;

/// Which objective drives the post-warmup epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Per-epoch division and partition-specific losses.
    #[default]
    Recon,
    /// Keep training every pair with the warmup triplet loss (baseline).
    TripletOnly,
}

/// Every knob of a training run. Defaults follow the reference
/// hyperparameters (`N_b = 128`, `τ = 0.1`, `ω₁ = ω₂ = 0.5`, `α = 0.1`,
/// `β = 0.6`, `γ = 0.2`, `ξ = 5`, `η = 5`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Temperature of the matching probabilities.
    pub tau: f64,
    /// Temperature of the relation matrices.
    pub relation_tau: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub xi: f64,
    pub warmup_epochs: usize,
    /// Epochs after warmup.
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fraction of all epochs after which the learning rate is multiplied by `lr_decay`.
    pub lr_decay_at: f64,
    pub lr_decay: f64,
    pub embed_dim: usize,
    /// Whether the bilinear similarity head is trained (otherwise it stays at identity).
    pub train_similarity: bool,
    pub kl_mode: KlMode,
    pub strategy: Strategy,
    /// Ablation switch: include the intra-modal loss in the clean/local objectives.
    pub intra_modal_loss: bool,
    /// Ablation switch: split the rough clean partition by the discrepancy score.
    pub refinement: bool,
    /// Ablation switch: down-weight the intra-modal loss of local pairs by `1/λ`.
    pub penalization: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            tau: 0.1,
            relation_tau: 0.1,
            omega1: 0.5,
            omega2: 0.5,
            alpha: 0.1,
            beta: 0.6,
            gamma: 0.2,
            xi: 5.0,
            warmup_epochs: 5,
            epochs: 10,
            learning_rate: 0.05,
            momentum: 0.9,
            lr_decay_at: 0.75,
            lr_decay: 0.1,
            embed_dim: 16,
            train_similarity: false,
            kl_mode: KlMode::Forward,
            strategy: Strategy::Recon,
            intra_modal_loss: true,
            refinement: true,
            penalization: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Cross-modal-only division and objectives: no intra-modal loss, no
    /// discrepancy refinement, no penalization.
    pub fn without_relations(mut self) -> Self {
        self.intra_modal_loss = false;
        self.refinement = false;
        self.penalization = false;
        self
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.epochs
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decay_epoch = (self.lr_decay_at * self.total_epochs() as f64).floor() as usize;
        if epoch >= decay_epoch {
            self.learning_rate * self.lr_decay
        } else {
            self.learning_rate
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid_config(msg));
        let positive = |name: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid_config(format!("{name} must be positive, got {v}")))
            }
        };
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        positive("tau", self.tau)?;
        positive("relation_tau", self.relation_tau)?;
        positive("alpha", self.alpha)?;
        positive("gamma", self.gamma)?;
        positive("xi", self.xi)?;
        positive("learning_rate", self.learning_rate)?;
        positive("lr_decay", self.lr_decay)?;
        for (name, v) in [("omega1", self.omega1), ("omega2", self.omega2)] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) {
            return fail(format!("lr_decay_at must lie in [0, 1], got {}", self.lr_decay_at));
        }
        if self.embed_dim < 2 {
            return fail(format!("embed_dim must be at least 2, got {}", self.embed_dim));
        }
        Ok(())
    }
}
