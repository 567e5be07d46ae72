//! Paired visual/text feature corpora: in-memory types, the synthetic
//! ground-truth generator, caption-shuffle noise injection and the on-disk
//! format.

mod format;
mod noise;
mod synthetic;

pub use format::{read_corpus, sidecar_path, write_corpus, CORPUS_MAGIC, CORPUS_VERSION};
pub use noise::{inject_noise, noisy_subset_size};
pub use synthetic::{generate_synthetic, Mixing, SyntheticConfig};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid_input(format!("unknown split {other:?}"))),
        }
    }
}

/// Latent object id of every item, in item order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectAssignment {
    pub visual: Vec<u32>,
    pub text: Vec<u32>,
}

/// What is actually known about a pair, hidden from the trainer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_match: bool,
    /// Id of the pair whose image this caption was written for.
    pub caption_source: u32,
    pub objects: Option<ObjectAssignment>,
}

/// One image (as a sequence of region features) and one caption (as a
/// sequence of word features).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub pair_id: u32,
    /// `N_V × d_v`.
    pub visual: Array2<f32>,
    /// `N_L × d_l`.
    pub text: Array2<f32>,
    /// Annotated label as delivered to the trainer; always 1 for training data.
    pub label: u8,
    pub ground_truth: Option<GroundTruth>,
}

impl FeaturePair {
    pub fn visual_items(&self) -> usize {
        self.visual.nrows()
    }

    pub fn text_items(&self) -> usize {
        self.text.nrows()
    }

    /// `Some(true)` when the pair is known to be correctly matched.
    pub fn is_true_match(&self) -> Option<bool> {
        self.ground_truth.as_ref().map(|g| g.true_match)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub split: Split,
    pub visual_dim: usize,
    pub text_dim: usize,
    /// Nominal injected noise rate (metadata only).
    pub noise_rate: f64,
    pub pairs: Vec<FeaturePair>,
}

impl Corpus {
    pub fn new(
        split: Split,
        visual_dim: usize,
        text_dim: usize,
        noise_rate: f64,
        pairs: Vec<FeaturePair>,
    ) -> Result<Self> {
        let corpus = Self {
            split,
            visual_dim,
            text_dim,
            noise_rate,
            pairs,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual_dim == 0 || self.text_dim == 0 {
            return Err(Error::invalid_input("feature dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::invalid_input(format!(
                "noise rate {} outside [0, 1)",
                self.noise_rate
            )));
        }
        for p in &self.pairs {
            if p.visual.ncols() != self.visual_dim || p.text.ncols() != self.text_dim {
                return Err(Error::invalid_input(format!(
                    "pair {} has dims ({}, {}), corpus expects ({}, {})",
                    p.pair_id,
                    p.visual.ncols(),
                    p.text.ncols(),
                    self.visual_dim,
                    self.text_dim
                )));
            }
            if p.visual.nrows() == 0 || p.text.nrows() == 0 {
                return Err(Error::invalid_input(format!(
                    "pair {} has an empty item sequence",
                    p.pair_id
                )));
            }
            if let Some(objects) = p.ground_truth.as_ref().and_then(|g| g.objects.as_ref()) {
                if objects.visual.len() != p.visual.nrows() || objects.text.len() != p.text.nrows()
                {
                    return Err(Error::invalid_input(format!(
                        "pair {} object assignment does not cover every item",
                        p.pair_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of pairs known to be mismatched.
    pub fn mismatch_count(&self) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.is_true_match() == Some(false))
            .count()
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.pairs.is_empty() && self.pairs.iter().all(|p| p.ground_truth.is_some())
    }
}
