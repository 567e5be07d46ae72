use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, FeaturePair, GroundTruth, ObjectAssignment, Split};
use crate::error::{Error, Result};
use crate::rng;

/// How latent object prototypes are rendered into each modality's feature space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixing {
    /// Features equal the latent prototype; requires `visual_dim == text_dim == latent_dim`.
    Identity,
    /// A fixed Gaussian matrix per modality, shared by all splits of a seed.
    Random,
}

/// Parameters of the synthetic world and of one sampled split.
///
/// A world (object prototypes and mixing matrices) is fully determined by
/// `seed` and the dimensions, so train/val/test splits generated with the same
/// config share it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_pairs: usize,
    pub vocab_size: usize,
    /// Inclusive range of items per modality per pair.
    pub items_per_modality: (usize, usize),
    /// Inclusive range of distinct objects per pair.
    pub objects_per_pair: (usize, usize),
    pub visual_dim: usize,
    pub text_dim: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub mixing: Mixing,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_pairs: 2000,
            vocab_size: 48,
            items_per_modality: (3, 6),
            objects_per_pair: (2, 4),
            visual_dim: 32,
            text_dim: 24,
            latent_dim: 16,
            noise_sigma: 0.3,
            mixing: Mixing::Random,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.items_per_modality;
        if lo < 2 || lo > hi {
            return Err(Error::invalid_config(format!(
                "items_per_modality must satisfy 2 <= min <= max, got ({lo}, {hi})"
            )));
        }
        if self.vocab_size < hi {
            return Err(Error::invalid_config(format!(
                "vocab_size {} is smaller than max items per modality {hi}",
                self.vocab_size
            )));
        }
        let (olo, ohi) = self.objects_per_pair;
        if olo < 1 || olo > ohi || olo > lo {
            return Err(Error::invalid_config(format!(
                "objects_per_pair must satisfy 1 <= min <= max and min <= min items ({lo}), got ({olo}, {ohi})"
            )));
        }
        if self.visual_dim == 0 || self.text_dim == 0 || self.latent_dim == 0 {
            return Err(Error::invalid_config("dimensions must be positive"));
        }
        if self.mixing == Mixing::Identity
            && (self.visual_dim != self.latent_dim || self.text_dim != self.latent_dim)
        {
            return Err(Error::invalid_config(
                "identity mixing requires visual_dim == text_dim == latent_dim",
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid_config("noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

struct World {
    prototypes: Array2<f64>,
    visual_mix: Option<Array2<f64>>,
    text_mix: Option<Array2<f64>>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

impl World {
    fn build(config: &SyntheticConfig) -> Self {
        let mut rng = rng::stream(config.seed, "world");
        let mut prototypes = gaussian_matrix(&mut rng, config.vocab_size, config.latent_dim, 1.0);
        for mut row in prototypes.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        let scale = 1.0 / (config.latent_dim as f64).sqrt();
        let (visual_mix, text_mix) = match config.mixing {
            Mixing::Identity => (None, None),
            Mixing::Random => (
                Some(gaussian_matrix(
                    &mut rng,
                    config.visual_dim,
                    config.latent_dim,
                    scale,
                )),
                Some(gaussian_matrix(
                    &mut rng,
                    config.text_dim,
                    config.latent_dim,
                    scale,
                )),
            ),
        };
        Self {
            prototypes,
            visual_mix,
            text_mix,
        }
    }

    fn render(
        &self,
        objects: &[u32],
        mix: Option<&Array2<f64>>,
        dim: usize,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Array2<f32> {
        let mut out = Array2::<f32>::zeros((objects.len(), dim));
        for (r, &obj) in objects.iter().enumerate() {
            let proto = self.prototypes.row(obj as usize);
            let clean = match mix {
                Some(m) => m.dot(&proto),
                None => proto.to_owned(),
            };
            for (c, v) in clean.iter().enumerate() {
                let noise: f64 = if sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    sigma * z
                } else {
                    0.0
                };
                out[[r, c]] = (v + noise) as f32;
            }
        }
        out
    }
}

/// Assigns `n_items` items to `objects`, every object at least once, in random order.
fn item_objects(objects: &[u32], n_items: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut items: Vec<u32> = objects.to_vec();
    while items.len() < n_items {
        items.push(objects[rng.random_range(0..objects.len())]);
    }
    items.shuffle(rng);
    items
}

/// Samples one split of the synthetic world described by `config`.
///
/// Every pair is a true match with its object ids recorded per item; noise is
/// added separately by [`super::inject_noise`].
pub fn generate_synthetic(config: &SyntheticConfig, split: Split) -> Result<Corpus> {
    config.validate()?;
    let world = World::build(config);
    let mut rng = rng::stream(config.seed, &format!("pairs/{split}"));
    let (lo, hi) = config.items_per_modality;
    let mut pairs = Vec::with_capacity(config.n_pairs);
    for id in 0..config.n_pairs {
        let n_visual = rng.random_range(lo..=hi);
        let n_text = rng.random_range(lo..=hi);
        let max_objects = config.objects_per_pair.1.min(n_visual).min(n_text);
        let n_objects = rng.random_range(config.objects_per_pair.0..=max_objects);
        let mut objects: Vec<u32> = index::sample(&mut rng, config.vocab_size, n_objects)
            .into_iter()
            .map(|o| o as u32)
            .collect();
        objects.sort_unstable();

        let visual_objects = item_objects(&objects, n_visual, &mut rng);
        let text_objects = item_objects(&objects, n_text, &mut rng);
        let visual = world.render(
            &visual_objects,
            world.visual_mix.as_ref(),
            config.visual_dim,
            config.noise_sigma,
            &mut rng,
        );
        let text = world.render(
            &text_objects,
            world.text_mix.as_ref(),
            config.text_dim,
            config.noise_sigma,
            &mut rng,
        );
        pairs.push(FeaturePair {
            pair_id: id as u32,
            visual,
            text,
            label: 1,
            ground_truth: Some(GroundTruth {
                true_match: true,
                caption_source: id as u32,
                objects: Some(ObjectAssignment {
                    visual: visual_objects,
                    text: text_objects,
                }),
            }),
        });
    }
    Corpus::new(split, config.visual_dim, config.text_dim, 0.0, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mixing: Mixing, sigma: f64) -> SyntheticConfig {
        SyntheticConfig {
            n_pairs: 20,
            vocab_size: 12,
            items_per_modality: (2, 4),
            objects_per_pair: (1, 2),
            visual_dim: 6,
            text_dim: 6,
            latent_dim: 6,
            noise_sigma: sigma,
            mixing,
            seed: 3,
        }
    }

    #[test]
    fn zero_noise_identity_items_equal_prototypes() {
        let corpus = generate_synthetic(&small(Mixing::Identity, 0.0), Split::Train).unwrap();
        for pair in &corpus.pairs {
            let objects = pair.ground_truth.as_ref().unwrap().objects.as_ref().unwrap();
            for (vi, vo) in objects.visual.iter().enumerate() {
                for (ti, to) in objects.text.iter().enumerate() {
                    if vo == to {
                        assert_eq!(pair.visual.row(vi), pair.text.row(ti));
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = small(Mixing::Random, 0.2);
        let a = generate_synthetic(&cfg, Split::Train).unwrap();
        let b = generate_synthetic(&cfg, Split::Train).unwrap();
        assert_eq!(a, b);
        let test = generate_synthetic(&cfg, Split::Test).unwrap();
        assert_ne!(a.pairs[0].visual, test.pairs[0].visual);
    }

    #[test]
    fn every_object_appears_in_both_modalities() {
        let corpus = generate_synthetic(&small(Mixing::Random, 0.1), Split::Val).unwrap();
        for pair in &corpus.pairs {
            let objects = pair.ground_truth.as_ref().unwrap().objects.as_ref().unwrap();
            let mut v = objects.visual.clone();
            let mut t = objects.text.clone();
            v.sort_unstable();
            v.dedup();
            t.sort_unstable();
            t.dedup();
            assert_eq!(v, t);
            assert!((2..=4).contains(&pair.visual_items()));
        }
    }

    #[test]
    fn invalid_sizes_are_config_errors() {
        let mut cfg = small(Mixing::Random, 0.1);
        cfg.items_per_modality = (1, 3);
        assert!(matches!(
            generate_synthetic(&cfg, Split::Train),
            Err(Error::InvalidConfig(_))
        ));
        let mut cfg = small(Mixing::Random, 0.1);
        cfg.vocab_size = 3;
        assert!(generate_synthetic(&cfg, Split::Train).is_err());
        let mut cfg = small(Mixing::Identity, 0.1);
        cfg.text_dim = 5;
        assert!(generate_synthetic(&cfg, Split::Train).is_err());
    }
}
