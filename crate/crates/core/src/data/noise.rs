use rand::seq::{index, SliceRandom};

use super::{Corpus, GroundTruth, Split};
use crate::error::{Error, Result};
use crate::rng;

/// `⌈rate · n⌉`, tolerant of representation error in `rate · n`.
pub fn noisy_subset_size(rate: f64, n: usize) -> usize {
    let exact = rate * n as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Random permutation of `0..n` with no fixed points, by rejection.
fn derangement(n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    debug_assert!(n >= 2);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Shuffles the captions of a uniformly chosen `⌈rate · n⌉` subset of training
/// pairs so that no pair in the subset keeps its own caption.
///
/// Annotated labels stay 1; `ground_truth.true_match` records the truth. A
/// subset of one is expanded to two (or skipped for a 1-pair corpus) because a
/// single caption cannot be deranged.
pub fn inject_noise(corpus: &Corpus, rate: f64, seed: u64) -> Result<Corpus> {
    if corpus.split != Split::Train {
        return Err(Error::invalid_input(format!(
            "noise is only injected into the train split, got {}",
            corpus.split
        )));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid_input(format!("noise rate {rate} outside [0, 1)")));
    }
    let n = corpus.len();
    let mut out = corpus.clone();
    out.noise_rate = rate;

    let mut k = noisy_subset_size(rate, n);
    if k == 1 {
        if n >= 2 {
            log::warn!("noisy subset of size 1 cannot be deranged; expanding to 2");
            k = 2;
        } else {
            log::warn!("single-pair corpus cannot be deranged; no noise injected");
            k = 0;
        }
    }
    if k == 0 {
        return Ok(out);
    }

    let mut rng = rng::stream(seed, "noise");
    let mut subset = index::sample(&mut rng, n, k).into_vec();
    subset.sort_unstable();
    let perm = derangement(k, &mut rng);

    for (slot, &target) in subset.iter().enumerate() {
        let source = &corpus.pairs[subset[perm[slot]]];
        let source_truth = source.ground_truth.clone().unwrap_or(GroundTruth {
            true_match: true,
            caption_source: source.pair_id,
            objects: None,
        });
        let dest = &mut out.pairs[target];
        dest.text = source.text.clone();
        let objects = match (
            dest.ground_truth.as_ref().and_then(|g| g.objects.as_ref()),
            source_truth.objects.as_ref(),
        ) {
            (Some(own), Some(theirs)) => Some(super::ObjectAssignment {
                visual: own.visual.clone(),
                text: theirs.text.clone(),
            }),
            _ => None,
        };
        dest.ground_truth = Some(GroundTruth {
            true_match: source_truth.caption_source == dest.pair_id,
            caption_source: source_truth.caption_source,
            objects,
        });
    }
    for pair in out.pairs.iter_mut().filter(|p| p.ground_truth.is_none()) {
        pair.ground_truth = Some(GroundTruth {
            true_match: true,
            caption_source: pair.pair_id,
            objects: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn corpus(n: usize) -> Corpus {
        let cfg = SyntheticConfig {
            n_pairs: n,
            vocab_size: 10,
            items_per_modality: (2, 3),
            objects_per_pair: (1, 2),
            visual_dim: 4,
            text_dim: 3,
            latent_dim: 4,
            noise_sigma: 0.1,
            seed: 11,
            ..SyntheticConfig::default()
        };
        generate_synthetic(&cfg, Split::Train).unwrap()
    }

    #[test]
    fn subset_size_rounds_up() {
        assert_eq!(noisy_subset_size(0.4, 100), 40);
        assert_eq!(noisy_subset_size(0.4, 2000), 800);
        assert_eq!(noisy_subset_size(0.2, 7), 2);
        assert_eq!(noisy_subset_size(0.0, 7), 0);
    }

    #[test]
    fn zero_rate_is_identity() {
        let c = corpus(10);
        let noisy = inject_noise(&c, 0.0, 1).unwrap();
        assert_eq!(noisy.pairs, c.pairs);
    }

    #[test]
    fn two_pair_subset_swaps() {
        let c = corpus(10);
        let noisy = inject_noise(&c, 0.2, 5).unwrap();
        let changed: Vec<usize> = (0..10)
            .filter(|&i| noisy.pairs[i].text != c.pairs[i].text)
            .collect();
        assert_eq!(changed.len(), 2);
        let (a, b) = (changed[0], changed[1]);
        assert_eq!(noisy.pairs[a].text, c.pairs[b].text);
        assert_eq!(noisy.pairs[b].text, c.pairs[a].text);
        assert_eq!(noisy.mismatch_count(), 2);
    }

    #[test]
    fn forty_percent_of_hundred() {
        let c = corpus(100);
        let noisy = inject_noise(&c, 0.4, 9).unwrap();
        assert_eq!(noisy.mismatch_count(), 40);
        for (orig, new) in c.pairs.iter().zip(&noisy.pairs) {
            let truth = new.ground_truth.as_ref().unwrap();
            assert_eq!(truth.true_match, truth.caption_source == new.pair_id);
            if !truth.true_match {
                assert_ne!(orig.text, new.text);
            }
            assert_eq!(new.label, 1);
        }
    }

    #[test]
    fn singleton_subset_is_expanded() {
        let c = corpus(5);
        let noisy = inject_noise(&c, 0.1, 2).unwrap();
        assert_eq!(noisy.mismatch_count(), 2);
        let one = corpus(1);
        assert_eq!(inject_noise(&one, 0.5, 2).unwrap().mismatch_count(), 0);
    }

    #[test]
    fn rejects_non_train_split() {
        let mut c = corpus(4);
        c.split = Split::Test;
        assert!(inject_noise(&c, 0.5, 1).is_err());
        let c = corpus(4);
        assert!(inject_noise(&c, 1.0, 1).is_err());
    }
}
