//! True-correspondence discrimination.
//!
//! A two-component GMM fitted to per-pair cross-modal losses gives the clean
//! probability `y_cm`; pairs above `ω₁` form the rough clean set, which the
//! intra-modal discrepancy `y_im` splits into clean (`y_im < ω₂`) and locally
//! associated pairs. Everything else is noisy and trained on momentum pseudo
//! labels.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::batch::{even_batches, shuffled};
use crate::config::TrainConfig;
use crate::data::FeaturePair;
use crate::error::{Error, Result};
use crate::model::SimilarityModel;
use crate::relation::{loss_im, loss_cm, matching_probabilities};
use crate::rng;

pub const VARIANCE_FLOOR: f64 = 1e-6;
const EM_MAX_ITERS: usize = 100;
const EM_TOLERANCE: f64 = 1e-6;

/// One-dimensional two-component Gaussian mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
}

impl GmmModel {
    /// Index of the component with the smaller mean (the "clean" one).
    pub fn clean_component(&self) -> usize {
        usize::from(self.means[1] < self.means[0])
    }

    fn log_joint(&self, x: f64, k: usize) -> f64 {
        let var = self.variances[k];
        self.weights[k].ln()
            - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
            - (x - self.means[k]).powi(2) / (2.0 * var)
    }

    /// Posterior of each component for `x`.
    pub fn responsibilities(&self, x: f64) -> [f64; 2] {
        let l0 = self.log_joint(x, 0);
        let l1 = self.log_joint(x, 1);
        let m = l0.max(l1);
        if m == f64::NEG_INFINITY {
            return [0.5, 0.5];
        }
        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
        [e0 / (e0 + e1), e1 / (e0 + e1)]
    }

    pub fn log_likelihood(&self, data: &[f64]) -> f64 {
        data.iter()
            .map(|&x| {
                let (l0, l1) = (self.log_joint(x, 0), self.log_joint(x, 1));
                let m = l0.max(l1);
                m + ((l0 - m).exp() + (l1 - m).exp()).ln()
            })
            .sum()
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// EM fit. Means start at the 10th/90th percentiles (min/max if those
/// coincide), weights equal, both variances at the pooled variance.
pub fn fit_gmm(losses: &[f64]) -> Result<GmmModel> {
    if losses.len() < 2 {
        return Err(Error::invalid_input(format!(
            "GMM needs at least 2 samples, got {}",
            losses.len()
        )));
    }
    if losses.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid_input("GMM samples must be finite"));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if min == max {
        return Err(Error::DegenerateDistribution(format!(
            "all {} samples equal {min}",
            losses.len()
        )));
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let pooled = (losses.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);
    let (mut lo, mut hi) = (percentile(&sorted, 0.1), percentile(&sorted, 0.9));
    if lo == hi {
        (lo, hi) = (min, max);
    }
    let mut gmm = GmmModel {
        means: [lo, hi],
        variances: [pooled, pooled],
        weights: [0.5, 0.5],
    };

    let mut prev_ll = gmm.log_likelihood(losses);
    for _ in 0..EM_MAX_ITERS {
        let mut nk = [0.0; 2];
        let mut sum = [0.0; 2];
        let resp: Vec<[f64; 2]> = losses.iter().map(|&x| gmm.responsibilities(x)).collect();
        for (r, &x) in resp.iter().zip(losses) {
            for k in 0..2 {
                nk[k] += r[k];
                sum[k] += r[k] * x;
            }
        }
        let mut next = gmm;
        for k in 0..2 {
            if nk[k] <= 1e-12 {
                continue;
            }
            next.means[k] = sum[k] / nk[k];
            let ss: f64 = resp
                .iter()
                .zip(losses)
                .map(|(r, &x)| r[k] * (x - next.means[k]).powi(2))
                .sum();
            next.variances[k] = (ss / nk[k]).max(VARIANCE_FLOOR);
        }
        let total = nk[0] + nk[1];
        next.weights = [
            (nk[0] / total).max(1e-12),
            (nk[1] / total).max(1e-12),
        ];
        let wsum = next.weights[0] + next.weights[1];
        next.weights = [next.weights[0] / wsum, next.weights[1] / wsum];

        let ll = next.log_likelihood(losses);
        gmm = next;
        if ll - prev_ll < EM_TOLERANCE {
            break;
        }
        prev_ll = ll;
    }
    Ok(gmm)
}

/// `y_cm`: posterior of the smaller-mean component.
pub fn clean_posterior(loss: f64, gmm: &GmmModel) -> f64 {
    gmm.responsibilities(loss)[gmm.clean_component()]
}

/// `y_im = ln(1 + l) / (1 + ln(1 + l))`, mapping `[0, ∞)` onto `[0, 1)`.
pub fn discrepancy_score(l_im: f64) -> Result<f64> {
    if !(l_im >= 0.0) {
        return Err(Error::invalid_input(format!(
            "intra-modal loss must be non-negative, got {l_im}"
        )));
    }
    let t = l_im.ln_1p();
    Ok(t / (1.0 + t))
}

/// `λ = exp(y_im / α)`.
pub fn penalization(y_im: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid_config(format!("alpha must be positive, got {alpha}")));
    }
    Ok((y_im / alpha).exp())
}

/// `ỹᵗ = β ỹᵗ⁻¹ + (1 − β) p`.
pub fn update_pseudo_label(prev: f64, avg_prob: f64, beta: f64) -> f64 {
    beta * prev + (1.0 - beta) * avg_prob
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partition {
    Clean,
    LocalAssociated,
    Noisy,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Clean, Partition::LocalAssociated, Partition::Noisy];

    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::Clean => "clean",
            Partition::LocalAssociated => "local",
            Partition::Noisy => "noisy",
        }
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Three-way split by `ω₁` on `y_cm`, then `ω₂` on `y_im`.
pub fn classify(y_cm: f64, y_im: f64, omega1: f64, omega2: f64) -> Partition {
    if y_cm <= omega1 {
        Partition::Noisy
    } else if y_im < omega2 {
        Partition::Clean
    } else {
        Partition::LocalAssociated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionAssignment {
    pub pair_id: u32,
    pub y_cm: f64,
    pub y_im: f64,
    pub partition: Partition,
    /// Present for locally associated pairs.
    pub lambda: Option<f64>,
    pub pseudo_label: f64,
    pub ground_truth_match: Option<bool>,
}

impl PartitionAssignment {
    /// `ŷ`: 1 for clean and locally associated pairs, the pseudo label otherwise.
    pub fn recast_label(&self) -> f64 {
        match self.partition {
            Partition::Noisy => self.pseudo_label,
            _ => 1.0,
        }
    }
}

/// Builds one assignment, honoring the refinement and penalization switches.
pub fn assign(
    pair_id: u32,
    y_cm: f64,
    y_im: f64,
    pseudo_label: f64,
    config: &TrainConfig,
) -> Result<PartitionAssignment> {
    let partition = if config.refinement {
        classify(y_cm, y_im, config.omega1, config.omega2)
    } else if y_cm > config.omega1 {
        Partition::Clean
    } else {
        Partition::Noisy
    };
    let lambda = match partition {
        Partition::LocalAssociated if config.penalization => Some(penalization(y_im, config.alpha)?),
        Partition::LocalAssociated => Some(1.0),
        _ => None,
    };
    Ok(PartitionAssignment {
        pair_id,
        y_cm,
        y_im,
        partition,
        lambda,
        pseudo_label,
        ground_truth_match: None,
    })
}

/// Per-pair cross-modal statistics from one frozen pass over the data.
#[derive(Debug, Clone)]
pub struct CmScores {
    /// Unweighted per-pair cross-modal loss against in-batch negatives.
    pub losses: Vec<f64>,
    /// `(p^{v2l}_{ii} + p^{l2v}_{ii}) / 2`.
    pub avg_probs: Vec<f64>,
}

/// Evaluates every pair against the negatives of a fixed, epoch-seeded batching.
pub fn per_sample_cm_scores(
    pairs: &[&FeaturePair],
    model: &SimilarityModel,
    config: &TrainConfig,
    epoch: u64,
) -> Result<CmScores> {
    if pairs.is_empty() {
        return Err(Error::invalid_input("cannot score an empty dataset"));
    }
    let all: Vec<usize> = (0..pairs.len()).collect();
    let order = shuffled(&all, &mut rng::indexed_stream(config.seed, "division", epoch));
    let mut losses = vec![0.0; pairs.len()];
    let mut avg_probs = vec![0.0; pairs.len()];
    for batch in even_batches(&order, config.batch_size) {
        let encoded = model.encode_all(batch.iter().map(|&i| pairs[i]))?;
        let probs = matching_probabilities(&model.similarity_matrix(&encoded), config.tau)?;
        let cm = loss_cm(&probs, &vec![1.0; batch.len()])?;
        for (slot, &i) in batch.iter().enumerate() {
            losses[i] = cm.per_pair[slot];
            avg_probs[i] = probs.average_diag(slot);
        }
    }
    Ok(CmScores { losses, avg_probs })
}

pub fn per_sample_cm_losses(
    pairs: &[&FeaturePair],
    model: &SimilarityModel,
    config: &TrainConfig,
    epoch: u64,
) -> Result<Vec<f64>> {
    Ok(per_sample_cm_scores(pairs, model, config, epoch)?.losses)
}

/// `y_im` of every pair, each evaluated in isolation.
pub fn discrepancy_scores(
    pairs: &[&FeaturePair],
    model: &SimilarityModel,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            let encoded = model.encode(p)?;
            discrepancy_score(loss_im(&encoded, model, config.relation_tau, config.kl_mode).value)
        })
        .collect()
}

/// Assigns every pair a partition given a fitted GMM (or `None` when the loss
/// distribution was degenerate, in which case every pair is a clean candidate).
pub fn assign_partitions(
    pairs: &[&FeaturePair],
    model: &SimilarityModel,
    gmm: Option<&GmmModel>,
    cm_losses: &[f64],
    pseudo_labels: &[f64],
    config: &TrainConfig,
) -> Result<Vec<PartitionAssignment>> {
    if cm_losses.len() != pairs.len() || pseudo_labels.len() != pairs.len() {
        return Err(Error::invalid_input("score vectors must cover every pair"));
    }
    let y_im = discrepancy_scores(pairs, model, config)?;
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let y_cm = gmm.map_or(1.0, |g| clean_posterior(cm_losses[i], g));
            let mut a = assign(p.pair_id, y_cm, y_im[i], pseudo_labels[i], config)?;
            a.ground_truth_match = p.is_true_match();
            Ok(a)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub clean: usize,
    pub local: usize,
    pub noisy: usize,
}

impl PartitionSizes {
    pub fn total(&self) -> usize {
        self.clean + self.local + self.noisy
    }
}

/// Outcome of dividing a dataset once.
#[derive(Debug, Clone)]
pub struct Division {
    /// `None` when every loss was identical.
    pub gmm: Option<GmmModel>,
    pub assignments: Vec<PartitionAssignment>,
}

impl Division {
    pub fn sizes(&self) -> PartitionSizes {
        let mut s = PartitionSizes::default();
        for a in &self.assignments {
            match a.partition {
                Partition::Clean => s.clean += 1,
                Partition::LocalAssociated => s.local += 1,
                Partition::Noisy => s.noisy += 1,
            }
        }
        s
    }

    /// Positions (into the divided dataset) of the pairs in `partition`.
    pub fn indices(&self, partition: Partition) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| a.partition == partition)
            .map(|(i, _)| i)
            .collect()
    }

    /// The `k` pairs accepted by `y_cm` with the largest `y_im`.
    pub fn suspected_mismatches(&self, omega1: f64, k: usize) -> Vec<&PartitionAssignment> {
        let mut accepted: Vec<&PartitionAssignment> =
            self.assignments.iter().filter(|a| a.y_cm > omega1).collect();
        accepted.sort_by(|a, b| b.y_im.total_cmp(&a.y_im).then(a.pair_id.cmp(&b.pair_id)));
        accepted.truncate(k);
        accepted
    }

    /// CSV with columns `pair_id, y_cm, y_im, partition, lambda, pseudo_label,
    /// ground_truth_match`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "pair_id",
            "y_cm",
            "y_im",
            "partition",
            "lambda",
            "pseudo_label",
            "ground_truth_match",
        ])?;
        for a in &self.assignments {
            w.write_record([
                a.pair_id.to_string(),
                format!("{:.9}", a.y_cm),
                format!("{:.9}", a.y_im),
                a.partition.to_string(),
                a.lambda.map(|l| format!("{l:.9}")).unwrap_or_default(),
                format!("{:.9}", a.pseudo_label),
                a.ground_truth_match.map(|m| m.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Carries pseudo labels across epochs.
#[derive(Debug, Clone, Default)]
pub struct Divider {
    pseudo_labels: Option<Vec<f64>>,
}

impl Divider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pseudo_labels(&self) -> Option<&[f64]> {
        self.pseudo_labels.as_deref()
    }

    /// Divides `pairs` with `model` frozen.
    ///
    /// Pseudo labels start at the first division's average matching
    /// probability and are momentum-updated for every pair at each call.
    pub fn divide(
        &mut self,
        pairs: &[&FeaturePair],
        model: &SimilarityModel,
        config: &TrainConfig,
        epoch: u64,
    ) -> Result<Division> {
        let scores = per_sample_cm_scores(pairs, model, config, epoch)?;
        let prev = match self.pseudo_labels.take() {
            Some(p) if p.len() == pairs.len() => p,
            _ => scores.avg_probs.clone(),
        };
        let pseudo: Vec<f64> = prev
            .iter()
            .zip(&scores.avg_probs)
            .map(|(&y, &p)| update_pseudo_label(y, p, config.beta))
            .collect();

        let gmm = match fit_gmm(&scores.losses) {
            Ok(g) => Some(g),
            Err(Error::DegenerateDistribution(msg)) => {
                log::warn!("degenerate loss distribution ({msg}); every pair is a clean candidate");
                None
            }
            Err(e) => return Err(e),
        };
        let assignments =
            assign_partitions(pairs, model, gmm.as_ref(), &scores.losses, &pseudo, config)?;
        self.pseudo_labels = Some(pseudo);
        Ok(Division { gmm, assignments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn gmm_on_two_clusters() {
        let losses = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let g = fit_gmm(&losses).unwrap();
        let c = g.clean_component();
        assert_abs_diff_eq!(g.means[c], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g.means[1 - c], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g.weights[0], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn gmm_two_points() {
        let g = fit_gmm(&[0.0, 1.0]).unwrap();
        let mut means = g.means;
        means.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(means[0], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(means[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn gmm_errors() {
        assert!(matches!(
            fit_gmm(&[0.3, 0.3, 0.3]),
            Err(Error::DegenerateDistribution(_))
        ));
        assert!(matches!(fit_gmm(&[0.3]), Err(Error::InvalidInput(_))));
        assert!(matches!(fit_gmm(&[0.3, f64::NAN]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn posterior_extremes() {
        let g = GmmModel {
            means: [0.1, 3.0],
            variances: [0.01, 0.01],
            weights: [0.5, 0.5],
        };
        assert!(clean_posterior(0.1, &g) > 1.0 - 1e-9);
        assert!(clean_posterior(3.0, &g) < 1e-9);
        let flat = GmmModel {
            means: [1.0, 1.0],
            variances: [0.5, 0.5],
            weights: [0.5, 0.5],
        };
        for x in [-3.0, 0.0, 1.0, 7.5] {
            assert_abs_diff_eq!(clean_posterior(x, &flat), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn discrepancy_examples() {
        assert_eq!(discrepancy_score(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            discrepancy_score(std::f64::consts::E - 1.0).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        let e2 = std::f64::consts::E.powi(2) - 1.0;
        assert_abs_diff_eq!(discrepancy_score(e2).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert!(discrepancy_score(-0.1).is_err());
    }

    #[test]
    fn penalization_examples() {
        assert_eq!(penalization(0.0, 0.1).unwrap(), 1.0);
        assert_abs_diff_eq!(penalization(0.2, 0.1).unwrap(), 2f64.exp(), epsilon = 1e-9);
        assert_abs_diff_eq!(penalization(0.5, 0.1).unwrap(), 148.4131591, epsilon = 1e-6);
        assert!(matches!(penalization(0.5, 0.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn pseudo_label_examples() {
        assert_abs_diff_eq!(update_pseudo_label(0.5, 0.9, 0.6), 0.66, epsilon = 1e-12);
        assert_eq!(update_pseudo_label(0.3, 0.9, 1.0), 0.3);
        assert_eq!(update_pseudo_label(0.3, 0.9, 0.0), 0.9);
    }

    #[test]
    fn assignment_examples() {
        let cfg = TrainConfig::default();
        let a = assign(0, 0.9, 0.1, 0.2, &cfg).unwrap();
        assert_eq!(a.partition, Partition::Clean);
        assert_eq!(a.recast_label(), 1.0);
        let b = assign(1, 0.9, 0.7, 0.2, &cfg).unwrap();
        assert_eq!(b.partition, Partition::LocalAssociated);
        assert_abs_diff_eq!(b.lambda.unwrap(), 7f64.exp(), epsilon = 1e-6);
        assert_eq!(b.recast_label(), 1.0);
        let c = assign(2, 0.3, 0.1, 0.42, &cfg).unwrap();
        assert_eq!(c.partition, Partition::Noisy);
        assert_eq!(c.recast_label(), 0.42);

        let plain = TrainConfig::default().without_relations();
        assert_eq!(assign(1, 0.9, 0.7, 0.2, &plain).unwrap().partition, Partition::Clean);
    }

    proptest! {
        #[test]
        fn classification_respects_thresholds(y_cm in 0.0f64..=1.0, y_im in 0.0f64..1.0, w1 in 0.05f64..0.95, w2 in 0.05f64..0.95) {
            match classify(y_cm, y_im, w1, w2) {
                Partition::Clean => prop_assert!(y_cm > w1 && y_im < w2),
                Partition::LocalAssociated => prop_assert!(y_cm > w1 && y_im >= w2),
                Partition::Noisy => prop_assert!(y_cm <= w1),
            }
        }

        #[test]
        fn discrepancy_monotone(a in 0.0f64..1e6, b in 0.0f64..1e6) {
            let (sa, sb) = (discrepancy_score(a).unwrap(), discrepancy_score(b).unwrap());
            prop_assert!((0.0..1.0).contains(&sa));
            if a < b {
                prop_assert!(sa <= sb);
            }
        }

        #[test]
        fn penalization_at_least_one(y in 0.0f64..1.0, dy in 1e-6f64..0.5, alpha in 0.01f64..2.0) {
            let l = penalization(y, alpha).unwrap();
            prop_assert!(l >= 1.0);
            prop_assert!(penalization(y + dy, alpha).unwrap() > l);
        }

        #[test]
        fn pseudo_label_stays_in_unit_interval(prev in 0.0f64..=1.0, p in 0.0f64..=1.0, beta in 0.0f64..=1.0) {
            let y = update_pseudo_label(prev, p, beta);
            prop_assert!((0.0..=1.0).contains(&y));
        }

        #[test]
        fn posterior_non_increasing_above_clean_mean(
            m0 in 0.0f64..1.0, gap in 0.5f64..3.0, v0 in 0.01f64..0.5, extra in 0.0f64..0.5,
            w in 0.1f64..0.9, x in 0.0f64..5.0, dx in 0.0f64..1.0,
        ) {
            let g = GmmModel { means: [m0, m0 + gap], variances: [v0, v0 + extra], weights: [w, 1.0 - w] };
            let x = m0 + x;
            prop_assert!(clean_posterior(x, &g) + 1e-12 >= clean_posterior(x + dx, &g));
            prop_assert!(clean_posterior(g.means[0], &g) > clean_posterior(g.means[1], &g));
        }
    }
}
