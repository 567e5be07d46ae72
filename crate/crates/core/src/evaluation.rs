//! Retrieval metrics, division quality, and the object-level relation
//! alignment oracle available on synthetic corpora.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, FeaturePair};
use crate::division::{Partition, PartitionAssignment};
use crate::error::{Error, Result};
use crate::model::{EmbeddedPair, SimilarityModel};
use crate::numerics::{kl_from_logs, row_log_softmax};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Percentages of queries whose true item lands in the top K, one per `ks`.
///
/// Ranking is by descending similarity; ties go to the lower gallery index.
pub fn recall_at_k(sim: &Array2<f64>, truth: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    if truth.len() != sim.nrows() {
        return Err(Error::invalid_input(format!(
            "{} ground-truth indices for {} queries",
            truth.len(),
            sim.nrows()
        )));
    }
    if sim.nrows() == 0 {
        return Err(Error::invalid_input("no queries"));
    }
    let mut hits = vec![0usize; ks.len()];
    for (q, &t) in truth.iter().enumerate() {
        if t >= sim.ncols() {
            return Err(Error::invalid_input(format!(
                "ground truth {t} out of range for gallery of {}",
                sim.ncols()
            )));
        }
        let row = sim.row(q);
        let target = row[t];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > target || (s == target && j < t))
            .count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    let n = truth.len() as f64;
    Ok(hits.into_iter().map(|h| 100.0 * h as f64 / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionRecall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl DirectionRecall {
    pub fn sum(&self) -> f64 {
        self.r1 + self.r5 + self.r10
    }

    fn from_matrix(sim: &Array2<f64>, truth: &[usize]) -> Result<Self> {
        let r = recall_at_k(sim, truth, &RECALL_KS)?;
        Ok(Self {
            r1: r[0],
            r5: r[1],
            r10: r[2],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub image_to_text: DirectionRecall,
    pub text_to_image: DirectionRecall,
    pub rsum: f64,
}

impl RetrievalReport {
    /// Both directions from an image × caption similarity matrix where the
    /// annotated match of image `i` is caption `i`.
    pub fn from_similarity(sim: &Array2<f64>) -> Result<Self> {
        if sim.nrows() != sim.ncols() {
            return Err(Error::invalid_input("retrieval needs a square similarity matrix"));
        }
        let truth: Vec<usize> = (0..sim.nrows()).collect();
        let image_to_text = DirectionRecall::from_matrix(sim, &truth)?;
        let text_to_image = DirectionRecall::from_matrix(&sim.t().to_owned(), &truth)?;
        Ok(Self {
            image_to_text,
            text_to_image,
            rsum: image_to_text.sum() + text_to_image.sum(),
        })
    }
}

/// Every image against every caption of `corpus`.
pub fn evaluate_retrieval(corpus: &Corpus, model: &SimilarityModel) -> Result<RetrievalReport> {
    if corpus.is_empty() {
        return Err(Error::invalid_input(format!("{} split is empty", corpus.split)));
    }
    let encoded = model.encode_all(&corpus.pairs)?;
    RetrievalReport::from_similarity(&pooled_similarity(model, &encoded))
}

fn pooled_similarity(model: &SimilarityModel, encoded: &[EmbeddedPair]) -> Array2<f64> {
    let d = model.embed_dim();
    let stack = |f: fn(&EmbeddedPair) -> &Array1<f64>| {
        let mut m = Array2::zeros((encoded.len(), d));
        for (mut row, e) in m.axis_iter_mut(Axis(0)).zip(encoded) {
            row.assign(f(e));
        }
        m
    };
    model.pairwise(
        &stack(EmbeddedPair::pooled_visual),
        &stack(EmbeddedPair::pooled_text),
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub size: usize,
    pub true_match: usize,
    pub true_mismatch: usize,
}

/// Confusion counts of a division, with the noisy partition as the positive
/// prediction for mismatch detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivisionReport {
    pub clean: PartitionCounts,
    pub local: PartitionCounts,
    pub noisy: PartitionCounts,
    /// Reported as 1 when the noisy partition is empty (see `precision_defined`).
    pub mismatch_precision: f64,
    pub precision_defined: bool,
    /// Reported as 1 when there are no mismatches (see `recall_defined`).
    pub mismatch_recall: f64,
    pub recall_defined: bool,
}

impl DivisionReport {
    pub fn total(&self) -> usize {
        self.clean.size + self.local.size + self.noisy.size
    }

    /// Share of true mismatches inside the clean partition (0 when it is empty).
    pub fn clean_mismatch_fraction(&self) -> f64 {
        if self.clean.size == 0 {
            0.0
        } else {
            self.clean.true_mismatch as f64 / self.clean.size as f64
        }
    }

    pub fn counts(&self, partition: Partition) -> &PartitionCounts {
        match partition {
            Partition::Clean => &self.clean,
            Partition::LocalAssociated => &self.local,
            Partition::Noisy => &self.noisy,
        }
    }
}

/// `true_match[i]` is the ground truth of `assignments[i]`.
pub fn division_quality(
    assignments: &[PartitionAssignment],
    true_match: &[bool],
) -> Result<DivisionReport> {
    if assignments.len() != true_match.len() {
        return Err(Error::invalid_input(format!(
            "ground truth covers {} of {} pairs",
            true_match.len(),
            assignments.len()
        )));
    }
    let mut counts: BTreeMap<u8, PartitionCounts> = BTreeMap::new();
    for (a, &m) in assignments.iter().zip(true_match) {
        let c = counts.entry(a.partition as u8).or_default();
        c.size += 1;
        if m {
            c.true_match += 1;
        } else {
            c.true_mismatch += 1;
        }
    }
    let get = |p: Partition| counts.get(&(p as u8)).copied().unwrap_or_default();
    let (clean, local, noisy) = (
        get(Partition::Clean),
        get(Partition::LocalAssociated),
        get(Partition::Noisy),
    );
    let mismatches = clean.true_mismatch + local.true_mismatch + noisy.true_mismatch;
    let ratio = |num: usize, den: usize| if den == 0 { (1.0, false) } else { (num as f64 / den as f64, true) };
    let (mismatch_precision, precision_defined) = ratio(noisy.true_mismatch, noisy.size);
    let (mismatch_recall, recall_defined) = ratio(noisy.true_mismatch, mismatches);
    Ok(DivisionReport {
        clean,
        local,
        noisy,
        mismatch_precision,
        precision_defined,
        mismatch_recall,
        recall_defined,
    })
}

/// Uses the ground truth carried by each assignment.
pub fn division_quality_from_assignments(
    assignments: &[PartitionAssignment],
) -> Result<DivisionReport> {
    let mask: Option<Vec<bool>> = assignments.iter().map(|a| a.ground_truth_match).collect();
    let mask = mask.ok_or_else(|| Error::invalid_input("assignments lack ground truth"))?;
    division_quality(assignments, &mask)
}

/// Per-object mean of unit item embeddings, renormalized; objects in
/// ascending id order.
fn object_embeddings(items: &Array2<f64>, objects: &[u32]) -> Array2<f64> {
    let mut groups: BTreeMap<u32, (Array1<f64>, usize)> = BTreeMap::new();
    for (row, &o) in items.axis_iter(Axis(0)).zip(objects) {
        let e = groups
            .entry(o)
            .or_insert_with(|| (Array1::zeros(items.ncols()), 0));
        e.0 += &row;
        e.1 += 1;
    }
    let mut out = Array2::zeros((groups.len(), items.ncols()));
    for (mut dst, (sum, _)) in out.axis_iter_mut(Axis(0)).zip(groups.into_values()) {
        let norm = sum.dot(&sum).sqrt();
        if norm > 0.0 {
            dst.assign(&(sum / norm));
        }
    }
    out
}

/// Symmetric KL between the object-level relation matrices of one pair.
///
/// Objects are matched by id for true pairs. When the two sides describe
/// different object sets (a shuffled caption), the sorted lists are aligned
/// by position and truncated to the shorter one.
pub fn pair_alignment_risk(
    pair: &FeaturePair,
    model: &SimilarityModel,
    temperature: f64,
) -> Result<f64> {
    let objects = pair
        .ground_truth
        .as_ref()
        .and_then(|g| g.objects.as_ref())
        .ok_or_else(|| {
            Error::invalid_input(format!("pair {} has no object assignment", pair.pair_id))
        })?;
    if objects.visual.len() != pair.visual_items() || objects.text.len() != pair.text_items() {
        return Err(Error::invalid_input(format!(
            "pair {} object ids do not cover its items",
            pair.pair_id
        )));
    }
    let encoded = model.encode(pair)?;
    let ov = object_embeddings(encoded.visual_items(), &objects.visual);
    let ol = object_embeddings(encoded.text_items(), &objects.text);
    let k = ov.nrows().min(ol.nrows());
    let ov = ov.slice(ndarray::s![..k, ..]).to_owned();
    let ol = ol.slice(ndarray::s![..k, ..]).to_owned();
    let lp = row_log_softmax(&model.pairwise(&ov, &ov), temperature);
    let lq = row_log_softmax(&model.pairwise(&ol, &ol), temperature);
    let total: f64 = (0..k)
        .map(|i| 0.5 * (kl_from_logs(lp.row(i), lq.row(i)) + kl_from_logs(lq.row(i), lp.row(i))))
        .sum();
    Ok((total / k as f64).max(0.0))
}

/// Mean [`pair_alignment_risk`] over the true pairs of `corpus`.
pub fn relation_alignment_risk(
    corpus: &Corpus,
    model: &SimilarityModel,
    temperature: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for pair in &corpus.pairs {
        if pair.is_true_match() == Some(false) {
            continue;
        }
        total += pair_alignment_risk(pair, model, temperature)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid_input("no true pairs to evaluate"));
    }
    Ok(total / count as f64)
}

/// Aligned table in the usual retrieval layout, one row per labelled report.
pub fn render_retrieval_table(rows: &[(&str, &RetrievalReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} | {:>21} | {:>21} | {:>6}",
        "", "Image -> Text", "Text -> Image", ""
    );
    let _ = writeln!(
        out,
        "{:<width$} | {:>6} {:>6} {:>7} | {:>6} {:>6} {:>7} | {:>6}",
        "Method", "R@1", "R@5", "R@10", "R@1", "R@5", "R@10", "rSum"
    );
    let _ = writeln!(out, "{}", "-".repeat(width + 58));
    for (label, r) in rows {
        let (a, b) = (&r.image_to_text, &r.text_to_image);
        let _ = writeln!(
            out,
            "{label:<width$} | {:>6.1} {:>6.1} {:>7.1} | {:>6.1} {:>6.1} {:>7.1} | {:>6.1}",
            a.r1, a.r5, a.r10, b.r1, b.r5, b.r10, r.rsum
        );
    }
    out
}

pub fn render_division_table(report: &DivisionReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<9} {:>7} {:>7} {:>10}", "partition", "size", "match", "mismatch");
    for p in Partition::ALL {
        let c = report.counts(p);
        let _ = writeln!(
            out,
            "{:<9} {:>7} {:>7} {:>10}",
            p.as_str(),
            c.size,
            c.true_match,
            c.true_mismatch
        );
    }
    let flag = |defined: bool| if defined { "" } else { " (undefined)" };
    let _ = writeln!(
        out,
        "mismatch precision {:.4}{}, recall {:.4}{}",
        report.mismatch_precision,
        flag(report.precision_defined),
        report.mismatch_recall,
        flag(report.recall_defined)
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, inject_noise, Mixing, Split, SyntheticConfig};
    use ndarray::array;
    use proptest::prelude::*;

    fn assignment(partition: Partition) -> PartitionAssignment {
        PartitionAssignment {
            pair_id: 0,
            y_cm: 0.0,
            y_im: 0.0,
            partition,
            lambda: None,
            pseudo_label: 0.0,
            ground_truth_match: None,
        }
    }

    #[test]
    fn diagonal_dominant_is_perfect() {
        let sim = Array2::from_shape_fn((12, 12), |(i, j)| if i == j { 1.0 } else { 0.1 });
        let r = RetrievalReport::from_similarity(&sim).unwrap();
        assert_eq!(r.image_to_text.r1, 100.0);
        assert_eq!(r.rsum, 600.0);
    }

    #[test]
    fn sixth_place_hits_only_r10() {
        let row: Vec<f64> = (0..10).map(|j| 10.0 - j as f64).collect();
        let sim = Array2::from_shape_vec((1, 10), row).unwrap();
        assert_eq!(recall_at_k(&sim, &[5], &RECALL_KS).unwrap(), vec![0.0, 0.0, 100.0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let sim = array![[0.5, 0.5, 0.5]];
        assert_eq!(recall_at_k(&sim, &[0], &[1]).unwrap(), vec![100.0]);
        assert_eq!(recall_at_k(&sim, &[2], &[1, 2, 3]).unwrap(), vec![0.0, 0.0, 100.0]);
        assert!(recall_at_k(&sim, &[3], &[1]).is_err());
    }

    #[test]
    fn division_counts() {
        let parts = [Partition::Clean; 10];
        let a: Vec<_> = parts.iter().map(|&p| assignment(p)).collect();
        let r = division_quality(&a, &[true; 10]).unwrap();
        assert!(!r.precision_defined && !r.recall_defined);
        assert_eq!((r.mismatch_precision, r.mismatch_recall), (1.0, 1.0));

        let mut a: Vec<_> = (0..10).map(|_| assignment(Partition::Noisy)).collect();
        a.extend((0..10).map(|_| assignment(Partition::Clean)));
        let mut mask = vec![false; 10];
        mask.extend([true; 10]);
        let r = division_quality(&a, &mask).unwrap();
        assert_eq!((r.mismatch_precision, r.mismatch_recall), (1.0, 1.0));

        a[0].partition = Partition::Clean;
        let r = division_quality(&a, &mask).unwrap();
        assert!((r.mismatch_recall - 0.9).abs() < 1e-12);
        assert_eq!(r.total(), 20);
        assert!(division_quality(&a, &mask[..3]).is_err());
        assert!(division_quality_from_assignments(&a).is_err());
    }

    fn clean_identity_corpus() -> Corpus {
        let cfg = SyntheticConfig {
            n_pairs: 30,
            vocab_size: 10,
            items_per_modality: (2, 5),
            objects_per_pair: (2, 3),
            visual_dim: 8,
            text_dim: 8,
            latent_dim: 8,
            noise_sigma: 0.0,
            mixing: Mixing::Identity,
            seed: 5,
        };
        generate_synthetic(&cfg, Split::Train).unwrap()
    }

    #[test]
    fn alignment_risk_zero_without_noise() {
        let corpus = clean_identity_corpus();
        let model = SimilarityModel::identity(8).unwrap();
        let risk = relation_alignment_risk(&corpus, &model, 0.1).unwrap();
        assert!(risk.abs() < 1e-12, "{risk}");
    }

    #[test]
    fn alignment_risk_positive_for_shuffled_caption() {
        let corpus = inject_noise(&clean_identity_corpus(), 0.2, 1).unwrap();
        let model = SimilarityModel::identity(8).unwrap();
        let shuffled = corpus.pairs.iter().find(|p| p.is_true_match() == Some(false)).unwrap();
        assert!(pair_alignment_risk(shuffled, &model, 0.1).unwrap() > 0.0);
    }

    #[test]
    fn tables_render() {
        let sim = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let r = RetrievalReport::from_similarity(&sim).unwrap();
        let t = render_retrieval_table(&[("ReCon", &r)]);
        assert!(t.contains("rSum") && t.contains("600.0"));
    }

    proptest! {
        #[test]
        fn recall_invariant_under_monotone_map(values in proptest::collection::vec(-3.0f64..3.0, 36)) {
            let sim = Array2::from_shape_vec((6, 6), values).unwrap();
            let a = RetrievalReport::from_similarity(&sim).unwrap();
            let b = RetrievalReport::from_similarity(&sim.mapv(|x| (2.0 * x).exp() + 1.0)).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a.image_to_text.r1 <= a.image_to_text.r5 && a.image_to_text.r5 <= a.image_to_text.r10);
        }
    }
}
