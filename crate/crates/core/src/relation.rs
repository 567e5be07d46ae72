//! Cross-modal and intra-modal relation consistency.
//!
//! The cross-modal loss is a bidirectional InfoNCE over in-batch matching
//! probabilities. The intra-modal loss compares each modality's item relation
//! matrix with a proxy rebuilt from the other modality by routing every item
//! through its best cross-modal match.
//!
//! Losses are evaluated in the log domain (log-softmax), so the ε-floor on
//! [`ProbVector`](crate::numerics::ProbVector) never enters a gradient.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::FeaturePair;
use crate::error::{Error, Result};
use crate::model::{EmbeddedPair, SimilarityModel};
use crate::numerics::{kl_from_logs, row_log_softmax, softmax_row};

/// Bidirectional in-batch matching probabilities.
#[derive(Debug, Clone)]
pub struct MatchingProbs {
    /// Row `i`: softmax over captions for image query `i`.
    pub v2l: Array2<f64>,
    /// Row `j`: softmax over images for caption query `j`.
    pub l2v: Array2<f64>,
    log_v2l: Array2<f64>,
    log_l2v: Array2<f64>,
    temperature: f64,
}

impl MatchingProbs {
    pub fn len(&self) -> usize {
        self.v2l.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// `ln p^{v2l}_{ii}`, exact (not floored).
    pub fn log_diag_v2l(&self, i: usize) -> f64 {
        self.log_v2l[[i, i]]
    }

    pub fn log_diag_l2v(&self, i: usize) -> f64 {
        self.log_l2v[[i, i]]
    }

    /// `(p^{v2l}_{ii} + p^{l2v}_{ii}) / 2`.
    pub fn average_diag(&self, i: usize) -> f64 {
        0.5 * (self.log_v2l[[i, i]].exp() + self.log_l2v[[i, i]].exp())
    }
}

pub fn matching_probabilities(sim: &Array2<f64>, temperature: f64) -> Result<MatchingProbs> {
    if sim.nrows() != sim.ncols() || sim.is_empty() {
        return Err(Error::invalid_input(format!(
            "similarity matrix must be square and non-empty, got {:?}",
            sim.shape()
        )));
    }
    let n = sim.nrows();
    let mut v2l = Array2::zeros((n, n));
    let mut l2v = Array2::zeros((n, n));
    for i in 0..n {
        let row = softmax_row(&sim.row(i).to_vec(), temperature)?;
        v2l.row_mut(i).assign(&ndarray::Array1::from(row.into_vec()));
        let col = softmax_row(&sim.column(i).to_vec(), temperature)?;
        l2v.row_mut(i).assign(&ndarray::Array1::from(col.into_vec()));
    }
    let transposed = sim.t().to_owned();
    Ok(MatchingProbs {
        v2l,
        l2v,
        log_v2l: row_log_softmax(sim, temperature),
        log_l2v: row_log_softmax(&transposed, temperature),
        temperature,
    })
}

/// Value and similarity-matrix gradient of the cross-modal loss.
#[derive(Debug, Clone)]
pub struct CmLoss {
    pub value: f64,
    /// Unweighted per-pair terms `(−ln p^{v2l}_{ii} − ln p^{l2v}_{ii}) / 2`.
    pub per_pair: Vec<f64>,
    pub d_sim: Array2<f64>,
}

/// `(1/N_b) Σ_i ŷ_i (−ln p^{v2l}_{ii} − ln p^{l2v}_{ii}) / 2`.
pub fn loss_cm(probs: &MatchingProbs, labels: &[f64]) -> Result<CmLoss> {
    let n = probs.len();
    if labels.len() != n {
        return Err(Error::invalid_input(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let tau = probs.temperature;
    let per_pair: Vec<f64> = (0..n)
        .map(|i| -0.5 * (probs.log_v2l[[i, i]] + probs.log_l2v[[i, i]]))
        .collect();
    let value = per_pair
        .iter()
        .zip(labels)
        .map(|(t, y)| t * y)
        .sum::<f64>()
        / n as f64;

    let mut d_sim = Array2::zeros((n, n));
    for i in 0..n {
        let c = labels[i] / (2.0 * n as f64 * tau);
        if c == 0.0 {
            continue;
        }
        for k in 0..n {
            let delta = if i == k { 1.0 } else { 0.0 };
            // Image query i scores row i; caption query i scores column i.
            d_sim[[i, k]] += c * (probs.log_v2l[[i, k]].exp() - delta);
            d_sim[[k, i]] += c * (probs.log_l2v[[i, k]].exp() - delta);
        }
    }
    Ok(CmLoss {
        value,
        per_pair,
        d_sim,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelationSource {
    Direct,
    /// Rebuilt from the opposite modality; `anchor_map[i]` is the opposite item
    /// standing in for anchor item `i`.
    Proxy { anchor_map: Vec<usize> },
}

/// Row-softmax normalized item-to-item affinities within one modality.
#[derive(Debug, Clone)]
pub struct RelationMatrix {
    /// Affinities before normalization.
    pub raw: Array2<f64>,
    /// Row-stochastic values.
    pub values: Array2<f64>,
    pub modality: Modality,
    pub source: RelationSource,
    pub temperature: f64,
}

impl RelationMatrix {
    fn from_raw(
        raw: Array2<f64>,
        temperature: f64,
        modality: Modality,
        source: RelationSource,
    ) -> Result<Self> {
        let mut values = Array2::zeros(raw.raw_dim());
        for (i, row) in raw.axis_iter(Axis(0)).enumerate() {
            let p = softmax_row(&row.to_vec(), temperature)?;
            values.row_mut(i).assign(&ndarray::Array1::from(p.into_vec()));
        }
        Ok(Self {
            raw,
            values,
            modality,
            source,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Relations among the (already embedded) items of one modality.
pub fn intra_relation(
    items: &Array2<f64>,
    model: &SimilarityModel,
    temperature: f64,
    modality: Modality,
) -> Result<RelationMatrix> {
    if items.nrows() == 0 {
        return Err(Error::invalid_input("relation over zero items"));
    }
    RelationMatrix::from_raw(
        model.pairwise(items, items),
        temperature,
        modality,
        RelationSource::Direct,
    )
}

/// Index of the largest entry per row, lowest index on ties.
pub fn row_argmax(m: &Array2<f64>) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Rebuilds the anchor modality's relation matrix from `opposite`.
///
/// `cross` is `N_anchor × N_opposite`. Anchor item `i` is represented by
/// `i* = argmax cross[i, :]`, and the proxy affinity `(i, j)` is the opposite
/// raw affinity `(i*, j*)`, normalized afterwards at the opposite's temperature.
pub fn proxy_reconstruct(cross: &Array2<f64>, opposite: &RelationMatrix) -> Result<RelationMatrix> {
    if cross.is_empty() {
        return Err(Error::invalid_input("empty cross-relation matrix"));
    }
    if cross.ncols() != opposite.len() {
        return Err(Error::invalid_input(format!(
            "cross relation has {} columns, opposite relation covers {} items",
            cross.ncols(),
            opposite.len()
        )));
    }
    let anchor_map = row_argmax(cross);
    let n = anchor_map.len();
    let raw = Array2::from_shape_fn((n, n), |(i, j)| opposite.raw[[anchor_map[i], anchor_map[j]]]);
    let modality = match opposite.modality {
        Modality::Visual => Modality::Text,
        Modality::Text => Modality::Visual,
    };
    RelationMatrix::from_raw(
        raw,
        opposite.temperature,
        modality,
        RelationSource::Proxy { anchor_map },
    )
}

/// Which divergence compares a relation matrix with its proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    /// `KL(direct ‖ proxy)` per modality.
    #[default]
    Forward,
    /// `½ (KL(direct ‖ proxy) + KL(proxy ‖ direct))` per modality.
    Symmetric,
}

/// Value and gradients of the intra-modal loss for one pair.
#[derive(Debug, Clone)]
pub struct ImLoss {
    pub value: f64,
    pub d_visual_items: Array2<f64>,
    pub d_text_items: Array2<f64>,
    pub d_similarity: Array2<f64>,
}

/// Row-averaged divergence between `direct` and `proxy` logits (both already
/// divided by τ), with gradients w.r.t. each.
fn relation_divergence(
    direct: &Array2<f64>,
    proxy: &Array2<f64>,
    temperature: f64,
    mode: KlMode,
) -> (f64, Array2<f64>, Array2<f64>) {
    let n = direct.nrows();
    let lp = row_log_softmax(direct, temperature);
    let lq = row_log_softmax(proxy, temperature);
    let mut value = 0.0;
    let mut d_direct = Array2::zeros((n, n));
    let mut d_proxy = Array2::zeros((n, n));
    let scale = 1.0 / (n as f64 * temperature);
    for i in 0..n {
        let (lp_i, lq_i) = (lp.row(i), lq.row(i));
        let kl_pq = kl_from_logs(lp_i, lq_i);
        match mode {
            KlMode::Forward => {
                value += kl_pq;
                for k in 0..n {
                    let (p, q) = (lp_i[k].exp(), lq_i[k].exp());
                    d_direct[[i, k]] = scale * p * (lp_i[k] - lq_i[k] - kl_pq);
                    d_proxy[[i, k]] = scale * (q - p);
                }
            }
            KlMode::Symmetric => {
                let kl_qp = kl_from_logs(lq_i, lp_i);
                value += 0.5 * (kl_pq + kl_qp);
                for k in 0..n {
                    let (p, q) = (lp_i[k].exp(), lq_i[k].exp());
                    d_direct[[i, k]] =
                        0.5 * scale * (p * (lp_i[k] - lq_i[k] - kl_pq) + (p - q));
                    d_proxy[[i, k]] = 0.5 * scale * ((q - p) + q * (lq_i[k] - lp_i[k] - kl_qp));
                }
            }
        }
    }
    (value / n as f64, d_direct, d_proxy)
}

/// Gradient of `M = A W Bᵀ` w.r.t. `A`, `B`, `W` given upstream `d_m`.
fn bilinear_backward(
    a: &Array2<f64>,
    b: &Array2<f64>,
    w: &Array2<f64>,
    d_m: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d_a = d_m.dot(&b.dot(&w.t()));
    let d_b = d_m.t().dot(&a.dot(w));
    let d_w = a.t().dot(&d_m.dot(b));
    (d_a, d_b, d_w)
}

/// `D(C_VV ‖ C_VV^p) + D(C_LL ‖ C_LL^p)` for one encoded pair.
///
/// Gradients flow through the gathered affinities; the argmax routing is
/// treated as constant.
pub fn loss_im(
    pair: &EmbeddedPair,
    model: &SimilarityModel,
    temperature: f64,
    mode: KlMode,
) -> ImLoss {
    let ev = pair.visual_items();
    let el = pair.text_items();
    let w = &model.similarity;
    let a_v = model.pairwise(ev, ev);
    let a_l = model.pairwise(el, el);
    let cross = model.pairwise(ev, el);
    let visual_map = row_argmax(&cross);
    let text_map = row_argmax(&cross.t().to_owned());

    let proxy_v = Array2::from_shape_fn(a_v.raw_dim(), |(i, j)| {
        a_l[[visual_map[i], visual_map[j]]]
    });
    let proxy_l = Array2::from_shape_fn(a_l.raw_dim(), |(i, j)| a_v[[text_map[i], text_map[j]]]);

    let (term_v, mut d_av, d_pv) = relation_divergence(&a_v, &proxy_v, temperature, mode);
    let (term_l, mut d_al, d_pl) = relation_divergence(&a_l, &proxy_l, temperature, mode);

    for ((i, j), g) in d_pv.indexed_iter() {
        d_al[[visual_map[i], visual_map[j]]] += g;
    }
    for ((i, j), g) in d_pl.indexed_iter() {
        d_av[[text_map[i], text_map[j]]] += g;
    }

    let (dv1, dv2, dw_v) = bilinear_backward(ev, ev, w, &d_av);
    let (dl1, dl2, dw_l) = bilinear_backward(el, el, w, &d_al);
    ImLoss {
        value: term_v + term_l,
        d_visual_items: dv1 + dv2,
        d_text_items: dl1 + dl2,
        d_similarity: dw_v + dw_l,
    }
}

/// Mean intra-modal loss over a batch.
pub fn risk_im(
    batch: &[&FeaturePair],
    model: &SimilarityModel,
    temperature: f64,
    mode: KlMode,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid_input("empty batch"));
    }
    let mut total = 0.0;
    for pair in batch {
        let encoded = model.encode(pair)?;
        total += loss_im(&encoded, model, temperature, mode).value;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn constant_similarity_gives_uniform_probs() {
        let probs = matching_probabilities(&Array2::from_elem((4, 4), 0.3), 0.1).unwrap();
        for v in probs.v2l.iter().chain(probs.l2v.iter()) {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn diagonal_similarity_probs() {
        let sim = array![[1.0, 0.0], [0.0, 1.0]];
        let probs = matching_probabilities(&sim, 0.1).unwrap();
        let e10 = 10f64.exp();
        assert_abs_diff_eq!(probs.v2l[[0, 0]], e10 / (e10 + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(probs.l2v[[1, 1]], e10 / (e10 + 1.0), epsilon = 1e-12);
    }

    #[test]
    fn single_pair_probability_is_one() {
        let probs = matching_probabilities(&array![[0.42]], 0.1).unwrap();
        assert_eq!(probs.v2l[[0, 0]], 1.0);
        let loss = loss_cm(&probs, &[1.0]).unwrap();
        assert_abs_diff_eq!(loss.value, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn non_square_rejected() {
        assert!(matching_probabilities(&Array2::zeros((2, 3)), 0.1).is_err());
    }

    #[test]
    fn zero_labels_annihilate_loss() {
        let sim = array![[0.1, 0.9, -0.3], [0.5, 0.2, 0.0], [0.7, 0.7, 0.1]];
        let probs = matching_probabilities(&sim, 0.1).unwrap();
        let loss = loss_cm(&probs, &[0.0; 3]).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.d_sim.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn loss_cm_closed_form() {
        let probs = matching_probabilities(&array![[1.0, 0.0], [0.0, 1.0]], 0.1).unwrap();
        let loss = loss_cm(&probs, &[1.0, 1.0]).unwrap();
        let expected = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        assert_abs_diff_eq!(loss.value, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(loss.value, 4.54e-5, epsilon = 1e-7);
        assert!(loss_cm(&probs, &[1.0]).is_err());
    }

    fn relation_of(raw: Array2<f64>, modality: Modality) -> RelationMatrix {
        RelationMatrix::from_raw(raw, 0.1, modality, RelationSource::Direct).unwrap()
    }

    #[test]
    fn proxy_identity_permutation() {
        let opposite = relation_of(array![[1.0, 0.3], [0.3, 1.0]], Modality::Text);
        let proxy = proxy_reconstruct(&array![[0.9, 0.1], [0.2, 0.8]], &opposite).unwrap();
        assert_eq!(proxy.raw, opposite.raw);
        assert_eq!(proxy.modality, Modality::Visual);
        assert_eq!(
            proxy.source,
            RelationSource::Proxy {
                anchor_map: vec![0, 1]
            }
        );
    }

    #[test]
    fn proxy_swap_permutation() {
        let opposite = relation_of(array![[1.0, 0.3], [0.1, 0.7]], Modality::Text);
        let proxy = proxy_reconstruct(&array![[0.1, 0.9], [0.8, 0.2]], &opposite).unwrap();
        assert_eq!(proxy.raw, array![[0.7, 0.1], [0.3, 1.0]]);
    }

    #[test]
    fn proxy_constant_index_rows_equal() {
        let opposite = relation_of(array![[1.0, 0.3, 0.2], [0.3, 1.0, 0.5], [0.2, 0.5, 1.0]], Modality::Visual);
        let cross = array![[0.9, 0.1, 0.0], [0.5, 0.5, 0.5], [0.7, 0.6, 0.2], [1.0, -1.0, 0.0]];
        let proxy = proxy_reconstruct(&cross, &opposite).unwrap();
        assert_eq!(proxy.len(), 4);
        for i in 1..4 {
            assert_eq!(proxy.values.row(i), proxy.values.row(0));
        }
    }

    #[test]
    fn proxy_shape_errors() {
        let opposite = relation_of(array![[1.0]], Modality::Text);
        assert!(proxy_reconstruct(&Array2::zeros((0, 0)), &opposite).is_err());
        assert!(proxy_reconstruct(&Array2::zeros((2, 2)), &opposite).is_err());
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(row_argmax(&array![[0.5, 0.5, 0.1], [0.0, 0.2, 0.2]]), vec![0, 1]);
    }

    #[test]
    fn relation_rows_are_stochastic() {
        let model = SimilarityModel::identity(3).unwrap();
        let items = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.6, 0.8, 0.0]];
        let rel = intra_relation(&items, &model, 0.1, Modality::Visual).unwrap();
        for row in rel.values.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
        }
        let single = intra_relation(&array![[0.0, 1.0, 0.0]], &model, 0.1, Modality::Text).unwrap();
        assert_eq!(single.values, array![[1.0]]);
        let twins = intra_relation(&array![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]], &model, 0.1, Modality::Text)
            .unwrap();
        for v in twins.values.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-12);
        }
    }
}
