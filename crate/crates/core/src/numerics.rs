//! Numerically stable primitives shared by every loss: softmax and log-softmax
//! with max-shift, ε-floored probability vectors, KL divergence, the weighted
//! negative-log cross entropy, and a central-difference gradient checker.
//!
//! All arithmetic is `f64`. Functions here are pure.

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Default probability floor applied before taking logarithms.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Default central-difference step for [`grad_check`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor applied to probabilities before they enter a logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonPolicy {
    floor: f64,
}

impl EpsilonPolicy {
    pub fn new(floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor < 1.0) {
            return Err(Error::invalid_config(format!(
                "epsilon floor must lie in (0, 1), got {floor}"
            )));
        }
        Ok(Self { floor })
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }
}

impl Default for EpsilonPolicy {
    fn default() -> Self {
        Self {
            floor: DEFAULT_EPSILON,
        }
    }
}

/// A discrete distribution whose entries are all strictly positive and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Floors every entry at the policy's ε and renormalizes.
    pub fn new(values: Vec<f64>, policy: EpsilonPolicy) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid_input("probability vector is empty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid_input(
                "probability vector entries must be finite and non-negative",
            ));
        }
        let mut floored: Vec<f64> = values.into_iter().map(|v| v.max(policy.floor)).collect();
        let total: f64 = floored.iter().sum();
        floored.iter_mut().for_each(|v| *v /= total);
        Ok(Self(floored))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_scores(scores: &[f64], temperature: f64) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid_input("softmax over an empty vector"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid_input(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid_input("softmax scores must be finite"));
    }
    Ok(())
}

/// `exp(s_i/τ) / Σ_k exp(s_k/τ)` via max-shift, then ε-floored.
pub fn softmax_row(scores: &[f64], temperature: f64) -> Result<ProbVector> {
    check_scores(scores, temperature)?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    ProbVector::new(
        exps.into_iter().map(|e| e / total).collect(),
        EpsilonPolicy::default(),
    )
}

/// `s_i/τ − logsumexp(s/τ)`, never floored.
pub fn log_softmax_row(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_scores(scores, temperature)?;
    Ok(log_softmax_unchecked(scores.iter().copied(), temperature))
}

pub(crate) fn log_softmax_unchecked(
    scores: impl Iterator<Item = f64> + Clone,
    temperature: f64,
) -> Vec<f64> {
    let max = scores.clone().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let lse = scores
        .clone()
        .map(|s| (s / temperature - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    scores.map(|s| s / temperature - lse).collect()
}

/// Row-wise log-softmax of a matrix at temperature τ.
pub(crate) fn row_log_softmax(m: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        let logp = log_softmax_unchecked(row.iter().copied(), temperature);
        out.row_mut(i)
            .iter_mut()
            .zip(logp)
            .for_each(|(o, v)| *o = v);
    }
    out
}

/// `Σ p_i ln(p_i / q_i)`.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid_input(format!(
            "KL length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let kl: f64 = p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();
    // Rounding can leave a tiny negative residue when p ≈ q.
    Ok(kl.max(0.0))
}

/// KL between two log-probability rows: `Σ exp(a_i) (a_i − b_i)`.
pub(crate) fn kl_from_logs(log_p: ArrayView1<f64>, log_q: ArrayView1<f64>) -> f64 {
    log_p
        .iter()
        .zip(log_q.iter())
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum()
}

/// `−y · ln(max(p, ε))`.
pub fn cross_entropy(label: f64, prob: f64) -> f64 {
    if label == 0.0 {
        return 0.0;
    }
    -label * prob.max(DEFAULT_EPSILON).ln()
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the analytic gradient returned by `loss_fn` at `point` with central
/// differences `(f(x+h e_i) − f(x−h e_i)) / 2h`.
///
/// Per coordinate the error is `|a − n| / max(|a|, |n|)`; coordinates where both
/// magnitudes are below `1e-3 · max_j max(|a_j|, |n_j|)` are compared against that
/// scale instead, so roundoff on negligible entries does not dominate. A gradient
/// that is identically zero has error 0.
pub fn grad_check<F>(loss_fn: F, point: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(step > 0.0) {
        return Err(Error::invalid_input("finite-difference step must be positive"));
    }
    let (value, analytic) = loss_fn(point);
    if !value.is_finite() {
        return Err(Error::NumericalFailure(format!(
            "loss is non-finite at the base point: {value}"
        )));
    }
    if analytic.len() != point.len() {
        return Err(Error::invalid_input(format!(
            "gradient has {} entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }

    let mut probe = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x = probe[i];
        probe[i] = x + step;
        let plus = loss_fn(&probe).0;
        probe[i] = x - step;
        let minus = loss_fn(&probe).0;
        probe[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "loss is non-finite when probing coordinate {i}"
            )));
        }
        numeric.push((plus - minus) / (2.0 * step));
    }

    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale;
    let (worst_index, max_relative_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let denom = a.abs().max(n.abs()).max(floor);
            if denom == 0.0 {
                0.0
            } else {
                (a - n).abs() / denom
            }
        })
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        max_relative_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let p = softmax_row(&[0.37, 0.37], 0.1).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn softmax_matches_closed_form() {
        let p = softmax_row(&[1.0, 0.0], 0.1).unwrap();
        let e10 = 10f64.exp();
        assert_abs_diff_eq!(p[0], e10 / (e10 + 1.0), epsilon = 1e-6);
        assert_abs_diff_eq!(p[1], 1.0 / (e10 + 1.0), epsilon = 1e-6);
        assert_abs_diff_eq!(p[0], 0.9999546, epsilon = 1e-7);
    }

    #[test]
    fn softmax_survives_huge_scores() {
        let p = softmax_row(&[1000.0, 0.0], 1.0).unwrap();
        assert!(p.as_slice().iter().all(|v| v.is_finite() && *v > 0.0));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-7);
        assert!(p[1] < 1e-7);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax_row(&[], 1.0), Err(Error::InvalidInput(_))));
        assert!(matches!(
            softmax_row(&[f64::NAN, 1.0], 1.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            softmax_row(&[1.0], 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn kl_examples() {
        let half = ProbVector::new(vec![0.5, 0.5], EpsilonPolicy::default()).unwrap();
        assert_abs_diff_eq!(kl_divergence(&half, &half).unwrap(), 0.0, epsilon = 1e-12);

        let p = ProbVector::new(vec![0.7, 0.3], EpsilonPolicy::default()).unwrap();
        let expected = 0.7 * 1.4f64.ln() + 0.3 * 0.6f64.ln();
        assert_abs_diff_eq!(kl_divergence(&p, &half).unwrap(), expected, epsilon = 1e-9);
        assert_abs_diff_eq!(expected, 0.08228, epsilon = 1e-5);

        let eps = DEFAULT_EPSILON;
        let a = ProbVector::new(vec![1.0 - eps, eps], EpsilonPolicy::default()).unwrap();
        let b = ProbVector::new(vec![eps, 1.0 - eps], EpsilonPolicy::default()).unwrap();
        let kl = kl_divergence(&a, &b).unwrap();
        assert!(kl.is_finite() && kl > 10.0);
    }

    #[test]
    fn kl_length_mismatch() {
        let a = ProbVector::new(vec![1.0], EpsilonPolicy::default()).unwrap();
        let b = ProbVector::new(vec![0.5, 0.5], EpsilonPolicy::default()).unwrap();
        assert!(matches!(kl_divergence(&a, &b), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(1.0, 1.0), 0.0);
        assert_eq!(cross_entropy(0.0, 0.3), 0.0);
        assert_abs_diff_eq!(cross_entropy(0.5, 0.5), 0.5 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(cross_entropy(0.5, 0.5), 0.34657, epsilon = 1e-5);
    }

    #[test]
    fn grad_check_quadratic() {
        let f = |x: &[f64]| (0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.to_vec());
        let report = grad_check(f, &[1.0, 2.0], DEFAULT_STEP).unwrap();
        assert!(report.max_relative_error < 1e-6);
        assert_abs_diff_eq!(report.numeric[1], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn grad_check_constant_is_zero() {
        let f = |x: &[f64]| (3.0, vec![0.0; x.len()]);
        let report = grad_check(f, &[1.0, -4.0, 2.5], DEFAULT_STEP).unwrap();
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn grad_check_flags_wrong_gradient() {
        let f = |x: &[f64]| (x[0] * x[0], vec![x[0]]);
        let report = grad_check(f, &[1.5], DEFAULT_STEP).unwrap();
        assert!(report.max_relative_error > 0.4);
    }

    #[test]
    fn grad_check_non_finite() {
        let f = |x: &[f64]| ((x[0]).ln(), vec![1.0 / x[0]]);
        assert!(matches!(
            grad_check(f, &[0.0], DEFAULT_STEP),
            Err(Error::NumericalFailure(_))
        ));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(scores in prop::collection::vec(-1e4f64..1e4, 1..12), tau in 0.01f64..10.0) {
            let p = softmax_row(&scores, tau).unwrap();
            let total: f64 = p.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(p.as_slice().iter().all(|v| *v > 0.0));
        }

        #[test]
        fn softmax_shift_invariant(scores in prop::collection::vec(-50f64..50.0, 1..10), shift in -100f64..100.0) {
            let a = softmax_row(&scores, 0.5).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let b = softmax_row(&shifted, 0.5).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn kl_self_zero_and_nonnegative(
            raw_p in prop::collection::vec(0.0f64..1.0, 2..8),
            raw_q in prop::collection::vec(0.0f64..1.0, 2..8),
        ) {
            let n = raw_p.len().min(raw_q.len());
            let p = ProbVector::new(raw_p[..n].to_vec(), EpsilonPolicy::default());
            let q = ProbVector::new(raw_q[..n].to_vec(), EpsilonPolicy::default());
            if let (Ok(p), Ok(q)) = (p, q) {
                prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-10);
                prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            }
        }

        #[test]
        fn log_softmax_agrees_with_softmax(scores in prop::collection::vec(-20f64..20.0, 1..10)) {
            let p = softmax_row(&scores, 1.0).unwrap();
            let logp = log_softmax_row(&scores, 1.0).unwrap();
            for (a, b) in p.as_slice().iter().zip(&logp) {
                if *a > 1e-6 {
                    // ε-flooring renormalizes by at most n·ε.
                    prop_assert!((a.ln() - b).abs() < 1e-7);
                }
            }
        }
    }
}
