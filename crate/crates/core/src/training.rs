//! Triplet warmup followed by per-epoch division and partition-specific
//! objectives, optimized with momentum SGD.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::batch::{even_batches, shuffled};
pub use crate::config::{Strategy, TrainConfig};
use crate::data::{Corpus, FeaturePair};
use crate::division::{Divider, Division, Partition, PartitionSizes};
use crate::error::{Error, Result};
use crate::evaluation::{division_quality_from_assignments, evaluate_retrieval, DivisionReport};
use crate::model::{EmbeddedPair, EmbeddingGrad, ModelGrad, SimilarityModel};
use crate::relation::{loss_cm, loss_im, matching_probabilities};
use crate::rng;

/// A loss value with its gradient w.r.t. every model parameter.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub grad: ModelGrad,
}

/// `(1/N) Σ_i Σ_{j≠i} [γ − S_ii + S_ij]₊ + [γ − S_ii + S_ji]₊` and its
/// gradient w.r.t. `S`.
pub fn triplet_from_similarity(sim: &Array2<f64>, gamma: f64) -> Result<(f64, Array2<f64>)> {
    let n = sim.nrows();
    if n != sim.ncols() {
        return Err(Error::invalid_input("similarity matrix must be square"));
    }
    if n < 2 {
        return Err(Error::invalid_input(format!(
            "triplet loss needs at least 2 pairs for negatives, got {n}"
        )));
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d_sim = Array2::zeros((n, n));
    for i in 0..n {
        let pos = sim[[i, i]];
        let mut anchor = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let to_caption = gamma - pos + sim[[i, j]];
            if to_caption > 0.0 {
                anchor += to_caption;
                d_sim[[i, i]] -= scale;
                d_sim[[i, j]] += scale;
            }
            let to_image = gamma - pos + sim[[j, i]];
            if to_image > 0.0 {
                anchor += to_image;
                d_sim[[i, i]] -= scale;
                d_sim[[j, i]] += scale;
            }
        }
        value += anchor;
    }
    Ok((value * scale, d_sim))
}

/// Pooled embeddings stacked row-wise.
fn stack_pooled(encoded: &[EmbeddedPair], d: usize) -> (Array2<f64>, Array2<f64>) {
    let mut v = Array2::zeros((encoded.len(), d));
    let mut l = Array2::zeros((encoded.len(), d));
    for (i, e) in encoded.iter().enumerate() {
        v.row_mut(i).assign(e.pooled_visual());
        l.row_mut(i).assign(e.pooled_text());
    }
    (v, l)
}

/// Accumulates per-pair embedding gradients for one batch.
struct Backprop<'m> {
    model: &'m SimilarityModel,
    encoded: Vec<EmbeddedPair>,
    upstream: Vec<EmbeddingGrad>,
    grad: ModelGrad,
}

impl<'m> Backprop<'m> {
    fn new(model: &'m SimilarityModel, batch: &[&FeaturePair]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::invalid_input("empty batch"));
        }
        let encoded = model.encode_all(batch.iter().copied())?;
        Ok(Self {
            model,
            upstream: vec![EmbeddingGrad::default(); encoded.len()],
            encoded,
            grad: model.zeros_like(),
        })
    }

    fn similarity(&self) -> Array2<f64> {
        self.model.similarity_matrix(&self.encoded)
    }

    /// Routes `dL/dS` of the batch similarity matrix to pooled vectors and `W_g`.
    fn add_similarity_grad(&mut self, d_sim: &Array2<f64>) {
        let w = &self.model.similarity;
        let (v, l) = stack_pooled(&self.encoded, self.model.embed_dim());
        let d_v = d_sim.dot(&l.dot(&w.t()));
        let d_l = d_sim.t().dot(&v.dot(w));
        self.grad.similarity += &v.t().dot(&d_sim.dot(&l));
        for (i, up) in self.upstream.iter_mut().enumerate() {
            up.add_pooled(&d_v.row(i).to_owned(), &d_l.row(i).to_owned(), 1.0);
        }
    }

    /// Adds `Σ_i weights[i] · L_IM(pair_i)` and returns that sum.
    fn add_intra_modal(&mut self, weights: &[f64], config: &TrainConfig) -> f64 {
        let mut total = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let im = loss_im(&self.encoded[i], self.model, config.relation_tau, config.kl_mode);
            total += w * im.value;
            self.upstream[i].add_items(&im.d_visual_items, &im.d_text_items, w);
            self.grad.similarity.scaled_add(w, &im.d_similarity);
        }
        total
    }

    fn finish(mut self, value: f64) -> LossEval {
        for (e, up) in self.encoded.iter().zip(&self.upstream) {
            self.model.backward(e, up, &mut self.grad);
        }
        LossEval {
            value,
            grad: self.grad,
        }
    }
}

/// Triplet ranking warmup loss with all other batch members as negatives.
pub fn warmup_loss(batch: &[&FeaturePair], model: &SimilarityModel, gamma: f64) -> Result<LossEval> {
    let mut bp = Backprop::new(model, batch)?;
    let (value, d_sim) = triplet_from_similarity(&bp.similarity(), gamma)?;
    bp.add_similarity_grad(&d_sim);
    Ok(bp.finish(value))
}

/// `ξ · L_CM(labels) + Σ_i im_weights[i] · L_IM_i`.
fn dual_loss(
    batch: &[&FeaturePair],
    model: &SimilarityModel,
    config: &TrainConfig,
    cm_labels: &[f64],
    cm_scale: f64,
    im_weights: Option<&[f64]>,
) -> Result<LossEval> {
    let mut bp = Backprop::new(model, batch)?;
    let probs = matching_probabilities(&bp.similarity(), config.tau)?;
    let cm = loss_cm(&probs, cm_labels)?;
    bp.add_similarity_grad(&(cm.d_sim * cm_scale));
    let mut value = cm_scale * cm.value;
    if let Some(w) = im_weights {
        value += bp.add_intra_modal(w, config);
    }
    Ok(bp.finish(value))
}

/// `ξ · L_CM(labels = 1) + mean L_IM` (the intra-modal term is dropped when
/// `config.intra_modal_loss` is off).
pub fn loss_clean(batch: &[&FeaturePair], model: &SimilarityModel, config: &TrainConfig) -> Result<LossEval> {
    loss_local(batch, model, config, &vec![1.0; batch.len()])
}

/// `ξ · L_CM(labels = 1) + mean_i L_IM_i / λ_i`.
pub fn loss_local(
    batch: &[&FeaturePair],
    model: &SimilarityModel,
    config: &TrainConfig,
    lambdas: &[f64],
) -> Result<LossEval> {
    if lambdas.len() != batch.len() {
        return Err(Error::invalid_input(format!(
            "{} penalization factors for a batch of {}",
            lambdas.len(),
            batch.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 1.0)) {
        return Err(Error::invalid_input(format!("penalization factor must be >= 1, got {l}")));
    }
    let n = batch.len() as f64;
    let weights: Vec<f64> = lambdas.iter().map(|l| 1.0 / (l * n)).collect();
    dual_loss(
        batch,
        model,
        config,
        &vec![1.0; batch.len()],
        config.xi,
        config.intra_modal_loss.then_some(weights.as_slice()),
    )
}

/// `mean_i −ŷ_i ln p^{v2l}_{ii} − ŷ_i ln p^{l2v}_{ii}`.
pub fn loss_noisy(
    batch: &[&FeaturePair],
    model: &SimilarityModel,
    config: &TrainConfig,
    labels: &[f64],
) -> Result<LossEval> {
    if let Some(y) = labels.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return Err(Error::invalid_input(format!("pseudo label {y} outside [0, 1]")));
    }
    dual_loss(batch, model, config, labels, 2.0, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Divided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub phase: Phase,
    pub learning_rate: f64,
    pub warmup_loss: Option<f64>,
    pub clean_loss: Option<f64>,
    pub local_loss: Option<f64>,
    pub noisy_loss: Option<f64>,
    pub partition_sizes: Option<PartitionSizes>,
    /// Present when the training corpus carries ground truth.
    pub division: Option<DivisionReport>,
    pub val_rsum: Option<f64>,
    /// Kept out of the serialized form so reports of identical runs compare
    /// byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: SimilarityModel,
    /// Highest validation rSum (the last model when no validation set is given).
    pub best: SimilarityModel,
    /// `None` when the initial model was never beaten.
    pub best_epoch: Option<usize>,
    pub last: SimilarityModel,
    pub initial_val_rsum: Option<f64>,
    pub reports: Vec<EpochReport>,
    /// Division from the last divided epoch.
    pub division: Option<Division>,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    weight: f64,
}

impl Mean {
    fn add(&mut self, value: f64, weight: f64) {
        self.sum += value * weight;
        self.weight += weight;
    }

    fn get(&self) -> Option<f64> {
        (self.weight > 0.0).then(|| self.sum / self.weight)
    }
}

struct Optimizer {
    velocity: ModelGrad,
    momentum: f64,
    train_similarity: bool,
}

impl Optimizer {
    fn step(&mut self, model: &mut SimilarityModel, mut grad: ModelGrad, lr: f64) {
        if !self.train_similarity {
            grad.similarity.fill(0.0);
        }
        self.velocity.visual_proj *= self.momentum;
        self.velocity.text_proj *= self.momentum;
        self.velocity.similarity *= self.momentum;
        self.velocity.visual_bias *= self.momentum;
        self.velocity.text_bias *= self.momentum;
        self.velocity.add_scaled(&grad, 1.0);
        model.add_scaled(&self.velocity, -lr);
        if self.train_similarity {
            model.clip_similarity();
        }
    }
}

pub fn train(train: &Corpus, val: Option<&Corpus>, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(train, val, config, |_, _| Ok(()))
}

/// Like [`train`], calling `observer` after every epoch with its report and
/// the current parameters.
pub fn train_with_observer<F>(
    train: &Corpus,
    val: Option<&Corpus>,
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochReport, &SimilarityModel) -> Result<()>,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid_input("training corpus is empty"));
    }
    if let Some(v) = val {
        if v.visual_dim != train.visual_dim || v.text_dim != train.text_dim {
            return Err(Error::invalid_input("validation dims differ from training dims"));
        }
    }
    let pairs: Vec<&FeaturePair> = train.pairs.iter().collect();
    let has_truth = train.has_ground_truth();

    let initial = SimilarityModel::random(train.visual_dim, train.text_dim, config.embed_dim, config.seed)?;
    let mut model = initial.clone();
    let initial_val_rsum = val.map(|v| evaluate_retrieval(v, &model)).transpose()?.map(|r| r.rsum);
    let mut best = (initial.clone(), None, initial_val_rsum);
    let mut optimizer = Optimizer {
        velocity: model.zeros_like(),
        momentum: config.momentum,
        train_similarity: config.train_similarity,
    };
    let mut divider = Divider::new();
    let mut last_division = None;
    let mut reports = Vec::with_capacity(config.total_epochs());
    let all: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..config.total_epochs() {
        let started = Instant::now();
        let lr = config.learning_rate_at(epoch);
        let mut batch_rng = rng::indexed_stream(config.seed, "batching", epoch as u64);
        let warm = epoch < config.warmup_epochs || config.strategy == Strategy::TripletOnly;
        let mut report = EpochReport {
            epoch,
            phase: if warm { Phase::Warmup } else { Phase::Divided },
            learning_rate: lr,
            warmup_loss: None,
            clean_loss: None,
            local_loss: None,
            noisy_loss: None,
            partition_sizes: None,
            division: None,
            val_rsum: None,
            wall_clock_secs: 0.0,
        };

        let diverged = |batch: usize, message: String| Error::Divergence {
            epoch,
            batch,
            message,
        };
        // Overflowing (but finite) parameters surface as normalization failures.
        let numerical = |batch: usize| {
            move |e: Error| match e {
                Error::Normalization(m) | Error::NumericalFailure(m) => diverged(batch, m),
                other => other,
            }
        };
        let mut apply = |model: &mut SimilarityModel, eval: Result<LossEval>, batch: usize| -> Result<f64> {
            let eval = eval.map_err(numerical(batch))?;
            if !eval.value.is_finite() {
                return Err(diverged(batch, format!("loss is {}", eval.value)));
            }
            optimizer.step(model, eval.grad, lr);
            if !model.is_finite() {
                return Err(diverged(batch, "parameters became non-finite".into()));
            }
            Ok(eval.value)
        };

        if warm {
            let mut mean = Mean::default();
            let order = shuffled(&all, &mut batch_rng);
            for (b, idx) in even_batches(&order, config.batch_size).iter().enumerate() {
                let batch: Vec<&FeaturePair> = idx.iter().map(|&i| pairs[i]).collect();
                let eval = warmup_loss(&batch, &model, config.gamma);
                let value = apply(&mut model, eval, b)?;
                mean.add(value, batch.len() as f64);
            }
            report.warmup_loss = mean.get();
        } else {
            let division = divider
                .divide(&pairs, &model, config, epoch as u64)
                .map_err(numerical(0))?;
            let mut batches: Vec<(Partition, Vec<usize>)> = Vec::new();
            for p in Partition::ALL {
                let members = shuffled(&division.indices(p), &mut batch_rng);
                batches.extend(even_batches(&members, config.batch_size).into_iter().map(|b| (p, b)));
            }
            batches.shuffle(&mut batch_rng);

            let mut means: [Mean; 3] = Default::default();
            for (b, (partition, idx)) in batches.iter().enumerate() {
                let batch: Vec<&FeaturePair> = idx.iter().map(|&i| pairs[i]).collect();
                let assigned = idx.iter().map(|&i| &division.assignments[i]);
                let eval = match partition {
                    Partition::Clean => loss_clean(&batch, &model, config),
                    Partition::LocalAssociated => {
                        let lambdas: Vec<f64> = assigned.map(|a| a.lambda.unwrap_or(1.0)).collect();
                        loss_local(&batch, &model, config, &lambdas)
                    }
                    Partition::Noisy => {
                        let labels: Vec<f64> = assigned.map(|a| a.recast_label()).collect();
                        loss_noisy(&batch, &model, config, &labels)
                    }
                };
                let value = apply(&mut model, eval, b)?;
                means[*partition as usize].add(value, batch.len() as f64);
            }
            report.clean_loss = means[0].get();
            report.local_loss = means[1].get();
            report.noisy_loss = means[2].get();
            report.partition_sizes = Some(division.sizes());
            if has_truth {
                report.division = Some(division_quality_from_assignments(&division.assignments)?);
            }
            last_division = Some(division);
        }

        if let Some(v) = val {
            let rsum = evaluate_retrieval(v, &model).map_err(numerical(0))?.rsum;
            report.val_rsum = Some(rsum);
            if best.2.is_none_or(|b| rsum > b) {
                best = (model.clone(), Some(epoch), Some(rsum));
            }
        } else {
            best = (model.clone(), Some(epoch), None);
        }
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch} ({:?}) lr {lr:.4} val rsum {:?}",
            report.phase,
            report.val_rsum
        );
        observer(&report, &model)?;
        reports.push(report);
    }

    Ok(TrainOutcome {
        initial,
        best: best.0,
        best_epoch: best.1,
        last: model,
        initial_val_rsum,
        reports,
        division: last_division,
    })
}
