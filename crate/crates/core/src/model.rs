//! Modality-specific linear encoders and the bilinear similarity head.
//!
//! Items are projected, L2-normalized, and mean-pooled into one holistic
//! vector per modality. Similarity is `aᵀ W_g b`; with `W_g = I` this is cosine
//! similarity. The same head scores pooled pairs and individual items.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::data::FeaturePair;
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCMD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters of both encoders and the similarity head.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityModel {
    /// `d_e × d_v`
    pub visual_proj: Array2<f64>,
    /// `d_e × d_l`
    pub text_proj: Array2<f64>,
    /// `d_e × d_e`; identity gives cosine similarity.
    pub similarity: Array2<f64>,
    pub visual_bias: Array1<f64>,
    pub text_bias: Array1<f64>,
}

/// Gradient with the same layout as [`SimilarityModel`].
pub type ModelGrad = SimilarityModel;

impl SimilarityModel {
    /// Gaussian init with variance `1/d_in`, zero biases, identity head.
    pub fn random(visual_dim: usize, text_dim: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        check_dims(visual_dim, text_dim, embed_dim)?;
        let mut rng = rng::stream(seed, "init");
        let mut gaussian = |rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
        };
        let visual_proj = gaussian(embed_dim, visual_dim);
        let text_proj = gaussian(embed_dim, text_dim);
        Ok(Self {
            visual_proj,
            text_proj,
            similarity: Array2::eye(embed_dim),
            visual_bias: Array1::zeros(embed_dim),
            text_bias: Array1::zeros(embed_dim),
        })
    }

    /// Identity encoders on `dim`-dimensional features with cosine similarity.
    pub fn identity(dim: usize) -> Result<Self> {
        check_dims(dim, dim, dim)?;
        Ok(Self {
            visual_proj: Array2::eye(dim),
            text_proj: Array2::eye(dim),
            similarity: Array2::eye(dim),
            visual_bias: Array1::zeros(dim),
            text_bias: Array1::zeros(dim),
        })
    }

    pub fn zeros_like(&self) -> ModelGrad {
        Self {
            visual_proj: Array2::zeros(self.visual_proj.raw_dim()),
            text_proj: Array2::zeros(self.text_proj.raw_dim()),
            similarity: Array2::zeros(self.similarity.raw_dim()),
            visual_bias: Array1::zeros(self.visual_bias.raw_dim()),
            text_bias: Array1::zeros(self.text_bias.raw_dim()),
        }
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_proj.ncols()
    }

    pub fn text_dim(&self) -> usize {
        self.text_proj.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.visual_proj.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.visual_proj.len()
            + self.text_proj.len()
            + self.similarity.len()
            + self.visual_bias.len()
            + self.text_bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// Parameters in checkpoint order: visual_proj, text_proj, similarity,
    /// visual_bias, text_bias (matrices row-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.visual_proj.iter());
        out.extend(self.text_proj.iter());
        out.extend(self.similarity.iter());
        out.extend(self.visual_bias.iter());
        out.extend(self.text_bias.iter());
        out
    }

    /// Same shapes as `self`, values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid_input(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        for v in out
            .visual_proj
            .iter_mut()
            .chain(out.text_proj.iter_mut())
            .chain(out.similarity.iter_mut())
            .chain(out.visual_bias.iter_mut())
            .chain(out.text_bias.iter_mut())
        {
            *v = it.next().expect("length checked");
        }
        Ok(out)
    }

    /// `self += scale * other`, parameter-wise.
    pub fn add_scaled(&mut self, other: &ModelGrad, scale: f64) {
        self.visual_proj.scaled_add(scale, &other.visual_proj);
        self.text_proj.scaled_add(scale, &other.text_proj);
        self.similarity.scaled_add(scale, &other.similarity);
        self.visual_bias.scaled_add(scale, &other.visual_bias);
        self.text_bias.scaled_add(scale, &other.text_bias);
    }

    /// Rescales the head so its spectral norm is at most one, keeping
    /// similarities of unit vectors inside `[-1, 1]`.
    pub fn clip_similarity(&mut self) {
        let sigma = spectral_norm(&self.similarity);
        if sigma > 1.0 {
            self.similarity.mapv_inplace(|v| v / sigma);
        }
    }

    /// `aᵀ W_g b`.
    pub fn score(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        a.dot(&self.similarity.dot(&b))
    }

    /// Entry `(i, j)` is `score(a_i, b_j)`.
    pub fn pairwise(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let projected = b.dot(&self.similarity.t());
        a.dot(&projected.t())
    }

    pub fn encode(&self, pair: &FeaturePair) -> Result<EmbeddedPair> {
        if pair.visual.ncols() != self.visual_dim() || pair.text.ncols() != self.text_dim() {
            return Err(Error::invalid_input(format!(
                "pair {} has feature dims ({}, {}), model expects ({}, {})",
                pair.pair_id,
                pair.visual.ncols(),
                pair.text.ncols(),
                self.visual_dim(),
                self.text_dim()
            )));
        }
        let visual = encode_modality(&pair.visual, &self.visual_proj, &self.visual_bias)
            .map_err(|e| tag(e, pair.pair_id, "visual"))?;
        let text = encode_modality(&pair.text, &self.text_proj, &self.text_bias)
            .map_err(|e| tag(e, pair.pair_id, "text"))?;
        Ok(EmbeddedPair { visual, text })
    }

    pub fn encode_all<'a>(
        &self,
        pairs: impl IntoIterator<Item = &'a FeaturePair>,
    ) -> Result<Vec<EmbeddedPair>> {
        pairs.into_iter().map(|p| self.encode(p)).collect()
    }

    /// Holistic similarity `g(V, L)` of an encoded pair.
    pub fn pair_similarity(&self, a: &EmbeddedPair) -> f64 {
        self.score(a.pooled_visual().view(), a.pooled_text().view())
    }

    /// Similarity of every image in `batch` with every caption in `batch`;
    /// the diagonal holds the annotated pairs.
    pub fn batch_similarity(&self, batch: &[&FeaturePair]) -> Result<Array2<f64>> {
        if batch.is_empty() {
            return Err(Error::invalid_input("empty batch"));
        }
        let encoded = self.encode_all(batch.iter().copied())?;
        Ok(self.similarity_matrix(&encoded))
    }

    pub fn similarity_matrix(&self, encoded: &[EmbeddedPair]) -> Array2<f64> {
        let n = encoded.len();
        let projected: Vec<Array1<f64>> = encoded
            .iter()
            .map(|e| self.similarity.dot(e.pooled_text()))
            .collect();
        Array2::from_shape_fn((n, n), |(i, j)| encoded[i].pooled_visual().dot(&projected[j]))
    }

    /// Item-level cross relation `C_VL`, `N_V × N_L`.
    pub fn item_cross_relation(&self, a: &EmbeddedPair) -> Array2<f64> {
        self.pairwise(a.visual_items(), a.text_items())
    }

    /// Backpropagates gradients w.r.t. an encoded pair's item embeddings and
    /// pooled vectors into `grad`.
    pub fn backward(
        &self,
        pair: &EmbeddedPair,
        upstream: &EmbeddingGrad,
        grad: &mut ModelGrad,
    ) {
        backward_modality(
            &pair.visual,
            upstream.visual_items.as_ref(),
            upstream.pooled_visual.as_ref(),
            &mut grad.visual_proj,
            &mut grad.visual_bias,
        );
        backward_modality(
            &pair.text,
            upstream.text_items.as_ref(),
            upstream.pooled_text.as_ref(),
            &mut grad.text_proj,
            &mut grad.text_bias,
        );
    }
}

fn check_dims(visual_dim: usize, text_dim: usize, embed_dim: usize) -> Result<()> {
    if visual_dim == 0 || text_dim == 0 {
        return Err(Error::invalid_config("feature dimensions must be positive"));
    }
    if embed_dim < 2 {
        return Err(Error::invalid_config(format!(
            "embedding dimension must be at least 2, got {embed_dim}"
        )));
    }
    Ok(())
}

fn tag(e: Error, id: u32, modality: &str) -> Error {
    match e {
        Error::Normalization(m) => Error::Normalization(format!("pair {id} ({modality}): {m}")),
        other => other,
    }
}

fn spectral_norm(m: &Array2<f64>) -> f64 {
    let n = m.ncols();
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..200 {
        let w = m.t().dot(&m.dot(&v));
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        let next = m.dot(&v).dot(&m.dot(&v)).sqrt();
        if (next - sigma).abs() <= 1e-14 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

/// Projected and normalized items of one modality plus what backprop needs.
#[derive(Debug, Clone)]
pub(crate) struct ModalityEmbedding {
    inputs: Array2<f64>,
    items: Array2<f64>,
    item_norms: Array1<f64>,
    pooled: Array1<f64>,
    pooled_norm: f64,
}

fn encode_modality(
    features: &Array2<f32>,
    proj: &Array2<f64>,
    bias: &Array1<f64>,
) -> Result<ModalityEmbedding> {
    let inputs = features.mapv(f64::from);
    let mut items = inputs.dot(&proj.t()) + bias;
    let mut item_norms = Array1::zeros(items.nrows());
    for (i, mut row) in items.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Normalization(format!("item {i} projects to norm {norm}")));
        }
        row.mapv_inplace(|v| v / norm);
        item_norms[i] = norm;
    }
    let mean = items.mean_axis(Axis(0)).expect("at least one item");
    let pooled_norm = mean.dot(&mean).sqrt();
    if !(pooled_norm > 0.0 && pooled_norm.is_finite()) {
        return Err(Error::Normalization(format!(
            "mean-pooled items have norm {pooled_norm}"
        )));
    }
    let pooled = mean / pooled_norm;
    Ok(ModalityEmbedding {
        inputs,
        items,
        item_norms,
        pooled,
        pooled_norm,
    })
}

/// Gradient of `x / ‖x‖` applied to upstream `g`, given `y = x/‖x‖`.
fn normalize_backward(y: ArrayView1<f64>, g: ArrayView1<f64>, norm: f64) -> Array1<f64> {
    let proj = y.dot(&g);
    (&g - &(&y * proj)) / norm
}

fn backward_modality(
    emb: &ModalityEmbedding,
    d_items: Option<&Array2<f64>>,
    d_pooled: Option<&Array1<f64>>,
    d_proj: &mut Array2<f64>,
    d_bias: &mut Array1<f64>,
) {
    if d_items.is_none() && d_pooled.is_none() {
        return;
    }
    let n = emb.items.nrows();
    let mut d_e = match d_items {
        Some(d) => d.clone(),
        None => Array2::zeros(emb.items.raw_dim()),
    };
    if let Some(dp) = d_pooled {
        let d_mean = normalize_backward(emb.pooled.view(), dp.view(), emb.pooled_norm) / n as f64;
        d_e += &d_mean;
    }
    let mut d_u = Array2::zeros(emb.items.raw_dim());
    for i in 0..n {
        let g = normalize_backward(emb.items.row(i), d_e.row(i), emb.item_norms[i]);
        d_u.row_mut(i).assign(&g);
    }
    *d_proj += &d_u.t().dot(&emb.inputs);
    *d_bias += &d_u.sum_axis(Axis(0));
}

/// Both modalities of one pair in the shared embedding space.
#[derive(Debug, Clone)]
pub struct EmbeddedPair {
    pub(crate) visual: ModalityEmbedding,
    pub(crate) text: ModalityEmbedding,
}

impl EmbeddedPair {
    /// `N_V × d_e`, unit rows.
    pub fn visual_items(&self) -> &Array2<f64> {
        &self.visual.items
    }

    /// `N_L × d_e`, unit rows.
    pub fn text_items(&self) -> &Array2<f64> {
        &self.text.items
    }

    pub fn pooled_visual(&self) -> &Array1<f64> {
        &self.visual.pooled
    }

    pub fn pooled_text(&self) -> &Array1<f64> {
        &self.text.pooled
    }
}

/// Upstream gradient w.r.t. the outputs of [`SimilarityModel::encode`].
#[derive(Debug, Clone, Default)]
pub struct EmbeddingGrad {
    pub visual_items: Option<Array2<f64>>,
    pub text_items: Option<Array2<f64>>,
    pub pooled_visual: Option<Array1<f64>>,
    pub pooled_text: Option<Array1<f64>>,
}

impl EmbeddingGrad {
    pub fn add_pooled(&mut self, visual: &Array1<f64>, text: &Array1<f64>, scale: f64) {
        accumulate(&mut self.pooled_visual, visual, scale);
        accumulate(&mut self.pooled_text, text, scale);
    }

    pub fn add_items(&mut self, visual: &Array2<f64>, text: &Array2<f64>, scale: f64) {
        accumulate(&mut self.visual_items, visual, scale);
        accumulate(&mut self.text_items, text, scale);
    }
}

fn accumulate<D: ndarray::Dimension>(
    slot: &mut Option<ndarray::Array<f64, D>>,
    value: &ndarray::Array<f64, D>,
    scale: f64,
) {
    match slot {
        Some(acc) => acc.scaled_add(scale, value),
        None => *slot = Some(value * scale),
    }
}

pub fn write_checkpoint(model: &SimilarityModel, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        CHECKPOINT_VERSION,
        model.visual_dim() as u32,
        model.text_dim() as u32,
        model.embed_dim() as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in model.flatten() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<SimilarityModel> {
    let bytes = fs::read(path)?;
    let header = 20;
    if bytes.len() < header {
        return Err(Error::format(
            bytes.len() as u64,
            "truncated checkpoint: missing header",
        ));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic: not a model checkpoint"));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let version = word(4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let (dv, dl, de) = (word(8) as usize, word(12) as usize, word(16) as usize);
    if dv == 0 || dl == 0 || de < 2 {
        return Err(Error::format(8, format!("invalid dims ({dv}, {dl}, {de})")));
    }
    let template = SimilarityModel {
        visual_proj: Array2::zeros((de, dv)),
        text_proj: Array2::zeros((de, dl)),
        similarity: Array2::zeros((de, de)),
        visual_bias: Array1::zeros(de),
        text_bias: Array1::zeros(de),
    };
    let expected = header + 4 * template.param_count();
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!(
                "checkpoint payload is {} bytes, expected {}",
                bytes.len() - header,
                expected - header
            ),
        ));
    }
    let flat: Vec<f64> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    template.with_flat(&flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn pair(visual: Array2<f32>, text: Array2<f32>) -> FeaturePair {
        FeaturePair {
            pair_id: 0,
            visual,
            text,
            label: 1,
            ground_truth: None,
        }
    }

    #[test]
    fn identity_keeps_unit_item() {
        let model = SimilarityModel::identity(3).unwrap();
        let p = pair(array![[0.6f32, 0.8, 0.0]], array![[0.0f32, 1.0, 0.0]]);
        let e = model.encode(&p).unwrap();
        assert_abs_diff_eq!(e.visual_items()[[0, 0]], 0.6f32 as f64, epsilon = 1e-7);
        assert_abs_diff_eq!(e.pooled_visual()[1], 0.8f32 as f64, epsilon = 1e-7);
    }

    #[test]
    fn zero_feature_is_normalization_error() {
        let model = SimilarityModel::identity(2).unwrap();
        let p = pair(array![[0.0f32, 0.0]], array![[1.0f32, 0.0]]);
        assert!(matches!(model.encode(&p), Err(Error::Normalization(_))));
    }

    #[test]
    fn dimension_mismatch_is_invalid_input() {
        let model = SimilarityModel::identity(2).unwrap();
        let p = pair(array![[1.0f32, 0.0, 0.0]], array![[1.0f32, 0.0]]);
        assert!(matches!(model.encode(&p), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn random_encoding_has_unit_rows() {
        let model = SimilarityModel::random(8, 5, 4, 1).unwrap();
        let p = pair(
            Array2::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f32 * 0.37).sin()),
            Array2::from_shape_fn((2, 5), |(i, j)| ((i * 5 + j) as f32 * 0.11).cos()),
        );
        let e = model.encode(&p).unwrap();
        for row in e.visual_items().rows().into_iter().chain(e.text_items().rows()) {
            assert_abs_diff_eq!(row.dot(&row), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(e.pooled_text().dot(e.pooled_text()), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pair_similarity_extremes() {
        let model = SimilarityModel::identity(2).unwrap();
        let same = model
            .encode(&pair(array![[1.0f32, 1.0]], array![[2.0f32, 2.0]]))
            .unwrap();
        assert_abs_diff_eq!(model.pair_similarity(&same), 1.0, epsilon = 1e-12);
        let ortho = model
            .encode(&pair(array![[1.0f32, 0.0]], array![[0.0f32, 3.0]]))
            .unwrap();
        assert_abs_diff_eq!(model.pair_similarity(&ortho), 0.0, epsilon = 1e-12);
        let opposite = model
            .encode(&pair(array![[1.0f32, -2.0]], array![[-1.0f32, 2.0]]))
            .unwrap();
        assert_abs_diff_eq!(model.pair_similarity(&opposite), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn clip_bounds_spectral_norm() {
        let mut model = SimilarityModel::identity(3).unwrap();
        model.similarity = array![[2.0, 0.5, 0.0], [0.0, 1.0, 0.3], [0.1, 0.0, 3.0]];
        model.clip_similarity();
        assert!(spectral_norm(&model.similarity) <= 1.0 + 1e-9);
        let before = model.similarity.clone();
        model.clip_similarity();
        assert_abs_diff_eq!(
            (&model.similarity - &before).mapv(f64::abs).sum(),
            0.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn flatten_round_trip() {
        let model = SimilarityModel::random(3, 4, 2, 9).unwrap();
        let flat = model.flatten();
        assert_eq!(flat.len(), model.param_count());
        assert_eq!(model.with_flat(&flat).unwrap(), model);
        assert!(model.with_flat(&flat[1..]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rcmd");
        let model = SimilarityModel::random(5, 3, 4, 2).unwrap();
        write_checkpoint(&model, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        for (a, b) in model.flatten().iter().zip(back.flatten()) {
            assert_eq!((*a as f32) as f64, b);
        }
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
        fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    }
}
