//! Question-conditioned patch relevance.
//!
//! The captioner backend exports the cross-attention maps of its image-text
//! encoder together with the gradient of the image-text matching score with
//! respect to those maps. This module turns them into one relevance score per
//! image patch (gradient-weighted attention, averaged over heads and summed
//! over text tokens) and picks the patches that get captioned.
//!
//! Everything here is plain tensor arithmetic over caller-supplied values; no
//! model code runs.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of patches sampled per (image, question) pair by default.
pub const DEFAULT_TOP_K_PATCHES: usize = 20;

/// Additive floor on sampling weights so no patch has zero probability.
pub const SAMPLING_EPSILON: f64 = 1e-12;

/// Row-sum tolerance accepted for exported attention probabilities.
const ATTENTION_ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RelevanceError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid attention tensor: {0}")]
    InvalidAttention(String),
    #[error("patch count k must be at least 1")]
    ZeroK,
}

/// Inputs of the scaled dot-product cross-attention between question tokens
/// and image patches.
#[derive(Debug, Clone)]
pub struct FeatureMatrices {
    /// `N x D_q` question-token features.
    pub text_features: Array2<f64>,
    /// `M x D_v` patch features.
    pub patch_features: Array2<f64>,
    /// `D_q x D_h` query head.
    pub query_proj: Array2<f64>,
    /// `D_v x D_h` key head.
    pub key_proj: Array2<f64>,
}

impl FeatureMatrices {
    fn validate(&self) -> Result<(), RelevanceError> {
        let (n, dq) = self.text_features.dim();
        let (m, dv) = self.patch_features.dim();
        if n == 0 || m == 0 {
            return Err(RelevanceError::Shape(format!(
                "need at least one token and one patch, got N={n}, M={m}"
            )));
        }
        if dq == 0 {
            return Err(RelevanceError::Shape("text feature dimension is zero".into()));
        }
        if self.query_proj.nrows() != dq {
            return Err(RelevanceError::Shape(format!(
                "query head has {} rows, text features have {dq} columns",
                self.query_proj.nrows()
            )));
        }
        if self.key_proj.nrows() != dv {
            return Err(RelevanceError::Shape(format!(
                "key head has {} rows, patch features have {dv} columns",
                self.key_proj.nrows()
            )));
        }
        if self.query_proj.ncols() != self.key_proj.ncols() {
            return Err(RelevanceError::Shape(format!(
                "query head width {} != key head width {}",
                self.query_proj.ncols(),
                self.key_proj.ncols()
            )));
        }
        let checks: [(&'static str, &Array2<f64>); 4] = [
            ("text_features", &self.text_features),
            ("patch_features", &self.patch_features),
            ("query_proj", &self.query_proj),
            ("key_proj", &self.key_proj),
        ];
        for (name, m) in checks {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(RelevanceError::NonFinite(name));
            }
        }
        Ok(())
    }
}

/// Row-wise softmax over patches of `(f_q W_Q)(f_v W_K)^T / sqrt(D_q)`.
///
/// Returns an `N x M` matrix whose rows are probability vectors.
pub fn cross_attention_scores(features: &FeatureMatrices) -> Result<Array2<f64>, RelevanceError> {
    features.validate()?;
    let dq = features.text_features.ncols() as f64;
    let queries = features.text_features.dot(&features.query_proj);
    let keys = features.patch_features.dot(&features.key_proj);
    let mut logits = queries.dot(&keys.t()) / dq.sqrt();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(RelevanceError::NonFinite("attention logits"));
    }
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(logits)
}

/// Cross-attention maps and their gradients, `G heads x N tokens x M patches`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    values: Array3<f64>,
    grads: Array3<f64>,
}

impl AttentionTensor {
    pub fn new(values: Array3<f64>, grads: Array3<f64>) -> Result<Self, RelevanceError> {
        if values.dim() != grads.dim() {
            return Err(RelevanceError::Shape(format!(
                "values {:?} vs grads {:?}",
                values.dim(),
                grads.dim()
            )));
        }
        let (g, n, m) = values.dim();
        if g == 0 || n == 0 || m == 0 {
            return Err(RelevanceError::Shape(format!(
                "empty attention tensor {:?}",
                values.dim()
            )));
        }
        if grads.iter().any(|v| !v.is_finite()) {
            return Err(RelevanceError::NonFinite("attention gradients"));
        }
        for (head, plane) in values.outer_iter().enumerate() {
            for (token, row) in plane.outer_iter().enumerate() {
                if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(RelevanceError::InvalidAttention(format!(
                        "row [{head}, {token}] has a negative or non-finite entry"
                    )));
                }
                let sum = row.sum();
                if (sum - 1.0).abs() > ATTENTION_ROW_TOLERANCE {
                    return Err(RelevanceError::InvalidAttention(format!(
                        "row [{head}, {token}] sums to {sum}"
                    )));
                }
            }
        }
        Ok(Self { values, grads })
    }

    /// Builds a tensor from nested `[head][token][patch]` vectors, as they
    /// arrive over the wire from out-of-process backends.
    pub fn from_nested(
        values: Vec<Vec<Vec<f64>>>,
        grads: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self, RelevanceError> {
        Self::new(nested_to_array3(values)?, nested_to_array3(grads)?)
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn grads(&self) -> &Array3<f64> {
        &self.grads
    }

    pub fn num_heads(&self) -> usize {
        self.values.dim().0
    }

    pub fn num_tokens(&self) -> usize {
        self.values.dim().1
    }

    pub fn num_patches(&self) -> usize {
        self.values.dim().2
    }
}

fn nested_to_array3(nested: Vec<Vec<Vec<f64>>>) -> Result<Array3<f64>, RelevanceError> {
    let g = nested.len();
    let n = nested.first().map_or(0, Vec::len);
    let m = nested
        .first()
        .and_then(|p| p.first())
        .map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(g * n * m);
    for plane in nested {
        if plane.len() != n {
            return Err(RelevanceError::Shape("ragged token dimension".into()));
        }
        for row in plane {
            if row.len() != m {
                return Err(RelevanceError::Shape("ragged patch dimension".into()));
            }
            flat.extend(row);
        }
    }
    Array3::from_shape_vec((g, n, m), flat).map_err(|e| RelevanceError::Shape(e.to_string()))
}

/// Which sign of the gradient is kept before weighting the attention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RectifyMode {
    /// `max(0, grad)`: keep evidence that raises the matching score.
    #[default]
    Positive,
    /// `min(0, grad)`.
    Negative,
}

impl RectifyMode {
    fn apply(self, grad: f64) -> f64 {
        match self {
            RectifyMode::Positive => grad.max(0.0),
            RectifyMode::Negative => grad.min(0.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceMeta {
    pub image_id: String,
    pub question_id: String,
}

/// One relevance score per image patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub scores: Vec<f64>,
    pub rectify_mode: RectifyMode,
    pub meta: RelevanceMeta,
}

impl RelevanceMap {
    pub fn with_meta(mut self, image_id: impl Into<String>, question_id: impl Into<String>) -> Self {
        self.meta = RelevanceMeta {
            image_id: image_id.into(),
            question_id: question_id.into(),
        };
        self
    }

    pub fn num_patches(&self) -> usize {
        self.scores.len()
    }
}

/// `R[m] = (1/G) * sum_g sum_l rectify(grad[g,l,m]) * attn[g,l,m]`.
pub fn patch_relevance(attn: &AttentionTensor, mode: RectifyMode) -> RelevanceMap {
    let (g, _, m) = attn.values.dim();
    let mut scores = vec![0.0; m];
    for (vplane, gplane) in attn.values.outer_iter().zip(attn.grads.outer_iter()) {
        for (vrow, grow) in vplane.outer_iter().zip(gplane.outer_iter()) {
            for (acc, (v, d)) in scores.iter_mut().zip(vrow.iter().zip(grow.iter())) {
                *acc += mode.apply(*d) * v;
            }
        }
    }
    let inv = 1.0 / g as f64;
    scores.iter_mut().for_each(|s| *s *= inv);
    RelevanceMap {
        scores,
        rectify_mode: mode,
        meta: RelevanceMeta::default(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// The k highest-scoring patches, ties to the lower index.
    #[default]
    DeterministicTopk,
    /// k distinct patches drawn without replacement, weight `max(score, 0) + eps`.
    WeightedSample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSelection {
    pub indices: Vec<usize>,
    pub k: usize,
    pub strategy: SamplingStrategy,
    pub seed: u64,
    /// Set when weighted sampling found no positive score and drew uniformly.
    #[serde(default)]
    pub uniform_fallback: bool,
}

impl PatchSelection {
    /// Empty selection: caption the whole image.
    pub fn whole_image(seed: u64) -> Self {
        Self {
            indices: Vec::new(),
            k: 0,
            strategy: SamplingStrategy::DeterministicTopk,
            seed,
            uniform_fallback: false,
        }
    }
}

/// Indices ordered by descending score, lower index first on ties.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn sample_patches(
    relevance: &RelevanceMap,
    k: usize,
    strategy: SamplingStrategy,
    seed: u64,
) -> Result<PatchSelection, RelevanceError> {
    if k == 0 {
        return Err(RelevanceError::ZeroK);
    }
    if relevance.scores.iter().any(|s| !s.is_finite()) {
        return Err(RelevanceError::NonFinite("relevance scores"));
    }
    let take = k.min(relevance.scores.len());
    let (indices, uniform_fallback) = match strategy {
        SamplingStrategy::DeterministicTopk => {
            let mut order = rank_descending(&relevance.scores);
            order.truncate(take);
            (order, false)
        }
        SamplingStrategy::WeightedSample => weighted_without_replacement(&relevance.scores, take, seed),
    };
    Ok(PatchSelection {
        indices,
        k,
        strategy,
        seed,
        uniform_fallback,
    })
}

fn weighted_without_replacement(scores: &[f64], take: usize, seed: u64) -> (Vec<usize>, bool) {
    let fallback = scores.iter().all(|s| *s <= 0.0);
    let mut weights: Vec<f64> = scores
        .iter()
        .map(|s| if fallback { 1.0 } else { s.max(0.0) + SAMPLING_EPSILON })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(take);
    for _ in 0..take {
        let total: f64 = weights.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut choice = None;
        for (i, w) in weights.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            acc += w;
            choice = Some(i);
            if target < acc {
                break;
            }
        }
        // `choice` is the last live index when rounding overshoots.
        let i = choice.expect("fewer draws than live patches");
        weights[i] = 0.0;
        picked.push(i);
    }
    (picked, fallback)
}
