//! Transformer encoder array: feature discovery, multi-head self-attention
//! layers, and the sigmoid classification head.
//!
//! Layers are pre-norm residual blocks — layer norm feeds each sublayer and
//! the trunk carries the raw residual stream — because a plain stack of
//! attention + FFN without residuals/normalization is untrainable at depth.
//! Heads are merged by concatenation followed by a learned output
//! projection. No parameters are shared across layers.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WxError};
use crate::nn::attention::head_weights;
use crate::nn::{init, Graph, NodeId, ParamId, ParamStore};

/// Layer-norm epsilon used throughout the encoder.
pub const LN_EPS: f64 = 1e-5;

/// Encoder stack hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_width: usize,
    /// Dropout inside the FFN (between ReLU and the second linear).
    pub ffn_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d_model: 256, heads: 4, layers: 4, ffn_width: 2048, ffn_dropout: 0.1 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(WxError::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_width == 0 {
            return Err(WxError::Config("encoder needs >=1 layer and a nonzero FFN".into()));
        }
        if !(0.0..1.0).contains(&self.ffn_dropout) {
            return Err(WxError::Config(format!("ffn_dropout {} outside [0,1)", self.ffn_dropout)));
        }
        Ok(())
    }
}

/// Row layout of the encoder input: `[feature tokens | FD | label tokens]`.
/// The three ranges partition `0..total()`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub feature_tokens: usize,
    pub fd_tokens: usize,
    pub label_tokens: usize,
}

impl SequenceLayout {
    pub fn total(&self) -> usize {
        self.feature_tokens + self.fd_tokens + self.label_tokens
    }

    pub fn feature_range(&self) -> std::ops::Range<usize> {
        0..self.feature_tokens
    }

    pub fn fd_range(&self) -> std::ops::Range<usize> {
        self.feature_tokens..self.feature_tokens + self.fd_tokens
    }

    pub fn label_range(&self) -> std::ops::Range<usize> {
        self.feature_tokens + self.fd_tokens..self.total()
    }
}

/// A token matrix together with its layout map.
#[derive(Debug, Clone)]
pub struct EncoderSequence {
    pub tokens: Array2<f64>,
    pub layout: SequenceLayout,
}

impl EncoderSequence {
    pub fn new(tokens: Array2<f64>, layout: SequenceLayout) -> Result<Self> {
        if tokens.dim().0 != layout.total() {
            return Err(WxError::shape("EncoderSequence", &[layout.total()], &[tokens.dim().0]));
        }
        Ok(EncoderSequence { tokens, layout })
    }
}

/// Per-head row-stochastic attention matrices.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    per_head: Vec<Array2<f64>>,
}

impl AttentionWeights {
    /// Validates shape, nonnegativity, and row sums `1 ± 1e-6`.
    pub fn new(per_head: Vec<Array2<f64>>) -> Result<Self> {
        for (h, w) in per_head.iter().enumerate() {
            let (rows, cols) = w.dim();
            if rows != cols {
                return Err(WxError::shape("AttentionWeights", &[rows, rows], &[rows, cols]));
            }
            for r in 0..rows {
                let row = w.row(r);
                if row.iter().any(|&p| p.is_nan() || p < 0.0) {
                    return Err(WxError::Numerical(format!("head {h} row {r}: negative weight")));
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(WxError::Numerical(format!(
                        "head {h} row {r}: sum {sum} not stochastic"
                    )));
                }
            }
        }
        Ok(AttentionWeights { per_head })
    }

    pub fn heads(&self) -> &[Array2<f64>] {
        &self.per_head
    }
}

/// Self-attention weights of one projection pair over a single sequence:
/// `softmax(Q·Kᵀ/√d_k)` per head, with `Q = tokens·wq`, `K = tokens·wk`.
/// Rejects non-finite inputs rather than letting NaN flow through softmax.
pub fn attention(
    tokens: &Array2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    heads: usize,
) -> Result<AttentionWeights> {
    let (_, d) = tokens.dim();
    if wq.dim() != (d, d) || wk.dim() != (d, d) {
        return Err(WxError::shape("attention projections", &[d, d], &[wq.dim().0, wq.dim().1]));
    }
    if heads == 0 || d % heads != 0 {
        return Err(WxError::Config(format!("d_model {d} not divisible by heads {heads}")));
    }
    if tokens.iter().chain(wq.iter()).chain(wk.iter()).any(|v| !v.is_finite()) {
        return Err(WxError::Numerical("non-finite attention input".into()));
    }
    let q = tokens.dot(wq);
    let k = tokens.dot(wk);
    let d_h = d / heads;
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * d_h..(h + 1) * d_h;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols]);
        per_head.push(head_weights(&qh, &kh));
    }
    AttentionWeights::new(per_head)
}

/// Fuses pooled feature and label-state streams into the single FD token:
/// mean over feature rows, mean over label rows, the two `d`-vectors stacked
/// as a 2-channel signal and mixed by a width-3 same-padded 1-D convolution.
/// `kernel` is `(2, 3)` (channel, tap), `bias` a scalar.
pub fn feature_discovery(
    features: &Array2<f64>,
    label_states: &Array2<f64>,
    kernel: &Array2<f64>,
    bias: f64,
) -> Result<Array1<f64>> {
    let d = features.dim().1;
    if label_states.dim().1 != d {
        return Err(WxError::shape("feature_discovery", &[d], &[label_states.dim().1]));
    }
    if kernel.dim() != (2, 3) {
        return Err(WxError::shape("feature_discovery kernel", &[2, 3], &[kernel.dim().0, kernel.dim().1]));
    }
    if features.dim().0 == 0 || label_states.dim().0 == 0 {
        return Err(WxError::Data("feature_discovery: empty token stream".into()));
    }
    let f = features.mean_axis(Axis(0)).expect("nonempty features");
    let s = label_states.mean_axis(Axis(0)).expect("nonempty label states");
    let channel = [f, s];
    let mut out = Array1::zeros(d);
    for j in 0..d {
        let mut acc = bias;
        for (c, stream) in channel.iter().enumerate() {
            for t in 0..3 {
                let idx = j as isize + t as isize - 1;
                if idx >= 0 && (idx as usize) < d {
                    acc += kernel[[c, t]] * stream[idx as usize];
                }
            }
        }
        out[j] = acc;
    }
    Ok(out)
}

/// Class probabilities in `(0, 1)`.
#[derive(Debug, Clone, Serialize)]
pub struct PredictionVector {
    probs: Array1<f64>,
}

impl PredictionVector {
    pub fn new(probs: Array1<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(WxError::Numerical("probabilities outside (0,1)".into()));
        }
        Ok(PredictionVector { probs })
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.probs
    }

    /// Thresholded hard decisions (`≥`, so probability 0.5 at the default
    /// threshold counts as positive).
    pub fn decisions(&self, threshold: f64) -> Vec<bool> {
        self.probs.iter().map(|&p| p >= threshold).collect()
    }
}

/// The single shared linear classifier: one logit per label token through
/// the same `(d)` weight vector and scalar bias, then sigmoid.
pub fn classify_head(
    label_tokens: &Array2<f64>,
    weight: &Array1<f64>,
    bias: f64,
) -> Result<PredictionVector> {
    let (n, d) = label_tokens.dim();
    if n == 0 {
        return Err(WxError::Data("classify_head: no label tokens".into()));
    }
    if weight.len() != d {
        return Err(WxError::shape("classify_head", &[d], &[weight.len()]));
    }
    let logits = label_tokens.dot(weight) + bias;
    PredictionVector::new(logits.mapv(crate::nn::graph::stable_sigmoid))
}

struct LayerParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    merge: ParamId,
    norm1_gamma: ParamId,
    norm1_beta: ParamId,
    norm2_gamma: ParamId,
    norm2_beta: ParamId,
    ffn_wr: ParamId,
    ffn_b1: ParamId,
    ffn_wo: ParamId,
    ffn_b2: ParamId,
}

/// The encoder array. Construction registers per-layer parameters
/// (`encoder.layer{i}.*`), distinct for every layer.
pub struct Encoder {
    config: EncoderConfig,
    layers: Vec<LayerParams>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_width;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = |suffix: &str| format!("encoder.layer{i}.{suffix}");
            layers.push(LayerParams {
                wq: store.add(p("attn.wq"), init::xavier_linear(d, d, rng), true),
                wk: store.add(p("attn.wk"), init::xavier_linear(d, d, rng), true),
                wv: store.add(p("attn.wv"), init::xavier_linear(d, d, rng), true),
                merge: store.add(p("attn.merge"), init::xavier_linear(d, d, rng), true),
                norm1_gamma: store.add(p("norm1.gamma"), init::ones(&[d]), true),
                norm1_beta: store.add(p("norm1.beta"), init::zeros(&[d]), true),
                norm2_gamma: store.add(p("norm2.gamma"), init::ones(&[d]), true),
                norm2_beta: store.add(p("norm2.beta"), init::zeros(&[d]), true),
                ffn_wr: store.add(p("ffn.wr"), init::xavier_linear(d, f, rng), true),
                ffn_b1: store.add(p("ffn.b1"), init::zeros(&[f]), true),
                ffn_wo: store.add(p("ffn.wo"), init::xavier_linear(f, d, rng), true),
                ffn_b2: store.add(p("ffn.b2"), init::zeros(&[d]), true),
            });
        }
        Ok(Encoder { config, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn layer_forward(&self, g: &mut Graph, x: NodeId, layer: &LayerParams) -> Result<NodeId> {
        // Attention sublayer on the normalized stream.
        let n1g = g.param(layer.norm1_gamma);
        let n1b = g.param(layer.norm1_beta);
        let a = g.layer_norm(x, n1g, n1b, LN_EPS);
        let wq = g.param(layer.wq);
        let wk = g.param(layer.wk);
        let wv = g.param(layer.wv);
        let q = g.tokens_linear(a, wq);
        let k = g.tokens_linear(a, wk);
        let v = g.tokens_linear(a, wv);
        let heads = g.multi_head_attention(q, k, v, self.config.heads)?;
        let merge = g.param(layer.merge);
        let merged = g.tokens_linear(heads, merge);
        let x = g.add(x, merged);

        // FFN sublayer: ReLU(h·Wr + b1) → dropout → ·Wo + b2.
        let n2g = g.param(layer.norm2_gamma);
        let n2b = g.param(layer.norm2_beta);
        let h = g.layer_norm(x, n2g, n2b, LN_EPS);
        let wr = g.param(layer.ffn_wr);
        let b1 = g.param(layer.ffn_b1);
        let h = g.tokens_linear(h, wr);
        let h = g.add(h, b1);
        let h = g.relu(h);
        let h = g.dropout(h, self.config.ffn_dropout);
        let wo = g.param(layer.ffn_wo);
        let b2 = g.param(layer.ffn_b2);
        let h = g.tokens_linear(h, wo);
        let h = g.add(h, b2);
        Ok(g.add(x, h))
    }

    /// Runs every layer in sequence over `(B, M, d)` tokens. Row layout is
    /// untouched: token `i` of the output corresponds to token `i` of the
    /// input.
    pub fn forward(&self, g: &mut Graph, mut x: NodeId) -> Result<NodeId> {
        for layer in &self.layers {
            x = self.layer_forward(g, x, layer)?;
        }
        Ok(x)
    }

    /// Runs exactly one layer (diagnostics and composition tests).
    pub fn forward_single_layer(&self, g: &mut Graph, x: NodeId, index: usize) -> Result<NodeId> {
        self.layer_forward(g, x, &self.layers[index])
    }
}
