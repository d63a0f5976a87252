//! Full model assembly: backbone features, positional and label-state
//! embeddings, the FD fusion token, the encoder array, and the shared
//! sigmoid classifier over label tokens.
//!
//! The encoder input layout is `[feature tokens | FD | label tokens]`; the
//! layout map fixes which output rows the classifier reads. Label tokens
//! carry no positional signal — their identity is the label embedding — so
//! the stack is equivariant under label reordering.

use std::path::Path;

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::checkpoint;
use crate::encoder::{Encoder, EncoderConfig, SequenceLayout};
use crate::error::{Result, WxError};
use crate::labels::{LabelStateVector, LabelVocabulary, STATE_COUNT};
use crate::nn::{init, Graph, NodeId, ParamId, ParamStore, TensorD};

/// Everything needed to rebuild the network ab initio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    /// Dropout on the classifier input (the fully connected head).
    pub classifier_dropout: f64,
    /// Exclude backbone weights from optimization (batch-norm running
    /// statistics still track activations in training mode).
    pub freeze_backbone: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::small(),
            encoder: EncoderConfig::default(),
            classifier_dropout: 0.35,
            freeze_backbone: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.encoder.validate()?;
        if !(0.0..1.0).contains(&self.classifier_dropout) {
            return Err(WxError::Config(format!(
                "classifier_dropout {} outside [0,1)",
                self.classifier_dropout
            )));
        }
        Ok(())
    }
}

/// Key graph nodes of one assembled forward pass.
pub struct Assembled {
    /// Encoder input `(B, M, d)`.
    pub sequence: NodeId,
    /// Encoder output `(B, M, d)`.
    pub encoded: NodeId,
    /// Classifier logits `(B, N)`.
    pub logits: NodeId,
}

/// The complete network. Construction registers every parameter in the
/// given store; weights can then be replaced from a checkpoint.
pub struct Model {
    config: ModelConfig,
    n_labels: usize,
    backbone: Backbone,
    encoder: Encoder,
    layout: SequenceLayout,
    proj_w: ParamId,
    proj_b: ParamId,
    position: ParamId,
    label_table: ParamId,
    state_table: ParamId,
    fd_kernel: ParamId,
    fd_bias: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        n_labels: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if n_labels == 0 {
            return Err(WxError::Config("model needs at least one label".into()));
        }
        let backbone = Backbone::new(config.backbone.clone(), store, rng)?;
        if config.freeze_backbone {
            for name in backbone.param_names() {
                let id = store.id_of(name).unwrap();
                store.set_trainable(id, false);
            }
        }
        let k = config.backbone.out_channels();
        let d = config.encoder.d_model;
        let side = config.backbone.feature_side(config.backbone.input_size);
        let feature_tokens = side * side;

        let proj_w = store.add("embed.proj.weight", init::xavier_linear(k, d, rng), true);
        let proj_b = store.add("embed.proj.bias", init::zeros(&[d]), true);
        let position = store.add("embed.position", init::embedding(feature_tokens, d, rng), true);
        let label_table = store.add("embed.label", init::embedding(n_labels, d, rng), true);
        let state_table = store.add("embed.state", init::embedding(STATE_COUNT, d, rng), true);
        // Width-3 fusion kernel over the 2-channel pooled pair.
        let fd_kernel = store.add("fd.kernel", init::normal(&[1, 2, 3], (2.0 / 6.0f64).sqrt(), rng), true);
        let fd_bias = store.add("fd.bias", init::zeros(&[1]), true);
        let encoder = Encoder::new(config.encoder.clone(), store, rng)?;
        let cls_w = store.add("classifier.weight", init::xavier_linear(d, 1, rng), true);
        let cls_b = store.add("classifier.bias", init::zeros(&[1]), true);

        let layout = SequenceLayout { feature_tokens, fd_tokens: 1, label_tokens: n_labels };
        Ok(Model {
            config,
            n_labels,
            backbone,
            encoder,
            layout,
            proj_w,
            proj_b,
            position,
            label_table,
            state_table,
            fd_kernel,
            fd_bias,
            cls_w,
            cls_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn layout(&self) -> SequenceLayout {
        self.layout
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Builds the forward graph for a batch: images `(B, 3, S, S)` already
    /// on the graph, one label-state vector per sample.
    pub fn assemble(
        &self,
        g: &mut Graph,
        images: NodeId,
        states: &[LabelStateVector],
    ) -> Result<Assembled> {
        let shape = g.value(images).shape().to_vec();
        let s = self.config.backbone.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(WxError::shape("model input", &[0, 3, s, s], &shape));
        }
        let bsz = shape[0];
        if states.len() != bsz {
            return Err(WxError::shape("label states", &[bsz], &[states.len()]));
        }
        for lsv in states {
            if lsv.len() != self.n_labels {
                return Err(WxError::shape("label states", &[self.n_labels], &[lsv.len()]));
            }
        }
        let n = self.n_labels;
        let label_idx = Array2::from_shape_fn((bsz, n), |(_, i)| i);
        let state_idx =
            Array2::from_shape_fn((bsz, n), |(b, i)| states[b].states()[i].index());

        // Feature tokens: backbone map → row-major tokens → projection →
        // learned positions.
        let feats = self.backbone.forward(g, images);
        let t = g.nchw_to_tokens(feats);
        let pw = g.param(self.proj_w);
        let t = g.tokens_linear(t, pw);
        let pb = g.param(self.proj_b);
        let t = g.add(t, pb);
        let pos = g.param(self.position);
        let feature_tokens = g.add(t, pos);

        // Label tokens: label embedding + state embedding, masked states
        // carrying no truth information.
        let lt = g.param(self.label_table);
        let st = g.param(self.state_table);
        let le = g.gather_rows(lt, label_idx);
        let se = g.gather_rows(st, state_idx);
        let label_tokens = g.add(le, se);

        // FD: pooled feature and label streams fused into one token.
        let fmean = g.mean_tokens(feature_tokens);
        let lmean = g.mean_tokens(label_tokens);
        let pair = g.stack_pair(fmean, lmean);
        let fdw = g.param(self.fd_kernel);
        let fdb = g.param(self.fd_bias);
        let fd = g.conv1d_fuse(pair, fdw, fdb);
        let d = self.config.encoder.d_model;
        let fd = g.reshape(fd, &[bsz, 1, d]);

        let sequence = g.concat_tokens(&[feature_tokens, fd, label_tokens]);
        let encoded = self.encoder.forward(g, sequence)?;

        // Shared single-linear classifier over the label rows.
        let lab = g.slice_tokens(encoded, self.layout.label_range().start, n);
        let lab = g.dropout(lab, self.config.classifier_dropout);
        let cw = g.param(self.cls_w);
        let logits = g.tokens_linear(lab, cw);
        let cb = g.param(self.cls_b);
        let logits = g.add(logits, cb);
        let logits = g.reshape(logits, &[bsz, n]);
        Ok(Assembled { sequence, encoded, logits })
    }

    /// Convenience forward returning only the logits node.
    pub fn forward_logits(
        &self,
        g: &mut Graph,
        images: NodeId,
        states: &[LabelStateVector],
    ) -> Result<NodeId> {
        Ok(self.assemble(g, images, states)?.logits)
    }

    /// Eval-mode probabilities for a prepared batch.
    pub fn predict_probs(
        &self,
        store: &mut ParamStore,
        images: &Array4<f64>,
        states: &[LabelStateVector],
    ) -> Result<Array2<f64>> {
        let mut g = Graph::eval(store);
        let x = g.input(images.clone().into_dyn());
        let logits = self.forward_logits(&mut g, x, states)?;
        let probs = g.sigmoid(logits);
        let v = g.value(probs);
        Ok(Array2::from_shape_fn((images.dim().0, self.n_labels), |(b, i)| v[[b, i]]))
    }
}

/// A model restored from disk together with everything stored beside it.
pub struct LoadedModel {
    pub model: Model,
    pub store: ParamStore,
    pub config: ModelConfig,
    pub vocab: LabelVocabulary,
    /// Caller-supplied metadata stored at save time.
    pub extra: serde_json::Value,
    /// Optimizer moment tensors (`adam.*`), present when the checkpoint was
    /// written mid-training for exact resume.
    pub optimizer_tensors: Vec<(String, TensorD)>,
    pub payload_sha256: String,
}

/// Serializes the full parameter store plus config/vocabulary metadata.
pub fn save_model(
    path: &Path,
    store: &ParamStore,
    config: &ModelConfig,
    vocab: &LabelVocabulary,
    extra: serde_json::Value,
    optimizer_tensors: &[(String, TensorD)],
) -> Result<String> {
    let meta = serde_json::json!({
        "kind": "model-checkpoint",
        "config": config,
        "vocabulary": vocab.names(),
        "extra": extra,
    });
    let mut tensors = store.export();
    tensors.extend(optimizer_tensors.iter().cloned());
    checkpoint::save(path, &meta, &tensors)
}

/// Rebuilds the model described by a checkpoint and loads every tensor.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let container = checkpoint::load(path)?;
    let bad = |reason: String| WxError::Checkpoint { name: path.display().to_string(), reason };
    if container.meta.get("kind").and_then(|k| k.as_str()) != Some("model-checkpoint") {
        return Err(bad("not a model checkpoint".into()));
    }
    let config: ModelConfig =
        serde_json::from_value(container.meta["config"].clone()).map_err(|e| bad(e.to_string()))?;
    let names: Vec<String> =
        serde_json::from_value(container.meta["vocabulary"].clone()).map_err(|e| bad(e.to_string()))?;
    let vocab = LabelVocabulary::new(names)?;
    let extra = container.meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(config.clone(), vocab.len(), &mut store, &mut rng)?;
    let expected: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in &expected {
        let tensor = container.tensor(name).ok_or_else(|| WxError::Checkpoint {
            name: name.clone(),
            reason: "missing from checkpoint".into(),
        })?;
        store.load_value(name, tensor.clone())?;
    }
    let optimizer_tensors = container
        .tensors
        .iter()
        .filter(|(n, _)| n.starts_with("adam."))
        .cloned()
        .collect();
    Ok(LoadedModel {
        model,
        store,
        config,
        vocab,
        extra,
        optimizer_tensors,
        payload_sha256: container.payload_sha256,
    })
}

/// Smallest config that still exercises every pipeline stage; shared by the
/// fast tests across modules.
#[cfg(test)]
pub(crate) fn tiny_model_config(input_size: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            kind: crate::backbone::BlockKind::Basic,
            base_width: 4,
            blocks: vec![1],
            input_size,
            bn_momentum: 0.1,
        },
        encoder: EncoderConfig { d_model: 8, heads: 2, layers: 1, ffn_width: 8, ffn_dropout: 0.0 },
        classifier_dropout: 0.0,
        freeze_backbone: false,
    }
}
