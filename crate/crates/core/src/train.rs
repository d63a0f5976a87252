//! The training loop: multi-label BCE on logits, Adam updates over the full
//! parameter set, and a reduce-on-plateau schedule monitored on validation
//! CF1.
//!
//! Every piece of run state — epoch counter, learning rate, plateau
//! bookkeeping, RNG, optimizer moments — serializes into the checkpoint, so
//! an interrupted run resumes bit-for-bit where it stopped.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_mask1, MaskConfig, PhotometricRanges};
use crate::backbone::image_to_chw;
use crate::data::{prepare_sample, DatasetManifest, ManifestRecord, SampleMode};
use crate::error::{Result, WxError};
use crate::image::ImagePlane;
use crate::labels::{sample_mask, LabelState, LabelStateVector};
use crate::metrics::{aggregate, binarize, ConfusionCounts, CrCpMode, MetricsReport};
use crate::model::{load_model, save_model, Model, ModelConfig};
use crate::nn::graph::softplus;
use crate::nn::{Adam, Graph, ParamStore, TensorD};

/// Optimization hyperparameters. Defaults follow the reference recipe:
/// Adam(0.9, 0.999) from lr 1e-5, batches of 32, 0.35 classifier dropout,
/// a quarter of the labels masked, and an 18-pixel occlusion scan window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    /// Dropout on the classifier input; copied onto the model config by the
    /// loop so the knob lives in one place.
    pub dropout_fc: f64,
    /// Fraction of labels hidden by MASK-II each step.
    pub mask_ratio: f64,
    /// MASK-I adaptive-occlusion scan window side, in pixels.
    pub occlusion_window: usize,
    /// Fragments cropped per image by MASK-I.
    pub fragments: usize,
    /// Train-time additive noise, as a fraction of the intensity ceiling.
    pub noise_sigma_frac: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    /// Decision threshold used for validation metrics.
    pub threshold: f64,
    /// Restrict the loss to MASK-II-hidden labels instead of all labels.
    pub masked_loss_only: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 32,
            dropout_fc: 0.35,
            mask_ratio: 0.25,
            occlusion_window: 18,
            fragments: 4,
            noise_sigma_frac: 0.01,
            plateau_factor: 0.1,
            plateau_patience: 3,
            max_epochs: 100,
            threshold: 0.5,
            masked_loss_only: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(WxError::Config(msg));
        if !(self.lr_init.is_finite() && self.lr_init > 0.0) {
            return bad(format!("lr_init {} must be positive", self.lr_init));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return bad(format!("{name} {beta} outside [0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_fc) {
            return bad(format!("dropout_fc {} outside [0, 1)", self.dropout_fc));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        if self.occlusion_window < 2 {
            return bad(format!("occlusion_window {} must be >= 2", self.occlusion_window));
        }
        if self.fragments == 0 {
            return bad("fragments must be >= 1".into());
        }
        if !(self.noise_sigma_frac.is_finite() && self.noise_sigma_frac >= 0.0) {
            return bad(format!("noise_sigma_frac {} must be non-negative", self.noise_sigma_frac));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor {} outside (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be >= 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        Ok(())
    }
}

/// Mutable run state carried across epochs and serialized into checkpoints
/// (optimizer moments travel separately as tensors).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub best_cf1: Option<f64>,
    /// Epochs since the last validation improvement.
    pub stale_epochs: usize,
    /// Drives batch order, MASK-I/II sampling, and dropout seeds.
    pub rng: ChaCha8Rng,
}

/// One validation-history line: the epoch's mean train loss, the lr it
/// trained with, and the validation metrics afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: Option<f64>,
    pub of1: Option<f64>,
}

/// Where a finished (or interrupted) run left its artifacts.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    /// Checkpoint with the best validation CF1 seen.
    pub best_checkpoint: PathBuf,
    /// Checkpoint after the most recent epoch; resume from this one.
    pub last_checkpoint: PathBuf,
    pub history_path: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_cf1: Option<f64>,
}

/// Mean binary cross-entropy over logit rows, `softplus(x) − x·y` per
/// element, restricted to `mask` when given. Matches the differentiable
/// graph op bit for bit.
pub fn bce_loss(
    logits: &Array2<f64>,
    targets: &Array2<f64>,
    mask: Option<&Array2<f64>>,
) -> Result<f64> {
    if logits.dim() != targets.dim() {
        return Err(WxError::shape(
            "bce_loss",
            &[targets.dim().0, targets.dim().1],
            &[logits.dim().0, logits.dim().1],
        ));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(WxError::Numerical("non-finite logit in bce_loss".into()));
    }
    if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(WxError::Data("bce_loss targets must be 0/1".into()));
    }
    let weights = match mask {
        Some(m) => {
            if m.dim() != logits.dim() {
                return Err(WxError::shape(
                    "bce_loss mask",
                    &[logits.dim().0, logits.dim().1],
                    &[m.dim().0, m.dim().1],
                ));
            }
            m.clone()
        }
        None => Array2::ones(logits.dim()),
    };
    let denom = weights.sum();
    if denom == 0.0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for ((&x, &y), &w) in logits.iter().zip(targets.iter()).zip(weights.iter()) {
        acc += (softplus(x) - x * y) * w;
    }
    Ok(acc / denom)
}

/// (B, N) target tensor and, when `masked_only`, a matching 0/1 weight
/// tensor selecting the MASK-II-hidden entries.
fn batch_targets(
    states: &[LabelStateVector],
    n: usize,
    masked_only: bool,
) -> (TensorD, Option<TensorD>) {
    let bsz = states.len();
    let mut targets = TensorD::zeros(IxDyn(&[bsz, n]));
    let mut mask = masked_only.then(|| TensorD::zeros(IxDyn(&[bsz, n])));
    for (b, sv) in states.iter().enumerate() {
        for i in 0..n {
            targets[[b, i]] = if sv.truths()[i] { 1.0 } else { 0.0 };
            if let Some(m) = &mut mask {
                if sv.states()[i] == LabelState::Masked {
                    m[[b, i]] = 1.0;
                }
            }
        }
    }
    (targets, mask)
}

/// One Adam update on one prepared batch; returns the batch loss. A
/// non-finite loss aborts with the offending batch ids and current lr in the
/// message so the culprit samples can be inspected.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut Adam,
    images: &Array4<f64>,
    states: &[LabelStateVector],
    batch_ids: &[String],
    masked_loss_only: bool,
    dropout_seed: u64,
) -> Result<f64> {
    let (targets, mask) = batch_targets(states, model.n_labels(), masked_loss_only);
    let (loss_value, grads) = {
        let mut g = Graph::new(store, true, true, dropout_seed);
        let x = g.input(images.clone().into_dyn());
        let logits = model.forward_logits(&mut g, x, states)?;
        let loss = g.bce_with_logits(logits, &targets, mask.as_ref());
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(WxError::Numerical(format!(
                "loss {value} after {} optimizer steps (lr {}) on batch [{}]",
                opt.step_count(),
                opt.lr(),
                batch_ids.join(", ")
            )));
        }
        (value, g.backward(loss))
    };
    opt.step(store, &grads);
    Ok(loss_value)
}

/// Loads one record and runs the full train-time preparation: resize with
/// additive noise, MASK-I fragment selection, back up to the network input
/// size, then channels-first normalization.
pub fn load_train_example(
    record: &ManifestRecord,
    input_size: usize,
    ranges: &PhotometricRanges,
    mask_cfg: &MaskConfig,
    fragments: usize,
    noise_sigma_frac: f64,
    rng: &mut impl Rng,
) -> Result<Array3<f64>> {
    let img = ImagePlane::load_png(Path::new(&record.path))?;
    let sigma = noise_sigma_frac * img.i_max();
    let prepared = prepare_sample(&img, input_size, SampleMode::Train { noise_sigma: sigma }, rng)?;
    let fragment = apply_mask1(&prepared, ranges, mask_cfg, fragments, true, rng)?;
    let fragment = if fragment.height() == input_size && fragment.width() == input_size {
        fragment
    } else {
        fragment.resize_bilinear(input_size, input_size)?
    };
    Ok(image_to_chw(&fragment))
}

/// Loads one record the way evaluation sees it: deterministic resize only.
pub fn load_eval_example(record: &ManifestRecord, input_size: usize) -> Result<Array3<f64>> {
    let img = ImagePlane::load_png(Path::new(&record.path))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval path draws nothing
    let prepared = prepare_sample(&img, input_size, SampleMode::Eval, &mut rng)?;
    Ok(image_to_chw(&prepared))
}

/// Runs the model over a manifest in eval mode with every label masked and
/// aggregates the full report at `threshold`.
pub fn evaluate_manifest(
    model: &Model,
    store: &mut ParamStore,
    manifest: &DatasetManifest,
    batch_size: usize,
    threshold: f64,
) -> Result<MetricsReport> {
    if manifest.is_empty() {
        return Err(WxError::Data("cannot evaluate an empty manifest".into()));
    }
    let n = model.n_labels();
    if manifest.vocabulary().len() != n {
        return Err(WxError::Data(format!(
            "manifest carries {} classes, model expects {n}",
            manifest.vocabulary().len()
        )));
    }
    let input = model.config().backbone.input_size;
    let mut counts = ConfusionCounts::new(n);
    for chunk in manifest.records().chunks(batch_size.max(1)) {
        let mut images = Array4::zeros((chunk.len(), 3, input, input));
        let mut states = Vec::with_capacity(chunk.len());
        for (slot, rec) in chunk.iter().enumerate() {
            images.slice_mut(s![slot, .., .., ..]).assign(&load_eval_example(rec, input)?);
            states.push(LabelStateVector::all_masked(rec.truths()));
        }
        let probs = model.predict_probs(store, &images, &states)?;
        for (slot, rec) in chunk.iter().enumerate() {
            let pred = binarize(&probs.row(slot).to_vec(), threshold)?;
            counts.accumulate(&rec.truths(), &pred)?;
        }
    }
    aggregate(&counts, threshold, CrCpMode::ClassMean)
}

/// Everything a resumable checkpoint stores beside the tensors.
#[derive(Serialize, Deserialize)]
struct RunMeta {
    train_config: TrainConfig,
    train_state: TrainState,
    adam_steps: u64,
}

fn save_run_checkpoint(
    path: &Path,
    store: &ParamStore,
    model_config: &ModelConfig,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    state: &TrainState,
    opt: &Adam,
) -> Result<()> {
    let meta = RunMeta {
        train_config: config.clone(),
        train_state: state.clone(),
        adam_steps: opt.step_count(),
    };
    let extra = serde_json::to_value(&meta).expect("JSON serialization");
    save_model(path, store, model_config, manifest.vocabulary(), extra, &opt.export_state(store))?;
    Ok(())
}

/// Epoch loop: shuffled batches through MASK-I/II and [`train_step`],
/// validation after every epoch, reduce-on-plateau on CF1, best/last
/// checkpoints, and a line-delimited history file.
///
/// `resume` continues an interrupted run exactly: epoch counter, lr, plateau
/// state, RNG, and optimizer moments all come from the checkpoint (which
/// also fixes the architecture; `model_config` only seeds fresh runs).
pub fn train_loop(
    train: &DatasetManifest,
    val: &DatasetManifest,
    model_config: &ModelConfig,
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainArtifacts> {
    config.validate()?;
    if train.is_empty() {
        return Err(WxError::Data("train split is empty".into()));
    }
    if val.is_empty() {
        return Err(WxError::Data("val split is empty".into()));
    }
    if train.vocabulary() != val.vocabulary() {
        return Err(WxError::Data("train and val vocabularies differ".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| WxError::io(out_dir, e))?;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let history_path = out_dir.join("history.jsonl");

    let fresh = resume.is_none();
    let (model, mut store, mut opt, mut state) = match resume {
        Some(path) => {
            let loaded = load_model(path)?;
            if loaded.vocab != *train.vocabulary() {
                return Err(WxError::Data(format!(
                    "checkpoint vocabulary {:?} does not match the train split",
                    loaded.vocab.names()
                )));
            }
            let meta: RunMeta = serde_json::from_value(loaded.extra).map_err(|e| {
                WxError::Checkpoint {
                    name: path.display().to_string(),
                    reason: format!("missing run state: {e}"),
                }
            })?;
            let mut opt = Adam::new(meta.train_state.lr, config.adam_beta1, config.adam_beta2);
            opt.import_state(&loaded.store, &loaded.optimizer_tensors, meta.adam_steps);
            (loaded.model, loaded.store, opt, meta.train_state)
        }
        None => {
            let mut model_config = model_config.clone();
            model_config.classifier_dropout = config.dropout_fc;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let model = Model::new(model_config, train.vocabulary().len(), &mut store, &mut rng)?;
            let opt = Adam::new(config.lr_init, config.adam_beta1, config.adam_beta2);
            let state = TrainState {
                epoch: 0,
                lr: config.lr_init,
                best_cf1: None,
                stale_epochs: 0,
                rng: ChaCha8Rng::seed_from_u64(config.seed),
            };
            (model, store, opt, state)
        }
    };
    let model_config = model.config().clone();
    let input = model_config.backbone.input_size;
    if config.occlusion_window > input {
        return Err(WxError::Config(format!(
            "occlusion_window {} exceeds the {input}px network input",
            config.occlusion_window
        )));
    }
    let ranges = PhotometricRanges::default();
    let mask_cfg = MaskConfig::new(config.occlusion_window, 0.0)?;

    let mut opts = std::fs::OpenOptions::new();
    opts.create(true);
    if fresh {
        opts.write(true).truncate(true);
    } else {
        opts.append(true);
    }
    let mut history_file = opts.open(&history_path).map_err(|e| WxError::io(&history_path, e))?;
    if fresh {
        save_run_checkpoint(&best_path, &store, &model_config, train, config, &state, &opt)?;
        save_run_checkpoint(&last_path, &store, &model_config, train, config, &state, &opt)?;
    }

    let mut history = Vec::new();
    while state.epoch < config.max_epochs {
        state.epoch += 1;
        let epoch_lr = state.lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut images = Array4::zeros((chunk.len(), 3, input, input));
            let mut states = Vec::with_capacity(chunk.len());
            let mut ids = Vec::with_capacity(chunk.len());
            for (slot, &idx) in chunk.iter().enumerate() {
                let rec = &train.records()[idx];
                let chw = load_train_example(
                    rec,
                    input,
                    &ranges,
                    &mask_cfg,
                    config.fragments,
                    config.noise_sigma_frac,
                    &mut state.rng,
                )?;
                images.slice_mut(s![slot, .., .., ..]).assign(&chw);
                states.push(sample_mask(&rec.truths(), config.mask_ratio, &mut state.rng)?);
                ids.push(rec.path.clone());
            }
            let dropout_seed = state.rng.gen::<u64>();
            let loss = train_step(
                &model,
                &mut store,
                &mut opt,
                &images,
                &states,
                &ids,
                config.masked_loss_only,
                dropout_seed,
            )?;
            loss_sum += loss * chunk.len() as f64;
        }
        let epoch_loss = loss_sum / train.len() as f64;

        let report = evaluate_manifest(&model, &mut store, val, config.batch_size, config.threshold)?;
        if !report.cf1.is_finite() {
            return Err(WxError::Numerical(format!(
                "validation CF1 {} at epoch {}",
                report.cf1, state.epoch
            )));
        }
        let improved = state.best_cf1.is_none_or(|best| report.cf1 > best);
        if improved {
            state.best_cf1 = Some(report.cf1);
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
            if state.stale_epochs >= config.plateau_patience {
                state.lr *= config.plateau_factor;
                opt.set_lr(state.lr);
                state.stale_epochs = 0;
                log::info!(
                    "epoch {}: validation CF1 plateaued, lr reduced to {:e}",
                    state.epoch,
                    state.lr
                );
            }
        }

        let record = EpochRecord {
            epoch: state.epoch,
            loss: epoch_loss,
            lr: epoch_lr,
            cp: report.cp,
            cr: report.cr,
            cf1: report.cf1,
            op: report.op,
            or: report.or,
            of1: report.of1,
        };
        let line = serde_json::to_string(&record).expect("JSON serialization");
        writeln!(history_file, "{line}").map_err(|e| WxError::io(&history_path, e))?;
        history_file.flush().map_err(|e| WxError::io(&history_path, e))?;
        history.push(record);

        if improved {
            save_run_checkpoint(&best_path, &store, &model_config, train, config, &state, &opt)?;
        }
        save_run_checkpoint(&last_path, &store, &model_config, train, config, &state, &opt)?;
        log::info!(
            "epoch {}: loss {:.5}, val CF1 {:.4} (best {:.4})",
            state.epoch,
            epoch_loss,
            report.cf1,
            state.best_cf1.unwrap_or(f64::NAN)
        );
    }

    Ok(TrainArtifacts {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        history_path,
        history,
        best_cf1: state.best_cf1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, Split};
    use crate::labels::LabelVocabulary;
    use crate::model::tiny_model_config;
    use ndarray::arr2;

    fn tiny_setup(n: usize, seed: u64) -> (ParamStore, Model) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(tiny_model_config(16), n, &mut store, &mut rng).unwrap();
        (store, model)
    }

    fn toy_batch(bsz: usize, n: usize, seed: u64) -> (Array4<f64>, Vec<LabelStateVector>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Array4::from_shape_fn((bsz, 3, 16, 16), |_| rng.gen_range(0.0..1.0));
        let states: Vec<LabelStateVector> = (0..bsz)
            .map(|_| {
                let truths: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
                sample_mask(&truths, 0.25, &mut rng).unwrap()
            })
            .collect();
        let ids = (0..bsz).map(|b| format!("toy{b}")).collect();
        (images, states, ids)
    }

    #[test]
    fn default_config_matches_recipe() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_init, 1e-5);
        assert_eq!((cfg.adam_beta1, cfg.adam_beta2), (0.9, 0.999));
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.dropout_fc, 0.35);
        assert_eq!(cfg.mask_ratio, 0.25);
        assert_eq!(cfg.occlusion_window, 18);
        assert_eq!((cfg.plateau_factor, cfg.plateau_patience), (0.1, 3));
        cfg.validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_values() {
        for mutate in [
            (|c: &mut TrainConfig| c.lr_init = 0.0) as fn(&mut TrainConfig),
            |c| c.adam_beta1 = 1.0,
            |c| c.batch_size = 0,
            |c| c.dropout_fc = 1.0,
            |c| c.mask_ratio = 1.5,
            |c| c.plateau_factor = 1.0,
            |c| c.plateau_patience = 0,
            |c| c.threshold = 0.0,
            |c| c.fragments = 0,
        ] {
            let mut cfg = TrainConfig::default();
            mutate(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn bce_oracle_values() {
        // sigma(0) = 1/2 on a single positive: ln 2.
        let ln2 = bce_loss(&arr2(&[[0.0]]), &arr2(&[[1.0]]), None).unwrap();
        assert!((ln2 - std::f64::consts::LN_2).abs() < 1e-12);
        // Saturated correct logit: loss vanishes.
        let sat = bce_loss(&arr2(&[[50.0]]), &arr2(&[[1.0]]), None).unwrap();
        assert!((0.0..=1e-9).contains(&sat));
        // Two logits against scalar softplus: mean of softplus(-1), softplus(-2).
        let two = bce_loss(&arr2(&[[1.0, -2.0]]), &arr2(&[[1.0, 0.0]]), None).unwrap();
        let expect = (softplus(-1.0) + softplus(-2.0)) / 2.0;
        assert!((two - expect).abs() < 1e-15);
        assert!((two - 0.2201).abs() < 1e-4);
    }

    #[test]
    fn bce_rejects_bad_inputs() {
        assert!(bce_loss(&arr2(&[[0.0]]), &arr2(&[[0.5]]), None).is_err());
        assert!(bce_loss(&arr2(&[[f64::NAN]]), &arr2(&[[1.0]]), None).is_err());
        assert!(bce_loss(&arr2(&[[0.0, 1.0]]), &arr2(&[[1.0]]), None).is_err());
    }

    #[test]
    fn bce_mask_restricts_the_mean() {
        let logits = arr2(&[[1.0, -2.0]]);
        let targets = arr2(&[[1.0, 0.0]]);
        let mask = arr2(&[[1.0, 0.0]]);
        let masked = bce_loss(&logits, &targets, Some(&mask)).unwrap();
        assert!((masked - softplus(-1.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_step_leaves_parameters_unchanged() {
        let (mut store, model) = tiny_setup(3, 1);
        let before = store.export();
        let (images, states, ids) = toy_batch(2, 3, 7);
        let mut opt = Adam::new(0.0, 0.9, 0.999);
        let loss = train_step(&model, &mut store, &mut opt, &images, &states, &ids, false, 5).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        for ((name, old), (name2, new)) in before.iter().zip(store.export()) {
            assert_eq!(name, &name2);
            // Batch-norm running stats move with the forward pass by design;
            // trainable tensors must stay put under lr = 0.
            if !name.contains("running_") {
                assert_eq!(old, &new, "{name} changed under lr 0");
            }
        }
    }

    #[test]
    fn five_steps_are_seed_deterministic() {
        let run = || {
            let (mut store, model) = tiny_setup(3, 2);
            let mut opt = Adam::new(1e-3, 0.9, 0.999);
            let (images, states, ids) = toy_batch(2, 3, 11);
            (0..5)
                .map(|step| {
                    train_step(&model, &mut store, &mut opt, &images, &states, &ids, false, step)
                        .unwrap()
                })
                .collect::<Vec<f64>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed must reproduce the loss trajectory exactly");
    }

    #[test]
    fn steps_descend_on_a_toy_batch() {
        let (mut store, model) = tiny_setup(2, 3);
        let mut opt = Adam::new(5e-3, 0.9, 0.999);
        let (images, states, ids) = toy_batch(2, 2, 13);
        let (targets, _) = batch_targets(&states, 2, false);
        let targets2 =
            Array2::from_shape_fn((2, 2), |(b, i)| targets[[b, i]]);
        let loss_now = |store: &mut ParamStore| {
            let mut g = Graph::new(store, true, false, 99);
            let x = g.input(images.clone().into_dyn());
            let logits = model.forward_logits(&mut g, x, &states).unwrap();
            let v = g.value(logits);
            let logits2 = Array2::from_shape_fn((2, 2), |(b, i)| v[[b, i]]);
            bce_loss(&logits2, &targets2, None).unwrap()
        };
        let before = loss_now(&mut store);
        for step in 0..20 {
            train_step(&model, &mut store, &mut opt, &images, &states, &ids, false, step).unwrap();
        }
        let after = loss_now(&mut store);
        assert!(
            after < before,
            "loss should fall on the batch it trained on: {before} -> {after}"
        );
    }

    /// Synthetic manifest + the tiny model settings the loop tests share.
    fn loop_fixture(dir: &Path, seed: u64) -> (DatasetManifest, ModelConfig, TrainConfig) {
        let vocab = LabelVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let manifest = synthesize_dataset(dir, &vocab, 6, 16, Split::Train, seed).unwrap();
        let mut model_config = tiny_model_config(16);
        // Freeze the batch-norm running stats so vanishing updates really do
        // leave the validation metric flat.
        model_config.backbone.bn_momentum = 0.0;
        let config = TrainConfig {
            lr_init: 1e-12, // vanishing updates keep the validation metric flat
            batch_size: 4,
            dropout_fc: 0.0,
            occlusion_window: 8,
            plateau_factor: 0.5,
            plateau_patience: 2,
            max_epochs: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        (manifest, model_config, config)
    }

    #[test]
    fn plateau_reduces_lr_after_patience_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, model_config, config) = loop_fixture(&dir.path().join("data"), 21);
        let out = dir.path().join("run");
        let artifacts =
            train_loop(&manifest, &manifest, &model_config, &config, &out, None).unwrap();
        let lrs: Vec<f64> = artifacts.history.iter().map(|r| r.lr).collect();
        // Stagnant metric: epoch 1 sets the best, epochs 2-3 go stale, the
        // reduction lands after epoch 3, so epoch 4 trains at half rate.
        assert_eq!(lrs, vec![1e-12, 1e-12, 1e-12, 5e-13]);
        for pair in artifacts.history.windows(2) {
            assert!(pair[1].lr <= pair[0].lr, "lr must never increase");
            assert_eq!(pair[0].cf1, pair[1].cf1, "metric should stay flat at lr ~ 0");
        }
        // The history file holds the same records the call returned.
        let text = std::fs::read_to_string(&artifacts.history_path).unwrap();
        let parsed: Vec<EpochRecord> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, artifacts.history);
    }

    #[test]
    fn zero_epochs_emit_initial_checkpoint_and_empty_history() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, model_config, mut config) = loop_fixture(&dir.path().join("data"), 22);
        config.max_epochs = 0;
        let out = dir.path().join("run");
        let artifacts =
            train_loop(&manifest, &manifest, &model_config, &config, &out, None).unwrap();
        assert!(artifacts.history.is_empty());
        assert_eq!(std::fs::read_to_string(&artifacts.history_path).unwrap(), "");
        let loaded = load_model(&artifacts.best_checkpoint).unwrap();
        let meta: RunMeta = serde_json::from_value(loaded.extra).unwrap();
        assert_eq!(meta.train_state.epoch, 0);
        assert_eq!(meta.train_state.lr, config.lr_init);
    }

    #[test]
    fn loop_rejects_empty_splits() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, model_config, config) = loop_fixture(&dir.path().join("data"), 23);
        let empty = DatasetManifest::new(manifest.vocabulary().clone(), Vec::new()).unwrap();
        let out = dir.path().join("run");
        assert!(train_loop(&empty, &manifest, &model_config, &config, &out, None).is_err());
        assert!(train_loop(&manifest, &empty, &model_config, &config, &out, None).is_err());
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, model_config, mut config) = loop_fixture(&dir.path().join("data"), 24);
        config.lr_init = 1e-3; // real updates so divergence would show up

        config.max_epochs = 3;
        let full = train_loop(&manifest, &manifest, &model_config, &config, &dir.path().join("full"), None)
            .unwrap();

        config.max_epochs = 1;
        let part_dir = dir.path().join("parts");
        let part =
            train_loop(&manifest, &manifest, &model_config, &config, &part_dir, None).unwrap();
        config.max_epochs = 3;
        let resumed = train_loop(
            &manifest,
            &manifest,
            &model_config,
            &config,
            &part_dir,
            Some(&part.last_checkpoint),
        )
        .unwrap();

        assert_eq!(full.history, {
            let mut h = part.history.clone();
            h.extend(resumed.history.clone());
            h
        });
        let a = crate::checkpoint::load(&full.last_checkpoint).unwrap();
        let b = crate::checkpoint::load(&resumed.last_checkpoint).unwrap();
        assert_eq!(a.tensors.len(), b.tensors.len());
        for ((name_a, t_a), (name_b, t_b)) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(name_a, name_b);
            assert_eq!(t_a, t_b, "tensor {name_a} diverged after resume");
        }
    }
}
