//! Frame-streaming inference benchmark: per-subset throughput plus the full
//! metrics suite, with a trailing cross-subset average row.
//!
//! Frames stream through a bounded prefetch queue so PNG decoding overlaps
//! inference; a deterministic mode serializes everything onto one thread.
//! Two clocks run side by side: `model_seconds` wraps only the inference
//! calls ("model FPS"), `total_seconds` spans the whole subset including
//! decode ("end-to-end FPS"). Both are always reported.

use std::sync::mpsc;
use std::time::Instant;

use ndarray::{s, Array2, Array3, Array4};
use serde::Serialize;

use crate::data::DatasetManifest;
use crate::error::{Result, WxError};
use crate::labels::LabelStateVector;
use crate::metrics::{aggregate, binarize, ConfusionCounts, CrCpMode, MetricsReport};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::train::load_eval_example;

/// Knobs for one benchmark run.
#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub batch_size: usize,
    /// Decision threshold for the per-subset metrics.
    pub threshold: f64,
    /// Decode inline on the inference thread instead of prefetching.
    pub deterministic: bool,
    /// Keep every probability row for cross-run comparisons.
    pub collect_predictions: bool,
    /// Prefetch queue depth in frames, when not deterministic.
    pub prefetch_depth: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            batch_size: 32,
            threshold: 0.5,
            deterministic: false,
            collect_predictions: false,
            prefetch_depth: 64,
        }
    }
}

/// One row of the benchmark table.
#[derive(Debug, Clone, Serialize)]
pub struct SubsetResult {
    pub name: String,
    pub frames: usize,
    /// Seconds inside the inference calls only.
    pub model_seconds: f64,
    /// Seconds from subset start to last prediction, decode included.
    pub total_seconds: f64,
    pub model_fps: f64,
    pub end_to_end_fps: f64,
    pub metrics: MetricsReport,
}

/// Full benchmark output: one row per subset plus the "Ave." row, whose
/// throughput comes from summed frames and seconds and whose metrics come
/// from the merged confusion counts.
#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub batch_size: usize,
    pub deterministic: bool,
    pub subsets: Vec<SubsetResult>,
    pub average: SubsetResult,
    /// Probability rows across all subsets in stream order, when collected.
    #[serde(skip)]
    pub predictions: Option<Array2<f64>>,
}

fn fps(frames: usize, seconds: f64) -> f64 {
    frames as f64 / seconds.max(1e-9)
}

struct SubsetRun {
    result: SubsetResult,
    counts: ConfusionCounts,
    rows: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn flush_batch(
    model: &Model,
    store: &mut ParamStore,
    input: usize,
    threshold: f64,
    imgs: &mut Vec<Array3<f64>>,
    truths: &mut Vec<Vec<bool>>,
    counts: &mut ConfusionCounts,
    rows: &mut Option<Vec<f64>>,
    model_seconds: &mut f64,
) -> Result<()> {
    if imgs.is_empty() {
        return Ok(());
    }
    let bsz = imgs.len();
    let mut images = Array4::zeros((bsz, 3, input, input));
    for (slot, a) in imgs.iter().enumerate() {
        images.slice_mut(s![slot, .., .., ..]).assign(a);
    }
    let states: Vec<LabelStateVector> =
        truths.iter().map(|t| LabelStateVector::all_masked(t.clone())).collect();
    let t0 = Instant::now();
    let probs = model.predict_probs(store, &images, &states)?;
    *model_seconds += t0.elapsed().as_secs_f64();
    for (slot, t) in truths.iter().enumerate() {
        let row: Vec<f64> = probs.row(slot).to_vec();
        counts.accumulate(t, &binarize(&row, threshold)?)?;
        if let Some(rows) = rows {
            rows.extend(row);
        }
    }
    imgs.clear();
    truths.clear();
    Ok(())
}

fn stream_subset(
    model: &Model,
    store: &mut ParamStore,
    name: &str,
    manifest: &DatasetManifest,
    options: &BenchOptions,
) -> Result<SubsetRun> {
    let n = model.n_labels();
    let input = model.config().backbone.input_size;
    let frames = manifest.len();
    let mut counts = ConfusionCounts::new(n);
    let mut rows: Option<Vec<f64>> = options.collect_predictions.then(Vec::new);
    let mut model_seconds = 0.0;
    let mut imgs = Vec::with_capacity(options.batch_size);
    let mut truths = Vec::with_capacity(options.batch_size);
    let started = Instant::now();

    let mut consume = |item: Result<(Array3<f64>, Vec<bool>)>,
                       store: &mut ParamStore,
                       counts: &mut ConfusionCounts,
                       rows: &mut Option<Vec<f64>>,
                       model_seconds: &mut f64|
     -> Result<()> {
        let (img, truth) = item?;
        imgs.push(img);
        truths.push(truth);
        if imgs.len() == options.batch_size.max(1) {
            flush_batch(
                model,
                store,
                input,
                options.threshold,
                &mut imgs,
                &mut truths,
                counts,
                rows,
                model_seconds,
            )?;
        }
        Ok(())
    };

    let streamed: Result<()> = if options.deterministic {
        manifest.records().iter().try_for_each(|rec| {
            let item = load_eval_example(rec, input).map(|a| (a, rec.truths()));
            consume(item, store, &mut counts, &mut rows, &mut model_seconds)
        })
    } else {
        let (tx, rx) = mpsc::sync_channel(options.prefetch_depth.max(1));
        let records = manifest.records().to_vec();
        let producer = std::thread::spawn(move || {
            for rec in &records {
                let item = load_eval_example(rec, input).map(|a| (a, rec.truths()));
                if tx.send(item).is_err() {
                    return; // consumer hung up, e.g. after an inference error
                }
            }
        });
        let consumed = rx
            .iter()
            .try_for_each(|item| consume(item, store, &mut counts, &mut rows, &mut model_seconds));
        let joined = producer.join();
        consumed?;
        joined.map_err(|_| WxError::Data("frame decode thread panicked".into()))?;
        Ok(())
    };
    streamed?;
    flush_batch(
        model,
        store,
        input,
        options.threshold,
        &mut imgs,
        &mut truths,
        &mut counts,
        &mut rows,
        &mut model_seconds,
    )?;

    let total_seconds = started.elapsed().as_secs_f64();
    let metrics = aggregate(&counts, options.threshold, CrCpMode::ClassMean)?;
    let result = SubsetResult {
        name: name.into(),
        frames,
        model_seconds,
        total_seconds,
        model_fps: fps(frames, model_seconds),
        end_to_end_fps: fps(frames, total_seconds),
        metrics,
    };
    Ok(SubsetRun { result, counts, rows })
}

/// Streams every subset through the model in order and assembles the
/// benchmark table. Subset vocabularies must match the model's label count;
/// an empty subset (or subset list) is an error.
pub fn run_bench(
    model: &Model,
    store: &mut ParamStore,
    subsets: &[(String, DatasetManifest)],
    options: &BenchOptions,
) -> Result<BenchResult> {
    if subsets.is_empty() {
        return Err(WxError::Data("benchmark needs at least one subset".into()));
    }
    let n = model.n_labels();
    for (name, manifest) in subsets {
        if manifest.is_empty() {
            return Err(WxError::Data(format!("benchmark subset {name:?} has no frames")));
        }
        if manifest.vocabulary().len() != n {
            return Err(WxError::Data(format!(
                "subset {name:?} carries {} classes, model expects {n}",
                manifest.vocabulary().len()
            )));
        }
    }

    let mut results = Vec::with_capacity(subsets.len());
    let mut merged = ConfusionCounts::new(n);
    let mut all_rows: Option<Vec<f64>> = options.collect_predictions.then(Vec::new);
    let mut frames = 0;
    let mut model_seconds = 0.0;
    let mut total_seconds = 0.0;
    for (name, manifest) in subsets {
        let run = stream_subset(model, store, name, manifest, options)?;
        merged.merge(&run.counts)?;
        frames += run.result.frames;
        model_seconds += run.result.model_seconds;
        total_seconds += run.result.total_seconds;
        if let (Some(all), Some(rows)) = (&mut all_rows, run.rows) {
            all.extend(rows);
        }
        results.push(run.result);
    }
    let average = SubsetResult {
        name: "Ave.".into(),
        frames,
        model_seconds,
        total_seconds,
        model_fps: fps(frames, model_seconds),
        end_to_end_fps: fps(frames, total_seconds),
        metrics: aggregate(&merged, options.threshold, CrCpMode::ClassMean)?,
    };
    let predictions = all_rows
        .map(|rows| Array2::from_shape_vec((frames, n), rows).expect("one row per frame"));
    Ok(BenchResult {
        batch_size: options.batch_size,
        deterministic: options.deterministic,
        subsets: results,
        average,
        predictions,
    })
}
