//! Command-line front end: training, evaluation, single-image prediction,
//! the frame-streaming benchmark, augmentation previews, and dataset prep.
//!
//! Every subcommand prints one JSON report to stdout (logs go to stderr) and
//! exits 0 on success, 2 on configuration errors, 3 on data errors, and 4 on
//! numerical aborts.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;

use wxct::augment::{preview_mask1, MaskConfig, PhotometricRanges};
use wxct::backbone::image_to_chw;
use wxct::bench::{run_bench, BenchOptions};
use wxct::checkpoint::save_json;
use wxct::config::{wxct_home, DataPaths, RunConfig};
use wxct::data::{
    extract_frames, prepare_sample, split_dataset, transient_vocabulary, DatasetManifest,
    ManifestRecord, SampleMode, SegmentAnnotation, Split, VideoClipSpec,
};
use wxct::image::ImagePlane;
use wxct::labels::{LabelStateVector, LabelVocabulary};
use wxct::metrics::binarize;
use wxct::model::{load_model, LoadedModel};
use wxct::train::{evaluate_manifest, train_loop, TrainConfig};
use wxct::{Result, WxError};

#[derive(Parser)]
#[command(name = "wxct", version, about = "Multi-label weather recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run file.
    Train(TrainArgs),
    /// Score a checkpoint against a manifest.
    Eval(EvalArgs),
    /// Per-label probabilities for a single image.
    Predict(PredictArgs),
    /// Frame-streaming throughput benchmark with per-subset metrics.
    Bench(BenchArgs),
    /// Render the MASK-I fragments an image would train on.
    AugmentPreview(PreviewArgs),
    /// Shuffle one manifest into train/val/test manifests.
    Split(SplitArgs),
    /// Build a manifest from an annotated frame directory.
    IngestVideo(IngestArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run file; the README documents the schema.
    #[arg(long)]
    config: PathBuf,
    /// Override train.max_epochs.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Override train.lr_init.
    #[arg(long)]
    lr: Option<f64>,
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override data.out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue a run from its last checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Decision threshold on predicted probabilities.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Also write the report here (atomically).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG image to score.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest whose records are grouped into subsets by source tag.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Which clock the headline FPS quotes; the report carries both.
    #[arg(long, value_enum, default_value_t = FpsMode::Model)]
    mode: FpsMode,
    /// Decode frames inline instead of prefetching on a worker thread.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Which stopwatch the headline number comes from. Model time wraps the
/// forward pass only; end-to-end time includes frame decode and batching.
#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FpsMode {
    Model,
    EndToEnd,
}

#[derive(Args)]
struct PreviewArgs {
    /// PNG image to augment.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fragments to crop (L).
    #[arg(long, default_value_t = 4)]
    fragments: usize,
    /// Occlusion scan window side (D); painted patches are D/2 square.
    #[arg(long, default_value_t = 18)]
    window: usize,
    /// Intensity painted into occluded patches.
    #[arg(long, default_value_t = 0.0)]
    fill: f64,
    /// Directory for the PNG pairs and the JSON sidecar.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated train,val,test fractions summing to 1.
    #[arg(long, default_value = "0.7,0.1,0.2")]
    ratios: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for train.jsonl, val.jsonl, and test.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of frame PNGs; lexicographic file order is frame order.
    #[arg(long)]
    frames_dir: PathBuf,
    /// JSON file shaped {"fps": 30.0, "segments": [{"start","end","bits"}]}.
    #[arg(long)]
    annotations: PathBuf,
    /// Comma-separated label names; defaults to the transient vocabulary.
    #[arg(long)]
    labels: Option<String>,
    /// Split tag stamped on every record: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Manifest file to write.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Bench(args) => cmd_bench(args),
        Command::AugmentPreview(args) => cmd_augment_preview(args),
        Command::Split(args) => cmd_split(args),
        Command::IngestVideo(args) => cmd_ingest_video(args),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(v) = args.max_epochs {
        config.train.max_epochs = v;
    }
    if let Some(v) = args.lr {
        config.train.lr_init = v;
    }
    if let Some(v) = args.seed {
        config.train.seed = v;
    }
    if let Some(v) = args.out_dir {
        config.data.out_dir = Some(v);
    }
    config.validate()?;

    let train = DatasetManifest::load(require_path(&config.data.train_manifest, "data.train_manifest")?)?;
    let val = DatasetManifest::load(require_path(&config.data.val_manifest, "data.val_manifest")?)?;

    let hash = config.hash();
    let out_dir = config
        .data
        .out_dir
        .clone()
        .unwrap_or_else(|| wxct_home().join("runs").join(&hash[..12]));
    save_json(
        &out_dir.join("config.json"),
        &json!({ "hash": hash, "config": config.to_json() }),
    )?;

    let artifacts = train_loop(
        &train,
        &val,
        &config.model,
        &config.train,
        &out_dir,
        args.resume.as_deref(),
    )?;
    emit(
        &json!({
            "config_hash": hash,
            "out_dir": out_dir,
            "best_checkpoint": artifacts.best_checkpoint,
            "last_checkpoint": artifacts.last_checkpoint,
            "history": artifacts.history_path,
            "epochs": artifacts.history.len(),
            "best_cf1": artifacts.best_cf1,
        }),
        None,
    )
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut loaded = load_model(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    check_vocab(&loaded, &manifest)?;
    let report = evaluate_manifest(
        &loaded.model,
        &mut loaded.store,
        &manifest,
        args.batch_size,
        args.threshold,
    )?;
    let config = run_config_for(
        &loaded,
        DataPaths {
            test_manifest: Some(args.manifest.clone()),
            ..DataPaths::default()
        },
    );
    emit(
        &json!({
            "checkpoint": args.checkpoint,
            "checkpoint_sha256": loaded.payload_sha256,
            "manifest": args.manifest,
            "config_hash": config.hash(),
            "report": report,
        }),
        args.out.as_deref(),
    )
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let mut loaded = load_model(&args.checkpoint)?;
    let img = ImagePlane::load_png(&args.image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plane = prepare_sample(
        &img,
        loaded.config.backbone.input_size,
        SampleMode::Eval,
        &mut rng,
    )?;
    let images = image_to_chw(&plane).insert_axis(Axis(0));
    // Inference knows no truths: every label rides in as Masked.
    let states = vec![LabelStateVector::all_masked(vec![false; loaded.model.n_labels()])];
    let probs = loaded.model.predict_probs(&mut loaded.store, &images, &states)?;
    let row = probs.row(0).to_vec();
    let decisions = binarize(&row, args.threshold)?;
    let labels: Vec<serde_json::Value> = loaded
        .vocab
        .names()
        .iter()
        .zip(row.iter().zip(&decisions))
        .map(|(name, (&p, &d))| json!({ "name": name, "probability": p, "decided": d }))
        .collect();
    let config = run_config_for(&loaded, DataPaths::default());
    emit(
        &json!({
            "image": args.image,
            "checkpoint": args.checkpoint,
            "checkpoint_sha256": loaded.payload_sha256,
            "config_hash": config.hash(),
            "threshold": args.threshold,
            "labels": labels,
        }),
        args.out.as_deref(),
    )
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut loaded = load_model(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    check_vocab(&loaded, &manifest)?;
    let subsets = group_by_source(&manifest)?;
    let options = BenchOptions {
        batch_size: args.batch_size,
        threshold: args.threshold,
        deterministic: args.deterministic,
        ..BenchOptions::default()
    };
    let result = run_bench(&loaded.model, &mut loaded.store, &subsets, &options)?;
    let headline = match args.mode {
        FpsMode::Model => result.average.model_fps,
        FpsMode::EndToEnd => result.average.end_to_end_fps,
    };
    let config = run_config_for(
        &loaded,
        DataPaths {
            test_manifest: Some(args.manifest.clone()),
            ..DataPaths::default()
        },
    );
    emit(
        &json!({
            "checkpoint": args.checkpoint,
            "checkpoint_sha256": loaded.payload_sha256,
            "manifest": args.manifest,
            "config_hash": config.hash(),
            "mode": match args.mode {
                FpsMode::Model => "model",
                FpsMode::EndToEnd => "end-to-end",
            },
            "headline_fps": headline,
            "result": result,
        }),
        args.out.as_deref(),
    )
}

fn cmd_augment_preview(args: PreviewArgs) -> Result<()> {
    let img = ImagePlane::load_png(&args.image)?;
    let cfg = MaskConfig::new(args.window, args.fill)?;
    let ranges = PhotometricRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let previews = preview_mask1(&img, &ranges, &cfg, args.fragments, &mut rng)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| WxError::io(&args.out_dir, e))?;
    let mut items = Vec::with_capacity(previews.len());
    for (i, p) in previews.iter().enumerate() {
        let pre = format!("fragment_{i}_pre.png");
        let post = format!("fragment_{i}_post.png");
        p.pre.save_png(&args.out_dir.join(&pre))?;
        p.post.save_png(&args.out_dir.join(&post))?;
        let (y, x, side) = p.rect;
        items.push(json!({
            "index": i,
            "pre": pre,
            "post": post,
            "rect": { "y": y, "x": x, "side": side },
            "photometric": p.photometric.map(|q| json!({ "beta": q.beta, "t": q.t, "alpha": q.alpha })),
            "occluders": p
                .occluders
                .iter()
                .map(|&(oy, ox)| json!({ "y": oy, "x": ox, "h": cfg.patch(), "w": cfg.patch() }))
                .collect::<Vec<_>>(),
        }));
    }
    let sidecar = json!({
        "image": args.image,
        "seed": args.seed,
        "fragments": args.fragments,
        "window": cfg.d(),
        "stride": cfg.stride(),
        "patch": cfg.patch(),
        "fill": cfg.fill(),
        "items": items,
    });
    save_json(&args.out_dir.join("preview.json"), &sidecar)?;
    emit(&sidecar, None)
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let ratios = parse_ratios(&args.ratios)?;
    let (train, val, test) = split_dataset(&manifest, ratios, args.seed)?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        part.save(&args.out_dir.join(format!("{name}.jsonl")))?;
    }
    emit(
        &json!({
            "out_dir": args.out_dir,
            "seed": args.seed,
            "ratios": [ratios.0, ratios.1, ratios.2],
            "train": train.len(),
            "val": val.len(),
            "test": test.len(),
        }),
        None,
    )
}

/// Segment annotations as authored on disk, next to but not inside the frame
/// directory they describe.
#[derive(Deserialize)]
struct AnnotationFile {
    fps: f64,
    segments: Vec<SegmentAnnotation>,
}

fn cmd_ingest_video(args: IngestArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.annotations).map_err(|e| WxError::io(&args.annotations, e))?;
    let ann: AnnotationFile = serde_json::from_str(&text)
        .map_err(|e| WxError::Data(format!("{}: {e}", args.annotations.display())))?;
    let vocab = match &args.labels {
        Some(list) => LabelVocabulary::new(list.split(',').map(|s| s.trim().to_string()).collect())?,
        None => transient_vocabulary(),
    };
    let clip = VideoClipSpec {
        frames_dir: args.frames_dir.clone(),
        fps: ann.fps,
        segments: ann.segments,
    };
    let (manifest, report) = extract_frames(&clip, &vocab, parse_split(&args.split)?)?;
    manifest.save(&args.out)?;
    emit(
        &json!({
            "manifest": args.out,
            "records": manifest.len(),
            "total_frames": report.total_frames,
            "excluded": report.excluded,
        }),
        None,
    )
}

/// Writes the report to `out` when given, then prints it to stdout.
fn emit(report: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    if let Some(path) = out {
        save_json(path, report)?;
    }
    println!("{}", serde_json::to_string_pretty(report).expect("JSON serialization"));
    Ok(())
}

fn require_path<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    field
        .as_deref()
        .ok_or_else(|| WxError::Config(format!("{name} is required")))
}

fn check_vocab(loaded: &LoadedModel, manifest: &DatasetManifest) -> Result<()> {
    if loaded.vocab.names() != manifest.vocabulary().names() {
        return Err(WxError::Data(format!(
            "checkpoint vocabulary {:?} does not match manifest vocabulary {:?}",
            loaded.vocab.names(),
            manifest.vocabulary().names()
        )));
    }
    Ok(())
}

/// The run configuration a checkpoint-driven command effectively executes
/// under: the checkpoint's model and training recipes plus this invocation's
/// paths. Its hash ties each report back to its inputs.
fn run_config_for(loaded: &LoadedModel, data: DataPaths) -> RunConfig {
    let train = loaded
        .extra
        .get("train_config")
        .and_then(|v| serde_json::from_value::<TrainConfig>(v.clone()).ok())
        .unwrap_or_default();
    RunConfig {
        device: "cpu".into(),
        data,
        model: loaded.config.clone(),
        train,
    }
}

/// Splits a manifest into benchmark subsets keyed by record source tag, in
/// first-appearance order — one subset per source clip or dataset.
fn group_by_source(manifest: &DatasetManifest) -> Result<Vec<(String, DatasetManifest)>> {
    let mut groups: IndexMap<String, Vec<ManifestRecord>> = IndexMap::new();
    for rec in manifest.records() {
        groups.entry(rec.source.clone()).or_default().push(rec.clone());
    }
    groups
        .into_iter()
        .map(|(name, records)| Ok((name, DatasetManifest::new(manifest.vocabulary().clone(), records)?)))
        .collect()
}

fn parse_ratios(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(WxError::Config(format!(
            "ratios must be three comma-separated numbers, got {text:?}"
        )));
    }
    let mut v = [0.0; 3];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|_| WxError::Config(format!("ratio {part:?} is not a number")))?;
    }
    Ok((v[0], v[1], v[2]))
}

fn parse_split(text: &str) -> Result<Split> {
    match text {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(WxError::Config(format!(
            "unknown split {other:?} (expected train, val, or test)"
        ))),
    }
}
