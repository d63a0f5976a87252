//! Dataset plumbing: line-delimited manifests, transient-attribute
//! binarization, seeded splits, per-sample preparation, and frame extraction
//! from annotated clips.
//!
//! A manifest is the hand-off artifact between ingestion and the
//! training/evaluation pipelines. It serializes as one JSON object per line
//! with a header line carrying the vocabulary, so every manifest file is
//! self-describing, streamable, and diff-friendly.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::atomic_write;
use crate::error::{Result, WxError};
use crate::image::ImagePlane;
use crate::labels::LabelVocabulary;

/// Partition tag carried by every manifest record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One image plus its ground truth, as serialized into a manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Image file location, as the consumer should open it.
    pub path: String,
    /// One truth bit per vocabulary entry, in vocabulary order.
    pub bits: Vec<u8>,
    /// Raw annotation intensities, kept when the source was intensity-valued.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensities: Option<Vec<f64>>,
    pub split: Split,
    /// Provenance tag: dataset name, clip id, or generator.
    pub source: String,
}

impl ManifestRecord {
    /// Truth bits as the label machinery consumes them.
    pub fn truths(&self) -> Vec<bool> {
        self.bits.iter().map(|&b| b != 0).collect()
    }
}

const MANIFEST_KIND: &str = "wxct-manifest";

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    kind: String,
    vocabulary: Vec<String>,
}

/// Validated record collection over one vocabulary: bit vectors match the
/// vocabulary width, bits are 0/1, and paths are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    vocabulary: LabelVocabulary,
    records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(vocabulary: LabelVocabulary, records: Vec<ManifestRecord>) -> Result<Self> {
        let n = vocabulary.len();
        let mut seen = HashSet::new();
        for (i, rec) in records.iter().enumerate() {
            if rec.bits.len() != n {
                return Err(WxError::Data(format!(
                    "record {i} ({}) carries {} bits, vocabulary has {n}",
                    rec.path,
                    rec.bits.len()
                )));
            }
            if rec.bits.iter().any(|&b| b > 1) {
                return Err(WxError::Data(format!(
                    "record {i} ({}) carries a non-binary truth bit",
                    rec.path
                )));
            }
            if let Some(raw) = &rec.intensities {
                if raw.len() != n {
                    return Err(WxError::Data(format!(
                        "record {i} ({}) carries {} intensities, vocabulary has {n}",
                        rec.path,
                        raw.len()
                    )));
                }
            }
            if !seen.insert(rec.path.as_str()) {
                return Err(WxError::Data(format!("duplicate manifest path {:?}", rec.path)));
            }
        }
        Ok(Self { vocabulary, records })
    }

    pub fn vocabulary(&self) -> &LabelVocabulary {
        &self.vocabulary
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The records carrying one split tag, as a standalone manifest.
    pub fn only(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            vocabulary: self.vocabulary.clone(),
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }

    /// Writes the header line plus one JSON line per record, atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ManifestHeader {
            kind: MANIFEST_KIND.into(),
            vocabulary: self.vocabulary.names().to_vec(),
        };
        let mut text = serde_json::to_string(&header).expect("JSON serialization");
        for rec in &self.records {
            text.push('\n');
            text.push_str(&serde_json::to_string(rec).expect("JSON serialization"));
        }
        text.push('\n');
        atomic_write(path, text.as_bytes())
    }

    /// Reads a manifest written by [`DatasetManifest::save`] and re-checks
    /// every invariant.
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let file = std::fs::File::open(path).map_err(|e| WxError::io(path, e))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| WxError::Data(format!("{}: empty manifest file", path.display())))?
            .map_err(|e| WxError::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&first)
            .map_err(|e| WxError::Data(format!("{}: bad manifest header: {e}", path.display())))?;
        if header.kind != MANIFEST_KIND {
            return Err(WxError::Data(format!(
                "{}: expected a {MANIFEST_KIND} header, found kind {:?}",
                path.display(),
                header.kind
            )));
        }
        let vocabulary = LabelVocabulary::new(header.vocabulary)?;
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| WxError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                WxError::Data(format!("{}:{}: bad record: {e}", path.display(), lineno + 2))
            })?;
            records.push(rec);
        }
        DatasetManifest::new(vocabulary, records)
    }
}

/// The seven weather classes the transient-attribute annotations collapse
/// into after binarization.
pub const TRANSIENT_CLASSES: [&str; 7] =
    ["sunny", "cloudy", "foggy", "rainy", "snowy", "moist", "other"];

/// Vocabulary over [`TRANSIENT_CLASSES`], in that order.
pub fn transient_vocabulary() -> LabelVocabulary {
    LabelVocabulary::new(TRANSIENT_CLASSES.iter().map(|s| s.to_string()).collect())
        .expect("transient class list is non-empty and distinct")
}

/// Thresholds intensity annotations into truth bits: 1 iff the intensity is
/// at least 0.5. Inputs must lie in `[0, 1]`; an already-binary vector passes
/// through unchanged, so the operation is idempotent.
pub fn binarize_transient(intensities: &[f64]) -> Result<Vec<u8>> {
    for (i, &v) in intensities.iter().enumerate() {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(WxError::Data(format!("intensity {v} at index {i} outside [0, 1]")));
        }
    }
    Ok(intensities.iter().map(|&v| u8::from(v >= 0.5)).collect())
}

/// Shuffles the records with a seeded RNG and deals them into train/val/test
/// manifests at the given proportions. Boundaries come from rounding the
/// cumulative ratios, so the three sizes always sum to the input size and a
/// 10-record manifest at (0.7, 0.1, 0.2) lands at 7/1/2.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    if manifest.is_empty() {
        return Err(WxError::Data("cannot split an empty manifest".into()));
    }
    let (a, b, c) = ratios;
    if !(a >= 0.0 && b >= 0.0 && c >= 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(WxError::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let n = manifest.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut1 = (n as f64 * a).round() as usize;
    let cut2 = (n as f64 * (a + b)).round() as usize;
    let mut parts: [Vec<ManifestRecord>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (pos, &idx) in order.iter().enumerate() {
        let (part, split) = if pos < cut1 {
            (0, Split::Train)
        } else if pos < cut2 {
            (1, Split::Val)
        } else {
            (2, Split::Test)
        };
        let mut rec = manifest.records[idx].clone();
        rec.split = split;
        parts[part].push(rec);
    }
    let [train, val, test] = parts;
    Ok((
        DatasetManifest::new(manifest.vocabulary.clone(), train)?,
        DatasetManifest::new(manifest.vocabulary.clone(), val)?,
        DatasetManifest::new(manifest.vocabulary.clone(), test)?,
    ))
}

/// How [`prepare_sample`] treats an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleMode {
    /// Resize, then perturb every channel value with i.i.d. Gaussian noise of
    /// the given standard deviation (raw intensity units), clamped to range.
    Train { noise_sigma: f64 },
    /// Deterministic resize only.
    Eval,
}

/// Default train-time noise level: one percent of the intensity ceiling.
pub fn default_noise_sigma(i_max: f64) -> f64 {
    0.01 * i_max
}

/// Resizes to `side`×`side` and, in train mode, adds seeded Gaussian pixel
/// noise. `noise_sigma = 0` reproduces the eval path bit for bit; the noise
/// is clamped but left unquantized since MASK-I re-quantizes downstream.
pub fn prepare_sample(
    img: &ImagePlane,
    side: usize,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<ImagePlane> {
    let resized = img.resize_bilinear(side, side)?;
    let sigma = match mode {
        SampleMode::Eval => return Ok(resized),
        SampleMode::Train { noise_sigma } => noise_sigma,
    };
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(WxError::Config(format!(
            "noise sigma {sigma} must be finite and non-negative"
        )));
    }
    if sigma == 0.0 {
        return Ok(resized);
    }
    let i_max = resized.i_max();
    let normal = Normal::new(0.0, sigma).expect("sigma checked finite and positive");
    let mut pixels = resized.pixels().clone();
    for v in pixels.iter_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, i_max);
    }
    ImagePlane::new(pixels, i_max)
}

/// Contiguous half-open frame range `[start, end)` sharing one annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub start: usize,
    pub end: usize,
    /// Truth bits for every frame in the range, in vocabulary order.
    pub bits: Vec<u8>,
}

/// A clip that has already been exploded into numbered frame images.
/// Lexicographic PNG file order inside `frames_dir` is frame order, which
/// any zero-padded numbering scheme satisfies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoClipSpec {
    pub frames_dir: PathBuf,
    /// Rate the frames were sampled at; recorded in each record's source tag.
    pub fps: f64,
    pub segments: Vec<SegmentAnnotation>,
}

impl VideoClipSpec {
    fn validate(&self, n_classes: usize) -> Result<()> {
        let mut spans = Vec::with_capacity(self.segments.len());
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.start >= seg.end {
                return Err(WxError::Data(format!(
                    "segment {i} range {}..{} is empty",
                    seg.start, seg.end
                )));
            }
            if seg.bits.len() != n_classes {
                return Err(WxError::Data(format!(
                    "segment {i} carries {} bits, vocabulary has {n_classes}",
                    seg.bits.len()
                )));
            }
            if seg.bits.iter().any(|&b| b > 1) {
                return Err(WxError::Data(format!("segment {i} carries a non-binary truth bit")));
            }
            spans.push((seg.start, seg.end));
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[0].1 > pair[1].0 {
                return Err(WxError::Data(format!(
                    "segments {:?} and {:?} overlap",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(())
    }
}

/// Per-clip extraction summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameReport {
    /// Frames found in the clip directory.
    pub total_frames: usize,
    /// Frame indices not covered by any segment; flagged and left out.
    pub excluded: Vec<usize>,
}

/// Builds one manifest record per annotated frame of `clip`, labelling each
/// frame from the segment that covers it. Frames outside every segment are
/// reported rather than silently dropped; segments must fit inside the clip.
pub fn extract_frames(
    clip: &VideoClipSpec,
    vocabulary: &LabelVocabulary,
    split: Split,
) -> Result<(DatasetManifest, FrameReport)> {
    clip.validate(vocabulary.len())?;
    let entries = std::fs::read_dir(&clip.frames_dir).map_err(|e| WxError::io(&clip.frames_dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| WxError::io(&clip.frames_dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            frames.push(path);
        }
    }
    frames.sort();
    if frames.is_empty() {
        return Err(WxError::Data(format!("no frames under {}", clip.frames_dir.display())));
    }
    for seg in &clip.segments {
        if seg.end > frames.len() {
            return Err(WxError::Data(format!(
                "segment {}..{} runs past the clip ({} frames)",
                seg.start,
                seg.end,
                frames.len()
            )));
        }
    }
    let clip_name = clip
        .frames_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| clip.frames_dir.display().to_string());
    let source = format!("{clip_name}@{}fps", clip.fps);
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for (idx, path) in frames.iter().enumerate() {
        match clip.segments.iter().find(|s| s.start <= idx && idx < s.end) {
            Some(seg) => records.push(ManifestRecord {
                path: path.display().to_string(),
                bits: seg.bits.clone(),
                intensities: None,
                split,
                source: source.clone(),
            }),
            None => excluded.push(idx),
        }
    }
    if !excluded.is_empty() {
        log::warn!(
            "{source}: {} of {} frames fall outside every annotated segment",
            excluded.len(),
            frames.len()
        );
    }
    let report = FrameReport { total_frames: frames.len(), excluded };
    Ok((DatasetManifest::new(vocabulary.clone(), records)?, report))
}

/// Writes `count` synthetic `side`×`side` frames under `dir` and returns
/// their manifest.
///
/// Every class is tied to a full-frame stripe pattern in one colour channel,
/// so the class signal is spread across the whole image and survives crops
/// and occluders; light per-pixel noise keeps records visually distinct.
/// Intended for smoke tests and throughput benchmarks, not realism.
pub fn synthesize_dataset(
    dir: &Path,
    vocabulary: &LabelVocabulary,
    count: usize,
    side: usize,
    split: Split,
    seed: u64,
) -> Result<DatasetManifest> {
    if count == 0 || side < 4 {
        return Err(WxError::Config(format!(
            "synthetic dataset needs count >= 1 and side >= 4, got {count} frames at {side}px"
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| WxError::io(dir, e))?;
    let n = vocabulary.len();
    let i_max = 255.0;
    // Keep the base plus every same-channel stripe inside [0, i_max]: up to
    // ceil(n/3) classes share a channel.
    let per_channel = n.div_ceil(3) as f64;
    let amp = 0.6 * i_max / per_channel;
    let noise = Normal::new(0.0, 0.01 * i_max).expect("fixed sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    for idx in 0..count {
        let bits: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let mut pixels = Array3::from_elem((side, side, 3), 0.3 * i_max);
        for (k, &bit) in bits.iter().enumerate() {
            if bit == 0 {
                continue;
            }
            // Class k owns channel k mod 3 at 1 + k/3 cycles per image height.
            let channel = k % 3;
            let cycles = (k / 3 + 1) as f64;
            for y in 0..side {
                let phase = 2.0 * std::f64::consts::PI * cycles * y as f64 / side as f64;
                let stripe = 0.5 * (1.0 + phase.cos());
                for x in 0..side {
                    pixels[[y, x, channel]] += amp * stripe;
                }
            }
        }
        for v in pixels.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, i_max);
        }
        let path = dir.join(format!("img{idx:04}.png"));
        ImagePlane::new(pixels, i_max)?.save_png(&path)?;
        records.push(ManifestRecord {
            path: path.display().to_string(),
            bits,
            intensities: None,
            split,
            source: "synthetic".into(),
        });
    }
    DatasetManifest::new(vocabulary.clone(), records)
}
