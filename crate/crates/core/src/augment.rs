//! MASK-I train-time augmentation: multi-scale cropping, photometric
//! adjustment (contrast, light, saturation), and adaptive occlusion masking.
//!
//! All pixel-producing operations quantize their output with
//! [`round_clamp`](crate::image::round_clamp), so intensities stay on whole
//! steps in `[0, i_max]`. Light maps are intermediate values and keep full
//! precision.

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::error::{Result, WxError};
use crate::image::{round_clamp, ImagePlane};

/// Scalar photometric settings for one adjustment pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhotometricParams {
    /// Contrast increment; 0 is the identity.
    pub beta: f64,
    /// Contrast pivot intensity, in `[0, i_max]`.
    pub t: f64,
    /// Light gain offset; the applied gain is `alpha + 1`, so `alpha` must
    /// stay above −1. 0 is the identity.
    pub alpha: f64,
}

/// Uniform sampling ranges from which per-fragment [`PhotometricParams`] are
/// drawn. The contrast pivot is fixed at `i_max / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricRanges {
    pub beta: (f64, f64),
    pub alpha: (f64, f64),
}

impl Default for PhotometricRanges {
    fn default() -> Self {
        Self {
            beta: (-64.0, 64.0),
            alpha: (-0.3, 0.3),
        }
    }
}

impl PhotometricRanges {
    pub fn sample(&self, i_max: f64, rng: &mut impl Rng) -> PhotometricParams {
        PhotometricParams {
            beta: rng.gen_range(self.beta.0..=self.beta.1),
            t: i_max / 2.0,
            alpha: rng.gen_range(self.alpha.0..=self.alpha.1),
        }
    }
}

/// Geometry of the adaptive occlusion scan: a `d`×`d` window advances at
/// stride `d/2`, and each window brighter than the whole image gets a
/// `d/2`×`d/2` occluder painted at its top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    d: usize,
    fill: f64,
}

impl MaskConfig {
    pub fn new(d: usize, fill: f64) -> Result<Self> {
        if d < 2 || !d.is_multiple_of(2) {
            return Err(WxError::Config(format!(
                "mask window side must be even and >= 2, got {d}"
            )));
        }
        if fill < 0.0 || !fill.is_finite() {
            return Err(WxError::Config(format!("invalid mask fill {fill}")));
        }
        Ok(Self { d, fill })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn stride(&self) -> usize {
        self.d / 2
    }

    pub fn patch(&self) -> usize {
        self.d / 2
    }

    pub fn fill(&self) -> f64 {
        self.fill
    }
}

/// A set of random crops plus the indices chosen for photometric adjustment.
#[derive(Debug, Clone)]
pub struct FragmentBatch {
    pub fragments: Vec<ImagePlane>,
    /// Sorted, unique indices into `fragments`; size `round(0.25 · L)`.
    pub photometric_subset: Vec<usize>,
    /// Source rectangle of each fragment as `(y, x, side)`.
    pub rects: Vec<(usize, usize, usize)>,
}

/// Adjusts contrast around pivot `t`: every channel value `v` becomes
/// `v + (v − t)·beta / i_max`, quantized and clamped. `beta = 0` is exactly
/// the identity — no requantization happens.
pub fn adjust_contrast(img: &ImagePlane, beta: f64, t: f64) -> Result<ImagePlane> {
    let i_max = img.i_max();
    if !(0.0..=i_max).contains(&t) {
        return Err(WxError::Config(format!(
            "contrast pivot {t} outside [0, {i_max}]"
        )));
    }
    if beta == 0.0 {
        return Ok(img.clone());
    }
    let pixels = img
        .pixels()
        .mapv(|v| round_clamp(v + (v - t) * beta / i_max, i_max));
    ImagePlane::new(pixels, i_max)
}

/// Per-pixel light: the midpoint of the largest and smallest channel.
pub fn compute_light(img: &ImagePlane) -> Array2<f64> {
    let (h, w, _) = img.pixels().dim();
    let mut light = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let r = img.pixels()[[y, x, 0]];
            let g = img.pixels()[[y, x, 1]];
            let b = img.pixels()[[y, x, 2]];
            let maxv = r.max(g).max(b);
            let minv = r.min(g).min(b);
            light[[y, x]] = 0.5 * (maxv + minv);
        }
    }
    light
}

/// Rescales a light map around its own mean: `L' = avg + (L − avg)·(alpha+1)`.
/// `alpha = 0` is exactly the identity.
pub fn adjust_light(light: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    if alpha <= -1.0 {
        return Err(WxError::Config(format!(
            "light adjustment alpha must be > -1, got {alpha}"
        )));
    }
    if alpha == 0.0 {
        return Ok(light.clone());
    }
    let avg = light.mean().unwrap_or(0.0);
    Ok(light.mapv(|l| avg + (l - avg) * (alpha + 1.0)))
}

/// Saturation of a pixel with normalized channel extrema `maxv`/`minv`,
/// branching on the normalized lightness `l`.
fn saturation_piecewise(maxv: f64, minv: f64, l: f64) -> f64 {
    if l <= 0.5 {
        (maxv - minv) / (maxv + minv)
    } else {
        (maxv - minv) / (2.0 - (maxv + minv))
    }
}

/// Hue in degrees `[0, 360)` of a normalized RGB pixel; caller guarantees
/// `maxv > minv`.
fn hue_of(r: f64, g: f64, b: f64) -> f64 {
    let maxv = r.max(g).max(b);
    let minv = r.min(g).min(b);
    let delta = maxv - minv;
    let h = if maxv == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if maxv == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    h.rem_euclid(360.0)
}

/// Normalized RGB from hue (degrees), saturation, and lightness.
fn recompose(h: f64, s: f64, l: f64) -> [f64; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let x = c * (1.0 - ((h / 60.0).rem_euclid(2.0) - 1.0).abs());
    let m = l - c / 2.0;
    let (r, g, b) = match (h / 60.0) as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Re-saturates the image against an adjusted light map.
///
/// Channels are normalized to `[0, 1]`; per pixel, the two saturation
/// branches `(max−min)/(max+min)` and `(max−min)/(2−(max+min))` are blended
/// with weights `L'` and `1−L'` respectively, and the pixel is recomposed
/// from its original hue, the blended saturation, and `L'`. Gray pixels
/// (`max = min`) pass through unchanged.
pub fn adjust_saturation(img: &ImagePlane, light: &Array2<f64>) -> Result<ImagePlane> {
    let (h, w, _) = img.pixels().dim();
    if light.dim() != (h, w) {
        return Err(WxError::shape(
            "adjust_saturation",
            &[h, w],
            &[light.dim().0, light.dim().1],
        ));
    }
    let i_max = img.i_max();
    let mut out = img.pixels().clone();
    for y in 0..h {
        for x in 0..w {
            let r = img.pixels()[[y, x, 0]] / i_max;
            let g = img.pixels()[[y, x, 1]] / i_max;
            let b = img.pixels()[[y, x, 2]] / i_max;
            let maxv = r.max(g).max(b);
            let minv = r.min(g).min(b);
            if maxv == minv {
                continue;
            }
            let lp = (light[[y, x]] / i_max).clamp(0.0, 1.0);
            let s_low = saturation_piecewise(maxv, minv, 0.0);
            let s_high = saturation_piecewise(maxv, minv, 1.0);
            let s = s_low * lp + s_high * (1.0 - lp);
            let rgb = recompose(hue_of(r, g, b), s, lp);
            for (c, v) in rgb.iter().enumerate() {
                out[[y, x, c]] = round_clamp(v * i_max, i_max);
            }
        }
    }
    ImagePlane::new(out, i_max)
}

/// Cuts `l` square crops with side uniform in `[0.5, 1.0]·min(H, W)`
/// (floored at `min_side`) and uniform position, then marks `round(0.25·l)`
/// of them for photometric adjustment.
pub fn crop_multiscale(
    img: &ImagePlane,
    l: usize,
    min_side: usize,
    rng: &mut impl Rng,
) -> Result<FragmentBatch> {
    if l == 0 {
        return Err(WxError::Config("fragment count must be >= 1".into()));
    }
    let min_dim = img.height().min(img.width());
    if min_dim < min_side {
        return Err(WxError::Data(format!(
            "image {}x{} smaller than minimum crop side {min_side}",
            img.height(),
            img.width()
        )));
    }
    let lo = min_side.max((0.5 * min_dim as f64).ceil() as usize);
    let mut fragments = Vec::with_capacity(l);
    let mut rects = Vec::with_capacity(l);
    for _ in 0..l {
        let side = rng.gen_range(lo..=min_dim);
        let y = rng.gen_range(0..=img.height() - side);
        let x = rng.gen_range(0..=img.width() - side);
        fragments.push(img.crop(y, x, side, side)?);
        rects.push((y, x, side));
    }
    let subset_size = (0.25 * l as f64).round() as usize;
    let mut photometric_subset = rand::seq::index::sample(rng, l, subset_size).into_vec();
    photometric_subset.sort_unstable();
    Ok(FragmentBatch {
        fragments,
        photometric_subset,
        rects,
    })
}

/// Top-left origins of every scan window whose mean intensity strictly
/// exceeds the whole-image mean. Windows advance at stride `d/2` and must
/// fit entirely inside the image.
pub fn masked_window_origins(img: &ImagePlane, cfg: &MaskConfig) -> Result<Vec<(usize, usize)>> {
    let d = cfg.d();
    if img.height() < d || img.width() < d {
        return Err(WxError::Data(format!(
            "image {}x{} smaller than scan window {d}",
            img.height(),
            img.width()
        )));
    }
    let global_mean = img.mean_intensity();
    let mut origins = Vec::new();
    let mut y = 0;
    while y + d <= img.height() {
        let mut x = 0;
        while x + d <= img.width() {
            let window = img.pixels().slice(ndarray::s![y..y + d, x..x + d, ..]);
            if window.mean().unwrap_or(0.0) > global_mean {
                origins.push((y, x));
            }
            x += cfg.stride();
        }
        y += cfg.stride();
    }
    Ok(origins)
}

/// Occludes every over-bright scan window with a `d/2`×`d/2` square of
/// `cfg.fill` at the window's top-left corner. All windows are judged
/// against the mean of the *input* image before any painting happens.
pub fn adaptive_mask(img: &ImagePlane, cfg: &MaskConfig) -> Result<ImagePlane> {
    let origins = masked_window_origins(img, cfg)?;
    let mut out = img.clone();
    paint_occluders(&mut out, &origins, cfg);
    Ok(out)
}

fn paint_occluders(img: &mut ImagePlane, origins: &[(usize, usize)], cfg: &MaskConfig) {
    let patch = cfg.patch();
    let fill = round_clamp(cfg.fill(), img.i_max());
    for &(y, x) in origins {
        img.pixels_mut()
            .slice_mut(ndarray::s![y..y + patch, x..x + patch, ..])
            .fill(fill);
    }
}

/// Everything the preview CLI needs to describe one augmentation pass.
#[derive(Debug, Clone, Serialize)]
pub struct AugmentTrace {
    /// Index of the fragment that was returned.
    pub chosen: usize,
    /// Source rectangle `(y, x, side)` of the returned fragment.
    pub rect: (usize, usize, usize),
    /// Photometric settings, if the returned fragment was in the subset.
    pub photometric: Option<PhotometricParams>,
    /// Occluder origins painted on the returned fragment.
    pub mask_origins: Vec<(usize, usize)>,
}

/// Full MASK-I pass: crop `l` fragments, photometrically adjust the chosen
/// subset, occlude every fragment adaptively, then return one fragment
/// uniformly at random. With `training = false` the input passes through
/// untouched.
pub fn apply_mask1(
    img: &ImagePlane,
    ranges: &PhotometricRanges,
    cfg: &MaskConfig,
    l: usize,
    training: bool,
    rng: &mut impl Rng,
) -> Result<ImagePlane> {
    Ok(apply_mask1_traced(img, ranges, cfg, l, training, rng)?.0)
}

/// [`apply_mask1`] plus the trace of what happened.
pub fn apply_mask1_traced(
    img: &ImagePlane,
    ranges: &PhotometricRanges,
    cfg: &MaskConfig,
    l: usize,
    training: bool,
    rng: &mut impl Rng,
) -> Result<(ImagePlane, AugmentTrace)> {
    if !training {
        return Ok((
            img.clone(),
            AugmentTrace {
                chosen: 0,
                rect: (0, 0, img.height().min(img.width())),
                photometric: None,
                mask_origins: Vec::new(),
            },
        ));
    }
    let mut previews = preview_mask1(img, ranges, cfg, l, rng)?;
    let chosen = rng.gen_range(0..l);
    let preview = previews.swap_remove(chosen);
    Ok((
        preview.post,
        AugmentTrace {
            chosen,
            rect: preview.rect,
            photometric: preview.photometric,
            mask_origins: preview.occluders,
        },
    ))
}

/// One fragment's before/after pair plus everything the sidecar records.
#[derive(Debug, Clone)]
pub struct FragmentPreview {
    /// Fragment after cropping and any photometric adjustment, before
    /// occlusion.
    pub pre: ImagePlane,
    /// The same fragment with occluders painted.
    pub post: ImagePlane,
    /// Source rectangle `(y, x, side)` in the input image.
    pub rect: (usize, usize, usize),
    /// Photometric settings when this fragment was in the adjusted subset.
    pub photometric: Option<PhotometricParams>,
    /// Top-left origins of the painted occluders.
    pub occluders: Vec<(usize, usize)>,
}

/// Runs the full MASK-I pass but keeps every fragment's before/after pair
/// for inspection tooling. Draws from `rng` exactly like
/// [`apply_mask1_traced`], which delegates here up to the fragment choice.
pub fn preview_mask1(
    img: &ImagePlane,
    ranges: &PhotometricRanges,
    cfg: &MaskConfig,
    l: usize,
    rng: &mut impl Rng,
) -> Result<Vec<FragmentPreview>> {
    let mut batch = crop_multiscale(img, l, cfg.d(), rng)?;
    let mut applied = vec![None; l];
    for &idx in &batch.photometric_subset {
        let params = ranges.sample(img.i_max(), rng);
        let contrasted = adjust_contrast(&batch.fragments[idx], params.beta, params.t)?;
        let light = adjust_light(&compute_light(&contrasted), params.alpha)?;
        batch.fragments[idx] = adjust_saturation(&contrasted, &light)?;
        applied[idx] = Some(params);
    }
    let mut previews = Vec::with_capacity(l);
    for (idx, frag) in batch.fragments.iter().enumerate() {
        let origins = masked_window_origins(frag, cfg)?;
        let mut post = frag.clone();
        paint_occluders(&mut post, &origins, cfg);
        previews.push(FragmentPreview {
            pre: frag.clone(),
            post,
            rect: batch.rects[idx],
            photometric: applied[idx],
            occluders: origins,
        });
    }
    Ok(previews)
}
