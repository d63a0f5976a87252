//! `ImagePlane`: the H×W×3 intensity array that augmentation and inference
//! operate on, plus PNG round-trips and bilinear resizing.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Result, WxError};

/// A 3-channel image with intensities in `[0, i_max]`.
///
/// Channel order is RGB. Intensities are stored as `f64` so augmentation can
/// work at full precision; operations that produce pixel output quantize with
/// [`round_clamp`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pixels: Array3<f64>,
    i_max: f64,
}

/// Round half-to-even, then clamp into `[0, i_max]`.
pub fn round_clamp(value: f64, i_max: f64) -> f64 {
    value.round_ties_even().clamp(0.0, i_max)
}

impl ImagePlane {
    pub fn new(pixels: Array3<f64>, i_max: f64) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(WxError::Data("empty image".into()));
        }
        if c != 3 {
            return Err(WxError::shape("ImagePlane::new", &[h, w, 3], &[h, w, c]));
        }
        if i_max <= 0.0 || !i_max.is_finite() {
            return Err(WxError::Data(format!("invalid i_max {i_max}")));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > i_max) {
            return Err(WxError::Data("pixel intensity outside [0, i_max]".into()));
        }
        Ok(Self { pixels, i_max })
    }

    /// Builds an 8-bit image (`i_max` = 255).
    pub fn from_rgb8(width: u32, height: u32, data: &[u8]) -> Result<Self> {
        let (h, w) = (height as usize, width as usize);
        if data.len() != h * w * 3 {
            return Err(WxError::shape(
                "ImagePlane::from_rgb8",
                &[h * w * 3],
                &[data.len()],
            ));
        }
        let pixels = Array3::from_shape_vec((h, w, 3), data.iter().map(|&v| v as f64).collect())
            .expect("shape checked above");
        Self::new(pixels, 255.0)
    }

    pub fn zeros(height: usize, width: usize, i_max: f64) -> Self {
        Self {
            pixels: Array3::zeros((height, width, 3)),
            i_max,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn i_max(&self) -> f64 {
        self.i_max
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array3<f64> {
        &mut self.pixels
    }

    /// Mean intensity over all pixels and channels jointly.
    pub fn mean_intensity(&self) -> f64 {
        self.pixels.mean().unwrap_or(0.0)
    }

    /// Crop `[y, y+h) × [x, x+w)`. Bounds-checked.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<ImagePlane> {
        if h == 0 || w == 0 || y + h > self.height() || x + w > self.width() {
            return Err(WxError::Data(format!(
                "crop {h}x{w} at ({y},{x}) outside {}x{} image",
                self.height(),
                self.width()
            )));
        }
        let view = self
            .pixels
            .slice(ndarray::s![y..y + h, x..x + w, ..])
            .to_owned();
        Ok(ImagePlane {
            pixels: view,
            i_max: self.i_max,
        })
    }

    /// Bilinear resize with corner-aligned sampling.
    pub fn resize_bilinear(&self, new_h: usize, new_w: usize) -> Result<ImagePlane> {
        if new_h == 0 || new_w == 0 {
            return Err(WxError::Data("resize to empty image".into()));
        }
        let (h, w, _) = self.pixels.dim();
        let mut out = Array3::zeros((new_h, new_w, 3));
        let sy = if new_h > 1 {
            (h - 1) as f64 / (new_h - 1) as f64
        } else {
            0.0
        };
        let sx = if new_w > 1 {
            (w - 1) as f64 / (new_w - 1) as f64
        } else {
            0.0
        };
        for oy in 0..new_h {
            let fy = sy * oy as f64;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f64;
            for ox in 0..new_w {
                let fx = sx * ox as f64;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f64;
                for c in 0..3 {
                    let top = self.pixels[[y0, x0, c]] * (1.0 - tx) + self.pixels[[y0, x1, c]] * tx;
                    let bot = self.pixels[[y1, x0, c]] * (1.0 - tx) + self.pixels[[y1, x1, c]] * tx;
                    out[[oy, ox, c]] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        ImagePlane::new(out, self.i_max)
    }

    /// Quantizes to 8-bit RGB, scaling from `[0, i_max]` to `[0, 255]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let scale = 255.0 / self.i_max;
        self.pixels
            .iter()
            .map(|&v| round_clamp(v * scale, 255.0) as u8)
            .collect()
    }

    pub fn load_png(path: &Path) -> Result<ImagePlane> {
        let img = image::open(path)
            .map_err(|e| WxError::Data(format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        Self::from_rgb8(img.width(), img.height(), img.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = self.to_rgb8();
        image::save_buffer(
            path,
            &buf,
            self.width() as u32,
            self.height() as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| WxError::Data(format!("cannot write {}: {e}", path.display())))
    }
}
