//! Core raster types: soft segmentation masks and RGB image tensors, plus
//! the align-corners bilinear resampling shared by every module that moves
//! data between the patch grid and image resolution.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Resolution a [`SoftMask`] lives at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResolutionTag {
    /// One value per backbone patch, shape (n, m).
    PatchGrid,
    /// One value per image pixel.
    Image,
}

/// A 2-D soft segmentation mask with all values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    values: Array2<f64>,
    resolution: ResolutionTag,
}

impl SoftMask {
    /// Validates range and finiteness of every value.
    pub fn new(values: Array2<f64>, resolution: ResolutionTag) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("mask must be non-empty".into()));
        }
        for &v in values.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!(
                    "mask value {v} outside [0,1] or non-finite"
                )));
            }
        }
        Ok(Self { values, resolution })
    }

    /// Constant mask of the given value.
    pub fn constant(h: usize, w: usize, value: f64, resolution: ResolutionTag) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Input(format!("mask dims ({h},{w}) must be positive")));
        }
        Self::new(Array2::from_elem((h, w), value), resolution)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn resolution(&self) -> ResolutionTag {
        self.resolution
    }

    /// (height, width).
    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Mean value over all pixels.
    pub fn mean(&self) -> f64 {
        self.values.sum() / self.values.len() as f64
    }

    /// True if every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Bilinear resample to `(h, w)`, clipped to [0, 1], retagged `Image`.
    pub fn upsample_to(&self, h: usize, w: usize) -> Result<SoftMask> {
        if h == 0 || w == 0 {
            return Err(Error::Input(format!(
                "upsample target ({h},{w}) must be positive"
            )));
        }
        let resized = bilinear_resize(&self.values, h, w).mapv(|v| v.clamp(0.0, 1.0));
        SoftMask::new(resized, ResolutionTag::Image)
    }

    /// Same resample as [`SoftMask::upsample_to`] but keeps the tag; used
    /// internally when masks move between working resolutions.
    pub fn resized(&self, h: usize, w: usize) -> Result<SoftMask> {
        if h == 0 || w == 0 {
            return Err(Error::Input(format!(
                "resize target ({h},{w}) must be positive"
            )));
        }
        let resized = bilinear_resize(&self.values, h, w).mapv(|v| v.clamp(0.0, 1.0));
        SoftMask::new(resized, self.resolution)
    }
}

/// A 3-channel image with values in [0, 1], shape (3, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
    source_id: String,
}

/// Smallest image edge the pipeline accepts (one default patch).
pub const MIN_IMAGE_EDGE: usize = 14;

impl ImageTensor {
    pub fn new(pixels: Array3<f64>, source_id: impl Into<String>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::Input(format!("image must have 3 channels, got {c}")));
        }
        if h < MIN_IMAGE_EDGE || w < MIN_IMAGE_EDGE {
            return Err(Error::Input(format!(
                "image {h}x{w} smaller than minimum edge {MIN_IMAGE_EDGE}"
            )));
        }
        for &v in pixels.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!(
                    "pixel value {v} outside [0,1] or non-finite"
                )));
            }
        }
        Ok(Self {
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// (height, width).
    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.pixels.dim();
        (h, w)
    }

    /// Bilinear resize of all three channels; the id gains no suffix.
    pub fn resized(&self, h: usize, w: usize) -> Result<ImageTensor> {
        let pixels = resize_channels(&self.pixels, h, w);
        ImageTensor::new(pixels, self.source_id.clone())
    }
}

/// Bilinear resize of a channel stack (c, H, W) to (c, h, w), clamped to [0,1].
pub(crate) fn resize_channels(src: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, _, _) = src.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let plane = src.index_axis(ndarray::Axis(0), ch).to_owned();
        let resized = bilinear_resize(&plane, h, w);
        for r in 0..h {
            for col in 0..w {
                out[[ch, r, col]] = resized[[r, col]].clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Align-corners bilinear resample: output position i maps to input
/// coordinate i·(in−1)/(out−1), so the four corners are preserved exactly
/// and equal input/output sizes are an identity.
pub fn bilinear_resize(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    if in_h == out_h && in_w == out_w {
        return src.clone();
    }
    let scale = |out_i: usize, out_n: usize, in_n: usize| -> f64 {
        if out_n <= 1 || in_n <= 1 {
            0.0
        } else {
            out_i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
        }
    };
    let mut out = Array2::zeros((out_h, out_w));
    for r in 0..out_h {
        let y = scale(r, out_h, in_h);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = y - y0 as f64;
        for c in 0..out_w {
            let x = scale(c, out_w, in_w);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = x - x0 as f64;
            let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
            let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
            out[[r, c]] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}
