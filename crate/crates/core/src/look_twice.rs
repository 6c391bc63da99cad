//! Zoom-in refinement for small foreground components.
//!
//! Small connected components of the coarse mask (global foreground area
//! ratio below tau) get their bounding box expanded to keep background
//! context, the image crop is re-inferred at model resolution, and the
//! predicted patch is pasted back over exactly the expanded box. At train
//! time the same crops are emitted as augmentation samples instead.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::mask::{bilinear_resize, resize_channels, ImageTensor, ResolutionTag, SoftMask};
use crate::{Error, Result};

/// Inclusive-top-left, size-based box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BoundingBox {
    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.top <= other.top
            && self.left <= other.left
            && self.bottom() >= other.bottom()
            && self.right() >= other.right()
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// One connected component of a binarized mask plus its area statistics.
#[derive(Debug, Clone)]
pub struct ComponentRegion {
    /// Member coordinates as (row, col).
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BoundingBox,
    /// Sum of the soft mask over the member pixels.
    pub fg_sum: f64,
    /// Global foreground area ratio: fg_sum / (H * W).
    pub r: f64,
    /// Local density: fg_sum / bbox area.
    pub s_fg: f64,
    /// Bbox-to-image ratio: bbox area / (H * W).
    pub s_bg: f64,
    /// Clamped expansion ratio, see [`expansion_scale`].
    pub scale: f64,
}

/// Connected components of `mask > threshold` under 8-connectivity, in
/// row-major discovery order.
pub fn connected_components(mask: &SoftMask, threshold: f64) -> Result<Vec<ComponentRegion>> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Input(format!(
            "binarization threshold {threshold} must lie in (0,1)"
        )));
    }
    let values = mask.values();
    let (h, w) = values.dim();
    let total = (h * w) as f64;
    let mut visited = vec![false; h * w];
    let mut regions = Vec::new();

    for sr in 0..h {
        for sc in 0..w {
            if visited[sr * w + sc] || values[[sr, sc]] <= threshold {
                continue;
            }
            let mut pixels = Vec::new();
            let mut stack = vec![(sr, sc)];
            visited[sr * w + sc] = true;
            let (mut top, mut left, mut bottom, mut right) = (sr, sc, sr, sc);
            let mut fg_sum = 0.0;
            while let Some((r, c)) = stack.pop() {
                pixels.push((r, c));
                fg_sum += values[[r, c]];
                top = top.min(r);
                bottom = bottom.max(r);
                left = left.min(c);
                right = right.max(c);
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let nr = r as i64 + dr;
                        let nc = c as i64 + dc;
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if !visited[nr * w + nc] && values[[nr, nc]] > threshold {
                            visited[nr * w + nc] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            let bbox = BoundingBox {
                top,
                left,
                height: bottom - top + 1,
                width: right - left + 1,
            };
            let s_fg = fg_sum / bbox.area() as f64;
            let s_bg = bbox.area() as f64 / total;
            let mut region = ComponentRegion {
                pixels,
                bbox,
                fg_sum,
                r: fg_sum / total,
                s_fg,
                s_bg,
                scale: 0.0,
            };
            region.scale = expansion_scale(&region);
            regions.push(region);
        }
    }
    Ok(regions)
}

/// Context-preserving expansion ratio: `1 - s_fg/s_bg`, clamped to [0, 1].
///
/// The raw formula goes negative for dense components that already fill
/// their box relative to their share of the image; clamping interprets the
/// ratio as fractional bbox padding, so those get no expansion.
pub fn expansion_scale(region: &ComponentRegion) -> f64 {
    let raw = 1.0 - region.s_fg / region.s_bg;
    raw.clamp(0.0, 1.0)
}

/// Grow `bbox` by `scale/2` of its own size on each side, clipped to the
/// image bounds. Never shrinks.
pub fn expand_bbox(bbox: &BoundingBox, scale: f64, img_h: usize, img_w: usize) -> BoundingBox {
    let pad_y = (bbox.height as f64 * scale / 2.0).round() as usize;
    let pad_x = (bbox.width as f64 * scale / 2.0).round() as usize;
    let top = bbox.top.saturating_sub(pad_y);
    let left = bbox.left.saturating_sub(pad_x);
    let bottom = (bbox.bottom() + pad_y).min(img_h);
    let right = (bbox.right() + pad_x).min(img_w);
    BoundingBox {
        top,
        left,
        height: bottom - top,
        width: right - left,
    }
}

/// Knobs for [`refine`] and [`emit_training_patches`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LookTwiceConfig {
    /// Components with global area ratio below this get refined.
    pub tau: f64,
    /// Mask binarization threshold for component extraction.
    pub binarize_threshold: f64,
    /// Square size crops are resized to before re-inference.
    pub model_input: usize,
}

impl Default for LookTwiceConfig {
    fn default() -> Self {
        Self {
            tau: 0.15,
            binarize_threshold: 0.5,
            model_input: 224,
        }
    }
}

/// Per-region outcome recorded by [`refine`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionReport {
    pub bbox: BoundingBox,
    pub expanded: BoundingBox,
    pub r: f64,
    pub s_fg: f64,
    pub s_bg: f64,
    pub scale: f64,
    /// False when the model failed on this crop and the region was left
    /// untouched.
    pub refined: bool,
}

/// Refined mask plus the per-region log.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub mask: SoftMask,
    pub regions: Vec<RegionReport>,
}

/// Small regions of the coarse mask in descending-r processing order.
fn small_regions(coarse: &SoftMask, config: &LookTwiceConfig) -> Result<Vec<ComponentRegion>> {
    let mut regions: Vec<ComponentRegion> = connected_components(coarse, config.binarize_threshold)?
        .into_iter()
        .filter(|reg| reg.r < config.tau)
        .collect();
    // Stable sort keeps row-major discovery order among equal ratios.
    regions.sort_by(|a, b| b.r.partial_cmp(&a.r).unwrap());
    Ok(regions)
}

fn crop_resized(image: &ImageTensor, bbox: &BoundingBox, size: usize, tag: usize) -> Result<ImageTensor> {
    let mut crop = Array3::zeros((3, bbox.height, bbox.width));
    for ch in 0..3 {
        for r in 0..bbox.height {
            for c in 0..bbox.width {
                crop[[ch, r, c]] = image.pixels()[[ch, bbox.top + r, bbox.left + c]];
            }
        }
    }
    let resized = resize_channels(&crop, size, size);
    ImageTensor::new(resized, format!("{}#crop{}", image.source_id(), tag))
}

/// Crop, re-infer, and paste every small region of the coarse mask.
///
/// `model` receives the expanded crop resized to `config.model_input`
/// squared and must return a mask of that same size. Regions are processed
/// in descending-r order; later pastes may overwrite earlier ones only
/// where expanded boxes overlap. Pixels outside every expanded box are
/// untouched. A model failure leaves that region unrefined and flagged.
pub fn refine(
    image: &ImageTensor,
    coarse: &SoftMask,
    model: &mut dyn FnMut(&ImageTensor) -> Result<SoftMask>,
    config: &LookTwiceConfig,
) -> Result<RefineOutcome> {
    let (img_h, img_w) = image.dims();
    if coarse.dims() != (img_h, img_w) {
        return Err(Error::Input(format!(
            "coarse mask {:?} does not match image {}x{}",
            coarse.dims(),
            img_h,
            img_w
        )));
    }
    let mut working = coarse.values().clone();
    let mut reports = Vec::new();
    for (k, region) in small_regions(coarse, config)?.iter().enumerate() {
        let expanded = expand_bbox(&region.bbox, region.scale, img_h, img_w);
        let mut report = RegionReport {
            bbox: region.bbox,
            expanded,
            r: region.r,
            s_fg: region.s_fg,
            s_bg: region.s_bg,
            scale: region.scale,
            refined: false,
        };
        let crop = crop_resized(image, &expanded, config.model_input, k)?;
        match model(&crop) {
            Ok(pred) => {
                if pred.dims() != (config.model_input, config.model_input) {
                    return Err(Error::Input(format!(
                        "model returned {:?}, expected {}x{}",
                        pred.dims(),
                        config.model_input,
                        config.model_input
                    )));
                }
                let patch = bilinear_resize(pred.values(), expanded.height, expanded.width);
                for r in 0..expanded.height {
                    for c in 0..expanded.width {
                        working[[expanded.top + r, expanded.left + c]] =
                            patch[[r, c]].clamp(0.0, 1.0);
                    }
                }
                report.refined = true;
            }
            Err(_) => {
                // Leave the region as-is; the report records the failure.
            }
        }
        reports.push(report);
    }
    Ok(RefineOutcome {
        mask: SoftMask::new(working, ResolutionTag::Image)?,
        regions: reports,
    })
}

/// The expanded crops of every small region, resized to model input size,
/// in descending-r order. Used as extra training samples.
pub fn emit_training_patches(
    image: &ImageTensor,
    coarse: &SoftMask,
    config: &LookTwiceConfig,
) -> Result<Vec<ImageTensor>> {
    let (img_h, img_w) = image.dims();
    if coarse.dims() != (img_h, img_w) {
        return Err(Error::Input(format!(
            "coarse mask {:?} does not match image {}x{}",
            coarse.dims(),
            img_h,
            img_w
        )));
    }
    small_regions(coarse, config)?
        .iter()
        .enumerate()
        .map(|(k, region)| {
            let expanded = expand_bbox(&region.bbox, region.scale, img_h, img_w);
            crop_resized(image, &expanded, config.model_input, k)
        })
        .collect()
}
