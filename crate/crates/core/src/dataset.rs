//! Image and mask I/O plus dataset assembly.
//!
//! Training and evaluation are kept apart at the type level: the training
//! loader returns bare [`ImageTensor`]s and never opens the `gt/`
//! subdirectory, while the evaluation loaders pair files by name and fail
//! hard on gaps.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use ndarray::{Array2, Array3};

use crate::mask::{ImageTensor, ResolutionTag, SoftMask};
use crate::metrics::EvalPair;
use crate::{Error, Result};

/// Grayscale values at or above this binarize to foreground.
pub const GT_FOREGROUND_THRESHOLD: u8 = 128;

/// Sorted list of `.png` paths directly inside `dir`.
fn png_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = Vec::new();
    let read = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in read {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "png") {
            entries.push(path);
        }
    }
    entries.sort();
    Ok(entries)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads one 8-bit RGB PNG into [0, 1] pixels.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::Input(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut pixels = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            pixels[[ch, y as usize, x as usize]] = px.0[ch] as f64 / 255.0;
        }
    }
    ImageTensor::new(pixels, stem(path))
}

/// Writes an image as 8-bit RGB PNG.
pub fn save_image(path: &Path, image: &ImageTensor) -> Result<()> {
    let (h, w) = image.dims();
    let mut out = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px = [
                (image.pixels()[[0, r, c]] * 255.0).round() as u8,
                (image.pixels()[[1, r, c]] * 255.0).round() as u8,
                (image.pixels()[[2, r, c]] * 255.0).round() as u8,
            ];
            out.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    out.save(path)
        .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

/// Writes a soft mask as 8-bit grayscale PNG.
pub fn save_mask(path: &Path, mask: &SoftMask) -> Result<()> {
    let (h, w) = mask.dims();
    let mut out = GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            out.put_pixel(
                c as u32,
                r as u32,
                image::Luma([(mask.values()[[r, c]] * 255.0).round() as u8]),
            );
        }
    }
    out.save(path)
        .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

/// Reads an 8-bit grayscale PNG as a soft mask in [0, 1].
pub fn load_mask(path: &Path) -> Result<SoftMask> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::Input(format!("cannot decode {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let values = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] as f64 / 255.0
    });
    SoftMask::new(values, ResolutionTag::Image)
}

/// Reads a grayscale PNG as a binary ground-truth mask (>= 128 means
/// foreground).
pub fn load_gt(path: &Path) -> Result<Array2<bool>> {
    let mask = load_mask(path)?;
    Ok(mask
        .values()
        .mapv(|v| (v * 255.0).round() as u8 >= GT_FOREGROUND_THRESHOLD))
}

/// A loaded training set: images only, plus loader warnings.
#[derive(Debug)]
pub struct TrainSet {
    pub images: Vec<ImageTensor>,
    pub warnings: Vec<String>,
}

/// Loads every readable PNG in `dir` (non-recursive, `gt/` never touched),
/// in lexicographic filename order. Unreadable files are skipped with a
/// warning.
pub fn load_train_images(dir: &Path) -> Result<TrainSet> {
    let mut images = Vec::new();
    let mut warnings = Vec::new();
    for path in png_entries(dir)? {
        match load_image(&path) {
            Ok(img) => images.push(img),
            Err(e) => warnings.push(format!("skipping {}: {e}", path.display())),
        }
    }
    if images.is_empty() {
        warnings.push(format!("no readable images in {}", dir.display()));
    }
    Ok(TrainSet { images, warnings })
}

/// Loads images from `dir` and same-named ground truths from `dir/gt`,
/// failing with the offending name on any gap.
pub fn load_eval_set(dir: &Path) -> Result<Vec<(ImageTensor, Array2<bool>)>> {
    let gt_dir = dir.join("gt");
    let mut out = Vec::new();
    for path in png_entries(dir)? {
        let image = load_image(&path)?;
        let gt_path = gt_dir.join(path.file_name().unwrap());
        if !gt_path.is_file() {
            return Err(Error::Input(format!(
                "no ground truth for {} (expected {})",
                path.display(),
                gt_path.display()
            )));
        }
        let gt = load_gt(&gt_path)?;
        let (h, w) = image.dims();
        if gt.dim() != (h, w) {
            return Err(Error::Input(format!(
                "ground truth {} is {:?}, image is {h}x{w}",
                gt_path.display(),
                gt.dim()
            )));
        }
        out.push((image, gt));
    }
    Ok(out)
}

/// Pairs prediction masks with ground-truth masks by identical filename.
///
/// Every ground-truth file must have a prediction; with `refined` set the
/// prediction for `x.png` is read from `x.lt.png` instead.
pub fn load_mask_pairs(
    pred_dir: &Path,
    gt_dir: &Path,
    refined: bool,
) -> Result<Vec<(String, EvalPair)>> {
    let gt_files = png_entries(gt_dir)?;
    if gt_files.is_empty() {
        return Err(Error::Input(format!(
            "no ground-truth masks in {}",
            gt_dir.display()
        )));
    }
    let mut pairs = Vec::new();
    for gt_path in gt_files {
        let name = stem(&gt_path);
        let pred_name = if refined {
            format!("{name}.lt.png")
        } else {
            format!("{name}.png")
        };
        let pred_path = pred_dir.join(&pred_name);
        if !pred_path.is_file() {
            return Err(Error::Input(format!(
                "no prediction named {pred_name} in {} for ground truth {}",
                pred_dir.display(),
                gt_path.display()
            )));
        }
        let pred = load_mask(&pred_path)?;
        let gt = load_gt(&gt_path)?;
        pairs.push((name, EvalPair::new(pred, gt)?));
    }
    Ok(pairs)
}
