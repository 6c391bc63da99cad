//! Procedural camouflage corpus.
//!
//! Each sample is a textured background with one blob of the same texture
//! family pasted at a random location under a small parameter offset (mean
//! shift plus amplitude change), covering 1-20% of the image. The blob mask
//! is kept as ground truth for evaluation only; training never sees it.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fixed_strategy::perlin_field;
use crate::mask::ImageTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub count: usize,
    /// Square image edge in pixels.
    pub size: usize,
    pub seed: u64,
    /// Blob area as a fraction of the image, sampled uniformly.
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 200,
            size: 64,
            seed: 1,
            min_ratio: 0.01,
            max_ratio: 0.20,
        }
    }
}

/// One generated image with its held-back ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: ImageTensor,
    pub gt: Array2<bool>,
}

/// Min-max normalized noise field in [0, 1].
fn normalized_field(size: usize, seed: u64) -> Array2<f64> {
    let field = perlin_field(size, size, seed);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in field.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    field.mapv(|v| (v - lo) / span)
}

fn generate_sample(cfg: &SyntheticConfig, index: usize) -> Result<SyntheticSample> {
    let s = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let bg_field = normalized_field(s, rng.gen());
    let fg_field = normalized_field(s, rng.gen());

    let base: [f64; 3] = [
        rng.gen_range(0.35..0.60),
        rng.gen_range(0.35..0.60),
        rng.gen_range(0.35..0.60),
    ];
    let amp = rng.gen_range(0.18..0.28);
    let amp_fg = amp * rng.gen_range(1.0..1.4);
    // Small parameter offset that keeps the blob in the same texture family
    // but statistically separable at patch level.
    let shift = rng.gen_range(0.06..0.12) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };

    // Elliptical blob sized for the target area ratio.
    let ratio = rng.gen_range(cfg.min_ratio..cfg.max_ratio);
    let aspect = rng.gen_range(0.6..1.7);
    let a = (ratio * (s * s) as f64 * aspect / std::f64::consts::PI).sqrt();
    let b = a / aspect;
    let margin_y = b.ceil().min(s as f64 / 2.0 - 1.0).max(1.0);
    let margin_x = a.ceil().min(s as f64 / 2.0 - 1.0).max(1.0);
    let cy = rng.gen_range(margin_y..(s as f64 - margin_y));
    let cx = rng.gen_range(margin_x..(s as f64 - margin_x));
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (sin_t, cos_t) = theta.sin_cos();

    let mut gt = Array2::from_elem((s, s), false);
    let mut pixels = Array3::zeros((3, s, s));
    for r in 0..s {
        for c in 0..s {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let u = (dx * cos_t + dy * sin_t) / a;
            let v = (-dx * sin_t + dy * cos_t) / b;
            let inside = u * u + v * v <= 1.0;
            gt[[r, c]] = inside;
            for ch in 0..3 {
                let value = if inside {
                    base[ch] + shift + amp_fg * (fg_field[[r, c]] - 0.5)
                } else {
                    base[ch] + amp * (bg_field[[r, c]] - 0.5)
                };
                pixels[[ch, r, c]] = value.clamp(0.0, 1.0);
            }
        }
    }
    let image = ImageTensor::new(pixels, format!("synth_{index:04}"))?;
    Ok(SyntheticSample { image, gt })
}

/// Generates the full corpus. Deterministic in the config.
pub fn generate_corpus(cfg: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    if cfg.count == 0 {
        return Err(Error::Input("corpus count must be positive".into()));
    }
    if cfg.size < 16 {
        return Err(Error::Input(format!("corpus size {} too small", cfg.size)));
    }
    if !(0.0 < cfg.min_ratio && cfg.min_ratio < cfg.max_ratio && cfg.max_ratio < 0.5) {
        return Err(Error::Input(format!(
            "ratio range [{}, {}] invalid",
            cfg.min_ratio, cfg.max_ratio
        )));
    }
    (0..cfg.count).map(|i| generate_sample(cfg, i)).collect()
}
