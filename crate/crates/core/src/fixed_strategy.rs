//! Rule-based pseudo-label generation over frozen patch features.
//!
//! The production strategy is the background-seed method: the patch most
//! broadly similar to the rest of the image is taken as the background seed,
//! everything similar to it becomes background, and the complement is the
//! foreground label. Null and Perlin generators exist as ablation baselines.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::mask::{ResolutionTag, SoftMask};
use crate::{Error, Result};

/// How seed-count and seed-similarity ties are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TieBreak {
    /// Lowest row-major patch index wins (the documented default).
    #[default]
    LowestIndex,
    /// Highest row-major patch index wins.
    HighestIndex,
}

/// Tunables for [`background_seed_label`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackgroundSeedConfig {
    /// Two patches count as similar when cosine similarity exceeds this.
    pub similarity_threshold: f64,
    pub tie_break: TieBreak,
}

impl Default for BackgroundSeedConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: 0.0,
            tie_break: TieBreak::LowestIndex,
        }
    }
}

/// A generated pseudo-label plus generation metadata.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    pub mask: SoftMask,
    /// Set when no foreground patch survived (degenerate seed partition).
    pub degenerate: bool,
}

/// Cosine similarity with a zero-norm guard: two zero vectors are treated
/// as identical (similarity 1), a zero vector against a non-zero one as
/// unrelated (similarity 0).
fn guarded_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    const EPS: f64 = 1e-12;
    match (na < EPS, nb < EPS) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => dot / (na * nb),
    }
}

/// Background-seed foreground discovery.
///
/// Procedure: build the pairwise cosine-similarity matrix of all patch
/// features; the seed is the patch similar (above the threshold) to the
/// most other patches; background is the seed plus every patch similar to
/// it; foreground is the complement. An empty foreground is reported via
/// the degenerate flag. Ties go to the configured row-major index rule.
pub fn background_seed_label(features: &FeatureMap) -> Result<PseudoLabel> {
    background_seed_label_with(features, &BackgroundSeedConfig::default())
}

pub fn background_seed_label_with(
    features: &FeatureMap,
    config: &BackgroundSeedConfig,
) -> Result<PseudoLabel> {
    let (_, n, m) = features.shape();
    let total = n * m;
    if total < 2 {
        return Err(Error::Input(format!(
            "background seed needs at least 2 patches, got {n}x{m}"
        )));
    }
    let flat = features.flatten_patches();
    let rows: Vec<Vec<f64>> = (0..total)
        .map(|p| flat.row(p).iter().copied().collect())
        .collect();

    let mut sim = Array2::zeros((total, total));
    for a in 0..total {
        for b in a..total {
            let s = guarded_cosine(&rows[a], &rows[b]);
            sim[[a, b]] = s;
            sim[[b, a]] = s;
        }
    }

    let thr = config.similarity_threshold;
    let mut seed = 0usize;
    let mut best_count = -1i64;
    let indices: Box<dyn Iterator<Item = usize>> = match config.tie_break {
        TieBreak::LowestIndex => Box::new(0..total),
        TieBreak::HighestIndex => Box::new((0..total).rev()),
    };
    for p in indices {
        let count = (0..total).filter(|&q| q != p && sim[[p, q]] > thr).count() as i64;
        if count > best_count {
            best_count = count;
            seed = p;
        }
    }

    let mut mask = Array2::zeros((n, m));
    let mut any_foreground = false;
    for q in 0..total {
        let background = q == seed || sim[[seed, q]] > thr;
        if !background {
            mask[[q / m, q % m]] = 1.0;
            any_foreground = true;
        }
    }
    // Degenerate partition: everything looked like background. Return the
    // all-zero mask and let the caller decide what to do with the flag.
    Ok(PseudoLabel {
        mask: SoftMask::new(mask, ResolutionTag::PatchGrid)?,
        degenerate: !any_foreground,
    })
}

/// Constant mask of `value` (0 or 1), the "pure black/white" baseline.
pub fn null_label(h: usize, w: usize, value: u8) -> Result<SoftMask> {
    if value > 1 {
        return Err(Error::Input(format!("null value must be 0 or 1, got {value}")));
    }
    SoftMask::constant(h, w, value as f64, ResolutionTag::PatchGrid)
}

/// Binary mask thresholded from a seeded single-octave Perlin field.
///
/// The field is min-max normalized to [0, 1] before thresholding, so
/// identical (shape, seed, threshold) always reproduce the same mask.
pub fn perlin_label(h: usize, w: usize, seed: u64, threshold: f64) -> Result<SoftMask> {
    if h == 0 || w == 0 {
        return Err(Error::Input(format!("perlin dims ({h},{w}) must be positive")));
    }
    if !(0.0..1.0).contains(&threshold) || threshold <= 0.0 {
        return Err(Error::Input(format!(
            "perlin threshold {threshold} must lie in (0,1)"
        )));
    }
    let field = perlin_field(h, w, seed);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in field.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mask = if span < 1e-12 {
        Array2::zeros((h, w))
    } else {
        field.mapv(|v| if (v - lo) / span > threshold { 1.0 } else { 0.0 })
    };
    SoftMask::new(mask, ResolutionTag::PatchGrid)
}

/// Classic gradient noise, single octave, four lattice cells per axis
/// (cell size = dim/4 rounded up).
pub(crate) fn perlin_field(h: usize, w: usize, seed: u64) -> Array2<f64> {
    let cell_h = h.div_ceil(4).max(1);
    let cell_w = w.div_ceil(4).max(1);
    let nodes_y = h / cell_h + 2;
    let nodes_x = w / cell_w + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grads = vec![(0.0f64, 0.0f64); nodes_y * nodes_x];
    for g in grads.iter_mut() {
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        *g = (angle.cos(), angle.sin());
    }
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        let y = r as f64 / cell_h as f64;
        let y0 = y.floor() as usize;
        let fy = y - y0 as f64;
        for c in 0..w {
            let x = c as f64 / cell_w as f64;
            let x0 = x.floor() as usize;
            let fx = x - x0 as f64;
            let dot = |gy: usize, gx: usize, dy: f64, dx: f64| -> f64 {
                let (gvx, gvy) = grads[gy * nodes_x + gx];
                gvx * dx + gvy * dy
            };
            let d00 = dot(y0, x0, fy, fx);
            let d01 = dot(y0, x0 + 1, fy, fx - 1.0);
            let d10 = dot(y0 + 1, x0, fy - 1.0, fx);
            let d11 = dot(y0 + 1, x0 + 1, fy - 1.0, fx - 1.0);
            let (uy, ux) = (fade(fy), fade(fx));
            let top = d00 + ux * (d01 - d00);
            let bot = d10 + ux * (d11 - d10);
            out[[r, c]] = top + uy * (bot - top);
        }
    }
    out
}

/// Bilinear upsample of a patch-grid mask to image resolution.
pub fn upsample_mask(mask: &SoftMask, target_h: usize, target_w: usize) -> Result<SoftMask> {
    mask.upsample_to(target_h, target_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FeatureMap;
    use ndarray::Array3;
    use proptest::prelude::*;

    /// Builds a feature map from per-patch vectors laid out row-major on an
    /// (n, m) grid.
    fn features_from_vecs(n: usize, m: usize, vecs: &[Vec<f64>]) -> FeatureMap {
        let c = vecs[0].len();
        let mut data = Array3::zeros((c, n, m));
        for (p, v) in vecs.iter().enumerate() {
            for (ch, &x) in v.iter().enumerate() {
                data[[ch, p / m, p % m]] = x;
            }
        }
        FeatureMap::new(data, 14, "test").unwrap()
    }

    #[test]
    fn orthogonal_outlier_becomes_foreground() {
        // Brute-force check of the documented rule: the similarity matrix is
        //   u.u = 1 between the three identical patches, u.v = 0 to the
        //   orthogonal one, so the u-patches each count 2 similar others,
        //   v counts none; seed = patch 0, background = {0,1,2},
        //   foreground = {v}.
        let u = vec![1.0, 0.0];
        let v = vec![0.0, 1.0];
        let fm = features_from_vecs(2, 2, &[u.clone(), u.clone(), u, v]);
        let label = background_seed_label(&fm).unwrap();
        assert!(!label.degenerate);
        let vals = label.mask.values();
        assert_eq!(vals[[0, 0]], 0.0);
        assert_eq!(vals[[0, 1]], 0.0);
        assert_eq!(vals[[1, 0]], 0.0);
        assert_eq!(vals[[1, 1]], 1.0);
    }

    #[test]
    fn identical_patches_degenerate_to_empty_foreground() {
        let u = vec![0.5, -0.25, 1.0];
        let fm = features_from_vecs(2, 2, &[u.clone(), u.clone(), u.clone(), u]);
        let label = background_seed_label(&fm).unwrap();
        assert!(label.degenerate);
        assert!(label.mask.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn antipodal_pair_tie_breaks_to_lowest_index() {
        // u and -u: both have zero similar patches; the tie goes to patch 0,
        // which becomes the seed (hence background), leaving patch 1 as
        // foreground.
        let u = vec![1.0, 2.0];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let fm = features_from_vecs(1, 2, &[u, neg]);
        let label = background_seed_label(&fm).unwrap();
        assert!(!label.degenerate);
        assert_eq!(label.mask.values()[[0, 0]], 0.0);
        assert_eq!(label.mask.values()[[0, 1]], 1.0);

        let cfg = BackgroundSeedConfig {
            tie_break: TieBreak::HighestIndex,
            ..Default::default()
        };
        let u = vec![1.0, 2.0];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let fm = features_from_vecs(1, 2, &[u, neg]);
        let flipped = background_seed_label_with(&fm, &cfg).unwrap();
        assert_eq!(flipped.mask.values()[[0, 0]], 1.0);
        assert_eq!(flipped.mask.values()[[0, 1]], 0.0);
    }

    #[test]
    fn single_patch_is_input_error() {
        let fm = features_from_vecs(1, 1, &[vec![1.0]]);
        assert!(matches!(
            background_seed_label(&fm).unwrap_err(),
            Error::Input(_)
        ));
    }

    #[test]
    fn null_label_constants() {
        let zero = null_label(4, 4, 0).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
        let one = null_label(4, 4, 1).unwrap();
        assert!(one.values().iter().all(|&v| v == 1.0));
        assert_eq!(null_label(8, 8, 1).unwrap().mean(), 1.0);
        assert!(null_label(4, 4, 2).is_err());
    }

    #[test]
    fn perlin_is_seed_deterministic() {
        let a = perlin_label(16, 16, 42, 0.5).unwrap();
        let b = perlin_label(16, 16, 42, 0.5).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn perlin_seed_changes_mask() {
        let base = perlin_label(16, 16, 100, 0.5).unwrap();
        let any_differs = (101..111).any(|s| perlin_label(16, 16, s, 0.5).unwrap() != base);
        assert!(any_differs);
    }

    #[test]
    fn perlin_high_threshold_is_sparse() {
        // Monte-Carlo density estimate over 100 seeds at threshold 0.99.
        let mut total = 0.0;
        for seed in 0..100u64 {
            total += perlin_label(16, 16, seed, 0.99).unwrap().mean();
        }
        assert!(total / 100.0 <= 0.05, "mean density {}", total / 100.0);
    }

    proptest! {
        /// Cosine similarity is scale-invariant, so scaling every feature by
        /// the same positive factor must not change the label.
        #[test]
        fn scale_invariance(scale in 0.05f64..20.0, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vecs: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let fm = features_from_vecs(2, 3, &vecs);
            let scaled: Vec<Vec<f64>> = vecs
                .iter()
                .map(|v| v.iter().map(|x| x * scale).collect())
                .collect();
            let fm2 = features_from_vecs(2, 3, &scaled);
            let a = background_seed_label(&fm).unwrap();
            let b = background_seed_label(&fm2).unwrap();
            prop_assert_eq!(a.mask.values(), b.mask.values());
            prop_assert_eq!(a.degenerate, b.degenerate);
        }

        /// Output is always binary and the seed patch is never foreground;
        /// with the default threshold the largest positively-similar cluster
        /// around the seed is background.
        #[test]
        fn binary_output_and_seed_in_background(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vecs: Vec<Vec<f64>> = (0..8)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let fm = features_from_vecs(2, 4, &vecs);
            let label = background_seed_label(&fm).unwrap();
            prop_assert!(label.mask.is_binary());
            // Recompute the seed choice independently and assert it is
            // background in the produced mask.
            let mut best = (0usize, -1i64);
            for p in 0..8 {
                let mut count = 0i64;
                for q in 0..8 {
                    if p == q { continue; }
                    let dot: f64 = vecs[p].iter().zip(&vecs[q]).map(|(a, b)| a * b).sum();
                    let np: f64 = vecs[p].iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nq: f64 = vecs[q].iter().map(|x| x * x).sum::<f64>().sqrt();
                    if dot / (np * nq) > 0.0 { count += 1; }
                }
                if count > best.1 { best = (p, count); }
            }
            prop_assert_eq!(label.mask.values()[[best.0 / 4, best.0 % 4]], 0.0);
        }
    }
}
