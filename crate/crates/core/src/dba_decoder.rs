//! Dual-branch adversarial decoder.
//!
//! A channel-doubling 1x1 convolution splits the frozen features into a
//! foreground and a background stream. Each stream owns a learnable (c, c)
//! query embedding; multiplying the stream features by it yields attention
//! queries, whose sigmoid-scored products with the stream features form a
//! patch-by-patch attention matrix. Attended features plus a residual pass
//! through a 1x1 head and an output sigmoid into the per-branch mask.
//!
//! The backward pass is hand-derived; the finite-difference suite in the
//! integration tests pins it against central differences.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::mask::{ResolutionTag, SoftMask};
use crate::{Error, Result};

/// All learnable decoder parameters.
///
/// The same struct doubles as a gradient container: every backward pass
/// returns a `DecoderParams` holding d(loss)/d(parameter) in matching
/// positions. Flattened order (see [`DecoderParams::to_flat`]): split_w,
/// split_b, e_fg, e_bg, head_fg_w, head_fg_b, head_bg_w, head_bg_b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    /// Channel-doubling 1x1 convolution, (2c, c).
    pub split_w: Array2<f64>,
    /// Split bias, (2c,).
    pub split_b: Array1<f64>,
    /// Foreground query embedding, (c, c).
    pub e_fg: Array2<f64>,
    /// Background query embedding, (c, c).
    pub e_bg: Array2<f64>,
    /// Foreground head 1x1 convolution, (c,).
    pub head_fg_w: Array1<f64>,
    pub head_fg_b: f64,
    /// Background head 1x1 convolution, (c,).
    pub head_bg_w: Array1<f64>,
    pub head_bg_b: f64,
}

impl DecoderParams {
    /// Seeded initialization: fan-in-scaled uniform for the convolutions,
    /// N(0, 0.02) for the query embeddings.
    pub fn init(channels: usize, seed: u64) -> Self {
        let c = channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (c as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let split_w = Array2::from_shape_vec((2 * c, c), uniform(2 * c * c)).unwrap();
        let split_b = Array1::from_vec(uniform(2 * c));
        let head_fg_w = Array1::from_vec(uniform(c));
        let head_fg_b = uniform(1)[0];
        let head_bg_w = Array1::from_vec(uniform(c));
        let head_bg_b = uniform(1)[0];
        let normal = Normal::new(0.0, 0.02).unwrap();
        let e_fg = Array2::from_shape_fn((c, c), |_| normal.sample(&mut rng));
        let e_bg = Array2::from_shape_fn((c, c), |_| normal.sample(&mut rng));
        Self {
            split_w,
            split_b,
            e_fg,
            e_bg,
            head_fg_w,
            head_fg_b,
            head_bg_w,
            head_bg_b,
        }
    }

    pub fn zeros(channels: usize) -> Self {
        let c = channels;
        Self {
            split_w: Array2::zeros((2 * c, c)),
            split_b: Array1::zeros(2 * c),
            e_fg: Array2::zeros((c, c)),
            e_bg: Array2::zeros((c, c)),
            head_fg_w: Array1::zeros(c),
            head_fg_b: 0.0,
            head_bg_w: Array1::zeros(c),
            head_bg_b: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.e_fg.nrows()
    }

    /// Flattens every parameter into one vector in the documented order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(self.split_w.iter());
        v.extend(self.split_b.iter());
        v.extend(self.e_fg.iter());
        v.extend(self.e_bg.iter());
        v.extend(self.head_fg_w.iter());
        v.push(self.head_fg_b);
        v.extend(self.head_bg_w.iter());
        v.push(self.head_bg_b);
        v
    }

    /// Inverse of [`DecoderParams::to_flat`].
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for x in self.split_w.iter_mut() {
            *x = it.next().expect("flat vector too short");
        }
        for x in self.split_b.iter_mut() {
            *x = it.next().unwrap();
        }
        for x in self.e_fg.iter_mut() {
            *x = it.next().unwrap();
        }
        for x in self.e_bg.iter_mut() {
            *x = it.next().unwrap();
        }
        for x in self.head_fg_w.iter_mut() {
            *x = it.next().unwrap();
        }
        self.head_fg_b = it.next().unwrap();
        for x in self.head_bg_w.iter_mut() {
            *x = it.next().unwrap();
        }
        self.head_bg_b = it.next().unwrap();
        assert!(it.next().is_none(), "flat vector too long");
    }

    /// Elementwise accumulate: `self += scale * other`.
    pub fn add_scaled(&mut self, other: &DecoderParams, scale: f64) {
        let mut flat = self.to_flat();
        for (a, b) in flat.iter_mut().zip(other.to_flat()) {
            *a += scale * b;
        }
        self.assign_from_flat(&flat);
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// One forward pass worth of outputs.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Foreground mask, (n, m), in [0, 1].
    pub y_fg: SoftMask,
    /// Background mask, (n, m), in [0, 1].
    pub y_bg: SoftMask,
    /// Foreground attention queries, (n·m, c); kept for the orthogonal loss.
    pub q_fg: Array2<f64>,
    /// Background attention queries, (n·m, c).
    pub q_bg: Array2<f64>,
    /// Pre-sigmoid head outputs, (n, m); the logits route for callers that
    /// prefer BCE-with-logits over the default explicit-sigmoid masks.
    pub logits_fg: Array2<f64>,
    pub logits_bg: Array2<f64>,
}

/// Intermediate activations needed by the backward pass.
#[derive(Debug, Clone)]
pub struct DecodeCache {
    x: Array2<f64>,
    fg: BranchCache,
    bg: BranchCache,
    grid: (usize, usize),
}

#[derive(Debug, Clone)]
struct BranchCache {
    x_b: Array2<f64>,
    q: Array2<f64>,
    attn: Array2<f64>,
    z: Array2<f64>,
    y: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn branch_forward(
    x_b: &Array2<f64>,
    embed: &Array2<f64>,
    head_w: &Array1<f64>,
    head_b: f64,
) -> BranchCache {
    let q = x_b.dot(embed);
    let attn = q.dot(&x_b.t()).mapv(sigmoid);
    let z = attn.dot(x_b) + x_b;
    let y = z.dot(head_w).mapv(|u| u + head_b).mapv(sigmoid);
    BranchCache {
        x_b: x_b.clone(),
        q,
        attn,
        z,
        y,
    }
}

/// Forward pass of both branches.
pub fn decode(features: &FeatureMap, params: &DecoderParams) -> Result<DecoderOutput> {
    decode_with_cache(features, params).map(|(out, _)| out)
}

/// Forward pass that also returns the activations the backward pass needs.
pub fn decode_with_cache(
    features: &FeatureMap,
    params: &DecoderParams,
) -> Result<(DecoderOutput, DecodeCache)> {
    let (c, n, m) = features.shape();
    if c != params.channels() {
        return Err(Error::Input(format!(
            "feature channels {c} do not match decoder channels {}",
            params.channels()
        )));
    }
    let x = features.flatten_patches();
    // 1x1 conv to 2c channels, split into the two streams.
    let s = x.dot(&params.split_w.t()) + &params.split_b;
    let x_fg = s.slice(ndarray::s![.., 0..c]).to_owned();
    let x_bg = s.slice(ndarray::s![.., c..2 * c]).to_owned();

    let fg = branch_forward(&x_fg, &params.e_fg, &params.head_fg_w, params.head_fg_b);
    let bg = branch_forward(&x_bg, &params.e_bg, &params.head_bg_w, params.head_bg_b);

    let to_grid = |v: &Array1<f64>| Array2::from_shape_fn((n, m), |(i, j)| v[i * m + j]);
    let logits_fg = {
        let u = fg.z.dot(&params.head_fg_w).mapv(|u| u + params.head_fg_b);
        to_grid(&u)
    };
    let logits_bg = {
        let u = bg.z.dot(&params.head_bg_w).mapv(|u| u + params.head_bg_b);
        to_grid(&u)
    };
    let out = DecoderOutput {
        y_fg: SoftMask::new(to_grid(&fg.y), ResolutionTag::PatchGrid)?,
        y_bg: SoftMask::new(to_grid(&bg.y), ResolutionTag::PatchGrid)?,
        q_fg: fg.q.clone(),
        q_bg: bg.q.clone(),
        logits_fg,
        logits_bg,
    };
    let cache = DecodeCache {
        x,
        fg,
        bg,
        grid: (n, m),
    };
    Ok((out, cache))
}

/// Backward through one branch. `g_y` is d(loss)/d(mask) flattened to
/// (n·m,), `g_q` is d(loss)/d(queries). Returns (g_embed, g_head_w,
/// g_head_b, g_x_b).
fn branch_backward(
    cache: &BranchCache,
    embed: &Array2<f64>,
    head_w: &Array1<f64>,
    g_y: &Array1<f64>,
    g_q_extra: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, f64, Array2<f64>) {
    // y = sigmoid(u), u = Z.head_w + head_b
    let g_u: Array1<f64> = g_y
        .iter()
        .zip(cache.y.iter())
        .map(|(&g, &y)| g * y * (1.0 - y))
        .collect();
    let g_head_w = cache.z.t().dot(&g_u);
    let g_head_b = g_u.sum();
    // Z = A.X + X
    let n = cache.x_b.nrows();
    let c = cache.x_b.ncols();
    let mut g_z = Array2::zeros((n, c));
    for p in 0..n {
        for ch in 0..c {
            g_z[[p, ch]] = g_u[p] * head_w[ch];
        }
    }
    let g_attn = g_z.dot(&cache.x_b.t());
    let mut g_x = cache.attn.t().dot(&g_z) + &g_z;
    // A = sigmoid(L), L = Q.X^T
    let g_logits =
        &g_attn * &cache.attn.mapv(|a| a * (1.0 - a));
    let g_q_total = g_q_extra + &g_logits.dot(&cache.x_b);
    g_x = g_x + g_logits.t().dot(&cache.q);
    // Q = X.E
    let g_embed = cache.x_b.t().dot(&g_q_total);
    g_x = g_x + g_q_total.dot(&embed.t());
    (g_embed, g_head_w, g_head_b, g_x)
}

/// Full backward pass of [`decode_with_cache`].
///
/// Inputs are the loss gradients with respect to the two output masks (at
/// patch-grid shape) and the two query maps. The result is a gradient
/// container shaped like [`DecoderParams`].
pub fn decode_backward(
    cache: &DecodeCache,
    params: &DecoderParams,
    g_y_fg: &Array2<f64>,
    g_y_bg: &Array2<f64>,
    g_q_fg: &Array2<f64>,
    g_q_bg: &Array2<f64>,
) -> DecoderParams {
    let (n, m) = cache.grid;
    let c = params.channels();
    let flatten = |g: &Array2<f64>| Array1::from_shape_fn(n * m, |p| g[[p / m, p % m]]);

    let (g_e_fg, g_head_fg_w, g_head_fg_b, g_x_fg) = branch_backward(
        &cache.fg,
        &params.e_fg,
        &params.head_fg_w,
        &flatten(g_y_fg),
        g_q_fg,
    );
    let (g_e_bg, g_head_bg_w, g_head_bg_b, g_x_bg) = branch_backward(
        &cache.bg,
        &params.e_bg,
        &params.head_bg_w,
        &flatten(g_y_bg),
        g_q_bg,
    );

    // S = X.W^T + b, streams are channel slices of S.
    let mut g_s = Array2::zeros((n * m, 2 * c));
    g_s.slice_mut(ndarray::s![.., 0..c]).assign(&g_x_fg);
    g_s.slice_mut(ndarray::s![.., c..2 * c]).assign(&g_x_bg);
    let g_split_w = g_s.t().dot(&cache.x);
    let g_split_b = g_s.sum_axis(ndarray::Axis(0));

    DecoderParams {
        split_w: g_split_w,
        split_b: g_split_b,
        e_fg: g_e_fg,
        e_bg: g_e_bg,
        head_fg_w: g_head_fg_w,
        head_fg_b: g_head_fg_b,
        head_bg_w: g_head_bg_w,
        head_bg_b: g_head_bg_b,
    }
}

/// Exponential-moving-average update of the teacher from the student:
/// every parameter becomes `eta * teacher + (1 - eta) * student`.
pub fn ema_update(teacher: &mut DecoderParams, student: &DecoderParams, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Input(format!("EMA momentum {eta} outside [0,1]")));
    }
    let t = teacher.to_flat();
    let s = student.to_flat();
    if t.len() != s.len() {
        return Err(Error::Input(
            "teacher/student parameter shapes do not match".into(),
        ));
    }
    let merged: Vec<f64> = t
        .iter()
        .zip(s.iter())
        .map(|(&a, &b)| eta * a + (1.0 - eta) * b)
        .collect();
    teacher.assign_from_flat(&merged);
    Ok(())
}

/// Teacher pseudo-label: the mean of the foreground mask and the inverted
/// background mask. Symmetric and range-preserving; carries no gradient.
pub fn teacher_pseudo_label(output: &DecoderOutput) -> SoftMask {
    let fg = output.y_fg.values();
    let bg = output.y_bg.values();
    let combined = ndarray::Zip::from(fg)
        .and(bg)
        .map_collect(|&f, &b| 0.5 * (f + (1.0 - b)));
    SoftMask::new(combined, ResolutionTag::PatchGrid).expect("mean of [0,1] masks stays in [0,1]")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FeatureMap;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn features(c: usize, n: usize, m: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(
            Array3::from_shape_fn((c, n, m), |_| rng.gen_range(-1.0..1.0)),
            14,
            "t",
        )
        .unwrap()
    }

    #[test]
    fn zero_parameters_give_half_masks() {
        let params = DecoderParams::zeros(4);
        let out = decode(&features(4, 2, 2, 1), &params).unwrap();
        for &v in out.y_fg.values().iter().chain(out.y_bg.values().iter()) {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
        }
        assert!(out.q_fg.iter().all(|&v| v == 0.0));
        assert!(out.logits_fg.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shapes() {
        let params = DecoderParams::init(16, 3);
        let out = decode(&features(16, 4, 4, 2), &params).unwrap();
        assert_eq!(out.y_fg.dims(), (4, 4));
        assert_eq!(out.y_bg.dims(), (4, 4));
        assert_eq!(out.q_fg.dim(), (16, 16));
        assert_eq!(out.q_bg.dim(), (16, 16));
    }

    #[test]
    fn channel_mismatch_is_input_error() {
        let params = DecoderParams::init(8, 3);
        assert!(matches!(
            decode(&features(16, 2, 2, 2), &params).unwrap_err(),
            Error::Input(_)
        ));
    }

    #[test]
    fn sigmoid_of_logits_matches_masks() {
        let params = DecoderParams::init(16, 5);
        let out = decode(&features(16, 3, 3, 6), &params).unwrap();
        for (l, y) in out.logits_fg.iter().zip(out.y_fg.values().iter()) {
            assert_abs_diff_eq!(sigmoid(*l), *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        // Permute the n*m patch positions of the input; both output masks
        // must permute identically because no positional parameter exists.
        let params = DecoderParams::init(16, 7);
        let fm = features(16, 2, 3, 8);
        let out = decode(&fm, &params).unwrap();

        // Fixed permutation of the 6 positions.
        let perm = [3usize, 0, 4, 1, 5, 2];
        let (c, n, m) = fm.shape();
        let mut permuted = Array3::zeros((c, n, m));
        for (dst, &src) in perm.iter().enumerate() {
            for ch in 0..c {
                permuted[[ch, dst / m, dst % m]] = fm.data()[[ch, src / m, src % m]];
            }
        }
        let out_p = decode(&FeatureMap::new(permuted, 14, "p").unwrap(), &params).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_abs_diff_eq!(
                out_p.y_fg.values()[[dst / m, dst % m]],
                out.y_fg.values()[[src / m, src % m]],
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(
                out_p.y_bg.values()[[dst / m, dst % m]],
                out.y_bg.values()[[src / m, src % m]],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn ema_golden_values() {
        let mut teacher = DecoderParams::zeros(2);
        let mut student = DecoderParams::zeros(2);
        teacher.split_w[[0, 0]] = 1.0;
        student.split_w[[0, 0]] = 0.0;
        ema_update(&mut teacher, &student, 0.99).unwrap();
        assert_abs_diff_eq!(teacher.split_w[[0, 0]], 0.99, epsilon = 1e-15);

        let mut t1 = DecoderParams::init(2, 1);
        let snapshot = t1.clone();
        ema_update(&mut t1, &DecoderParams::init(2, 2), 1.0).unwrap();
        assert_eq!(t1, snapshot);

        let student = DecoderParams::init(2, 3);
        let mut t2 = DecoderParams::init(2, 4);
        ema_update(&mut t2, &student, 0.0).unwrap();
        assert_eq!(t2, student);
    }

    #[test]
    fn teacher_stays_equal_to_frozen_student() {
        let student = DecoderParams::init(4, 11);
        let mut teacher = student.clone();
        for _ in 0..50 {
            ema_update(&mut teacher, &student, 0.99).unwrap();
        }
        for (t, s) in teacher.to_flat().iter().zip(student.to_flat()) {
            assert_abs_diff_eq!(*t, s, epsilon = 1e-12);
        }
    }

    #[test]
    fn teacher_label_golden_values() {
        let grid = |v: f64| SoftMask::constant(2, 2, v, ResolutionTag::PatchGrid).unwrap();
        let out = |fg: f64, bg: f64| DecoderOutput {
            y_fg: grid(fg),
            y_bg: grid(bg),
            q_fg: Array2::zeros((4, 2)),
            q_bg: Array2::zeros((4, 2)),
            logits_fg: Array2::zeros((2, 2)),
            logits_bg: Array2::zeros((2, 2)),
        };
        assert!(teacher_pseudo_label(&out(1.0, 0.0))
            .values()
            .iter()
            .all(|&v| v == 1.0));
        assert!(teacher_pseudo_label(&out(0.5, 0.5))
            .values()
            .iter()
            .all(|&v| v == 0.5));
        assert_abs_diff_eq!(
            teacher_pseudo_label(&out(0.8, 0.4)).values()[[0, 0]],
            0.7,
            epsilon = 1e-12
        );
    }

    #[test]
    fn flat_roundtrip() {
        let params = DecoderParams::init(5, 21);
        let flat = params.to_flat();
        let mut rebuilt = DecoderParams::zeros(5);
        rebuilt.assign_from_flat(&flat);
        assert_eq!(params, rebuilt);
    }

    proptest! {
        /// Masks stay inside [0,1] for any finite parameter draw.
        #[test]
        fn masks_bounded(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = DecoderParams::init(4, seed);
            // Exaggerate the scale to stress the sigmoid.
            let flat: Vec<f64> = params.to_flat().iter().map(|v| v * rng.gen_range(0.1..50.0)).collect();
            params.assign_from_flat(&flat);
            let out = decode(&features(4, 2, 2, seed + 1), &params).unwrap();
            for &v in out.y_fg.values().iter().chain(out.y_bg.values().iter()) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        /// EMA is a convex combination: each updated parameter lies between
        /// its previous teacher value and the student value.
        #[test]
        fn ema_convexity(eta in 0.0f64..=1.0, seed in 0u64..100) {
            let student = DecoderParams::init(3, seed);
            let mut teacher = DecoderParams::init(3, seed + 1000);
            let before = teacher.to_flat();
            ema_update(&mut teacher, &student, eta).unwrap();
            for ((t_new, t_old), s) in teacher.to_flat().iter().zip(before).zip(student.to_flat()) {
                let lo = t_old.min(s) - 1e-12;
                let hi = t_old.max(s) + 1e-12;
                prop_assert!((lo..=hi).contains(t_new));
            }
        }
    }
}
