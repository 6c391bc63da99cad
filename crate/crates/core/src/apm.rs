//! Adaptive pseudo-label mixing.
//!
//! A small convolutional discriminator estimates the probability that a
//! foreground mask came from the fixed-strategy branch. The absolute
//! disagreement between its verdicts on the fixed-strategy label and on the
//! student's prediction, combined with training progress, yields the mixing
//! weight that blends the teacher's pseudo-label with the fixed-strategy
//! one: early on (large disagreement, small t) the fixed strategy dominates,
//! later the teacher takes over.

use ndarray::{Array1, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mask::SoftMask;
use crate::{Error, Result};

const LEAKY_SLOPE: f64 = 0.1;
const CONV_CHANNELS: [usize; 3] = [8, 16, 32];
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Pseudo-label mixing strategies; the two constants are ablation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MixingStrategy {
    /// Discriminator-driven adaptive weight.
    #[default]
    Apm,
    /// Constant 1:1 blend.
    Proportional,
    /// Teacher weight grows linearly with epoch (fixed-strategy weight
    /// decays linearly).
    LinearDecay,
}

impl std::str::FromStr for MixingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "apm" => Ok(Self::Apm),
            "proportional" => Ok(Self::Proportional),
            "linear_decay" | "linear-decay" => Ok(Self::LinearDecay),
            other => Err(Error::Config(format!("unknown mixing strategy '{other}'"))),
        }
    }
}

/// Weight of the baseline strategies at epoch `t` of `T`.
pub fn baseline_weight(strategy: MixingStrategy, t: usize, total: usize) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Input(format!("epoch {t} outside 0..={total}")));
    }
    match strategy {
        MixingStrategy::Proportional => Ok(0.5),
        MixingStrategy::LinearDecay => Ok(t as f64 / total as f64),
        MixingStrategy::Apm => Err(Error::Config(
            "APM weight comes from score(), not baseline_weight()".into(),
        )),
    }
}

/// Temporally constrained cosine score, clipped to [0, 1]:
/// `clip(t/T + (1 + cos(pi * |y_p1 - y_p2|)) / 2)`.
pub fn score(y_p1: f64, y_p2: f64, t: usize, total: usize) -> Result<f64> {
    for v in [y_p1, y_p2] {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(Error::Input(format!(
                "discriminator probability {v} outside [0,1]"
            )));
        }
    }
    if total == 0 || t > total {
        return Err(Error::Input(format!("epoch {t} outside 0..={total}")));
    }
    let delta = (y_p1 - y_p2).abs();
    let raw = t as f64 / total as f64 + 0.5 * (1.0 + (std::f64::consts::PI * delta).cos());
    Ok(raw.clamp(0.0, 1.0))
}

/// Convex blend `w * p_t + (1 - w) * p_fs`, elementwise.
pub fn mix(p_t: &SoftMask, p_fs: &SoftMask, w: f64) -> Result<SoftMask> {
    if p_t.dims() != p_fs.dims() {
        return Err(Error::Input(format!(
            "mix resolution mismatch: {:?} vs {:?}",
            p_t.dims(),
            p_fs.dims()
        )));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Input(format!("mixing weight {w} outside [0,1]")));
    }
    let blended = ndarray::Zip::from(p_t.values())
        .and(p_fs.values())
        .map_collect(|&a, &b| w * a + (1.0 - w) * b);
    SoftMask::new(blended, p_t.resolution())
}

/// One image's mixing decision.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MixState {
    /// Discriminator verdict on the fixed-strategy label.
    pub y_p1: f64,
    /// Discriminator verdict on the student's foreground prediction.
    pub y_p2: f64,
    pub t: usize,
    pub total: usize,
    /// Mixing weight; always equals `score(y_p1, y_p2, t, total)`.
    pub w: f64,
}

impl MixState {
    pub fn new(y_p1: f64, y_p2: f64, t: usize, total: usize) -> Result<Self> {
        let w = score(y_p1, y_p2, t, total)?;
        Ok(Self {
            y_p1,
            y_p2,
            t,
            total,
            w,
        })
    }
}

/// Mask discriminator: three stride-2 convolutions (1 -> 8 -> 16 -> 32,
/// leaky nonlinearity after each), global average pooling, and a linear
/// layer to one logit. Masks are resampled to `input_size` squared first.
///
/// Like [`crate::dba_decoder::DecoderParams`], the struct doubles as its own
/// gradient container. Flattened order: conv weights and biases in layer
/// order, then fc weights, then fc bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub conv_w: Vec<Array4<f64>>,
    pub conv_b: Vec<Array1<f64>>,
    pub fc_w: Array1<f64>,
    pub fc_b: f64,
    /// Canonical square input resolution.
    pub input_size: usize,
}

impl DiscriminatorParams {
    pub fn init(input_size: usize, seed: u64) -> Result<Self> {
        if input_size < 8 {
            return Err(Error::Config(format!(
                "discriminator input size {input_size} too small (minimum 8)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut in_ch = 1usize;
        for &out_ch in CONV_CHANNELS.iter() {
            let fan_in = (in_ch * KERNEL * KERNEL) as f64;
            let bound = 1.0 / fan_in.sqrt();
            conv_w.push(Array4::from_shape_fn(
                (out_ch, in_ch, KERNEL, KERNEL),
                |_| rng.gen_range(-bound..bound),
            ));
            conv_b.push(Array1::from_shape_fn(out_ch, |_| rng.gen_range(-bound..bound)));
            in_ch = out_ch;
        }
        let bound = 1.0 / (in_ch as f64).sqrt();
        let fc_w = Array1::from_shape_fn(in_ch, |_| rng.gen_range(-bound..bound));
        let fc_b = rng.gen_range(-bound..bound);
        Ok(Self {
            conv_w,
            conv_b,
            fc_w,
            fc_b,
            input_size,
        })
    }

    pub fn zeros(input_size: usize) -> Self {
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut in_ch = 1usize;
        for &out_ch in CONV_CHANNELS.iter() {
            conv_w.push(Array4::zeros((out_ch, in_ch, KERNEL, KERNEL)));
            conv_b.push(Array1::zeros(out_ch));
            in_ch = out_ch;
        }
        Self {
            conv_w,
            conv_b,
            fc_w: Array1::zeros(in_ch),
            fc_b: 0.0,
            input_size,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            v.extend(w.iter());
            v.extend(b.iter());
        }
        v.extend(self.fc_w.iter());
        v.push(self.fc_b);
        v
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for (w, b) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()) {
            for x in w.iter_mut() {
                *x = it.next().expect("flat vector too short");
            }
            for x in b.iter_mut() {
                *x = it.next().unwrap();
            }
        }
        for x in self.fc_w.iter_mut() {
            *x = it.next().unwrap();
        }
        self.fc_b = it.next().unwrap();
        assert!(it.next().is_none(), "flat vector too long");
    }

    pub fn add_scaled(&mut self, other: &DiscriminatorParams, scale: f64) {
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

fn conv_out_dim(in_dim: usize) -> usize {
    (in_dim + 2 * PAD - KERNEL) / STRIDE + 1
}

fn conv2d(input: &Array3<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Array3<f64> {
    let (in_ch, in_h, in_w) = input.dim();
    let (out_ch, _, _, _) = w.dim();
    let out_h = conv_out_dim(in_h);
    let out_w = conv_out_dim(in_w);
    let mut out = Array3::zeros((out_ch, out_h, out_w));
    for o in 0..out_ch {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = b[o];
                for i in 0..in_ch {
                    for ky in 0..KERNEL {
                        let y = (oy * STRIDE + ky) as isize - PAD as isize;
                        if y < 0 || y >= in_h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let x = (ox * STRIDE + kx) as isize - PAD as isize;
                            if x < 0 || x >= in_w as isize {
                                continue;
                            }
                            acc += w[[o, i, ky, kx]] * input[[i, y as usize, x as usize]];
                        }
                    }
                }
                out[[o, oy, ox]] = acc;
            }
        }
    }
    out
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Activations retained for the discriminator backward pass.
#[derive(Debug, Clone)]
pub struct DiscCache {
    /// Layer inputs: resized mask plus each post-activation map.
    inputs: Vec<Array3<f64>>,
    /// Pre-activation maps per conv layer.
    pre_acts: Vec<Array3<f64>>,
    pooled: Array1<f64>,
    prob: f64,
}

impl DiscCache {
    pub fn prob(&self) -> f64 {
        self.prob
    }
}

fn forward_cached(mask: &SoftMask, params: &DiscriminatorParams) -> Result<DiscCache> {
    let d = params.input_size;
    let resized = mask.resized(d, d)?;
    let mut cur = Array3::zeros((1, d, d));
    for r in 0..d {
        for c in 0..d {
            cur[[0, r, c]] = resized.values()[[r, c]];
        }
    }
    let mut inputs = vec![cur.clone()];
    let mut pre_acts = Vec::new();
    for (w, b) in params.conv_w.iter().zip(&params.conv_b) {
        let pre = conv2d(&cur, w, b);
        cur = pre.mapv(leaky);
        pre_acts.push(pre);
        inputs.push(cur.clone());
    }
    let (ch, h, w) = cur.dim();
    let spatial = (h * w) as f64;
    let pooled = Array1::from_shape_fn(ch, |o| {
        cur.index_axis(ndarray::Axis(0), o).sum() / spatial
    });
    let logit = pooled.dot(&params.fc_w) + params.fc_b;
    let prob = 1.0 / (1.0 + (-logit).exp());
    Ok(DiscCache {
        inputs,
        pre_acts,
        pooled,
        prob,
    })
}

/// Probability that `mask` came from the fixed-strategy branch.
///
/// Deterministic in (mask, params); mask finiteness and range are enforced
/// by the [`SoftMask`] type itself.
pub fn discriminate(mask: &SoftMask, params: &DiscriminatorParams) -> Result<f64> {
    forward_cached(mask, params).map(|c| c.prob)
}

/// Forward pass retaining activations for [`discriminate_backward`].
pub fn discriminate_with_cache(
    mask: &SoftMask,
    params: &DiscriminatorParams,
) -> Result<DiscCache> {
    forward_cached(mask, params)
}

/// Backward pass: gradient of a scalar loss with respect to every
/// discriminator parameter, given d(loss)/d(probability).
pub fn discriminate_backward(
    cache: &DiscCache,
    params: &DiscriminatorParams,
    g_prob: f64,
) -> DiscriminatorParams {
    let mut grads = DiscriminatorParams::zeros(params.input_size);
    let g_logit = g_prob * cache.prob * (1.0 - cache.prob);
    grads.fc_b = g_logit;
    for (g, p) in grads.fc_w.iter_mut().zip(cache.pooled.iter()) {
        *g = g_logit * p;
    }

    // Through the global average pool into the last activation map.
    let last = cache.inputs.last().unwrap();
    let (ch, h, w) = last.dim();
    let spatial = (h * w) as f64;
    let mut g_act = Array3::zeros((ch, h, w));
    for o in 0..ch {
        let g = g_logit * params.fc_w[o] / spatial;
        for y in 0..h {
            for x in 0..w {
                g_act[[o, y, x]] = g;
            }
        }
    }

    for layer in (0..params.conv_w.len()).rev() {
        let pre = &cache.pre_acts[layer];
        let input = &cache.inputs[layer];
        let w = &params.conv_w[layer];
        // Through the nonlinearity.
        let g_pre = ndarray::Zip::from(&g_act)
            .and(pre)
            .map_collect(|&g, &p| g * leaky_grad(p));

        let (out_ch, out_h, out_w) = g_pre.dim();
        let (in_ch, in_h, in_w) = input.dim();
        let gw = &mut grads.conv_w[layer];
        let gb = &mut grads.conv_b[layer];
        let mut g_in = Array3::zeros((in_ch, in_h, in_w));
        for o in 0..out_ch {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let g = g_pre[[o, oy, ox]];
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    for i in 0..in_ch {
                        for ky in 0..KERNEL {
                            let y = (oy * STRIDE + ky) as isize - PAD as isize;
                            if y < 0 || y >= in_h as isize {
                                continue;
                            }
                            for kx in 0..KERNEL {
                                let x = (ox * STRIDE + kx) as isize - PAD as isize;
                                if x < 0 || x >= in_w as isize {
                                    continue;
                                }
                                gw[[o, i, ky, kx]] += g * input[[i, y as usize, x as usize]];
                                g_in[[i, y as usize, x as usize]] += g * w[[o, i, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
        g_act = g_in;
    }
    grads
}
