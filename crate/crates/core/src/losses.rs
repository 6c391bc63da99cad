//! Training objectives and their analytic gradients.
//!
//! Every loss here is paired with the gradient its optimizer step needs;
//! the finite-difference suite in the integration tests keeps both sides
//! honest.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::mask::SoftMask;
use crate::{Error, Result};

/// Predictions are clamped to [EPS, 1-EPS] before any logarithm.
pub const BCE_EPS: f64 = 1e-7;

/// Which parameter set the current step trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainPhase {
    /// Student decoder updates; the discriminator is frozen and its loss
    /// contributes nothing.
    Generator,
    /// Discriminator updates; only its own loss is active.
    Discriminator,
}

/// Per-component loss weights; unit weights reproduce the plain sum.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub seg: f64,
    pub orth: f64,
    pub dis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            orth: 1.0,
            dis: 1.0,
        }
    }
}

/// One step's loss components.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBundle {
    pub l_seg: f64,
    pub l_orth: f64,
    pub l_dis: f64,
    pub l_total: f64,
}

/// Phase-masked total: the generator phase sums segmentation and
/// orthogonality (discriminator frozen), the discriminator phase keeps only
/// its own objective.
pub fn total_loss(
    phase: TrainPhase,
    l_seg: f64,
    l_orth: f64,
    l_dis: f64,
    weights: &LossWeights,
) -> LossBundle {
    match phase {
        TrainPhase::Generator => {
            let seg = weights.seg * l_seg;
            let orth = weights.orth * l_orth;
            LossBundle {
                l_seg: seg,
                l_orth: orth,
                l_dis: 0.0,
                l_total: seg + orth,
            }
        }
        TrainPhase::Discriminator => {
            let dis = weights.dis * l_dis;
            LossBundle {
                l_seg: 0.0,
                l_orth: 0.0,
                l_dis: dis,
                l_total: dis,
            }
        }
    }
}

fn clamp_pred(q: f64) -> f64 {
    q.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Soft-target binary cross entropy, averaged over pixels.
fn bce_mean(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(&q, &p)| {
            let q = clamp_pred(q);
            -(p * q.ln() + (1.0 - p) * (1.0 - q).ln())
        })
        .sum::<f64>()
        / n
}

/// d bce_mean / d pred, elementwise. Zero where the clamp is active.
fn bce_mean_grad(pred: &Array2<f64>, target: &Array2<f64>) -> Array2<f64> {
    let n = pred.len() as f64;
    let mut g = Array2::zeros(pred.dim());
    for ((gi, &q), &p) in g.iter_mut().zip(pred.iter()).zip(target.iter()) {
        if q <= BCE_EPS || q >= 1.0 - BCE_EPS {
            continue;
        }
        *gi = (q - p) / (q * (1.0 - q)) / n;
    }
    g
}

/// Segmentation objective: BCE of the foreground mask against the
/// pseudo-label plus BCE of the inverted background mask against the same
/// label.
pub fn seg_loss(y_fg: &SoftMask, y_bg: &SoftMask, p: &SoftMask) -> Result<f64> {
    if y_fg.dims() != p.dims() || y_bg.dims() != p.dims() {
        return Err(Error::Input(format!(
            "seg_loss resolution mismatch: fg {:?}, bg {:?}, target {:?}",
            y_fg.dims(),
            y_bg.dims(),
            p.dims()
        )));
    }
    let inv_bg = y_bg.values().mapv(|v| 1.0 - v);
    Ok(bce_mean(y_fg.values(), p.values()) + bce_mean(&inv_bg, p.values()))
}

/// Gradients of [`seg_loss`] with respect to the two prediction masks.
pub fn seg_loss_grad(
    y_fg: &SoftMask,
    y_bg: &SoftMask,
    p: &SoftMask,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if y_fg.dims() != p.dims() || y_bg.dims() != p.dims() {
        return Err(Error::Input("seg_loss_grad resolution mismatch".into()));
    }
    let g_fg = bce_mean_grad(y_fg.values(), p.values());
    let inv_bg = y_bg.values().mapv(|v| 1.0 - v);
    // d/d y_bg = -d/d (1 - y_bg)
    let g_bg = bce_mean_grad(&inv_bg, p.values()).mapv(|v| -v);
    Ok((g_fg, g_bg))
}

/// Off-diagonal energy of the cross-Gram matrix between the foreground and
/// background query maps, normalized by the squared patch count.
pub fn orth_loss(q_fg: &Array2<f64>, q_bg: &Array2<f64>) -> Result<f64> {
    if q_fg.dim() != q_bg.dim() {
        return Err(Error::Input(format!(
            "orth_loss shape mismatch: {:?} vs {:?}",
            q_fg.dim(),
            q_bg.dim()
        )));
    }
    let gram = q_fg.dot(&q_bg.t());
    let n = gram.nrows();
    let mut sum = 0.0;
    for j in 0..n {
        for k in 0..n {
            if j != k {
                sum += gram[[j, k]] * gram[[j, k]];
            }
        }
    }
    Ok(sum / (n as f64 * n as f64))
}

/// Gradients of [`orth_loss`] with respect to both query maps.
pub fn orth_loss_grad(
    q_fg: &Array2<f64>,
    q_bg: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if q_fg.dim() != q_bg.dim() {
        return Err(Error::Input("orth_loss_grad shape mismatch".into()));
    }
    let mut gram = q_fg.dot(&q_bg.t());
    let n = gram.nrows();
    for j in 0..n {
        gram[[j, j]] = 0.0;
    }
    let scale = 2.0 / (n as f64 * n as f64);
    let g_fg = gram.dot(q_bg).mapv(|v| v * scale);
    let g_bg = gram.t().dot(q_fg).mapv(|v| v * scale);
    Ok((g_fg, g_bg))
}

/// Discriminator binary cross entropy for a single probability.
///
/// Label convention: 1 for fixed-strategy pseudo-labels, 0 for student
/// foreground predictions.
pub fn dis_loss(y_hat: f64, y: u8) -> Result<f64> {
    if !(0.0..=1.0).contains(&y_hat) || !y_hat.is_finite() {
        return Err(Error::Input(format!(
            "discriminator probability {y_hat} outside [0,1]"
        )));
    }
    if y > 1 {
        return Err(Error::Input(format!("discriminator label must be 0/1, got {y}")));
    }
    let q = clamp_pred(y_hat);
    Ok(if y == 1 { -q.ln() } else { -(1.0 - q).ln() })
}

/// d [`dis_loss`] / d y_hat. Zero where the clamp is active.
pub fn dis_loss_grad(y_hat: f64, y: u8) -> f64 {
    if y_hat <= BCE_EPS || y_hat >= 1.0 - BCE_EPS {
        return 0.0;
    }
    let p = y as f64;
    (y_hat - p) / (y_hat * (1.0 - y_hat))
}
