//! Shared test oracles: independent reference implementations that the
//! optimized library code is checked against. Everything here favors the
//! most literal possible transcription over speed.

#![allow(dead_code)]

use ndarray::Array2;

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Absolute floor under the relative tolerance; central differences carry
/// roundoff noise of about machine-eps/step.
pub const FD_ABS_TOL: f64 = 1e-8;

/// Central-difference gradient of `f` at `x`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let plus = f(&probe);
        probe[i] = orig - FD_STEP;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * FD_STEP);
    }
    grad
}

/// Asserts the analytic gradient matches the numeric one within the pinned
/// relative tolerance (with a small absolute floor).
pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], context: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{context}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let tol = FD_REL_TOL * a.abs().max(n.abs()) + FD_ABS_TOL;
        assert!(
            (a - n).abs() <= tol,
            "{context}: grad[{i}] analytic {a} vs numeric {n} (tol {tol})"
        );
    }
}

// ---------------------------------------------------------------------------
// Connected-component oracle
// ---------------------------------------------------------------------------

/// Breadth-first flood fill returning pixel partitions in row-major
/// discovery order. Supports both adjacency rules.
pub fn flood_fill_components(mask: &Array2<bool>, eight_connected: bool) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let offsets_4: &[(i64, i64)] = &[(-1, 0), (1, 0), (0, -1), (0, 1)];
    let offsets_8: &[(i64, i64)] = &[
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, -1),
        (0, 1),
        (1, -1),
        (1, 0),
        (1, 1),
    ];
    let offsets = if eight_connected { offsets_8 } else { offsets_4 };
    let mut components = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] || seen[[r, c]] {
                continue;
            }
            let mut queue = std::collections::VecDeque::from([(r, c)]);
            seen[[r, c]] = true;
            let mut pixels = Vec::new();
            while let Some((pr, pc)) = queue.pop_front() {
                pixels.push((pr, pc));
                for (dr, dc) in offsets {
                    let nr = pr as i64 + dr;
                    let nc = pc as i64 + dc;
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask[[nr, nc]] && !seen[[nr, nc]] {
                        seen[[nr, nc]] = true;
                        queue.push_back((nr, nc));
                    }
                }
            }
            pixels.sort();
            components.push(pixels);
        }
    }
    components
}

// ---------------------------------------------------------------------------
// Naive metric transcriptions
// ---------------------------------------------------------------------------

const EPS: f64 = f64::EPSILON;

fn thresholds() -> impl Iterator<Item = f64> {
    (1..=255).map(|k| k as f64 / 256.0)
}

/// Threshold-averaged F with beta^2 = 0.3, recomputed per threshold by
/// scanning every pixel.
pub fn f_mean_naive(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
    let n_fg = gt.iter().filter(|&&g| g).count();
    if n_fg == 0 {
        return if pred.iter().all(|&v| v == 0.0) { 1.0 } else { 0.0 };
    }
    let beta_sq = 0.3;
    let mut sum = 0.0;
    for t in thresholds() {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (p, &g) in pred.iter().zip(gt.iter()) {
            if *p > t {
                if g {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        if tp == 0.0 {
            continue;
        }
        let precision = tp / (tp + fp);
        let recall = tp / n_fg as f64;
        sum += (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall);
    }
    sum / 255.0
}

/// Threshold-averaged enhanced-alignment measure, built per threshold from
/// the full mean-centered alignment matrix.
pub fn e_measure_naive(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
    let total = gt.len() as f64;
    let n_fg = gt.iter().filter(|&&g| g).count() as f64;
    let mut sum = 0.0;
    for t in thresholds() {
        let fm = pred.mapv(|v| if v > t { 1.0 } else { 0.0 });
        let q = if n_fg == 0.0 {
            fm.iter().map(|&v| 1.0 - v).sum::<f64>() / total
        } else if n_fg == total {
            fm.sum() / total
        } else {
            let mu_fm = fm.sum() / total;
            let mu_gt = n_fg / total;
            let mut acc = 0.0;
            for (f, &g) in fm.iter().zip(gt.iter()) {
                let d_fm = f - mu_fm;
                let d_gt = if g { 1.0 } else { 0.0 } - mu_gt;
                let align = 2.0 * d_gt * d_fm / (d_gt * d_gt + d_fm * d_fm + EPS);
                acc += (align + 1.0) * (align + 1.0) / 4.0;
            }
            acc / total
        };
        sum += q;
    }
    sum / 255.0
}

/// Distance-weighted F-measure with brute-force nearest-site search and a
/// direct 7x7 Gaussian convolution. beta^2 = 1.
pub fn weighted_f_naive(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
    let (h, w) = gt.dim();
    let n_fg = gt.iter().filter(|&&g| g).count();
    if n_fg == 0 {
        return if pred.iter().all(|&v| v == 0.0) { 1.0 } else { 0.0 };
    }

    // Nearest foreground site per pixel; ties by (distance^2, row, col).
    let mut dist = Array2::zeros((h, w));
    let mut nearest = vec![(0usize, 0usize); h * w];
    for r in 0..h {
        for c in 0..w {
            if gt[[r, c]] {
                nearest[r * w + c] = (r, c);
                continue;
            }
            let mut best = (u64::MAX, usize::MAX, usize::MAX);
            for sr in 0..h {
                for sc in 0..w {
                    if !gt[[sr, sc]] {
                        continue;
                    }
                    let dr = r.abs_diff(sr) as u64;
                    let dc = c.abs_diff(sc) as u64;
                    let d2 = dr * dr + dc * dc;
                    if (d2, sr, sc) < best {
                        best = (d2, sr, sc);
                    }
                }
            }
            dist[[r, c]] = (best.0 as f64).sqrt();
            nearest[r * w + c] = (best.1, best.2);
        }
    }

    let mut err = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            err[[r, c]] = (pred[[r, c]] - if gt[[r, c]] { 1.0 } else { 0.0 }).abs();
        }
    }
    let mut err_t = err.clone();
    for r in 0..h {
        for c in 0..w {
            if !gt[[r, c]] {
                let (nr, nc) = nearest[r * w + c];
                err_t[[r, c]] = err[[nr, nc]];
            }
        }
    }

    // Direct 2D Gaussian, 7x7, sigma 5, zero padding, unit-sum kernel.
    let sigma = 5.0f64;
    let mut kernel = [[0.0f64; 7]; 7];
    let mut ksum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let dy = i as f64 - 3.0;
            let dx = j as f64 - 3.0;
            *cell = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            ksum += *cell;
        }
    }
    let mut blurred = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, row) in kernel.iter().enumerate() {
                for (j, &k) in row.iter().enumerate() {
                    let rr = r as i64 + i as i64 - 3;
                    let cc = c as i64 + j as i64 - 3;
                    if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                        acc += k * err_t[[rr as usize, cc as usize]];
                    }
                }
            }
            blurred[[r, c]] = acc / ksum;
        }
    }

    let half_decay = (0.5f64).ln() / 5.0;
    let mut sum_fg = 0.0;
    let mut sum_bg = 0.0;
    for r in 0..h {
        for c in 0..w {
            if gt[[r, c]] {
                sum_fg += err[[r, c]].min(blurred[[r, c]]);
            } else {
                sum_bg += err[[r, c]] * (2.0 - (half_decay * dist[[r, c]]).exp());
            }
        }
    }
    let tp_w = n_fg as f64 - sum_fg;
    let recall = 1.0 - sum_fg / n_fg as f64;
    let precision = tp_w / (tp_w + sum_bg + EPS);
    2.0 * recall * precision / (recall + precision + EPS)
}

/// Structure measure, transcribed with explicit per-pixel loops.
pub fn s_measure_naive(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
    let (h, w) = gt.dim();
    let total = (h * w) as f64;
    let n_fg = gt.iter().filter(|&&g| g).count() as f64;
    let mean_pred = pred.sum() / total;
    if n_fg == 0.0 {
        return 1.0 - mean_pred;
    }
    if n_fg == total {
        return mean_pred;
    }
    let mu = n_fg / total;

    // Object term.
    let stats = |vals: &[f64]| -> (f64, f64) {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let fg_vals: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, &g)| g)
        .map(|(p, _)| *p)
        .collect();
    let bg_vals: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, &g)| !g)
        .map(|(p, _)| 1.0 - *p)
        .collect();
    let (m_fg, s_fg) = stats(&fg_vals);
    let (m_bg, s_bg) = stats(&bg_vals);
    let o_fg = 2.0 * m_fg / (m_fg * m_fg + 1.0 + s_fg + EPS);
    let o_bg = 2.0 * m_bg / (m_bg * m_bg + 1.0 + s_bg + EPS);
    let s_object = mu * o_fg + (1.0 - mu) * o_bg;

    // Region term: split at the rounded foreground centroid.
    let mut sum_r = 0.0;
    let mut sum_c = 0.0;
    for r in 0..h {
        for c in 0..w {
            if gt[[r, c]] {
                sum_r += r as f64;
                sum_c += c as f64;
            }
        }
    }
    let split_r = (sum_r / n_fg).round() as usize + 1;
    let split_c = (sum_c / n_fg).round() as usize + 1;
    let quadrant_score = |r0: usize, r1: usize, c0: usize, c1: usize| -> (f64, f64) {
        if r0 >= r1 || c0 >= c1 {
            return (0.0, 0.0);
        }
        let n = ((r1 - r0) * (c1 - c0)) as f64;
        let mut px = 0.0;
        let mut gy = 0.0;
        for r in r0..r1 {
            for c in c0..c1 {
                px += pred[[r, c]];
                gy += if gt[[r, c]] { 1.0 } else { 0.0 };
            }
        }
        let x = px / n;
        let y = gy / n;
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut sxy = 0.0;
        for r in r0..r1 {
            for c in c0..c1 {
                let dp = pred[[r, c]] - x;
                let dg = if gt[[r, c]] { 1.0 } else { 0.0 } - y;
                sx += dp * dp;
                sy += dg * dg;
                sxy += dp * dg;
            }
        }
        let denom = n - 1.0 + EPS;
        let (sx, sy, sxy) = (sx / denom, sy / denom, sxy / denom);
        let alpha = 4.0 * x * y * sxy;
        let beta = (x * x + y * y) * (sx + sy);
        let q = if alpha != 0.0 {
            alpha / (beta + EPS)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        };
        (q, n / total)
    };
    let mut s_region = 0.0;
    for (q, wgt) in [
        quadrant_score(0, split_r.min(h), 0, split_c.min(w)),
        quadrant_score(0, split_r.min(h), split_c.min(w), w),
        quadrant_score(split_r.min(h), h, 0, split_c.min(w)),
        quadrant_score(split_r.min(h), h, split_c.min(w), w),
    ] {
        s_region += q * wgt;
    }

    (0.5 * s_object + 0.5 * s_region).clamp(0.0, 1.0)
}
