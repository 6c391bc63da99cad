//! Mask quality metrics for camouflaged-object benchmarking.
//!
//! Implements the five standard scores: mean absolute error, the structure
//! measure (object- plus region-aware similarity), the weighted F-measure
//! (distance-weighted precision/recall), the threshold-averaged F-measure,
//! and the threshold-averaged enhanced-alignment measure. All land in
//! [0, 1]; higher is better except MAE.
//!
//! Numeric conventions pinned here (and mirrored by the naive oracles in
//! the integration tests): 255 thresholds at k/256; F-measure beta^2 = 0.3;
//! weighted-F beta^2 = 1 with a 7x7 sigma-5 zero-padded Gaussian and
//! lexicographic (distance, row, col) nearest-site tie-break; E-measure
//! normalized by the pixel count so a perfect prediction scores exactly 1;
//! S-measure with population std in the object term, sample variance in the
//! region term, and centroid-split quadrants.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::mask::SoftMask;
use crate::{Error, Result};

const EPS: f64 = f64::EPSILON;
/// Thresholds k/256 for k in 1..=255.
pub const THRESHOLD_COUNT: usize = 255;
/// beta^2 for the threshold-averaged F-measure.
pub const F_BETA_SQ: f64 = 0.3;

/// A prediction/ground-truth pair at image resolution.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pred: SoftMask,
    gt: Array2<bool>,
}

impl EvalPair {
    pub fn new(pred: SoftMask, gt: Array2<bool>) -> Result<Self> {
        if pred.dims() != gt.dim() {
            return Err(Error::Input(format!(
                "pred {:?} and gt {:?} shapes differ",
                pred.dims(),
                gt.dim()
            )));
        }
        Ok(Self { pred, gt })
    }

    pub fn pred(&self) -> &SoftMask {
        &self.pred
    }

    pub fn gt(&self) -> &Array2<bool> {
        &self.gt
    }

    /// Fraction of ground-truth pixels that are foreground.
    pub fn gt_ratio(&self) -> f64 {
        let fg = self.gt.iter().filter(|&&b| b).count();
        fg as f64 / self.gt.len() as f64
    }
}

/// Aggregate metric values over a set of images (unweighted means).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub s_measure: f64,
    pub f_weighted: f64,
    pub f_mean: f64,
    pub e_mean: f64,
    pub mae: f64,
    pub n_images: usize,
}

/// Mean absolute error between prediction and ground truth.
pub fn mae(pair: &EvalPair) -> f64 {
    let gt = pair.gt();
    let pred = pair.pred().values();
    let mut sum = 0.0;
    for (p, &g) in pred.iter().zip(gt.iter()) {
        sum += (p - if g { 1.0 } else { 0.0 }).abs();
    }
    sum / pred.len() as f64
}

// ---------------------------------------------------------------------------
// S-measure
// ---------------------------------------------------------------------------

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    2.0 * mean / (mean * mean + 1.0 + var.sqrt() + EPS)
}

fn s_object(pred: &Array2<f64>, gt: &Array2<bool>, mu: f64) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (p, &g) in pred.iter().zip(gt.iter()) {
        if g {
            fg.push(*p);
        } else {
            bg.push(1.0 - *p);
        }
    }
    mu * object_score(&fg) + (1.0 - mu) * object_score(&bg)
}

/// Centroid of the foreground, rounded to the nearest pixel (0-indexed).
fn gt_centroid(gt: &Array2<bool>) -> (usize, usize) {
    let (h, w) = gt.dim();
    let mut total = 0.0;
    let mut sum_r = 0.0;
    let mut sum_c = 0.0;
    for r in 0..h {
        for c in 0..w {
            if gt[[r, c]] {
                total += 1.0;
                sum_r += r as f64;
                sum_c += c as f64;
            }
        }
    }
    if total == 0.0 {
        ((h as f64 / 2.0).round() as usize, (w as f64 / 2.0).round() as usize)
    } else {
        (
            (sum_r / total).round() as usize,
            (sum_c / total).round() as usize,
        )
    }
}

/// Region similarity of one quadrant: the SSIM-style combination of means,
/// sample variances, and covariance.
fn region_similarity(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 0.0;
    }
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let denom = n - 1.0 + EPS;
    let sigma_x = pred.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / denom;
    let sigma_y = gt.iter().map(|v| (v - y) * (v - y)).sum::<f64>() / denom;
    let sigma_xy = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| (p - x) * (g - y))
        .sum::<f64>()
        / denom;
    let alpha = 4.0 * x * y * sigma_xy;
    let beta = (x * x + y * y) * (sigma_x + sigma_y);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
    let (h, w) = gt.dim();
    let (cy, cx) = gt_centroid(gt);
    let split_r = cy + 1;
    let split_c = cx + 1;
    let area = (h * w) as f64;
    let mut score = 0.0;
    for (r0, r1, c0, c1) in [
        (0, split_r, 0, split_c),
        (0, split_r, split_c, w),
        (split_r, h, 0, split_c),
        (split_r, h, split_c, w),
    ] {
        if r0 >= r1 || c0 >= c1 {
            continue;
        }
        let mut p = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut g = Vec::with_capacity(p.capacity());
        for r in r0..r1 {
            for c in c0..c1 {
                p.push(pred[[r, c]]);
                g.push(if gt[[r, c]] { 1.0 } else { 0.0 });
            }
        }
        let weight = ((r1 - r0) * (c1 - c0)) as f64 / area;
        score += weight * region_similarity(&p, &g);
    }
    score
}

/// Structure measure: mean of the object-aware and region-aware terms,
/// clamped to [0, 1]. Degenerate ground truths fall back to the mean
/// prediction rules (all-background: 1 - mean, all-foreground: mean).
pub fn s_measure(pair: &EvalPair) -> f64 {
    let pred = pair.pred().values();
    let gt = pair.gt();
    let mu = pair.gt_ratio();
    if mu == 0.0 {
        let x = pred.sum() / pred.len() as f64;
        return 1.0 - x;
    }
    if mu == 1.0 {
        return pred.sum() / pred.len() as f64;
    }
    let q = 0.5 * s_object(pred, gt, mu) + 0.5 * s_region(pred, gt);
    q.clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Threshold-swept F-measure and E-measure
// ---------------------------------------------------------------------------

/// Counts of prediction values strictly above each threshold, split by
/// ground-truth class. Sorting once replaces the per-threshold sweep.
struct ThresholdCounts {
    /// tp[k] = foreground-gt pixels with pred > (k+1)/256.
    tp: Vec<usize>,
    /// fp[k] = background-gt pixels with pred > (k+1)/256.
    fp: Vec<usize>,
    n_fg: usize,
    n_bg: usize,
}

fn threshold_counts(pair: &EvalPair) -> ThresholdCounts {
    let mut fg_vals = Vec::new();
    let mut bg_vals = Vec::new();
    for (p, &g) in pair.pred().values().iter().zip(pair.gt().iter()) {
        if g {
            fg_vals.push(*p);
        } else {
            bg_vals.push(*p);
        }
    }
    fg_vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    bg_vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let above = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&v| v <= t);
    let mut tp = Vec::with_capacity(THRESHOLD_COUNT);
    let mut fp = Vec::with_capacity(THRESHOLD_COUNT);
    for k in 1..=THRESHOLD_COUNT {
        let t = k as f64 / 256.0;
        tp.push(above(&fg_vals, t));
        fp.push(above(&bg_vals, t));
    }
    ThresholdCounts {
        tp,
        fp,
        n_fg: fg_vals.len(),
        n_bg: bg_vals.len(),
    }
}

/// (weighted F, threshold-averaged F).
pub fn f_measures(pair: &EvalPair) -> (f64, f64) {
    (weighted_f(pair), f_mean(pair))
}

/// Mean F over the 255 thresholds with beta^2 = 0.3; zero when the ground
/// truth is empty unless the prediction is empty too (then 1).
pub fn f_mean(pair: &EvalPair) -> f64 {
    let counts = threshold_counts(pair);
    if counts.n_fg == 0 {
        let pred_empty = pair.pred().values().iter().all(|&v| v == 0.0);
        return if pred_empty { 1.0 } else { 0.0 };
    }
    let mut sum = 0.0;
    for k in 0..THRESHOLD_COUNT {
        let tp = counts.tp[k] as f64;
        if tp == 0.0 {
            continue;
        }
        let precision = tp / (tp + counts.fp[k] as f64);
        let recall = tp / counts.n_fg as f64;
        sum += (1.0 + F_BETA_SQ) * precision * recall / (F_BETA_SQ * precision + recall);
    }
    sum / THRESHOLD_COUNT as f64
}

/// Mean enhanced-alignment measure over the 255 thresholds.
///
/// The alignment of two mean-centered binary maps takes one of four values
/// per pixel depending on the (gt, pred) combination, so each threshold
/// reduces to the class counts. Normalized by the pixel count.
pub fn e_measure(pair: &EvalPair) -> f64 {
    let counts = threshold_counts(pair);
    let total = (counts.n_fg + counts.n_bg) as f64;
    let mut sum = 0.0;
    for k in 0..THRESHOLD_COUNT {
        let tp = counts.tp[k] as f64;
        let fp = counts.fp[k] as f64;
        let fn_ = counts.n_fg as f64 - tp;
        let tn = counts.n_bg as f64 - fp;
        let q = if counts.n_fg == 0 {
            // All-background ground truth: score the non-predicted area.
            tn / total
        } else if counts.n_bg == 0 {
            tp / total
        } else {
            let mu_gt = counts.n_fg as f64 / total;
            let mu_fm = (tp + fp) / total;
            let d_gt = [1.0 - mu_gt, -mu_gt];
            let d_fm = [1.0 - mu_fm, -mu_fm];
            let enhanced = |g: usize, f: usize| {
                let align =
                    2.0 * d_gt[g] * d_fm[f] / (d_gt[g] * d_gt[g] + d_fm[f] * d_fm[f] + EPS);
                (align + 1.0) * (align + 1.0) / 4.0
            };
            (tp * enhanced(0, 0) + fn_ * enhanced(0, 1) + fp * enhanced(1, 0)
                + tn * enhanced(1, 1))
                / total
        };
        sum += q;
    }
    sum / THRESHOLD_COUNT as f64
}

// ---------------------------------------------------------------------------
// Weighted F-measure
// ---------------------------------------------------------------------------

/// Euclidean distance transform with nearest-site recovery.
///
/// For every pixel, finds the foreground site minimizing squared distance;
/// ties break lexicographically on (row, col). Scans candidate rows
/// outward from each pixel and prunes once the row offset alone exceeds the
/// best distance.
fn edt_nearest(gt: &Array2<bool>) -> (Array2<f64>, Vec<(usize, usize)>) {
    let (h, w) = gt.dim();
    let mut sites_by_row: Vec<Vec<usize>> = vec![Vec::new(); h];
    for r in 0..h {
        for c in 0..w {
            if gt[[r, c]] {
                sites_by_row[r].push(c);
            }
        }
    }
    let mut dist = Array2::zeros((h, w));
    let mut nearest = vec![(0usize, 0usize); h * w];

    let consider = |best: &mut (u64, usize, usize), rr: usize, cc: usize, r: usize, c: usize| {
        let dr = r.abs_diff(rr) as u64;
        let dc = c.abs_diff(cc) as u64;
        let d2 = dr * dr + dc * dc;
        if (d2, rr, cc) < *best {
            *best = (d2, rr, cc);
        }
    };

    for r in 0..h {
        for c in 0..w {
            if gt[[r, c]] {
                nearest[r * w + c] = (r, c);
                continue;
            }
            let mut best = (u64::MAX, usize::MAX, usize::MAX);
            for dr in 0..h as i64 {
                if best.0 != u64::MAX && (dr as u64 * dr as u64) > best.0 {
                    break;
                }
                let mut rows = [r as i64 - dr, r as i64 + dr];
                if dr == 0 {
                    rows[1] = -1; // visit the center row once
                }
                for &row in rows.iter() {
                    if row < 0 || row >= h as i64 {
                        continue;
                    }
                    let rr = row as usize;
                    let cols = &sites_by_row[rr];
                    if cols.is_empty() {
                        continue;
                    }
                    // Only the two sites bracketing the column can be
                    // nearest within this row; checking both also covers
                    // the equidistant left/right tie.
                    let idx = cols.partition_point(|&cc| cc < c);
                    if idx < cols.len() {
                        consider(&mut best, rr, cols[idx], r, c);
                    }
                    if idx > 0 {
                        consider(&mut best, rr, cols[idx - 1], r, c);
                    }
                }
            }
            dist[[r, c]] = (best.0 as f64).sqrt();
            nearest[r * w + c] = (best.1, best.2);
        }
    }
    (dist, nearest)
}

/// 7x7 Gaussian (sigma 5) blur with zero padding, run as two separable
/// passes; the kernel is normalized to unit sum over its truncated window.
fn gauss_blur_7x5(src: &Array2<f64>) -> Array2<f64> {
    let sigma = 5.0f64;
    let g: Vec<f64> = (-3..=3)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = g.iter().sum();
    let (h, w) = src.dim();
    let mut tmp = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &gk) in g.iter().enumerate() {
                let cc = c as i64 + k as i64 - 3;
                if cc >= 0 && cc < w as i64 {
                    acc += gk * src[[r, cc as usize]];
                }
            }
            tmp[[r, c]] = acc / norm;
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &gk) in g.iter().enumerate() {
                let rr = r as i64 + k as i64 - 3;
                if rr >= 0 && rr < h as i64 {
                    acc += gk * tmp[[rr as usize, c]];
                }
            }
            out[[r, c]] = acc / norm;
        }
    }
    out
}

/// Weighted F-measure: errors at background pixels inherit the error of
/// their nearest foreground pixel, get blurred, and are down-weighted with
/// distance before entering precision/recall (beta^2 = 1).
pub fn weighted_f(pair: &EvalPair) -> f64 {
    let gt = pair.gt();
    let pred = pair.pred().values();
    let (h, w) = gt.dim();
    let n_fg = gt.iter().filter(|&&g| g).count();
    if n_fg == 0 {
        let pred_empty = pred.iter().all(|&v| v == 0.0);
        return if pred_empty { 1.0 } else { 0.0 };
    }

    let (dist, nearest) = edt_nearest(gt);
    let mut err = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            err[[r, c]] = (pred[[r, c]] - if gt[[r, c]] { 1.0 } else { 0.0 }).abs();
        }
    }
    // Background errors take the value at their nearest foreground pixel.
    let mut err_t = err.clone();
    for r in 0..h {
        for c in 0..w {
            if !gt[[r, c]] {
                let (nr, nc) = nearest[r * w + c];
                err_t[[r, c]] = err[[nr, nc]];
            }
        }
    }
    let blurred = gauss_blur_7x5(&err_t);
    let half_decay = (0.5f64).ln() / 5.0;
    let mut sum_ew_fg = 0.0;
    let mut sum_ew_bg = 0.0;
    for r in 0..h {
        for c in 0..w {
            if gt[[r, c]] {
                let e = if blurred[[r, c]] < err[[r, c]] {
                    blurred[[r, c]]
                } else {
                    err[[r, c]]
                };
                sum_ew_fg += e; // weight 1 on foreground
            } else {
                let weight = 2.0 - (half_decay * dist[[r, c]]).exp();
                sum_ew_bg += err[[r, c]] * weight;
            }
        }
    }
    let tp_w = n_fg as f64 - sum_ew_fg;
    let fp_w = sum_ew_bg;
    let recall = 1.0 - sum_ew_fg / n_fg as f64;
    let precision = tp_w / (tp_w + fp_w + EPS);
    2.0 * recall * precision / (recall + precision + EPS)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// All five metrics for one image.
pub fn evaluate_pair(pair: &EvalPair) -> MetricReport {
    let (f_w, f_m) = f_measures(pair);
    MetricReport {
        s_measure: s_measure(pair),
        f_weighted: f_w,
        f_mean: f_m,
        e_mean: e_measure(pair),
        mae: mae(pair),
        n_images: 1,
    }
}

/// Unweighted per-image means; errors on an empty set.
pub fn report(pairs: &[EvalPair]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Input("cannot aggregate zero evaluation pairs".into()));
    }
    let mut acc = MetricReport {
        s_measure: 0.0,
        f_weighted: 0.0,
        f_mean: 0.0,
        e_mean: 0.0,
        mae: 0.0,
        n_images: 0,
    };
    for pair in pairs {
        let m = evaluate_pair(pair);
        acc.s_measure += m.s_measure;
        acc.f_weighted += m.f_weighted;
        acc.f_mean += m.f_mean;
        acc.e_mean += m.e_mean;
        acc.mae += m.mae;
        acc.n_images += 1;
    }
    let n = acc.n_images as f64;
    acc.s_measure /= n;
    acc.f_weighted /= n;
    acc.f_mean /= n;
    acc.e_mean /= n;
    acc.mae /= n;
    Ok(acc)
}

/// One row of the foreground-size bucket table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketRow {
    /// Inclusive lower edge of the ground-truth foreground ratio.
    pub lo: f64,
    /// Exclusive upper edge (the last bucket also admits ratio 1.0).
    pub hi: f64,
    pub report: MetricReport,
}

/// Groups images by ground-truth foreground ratio into `[0, interval),
/// [interval, 2*interval), ...` and reports per-bucket means. Only
/// non-empty buckets appear.
pub fn bucket_report(pairs: &[EvalPair], interval: f64) -> Result<Vec<BucketRow>> {
    if !(interval > 0.0 && interval <= 1.0) {
        return Err(Error::Input(format!(
            "bucket interval {interval} must lie in (0,1]"
        )));
    }
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let n_buckets = (1.0 / interval).ceil() as usize;
    let mut grouped: Vec<Vec<&EvalPair>> = vec![Vec::new(); n_buckets];
    for pair in pairs {
        let idx = ((pair.gt_ratio() / interval).floor() as usize).min(n_buckets - 1);
        grouped[idx].push(pair);
    }
    let mut rows = Vec::new();
    for (idx, members) in grouped.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let owned: Vec<EvalPair> = members.iter().map(|p| (*p).clone()).collect();
        rows.push(BucketRow {
            lo: idx as f64 * interval,
            hi: (idx + 1) as f64 * interval,
            report: report(&owned)?,
        });
    }
    Ok(rows)
}
