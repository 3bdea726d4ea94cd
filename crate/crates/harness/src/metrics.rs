//! Toy quality metrics: structural edge agreement, colour histogram distance
//! and correspondence endpoint error.

use midm_core::grid::RgbImage;
use midm_core::matching::FlowField;
use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub edge_f1: f64,
    pub color_hist_l1: f64,
    /// Median endpoint error in latent pixels; absent without a ground-truth flow.
    pub flow_epe_median: Option<f64>,
}

fn luma_plane(img: &RgbImage) -> Vec<f64> {
    (0..img.height()).flat_map(|y| (0..img.width()).map(move |x| img.luma(y, x))).collect()
}

/// Sobel gradient magnitude with edge-replicated borders.
pub fn sobel_magnitude(img: &RgbImage) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let l = luma_plane(img);
    let at = |y: i64, x: i64| l[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let right = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1);
            let left = at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1);
            let below = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1);
            let above = at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1);
            let (gx, gy) = (right - left, below - above);
            out.push(gx.hypot(gy));
        }
    }
    out
}

/// Otsu threshold over a 256-bin histogram spanning `[0, max]`.
/// Values strictly above the returned threshold are foreground.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    const BINS: usize = 256;
    let bin = |v: f64| ((v / max * BINS as f64) as usize).min(BINS - 1);
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[bin(v)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0usize, -1.0);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = i;
        }
    }
    // upper edge of the last background bin
    (best + 1) as f64 * max / BINS as f64
}

/// Binary edge map of an image: Sobel magnitude above its Otsu threshold.
pub fn edge_map(img: &RgbImage) -> Vec<bool> {
    let mag = sobel_magnitude(img);
    let t = otsu_threshold(&mag);
    mag.iter().map(|&m| m > t).collect()
}

fn dilate(map: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if map[y * w + x] {
                for ny in y.saturating_sub(1)..(y + 2).min(h) {
                    for nx in x.saturating_sub(1)..(x + 2).min(w) {
                        out[ny * w + nx] = true;
                    }
                }
            }
        }
    }
    out
}

/// F1 between the output's edge map and the condition's edge pixels, each
/// side matched against the other's 1-pixel dilation.
pub fn metric_edge_f1(output: &RgbImage, condition: &RgbImage) -> Result<f64> {
    output.ensure_same_dims(condition, "edge_f1")?;
    let (h, w) = (output.height(), output.width());
    let predicted = edge_map(output);
    let truth: Vec<bool> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| condition.luma(y, x) > 127.5).collect();
    let n_pred = predicted.iter().filter(|&&p| p).count();
    let n_truth = truth.iter().filter(|&&t| t).count();
    if n_pred == 0 || n_truth == 0 {
        return Ok(0.0);
    }
    let (truth_d, pred_d) = (dilate(&truth, h, w), dilate(&predicted, h, w));
    let tp_pred = predicted.iter().zip(&truth_d).filter(|(&p, &t)| p && t).count();
    let tp_truth = truth.iter().zip(&pred_d).filter(|(&t, &p)| t && p).count();
    let precision = tp_pred as f64 / n_pred as f64;
    let recall = tp_truth as f64 / n_truth as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

fn channel_hist(img: &RgbImage, c: usize) -> [f64; 8] {
    let mut hist = [0.0; 8];
    for px in img.data().chunks_exact(3) {
        hist[(px[c] / 32) as usize] += 1.0;
    }
    let n = (img.width() * img.height()) as f64;
    hist.map(|v| v / n)
}

/// Mean over channels of the L1 distance between 8-bin normalised histograms.
/// Images may differ in size.
pub fn metric_color_hist(output: &RgbImage, exemplar: &RgbImage) -> f64 {
    (0..3)
        .map(|c| channel_hist(output, c).iter().zip(channel_hist(exemplar, c)).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum::<f64>()
        / 3.0
}

/// Median endpoint error over selected positions (`None` if nothing is selected).
pub fn flow_epe_median(estimate: &FlowField, truth: &FlowField, select: &[bool]) -> Result<Option<f64>> {
    let errors = estimate.endpoint_errors(truth, select)?;
    Ok(median(errors))
}

pub fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 { values[m] } else { 0.5 * (values[m - 1] + values[m]) })
}
