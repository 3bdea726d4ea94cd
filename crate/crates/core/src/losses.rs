//! Training objectives as plain scalar functions, plus a central-difference
//! gradient checker. There is no training loop here; the losses are
//! evaluated on sampler outputs and fixtures.
//!
//! L1 reductions are means over elements. Loss weights are applied by the
//! caller.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::grid::{l2_normalize_vectors, FeatureGrid, LatentGrid, RgbImage};

/// Multi-level image features `φ_l`.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn levels(&self, img: &RgbImage) -> Result<Vec<FeatureGrid>>;
}

/// Handcrafted pyramid: at each level the previous intensity plane is
/// 3×3 box-blurred and 2×2 average-pooled; features are the intensity
/// (luma scaled to `[0, 1]`) and its central-difference gradient magnitude.
#[derive(Debug, Clone, Copy)]
pub struct PyramidExtractor {
    pub levels: usize,
}

impl Default for PyramidExtractor {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, y: isize, x: isize) -> f64 {
        let yy = y.clamp(0, self.h as isize - 1) as usize;
        let xx = x.clamp(0, self.w as isize - 1) as usize;
        self.v[yy * self.w + xx]
    }

    fn box_blur(&self) -> Plane {
        let mut v = Vec::with_capacity(self.v.len());
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let mut s = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        s += self.at(y + dy, x + dx);
                    }
                }
                v.push(s / 9.0);
            }
        }
        Plane { h: self.h, w: self.w, v }
    }

    fn pool2(&self) -> Plane {
        let (h, w) = ((self.h / 2).max(1), (self.w / 2).max(1));
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    s += self.at((2 * y + dy) as isize, (2 * x + dx) as isize);
                }
                v.push(s / 4.0);
            }
        }
        Plane { h, w, v }
    }

    fn gradient_magnitude(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.v.len());
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let gx = (self.at(y, x + 1) - self.at(y, x - 1)) / 2.0;
                let gy = (self.at(y + 1, x) - self.at(y - 1, x)) / 2.0;
                out.push((gx * gx + gy * gy).sqrt());
            }
        }
        out
    }
}

impl FeatureExtractor for PyramidExtractor {
    fn name(&self) -> &str {
        "pyramid"
    }

    fn levels(&self, img: &RgbImage) -> Result<Vec<FeatureGrid>> {
        if self.levels == 0 {
            return invalid("pyramid needs at least one level");
        }
        let (h, w) = (img.height(), img.width());
        let mut plane = Plane { h, w, v: (0..h * w).map(|p| img.luma(p / w, p % w) / 255.0).collect() };
        let mut out = Vec::with_capacity(self.levels);
        for _ in 0..self.levels {
            plane = plane.box_blur().pool2();
            let mut data = plane.v.clone();
            data.extend(plane.gradient_magnitude());
            out.push(FeatureGrid::new(2, plane.h, plane.w, data)?);
        }
        Ok(out)
    }
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Domain-alignment loss: mean absolute difference of two feature grids.
pub fn loss_dom(s_x_gt: &FeatureGrid, s_x: &FeatureGrid) -> Result<f64> {
    s_x_gt.ensure_same_shape(s_x, "loss_dom")?;
    Ok(mean_abs_diff(s_x_gt.data(), s_x.data()))
}

/// Gradient of [`loss_dom`] with respect to its second argument (ties get 0).
pub fn loss_dom_grad(s_x_gt: &FeatureGrid, s_x: &FeatureGrid) -> Result<FeatureGrid> {
    s_x_gt.ensure_same_shape(s_x, "loss_dom_grad")?;
    let n = s_x.data().len() as f64;
    let data = s_x.data().iter().zip(s_x_gt.data()).map(|(x, t)| sign(x - t) / n).collect();
    FeatureGrid::new(s_x.dim(), s_x.height(), s_x.width(), data)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Cycle loss: sum over steps of the mean absolute difference between each
/// cyclic-warped exemplar and the exemplar latent.
pub fn loss_cycle(cyclic_warps: &[LatentGrid], d_y: &LatentGrid) -> Result<f64> {
    cyclic_warps.iter().try_fold(0.0, |acc, r| {
        r.ensure_same_shape(d_y, "loss_cycle")?;
        Ok(acc + mean_abs_diff(r.data(), d_y.data()))
    })
}

/// `Σ_l mean |φ_l(a) − φ_l(b)|`.
fn pyramid_l1(a: &RgbImage, b: &RgbImage, phi: &dyn FeatureExtractor) -> Result<f64> {
    a.ensure_same_dims(b, "feature loss")?;
    let (fa, fb) = (phi.levels(a)?, phi.levels(b)?);
    if fa.len() != fb.len() {
        return mismatch("feature extractor returned different level counts");
    }
    fa.iter().zip(&fb).try_fold(0.0, |acc, (x, y)| {
        x.ensure_same_shape(y, "feature level")?;
        Ok(acc + mean_abs_diff(x.data(), y.data()))
    })
}

/// Source-condition loss between the self-warped image and the ground truth.
pub fn loss_src(i_warp_self: &RgbImage, i_x_gt: &RgbImage, phi: &dyn FeatureExtractor) -> Result<f64> {
    pyramid_l1(i_warp_self, i_x_gt, phi)
}

/// Perceptual loss between the output and the ground truth.
pub fn loss_perc(i_out: &RgbImage, i_x_gt: &RgbImage, phi: &dyn FeatureExtractor) -> Result<f64> {
    pyramid_l1(i_out, i_x_gt, phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextualConfig {
    /// Bandwidth `h` of the normalised exponential.
    pub bandwidth: f64,
    pub epsilon: f64,
}

impl Default for ContextualConfig {
    fn default() -> Self {
        Self { bandwidth: 0.5, epsilon: 1e-5 }
    }
}

/// Contextual similarity `CX(X, Y) = mean_j max_i CX_ij` between two sets
/// of feature vectors, with cosine distances, relative normalisation by
/// `min_k d_ik + ε` and row-normalised exponential affinities.
pub fn contextual_similarity(x: &FeatureGrid, y: &FeatureGrid, cx: &ContextualConfig) -> Result<f64> {
    if !(cx.bandwidth > 0.0) {
        return invalid("contextual bandwidth must be positive");
    }
    if x.dim() != y.dim() {
        return mismatch(format!("contextual features: dims {} vs {}", x.dim(), y.dim()));
    }
    let xs = l2_normalize_vectors(x).vectors();
    let ys = l2_normalize_vectors(y).vectors();
    let mut best = vec![0.0f64; ys.len()];
    let mut d = vec![0.0; ys.len()];
    for xi in &xs {
        for (dj, yj) in d.iter_mut().zip(&ys) {
            *dj = 1.0 - xi.iter().zip(yj).map(|(a, b)| a * b).sum::<f64>();
        }
        let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = d.iter().map(|dj| ((1.0 - dj / (dmin + cx.epsilon)) / cx.bandwidth).exp()).collect();
        let total: f64 = w.iter().sum();
        for (b, wj) in best.iter_mut().zip(&w) {
            *b = b.max(wj / total);
        }
    }
    Ok(best.iter().sum::<f64>() / best.len() as f64)
}

/// Style loss `−log(mean_l CX(φ_l(out), φ_l(exemplar)))`.
pub fn loss_style_contextual(
    i_out: &RgbImage,
    i_y: &RgbImage,
    phi: &dyn FeatureExtractor,
    cx: &ContextualConfig,
) -> Result<f64> {
    let (fa, fb) = (phi.levels(i_out)?, phi.levels(i_y)?);
    if fa.is_empty() || fa.len() != fb.len() {
        return invalid("contextual loss needs the same non-zero number of levels for both images");
    }
    let total = fa.iter().zip(&fb).try_fold(0.0, |acc, (a, b)| Ok::<_, crate::error::MidmError>(acc + contextual_similarity(a, b, cx)?))?;
    Ok(-(total / fa.len() as f64).ln())
}

/// How each noise-prediction error is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffReduction {
    /// Mean squared error per pair.
    #[default]
    MeanSquared,
    /// Unsquared Euclidean norm per pair.
    Norm,
}

/// Diffusion loss summed over steps, mean squared error per step.
pub fn loss_diff(eps_preds: &[LatentGrid], eps_targets: &[LatentGrid]) -> Result<f64> {
    loss_diff_with(eps_preds, eps_targets, DiffReduction::MeanSquared)
}

pub fn loss_diff_with(eps_preds: &[LatentGrid], eps_targets: &[LatentGrid], reduction: DiffReduction) -> Result<f64> {
    if eps_preds.len() != eps_targets.len() {
        return mismatch(format!("{} predictions vs {} targets", eps_preds.len(), eps_targets.len()));
    }
    eps_preds.iter().zip(eps_targets).try_fold(0.0, |acc, (p, t)| {
        p.ensure_same_shape(t, "loss_diff")?;
        let sq: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum();
        Ok(acc
            + match reduction {
                DiffReduction::MeanSquared => sq / p.len() as f64,
                DiffReduction::Norm => sq.sqrt(),
            })
    })
}

/// Gradient of the mean-squared [`loss_diff`] term for one pair, with respect to the prediction.
pub fn loss_diff_grad(eps_pred: &LatentGrid, eps_target: &LatentGrid) -> Result<LatentGrid> {
    let n = eps_pred.len() as f64;
    eps_pred.zip_map(eps_target, |p, t| 2.0 * (p - t) / n)
}

/// Largest number of coordinates [`fd_grad_check`] will perturb.
pub const FD_MAX_ELEMENTS: usize = 64;

/// Compares `analytic` with central differences of `f` at `x`; returns the
/// maximum of `|fd − g| / max(|g|, 1e-8)` over coordinates.
pub fn fd_grad_check(f: &dyn Fn(&LatentGrid) -> f64, analytic: &LatentGrid, x: &LatentGrid, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return invalid(format!("finite-difference step must be positive, got {step}"));
    }
    x.ensure_same_shape(analytic, "fd_grad_check")?;
    if x.len() > FD_MAX_ELEMENTS {
        return invalid(format!("fd_grad_check supports at most {FD_MAX_ELEMENTS} elements, got {}", x.len()));
    }
    let (c, h, w) = x.shape();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let shifted = |delta: f64| {
            let mut d = x.data().to_vec();
            d[i] += delta;
            LatentGrid::new(c, h, w, d)
        };
        let fd = (f(&shifted(step)?) - f(&shifted(-step)?)) / (2.0 * step);
        let g = analytic.data()[i];
        worst = worst.max((fd - g).abs() / g.abs().max(1e-8));
    }
    Ok(worst)
}

/// Loss weights, defaulting to the published values (`λ_perc = 0.002`,
/// `λ_dom = 10`, all others 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub perc: f64,
    pub src: f64,
    pub style: f64,
    pub cycle: f64,
    pub dom: f64,
    pub diff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { perc: 0.002, src: 1.0, style: 1.0, cycle: 1.0, dom: 10.0, diff: 1.0 }
    }
}

/// One value per objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub dom: f64,
    pub cycle: f64,
    pub src: f64,
    pub perc: f64,
    pub style: f64,
    pub diff: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(dom: f64, cycle: f64, src: f64, perc: f64, style: f64, diff: f64, weights: &LossWeights) -> Self {
        let total = weights.dom * dom
            + weights.cycle * cycle
            + weights.src * src
            + weights.perc * perc
            + weights.style * style
            + weights.diff * diff;
        Self { dom, cycle, src, perc, style, diff, total }
    }
}
