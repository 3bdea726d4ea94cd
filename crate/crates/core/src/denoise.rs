//! Reverse-process steps and analytic epsilon predictors.
//!
//! No trained network exists here. Sampler arithmetic is exercised with
//! optimal denoisers for known Gaussian and Gaussian-mixture priors, whose
//! posterior means are available in closed form.

use crate::error::{invalid, mismatch, Result};
use crate::grid::LatentGrid;
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, TimestepSubsequence};

/// A noise predictor `ε(z, t)`. Implementations must be safe to call
/// concurrently and must return a finite grid of the input shape.
pub trait EpsilonModel: Send + Sync {
    fn name(&self) -> &str;
    fn eval(&self, z: &LatentGrid, t: usize) -> Result<LatentGrid>;
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroModel;

impl EpsilonModel for ZeroModel {
    fn name(&self) -> &str {
        "zero"
    }

    fn eval(&self, z: &LatentGrid, _t: usize) -> Result<LatentGrid> {
        let (c, h, w) = z.shape();
        LatentGrid::zeros(c, h, w)
    }
}

/// Returns a recorded noise grid regardless of its input.
#[derive(Debug, Clone)]
pub struct ReplayModel {
    noise: LatentGrid,
}

impl ReplayModel {
    pub fn new(noise: LatentGrid) -> Self {
        Self { noise }
    }
}

impl EpsilonModel for ReplayModel {
    fn name(&self) -> &str {
        "replay"
    }

    fn eval(&self, z: &LatentGrid, _t: usize) -> Result<LatentGrid> {
        z.ensure_same_shape(&self.noise, "replay model input")?;
        Ok(self.noise.clone())
    }
}

/// Isotropic Gaussian prior `N(mean, stddev² I)` over whole latent grids.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub mean: LatentGrid,
    pub stddev: f64,
}

impl GaussianPrior {
    pub fn new(mean: LatentGrid, stddev: f64) -> Result<Self> {
        if !(stddev > 0.0 && stddev.is_finite()) {
            return invalid(format!("prior stddev must be positive, got {stddev}"));
        }
        Ok(Self { mean, stddev })
    }

    /// `N(0, I)` with the given shape.
    pub fn standard(shape: (usize, usize, usize)) -> Result<Self> {
        Self::new(LatentGrid::zeros(shape.0, shape.1, shape.2)?, 1.0)
    }

    /// Per-channel means broadcast over space, with the pooled per-channel
    /// standard deviation (floored at `1e-3`).
    pub fn fit_channel_moments(latent: &LatentGrid) -> Result<Self> {
        let (c, h, w) = latent.shape();
        let plane = (h * w) as f64;
        let means: Vec<f64> = latent.data().chunks(h * w).map(|ch| ch.iter().sum::<f64>() / plane).collect();
        let var = latent
            .data()
            .chunks(h * w)
            .zip(&means)
            .map(|(ch, m)| ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / plane)
            .sum::<f64>()
            / c as f64;
        let mean = LatentGrid::from_fn(c, h, w, |ch, _, _| means[ch])?;
        Self::new(mean, var.sqrt().max(1e-3))
    }
}

/// Weighted mixture of isotropic Gaussian priors sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrior {
    weights: Vec<f64>,
    components: Vec<GaussianPrior>,
}

impl MixturePrior {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianPrior>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return invalid("mixture needs one positive weight per component");
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return invalid("mixture weights must be positive");
        }
        if let Some(c) = components.iter().find(|c| !c.mean.same_shape(&components[0].mean)) {
            return mismatch(format!(
                "mixture component shape {:?} vs {:?}",
                c.mean.shape(),
                components[0].mean.shape()
            ));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self { weights, components })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianPrior] {
        &self.components
    }

    /// Deterministic k-means over per-position channel vectors; each cluster
    /// becomes a spatially constant component. Empty clusters are dropped.
    pub fn fit_kmeans(latent: &LatentGrid, k: usize, iterations: usize) -> Result<Self> {
        if k == 0 {
            return invalid("k-means needs k >= 1");
        }
        let (c, h, w) = latent.shape();
        let points: Vec<Vec<f64>> = (0..h * w).map(|p| latent.pixel(p / w, p % w)).collect();
        let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();

        // Farthest-point initialisation starting from the point nearest the mean.
        let centroid: Vec<f64> = (0..c).map(|ch| points.iter().map(|p| p[ch]).sum::<f64>() / points.len() as f64).collect();
        let first = (0..points.len())
            .min_by(|&a, &b| dist2(&points[a], &centroid).total_cmp(&dist2(&points[b], &centroid)))
            .unwrap();
        let mut centers = vec![points[first].clone()];
        while centers.len() < k.min(points.len()) {
            let far = (0..points.len())
                .max_by(|&a, &b| {
                    let da = centers.iter().map(|m| dist2(&points[a], m)).fold(f64::INFINITY, f64::min);
                    let db = centers.iter().map(|m| dist2(&points[b], m)).fold(f64::INFINITY, f64::min);
                    da.total_cmp(&db)
                })
                .unwrap();
            centers.push(points[far].clone());
        }

        let assign = |centers: &[Vec<f64>]| -> Vec<usize> {
            points
                .iter()
                .map(|p| {
                    (0..centers.len())
                        .min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b])))
                        .unwrap()
                })
                .collect()
        };
        let mut labels = assign(&centers);
        for _ in 0..iterations {
            for (j, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
                if !members.is_empty() {
                    for ch in 0..c {
                        center[ch] = members.iter().map(|m| m[ch]).sum::<f64>() / members.len() as f64;
                    }
                }
            }
            let next = assign(&centers);
            if next == labels {
                break;
            }
            labels = next;
        }

        let mut weights = Vec::new();
        let mut components = Vec::new();
        for (j, center) in centers.iter().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let spread = (members.iter().map(|m| dist2(m, center)).sum::<f64>() / (members.len() * c) as f64).sqrt();
            let mean = LatentGrid::from_fn(c, h, w, |ch, _, _| center[ch])?;
            components.push(GaussianPrior::new(mean, spread.max(0.02))?);
            weights.push(members.len() as f64);
        }
        Self::new(weights, components)
    }
}

/// A prior with a closed-form optimal denoiser.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Gaussian(GaussianPrior),
    Mixture(MixturePrior),
}

impl Prior {
    fn shape(&self) -> (usize, usize, usize) {
        match self {
            Prior::Gaussian(g) => g.mean.shape(),
            Prior::Mixture(m) => m.components[0].mean.shape(),
        }
    }
}

/// Optimal noise prediction for `z` at timestep `t` under `prior`.
pub fn oracle_eps(z: &LatentGrid, t: usize, prior: &Prior, sched: &NoiseSchedule) -> Result<LatentGrid> {
    if t == 0 {
        return invalid("oracle_eps needs t >= 1");
    }
    if z.shape() != prior.shape() {
        return mismatch(format!("oracle input {:?} vs prior {:?}", z.shape(), prior.shape()));
    }
    let ab = sched.alpha_bar(t)?;
    let x0 = match prior {
        Prior::Gaussian(g) => gaussian_posterior_mean(z, ab, g)?,
        Prior::Mixture(m) => mixture_posterior_mean(z, ab, m)?,
    };
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    z.zip_map(&x0, |zv, xv| (zv - sa * xv) / sn)
}

fn gaussian_posterior_mean(z: &LatentGrid, ab: f64, g: &GaussianPrior) -> Result<LatentGrid> {
    let s2 = g.stddev * g.stddev;
    let sa = ab.sqrt();
    let gain = sa * s2 / (ab * s2 + 1.0 - ab);
    g.mean.zip_map(z, |m, zv| m + gain * (zv - sa * m))
}

/// Per-position responsibilities `[position][component]` of a mixture for `z` at `ā`.
fn responsibilities(z: &LatentGrid, ab: f64, mix: &MixturePrior) -> Vec<Vec<f64>> {
    let (c, h, w) = z.shape();
    let sa = ab.sqrt();
    let mut out = Vec::with_capacity(h * w);
    let mut logs = vec![0.0; mix.components.len()];
    for y in 0..h {
        for x in 0..w {
            for (k, comp) in mix.components.iter().enumerate() {
                let var = ab * comp.stddev * comp.stddev + 1.0 - ab;
                let sq: f64 = (0..c).map(|ch| (z.get(ch, y, x) - sa * comp.mean.get(ch, y, x)).powi(2)).sum();
                logs[k] = mix.weights[k].ln() - 0.5 * c as f64 * var.ln() - sq / (2.0 * var);
            }
            let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logs.iter().map(|l| (l - peak).exp()).sum();
            out.push(logs.iter().map(|l| (l - peak).exp() / total).collect());
        }
    }
    out
}

/// Mixture responsibilities at every position for `z` at timestep `t`.
pub fn mixture_responsibilities(
    z: &LatentGrid,
    t: usize,
    mix: &MixturePrior,
    sched: &NoiseSchedule,
) -> Result<Vec<Vec<f64>>> {
    if z.shape() != mix.components[0].mean.shape() {
        return mismatch("responsibilities: input shape differs from prior");
    }
    Ok(responsibilities(z, sched.alpha_bar(t)?, mix))
}

fn mixture_posterior_mean(z: &LatentGrid, ab: f64, mix: &MixturePrior) -> Result<LatentGrid> {
    let (c, h, w) = z.shape();
    let resp = responsibilities(z, ab, mix);
    let means: Vec<LatentGrid> =
        mix.components.iter().map(|comp| gaussian_posterior_mean(z, ab, comp)).collect::<Result<_>>()?;
    LatentGrid::from_fn(c, h, w, |ch, y, x| {
        let r = &resp[y * w + x];
        means.iter().zip(r).map(|(m, rk)| rk * m.get(ch, y, x)).sum()
    })
}

/// Analytic optimal denoiser for a known prior.
#[derive(Debug, Clone)]
pub struct OracleModel {
    prior: Prior,
    schedule: NoiseSchedule,
}

impl OracleModel {
    pub fn new(prior: Prior, schedule: NoiseSchedule) -> Self {
        Self { prior, schedule }
    }

    /// Oracle for `N(0, I)`, for which `ε(z, t) = sqrt(1 − ā_t)·z`.
    pub fn standard_normal(shape: (usize, usize, usize), schedule: NoiseSchedule) -> Result<Self> {
        Ok(Self::new(Prior::Gaussian(GaussianPrior::standard(shape)?), schedule))
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }
}

impl EpsilonModel for OracleModel {
    fn name(&self) -> &str {
        match self.prior {
            Prior::Gaussian(_) => "gaussian-oracle",
            Prior::Mixture(_) => "mixture-oracle",
        }
    }

    fn eval(&self, z: &LatentGrid, t: usize) -> Result<LatentGrid> {
        oracle_eps(z, t, &self.prior, &self.schedule)
    }
}

/// `(z − sqrt(1 − ā)·eps) / sqrt(ā)`.
pub fn x0_from_eps(z: &LatentGrid, eps: &LatentGrid, alpha_bar: f64) -> Result<LatentGrid> {
    let (sn, sa) = ((1.0 - alpha_bar).sqrt(), alpha_bar.sqrt());
    z.zip_map(eps, |zv, ev| (zv - sn * ev) / sa)
}

fn check_model_output(z: &LatentGrid, eps: &LatentGrid, model: &dyn EpsilonModel) -> Result<()> {
    if !z.same_shape(eps) {
        return mismatch(format!(
            "model `{}` returned {:?} for input {:?}",
            model.name(),
            eps.shape(),
            z.shape()
        ));
    }
    Ok(())
}

pub(crate) fn eval_checked(model: &dyn EpsilonModel, z: &LatentGrid, t: usize) -> Result<LatentGrid> {
    let eps = model.eval(z, t)?;
    check_model_output(z, &eps, model)?;
    Ok(eps)
}

/// Predicted clean latent `f(z, t)`.
pub fn predict_x0(z: &LatentGrid, t: usize, model: &dyn EpsilonModel, sched: &NoiseSchedule) -> Result<LatentGrid> {
    if t == 0 {
        return invalid("predict_x0 needs t >= 1");
    }
    let ab = sched.alpha_bar(t)?;
    let eps = eval_checked(model, z, t)?;
    x0_from_eps(z, &eps, ab)
}

/// One deterministic DDIM move from `t_from` down to `t_to` (`t_to = 0` is the clean endpoint).
pub fn ddim_step(
    z: &LatentGrid,
    t_from: usize,
    t_to: usize,
    model: &dyn EpsilonModel,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    if !(t_to < t_from && t_from <= sched.t_train()) {
        return invalid(format!("ddim_step needs 0 <= t_to < t_from <= T, got {t_from} -> {t_to}"));
    }
    let eps = eval_checked(model, z, t_from)?;
    let x0 = x0_from_eps(z, &eps, sched.alpha_bar(t_from)?)?;
    ddim_recombine(&x0, &eps, sched.alpha_bar(t_to)?)
}

/// `sqrt(ā_to)·x0 + sqrt(1 − ā_to)·eps`.
pub(crate) fn ddim_recombine(x0: &LatentGrid, eps: &LatentGrid, alpha_bar_to: f64) -> Result<LatentGrid> {
    x0.lincomb(alpha_bar_to.sqrt(), eps, (1.0 - alpha_bar_to).sqrt())
}

/// Ancestral DDPM step with `σ_t = sqrt(β_t)` and `σ_1 = 0` (no draw at `t = 1`).
pub fn ddpm_step(
    x: &LatentGrid,
    t: usize,
    model: &dyn EpsilonModel,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<LatentGrid> {
    let beta = sched.beta(t)?;
    let ab = sched.alpha_bar(t)?;
    let eps = eval_checked(model, x, t)?;
    let coef = beta / (1.0 - ab).sqrt();
    let scale = 1.0 / (1.0 - beta).sqrt();
    let mean = x.zip_map(&eps, |xv, ev| (xv - coef * ev) * scale)?;
    if t == 1 {
        return Ok(mean);
    }
    let noise = rng.gaussian(x.shape())?;
    mean.lincomb(1.0, &noise, beta.sqrt())
}

/// Plain DDIM from `z` at `τ_start` down the subsequence to the clean endpoint.
pub fn ddim_sample_from(
    z: &LatentGrid,
    start_n: usize,
    subseq: &TimestepSubsequence,
    model: &dyn EpsilonModel,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    if start_n == 0 || start_n > subseq.len() {
        return invalid(format!("start index {start_n} outside [1, {}]", subseq.len()));
    }
    let mut cur = z.clone();
    for n in (1..=start_n).rev() {
        cur = ddim_step(&cur, subseq.tau(n)?, subseq.tau(n - 1)?, model, sched)?;
    }
    Ok(cur)
}

/// Closed-form gain of a full DDIM pass under the `N(0, I)` oracle:
/// `Π_n sqrt(ā_{τ_{n−1}} ā_{τ_n}) + sqrt((1 − ā_{τ_{n−1}})(1 − ā_{τ_n}))`.
pub fn standard_normal_contraction(subseq: &TimestepSubsequence, start_n: usize, sched: &NoiseSchedule) -> Result<f64> {
    let mut gain = 1.0;
    for n in (1..=start_n).rev() {
        let a_from = sched.alpha_bar(subseq.tau(n)?)?;
        let a_to = sched.alpha_bar(subseq.tau(n - 1)?)?;
        gain *= (a_to * a_from).sqrt() + ((1.0 - a_to) * (1.0 - a_from)).sqrt();
    }
    Ok(gain)
}
