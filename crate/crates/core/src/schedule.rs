//! Noise schedules, the closed-form forward process and accelerated
//! timestep subsequences.
//!
//! Timesteps are 1-based as in the usual DDPM notation: `alpha_bar_at(t)`
//! for `t >= 1` is `prod_{s=1..t} (1 - beta_s)`, and `alpha_bar_at(0) == 1`
//! marks the clean endpoint.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::LatentGrid;

pub const DEFAULT_T_TRAIN: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas, each strictly inside `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return invalid("schedule needs at least one timestep");
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b < 1.0)) {
            return invalid(format!("beta[{i}] = {b} outside (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if let Some(i) = alpha_bars.iter().position(|&a| a <= 0.0) {
            return invalid(format!("alpha_bar underflows to zero at t = {}", i + 1));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = usize::from(!allow_zero);
        if t < lo || t > self.t_train() {
            return invalid(format!("timestep {t} outside [{lo}, {}]", self.t_train()));
        }
        Ok(())
    }

    /// Cumulative product `ā_t`; `ā_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t, true)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    /// `β_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t, false)?;
        Ok(self.betas[t - 1])
    }

    /// CSV with header `t,beta,alpha_bar`, one row per training timestep.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar\n");
        for (i, (b, a)) in self.betas.iter().zip(&self.alpha_bars).enumerate() {
            out.push_str(&format!("{},{:e},{:e}\n", i + 1, b, a));
        }
        out
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        linear_beta_schedule(DEFAULT_T_TRAIN, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// Betas linearly spaced from `beta_start` to `beta_end`, endpoints included.
pub fn linear_beta_schedule(t_train: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return invalid("t_train must be at least 1");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return invalid(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
    }
    let betas = if t_train == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (t_train - 1) as f64;
        (0..t_train)
            .map(|i| if i == t_train - 1 { beta_end } else { beta_start + step * i as f64 })
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

pub fn alpha_bar_at(sched: &NoiseSchedule, t: usize) -> Result<f64> {
    sched.alpha_bar(t)
}

/// The accelerated timesteps `τ_1 < τ_2 < … < τ_S`, indexed from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSubsequence {
    taus: Vec<usize>,
}

impl TimestepSubsequence {
    pub fn new(taus: Vec<usize>, t_train: usize) -> Result<Self> {
        if taus.is_empty() {
            return invalid("empty timestep subsequence");
        }
        if taus[0] == 0 || *taus.last().unwrap() > t_train {
            return invalid(format!("subsequence must lie in [1, {t_train}]"));
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("subsequence must be strictly increasing");
        }
        Ok(Self { taus })
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    /// `τ_n` for `1 <= n <= S`; `τ_0 = 0` is the clean endpoint.
    pub fn tau(&self, n: usize) -> Result<usize> {
        match n {
            0 => Ok(0),
            n if n <= self.taus.len() => Ok(self.taus[n - 1]),
            _ => invalid(format!("subsequence index {n} outside [0, {}]", self.taus.len())),
        }
    }
}

/// `τ_n = round(n · T / S)` for `n = 1..S`.
pub fn make_subsequence(t_train: usize, s_steps: usize) -> Result<TimestepSubsequence> {
    if s_steps == 0 || s_steps > t_train {
        return invalid(format!("s_steps must be in [1, {t_train}], got {s_steps}"));
    }
    let ratio = t_train as f64 / s_steps as f64;
    let taus = (1..=s_steps).map(|n| (n as f64 * ratio).round() as usize).collect();
    TimestepSubsequence::new(taus, t_train)
}

/// `sqrt(ā_t)·x0 + sqrt(1 − ā_t)·eps`.
pub fn forward_diffuse(x0: &LatentGrid, t: usize, eps: &LatentGrid, sched: &NoiseSchedule) -> Result<LatentGrid> {
    x0.ensure_same_shape(eps, "forward_diffuse x0/eps")?;
    let ab = sched.alpha_bar(t)?;
    x0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Start index `N = clamp(round(fraction · S), 1, S)`.
pub fn start_index_from_fraction(noise_fraction: f64, s_steps: usize) -> Result<usize> {
    if !(noise_fraction > 0.0 && noise_fraction <= 1.0) {
        return invalid(format!("noise fraction must be in (0, 1], got {noise_fraction}"));
    }
    if s_steps == 0 {
        return invalid("s_steps must be positive");
    }
    let n = (noise_fraction * s_steps as f64).round() as usize;
    Ok(n.clamp(1, s_steps))
}
