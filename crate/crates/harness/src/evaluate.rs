//! Oracle self-check and loss evaluation on a fixture pair.

use std::time::{Duration, Instant};

use midm_core::denoise::{ddim_sample_from, standard_normal_contraction, OracleModel};
use midm_core::grid::RgbImage;
use midm_core::losses::{
    loss_cycle, loss_diff, loss_dom, loss_perc, loss_src, loss_style_contextual, ContextualConfig, LossReport,
    LossWeights,
};
use midm_core::matching::{correlation_map, soft_warp};
use midm_core::midm::{LatentCodec, MidmConfig};
use midm_core::registry::feature_extractors;
use midm_core::rng::Rng;
use midm_core::schedule::{forward_diffuse, linear_beta_schedule, make_subsequence};

use crate::config::Strategies;
use crate::error::Result;
use crate::run::Pipeline;

#[derive(Debug, Clone, Copy)]
pub struct OracleCheck {
    pub max_relative_error: f64,
    pub gain: f64,
    pub elapsed: Duration,
}

/// Full `(1000, 16)` DDIM pass under the standard-normal oracle compared
/// with its closed-form gain.
pub fn oracle_check(seed: u64) -> Result<OracleCheck> {
    let start = Instant::now();
    let sched = linear_beta_schedule(1000, 1e-4, 0.02)?;
    let subseq = make_subsequence(1000, 16)?;
    let z = Rng::new(seed).gaussian((3, 16, 16))?;
    let oracle = OracleModel::standard_normal(z.shape(), sched.clone())?;
    let out = ddim_sample_from(&z, 16, &subseq, &oracle, &sched)?;
    let gain = standard_normal_contraction(&subseq, 16, &sched)?;
    let max_relative_error =
        out.data().iter().zip(z.data()).map(|(o, v)| ((o - gain * v) / (gain * v)).abs()).fold(0.0, f64::max);
    Ok(OracleCheck { max_relative_error, gain, elapsed: start.elapsed() })
}

/// All six objectives for one sampling run on `(condition, exemplar)` with
/// the paired ground truth. Diffusion targets are fresh noise draws on the
/// ground-truth latent at every executed step.
pub fn evaluate_losses(
    cfg: &MidmConfig,
    condition: &RgbImage,
    exemplar: &RgbImage,
    ground_truth: &RgbImage,
    strategies: &Strategies,
) -> Result<LossReport> {
    condition.ensure_same_dims(ground_truth, "condition vs ground truth")?;
    let pipe = Pipeline::new(cfg, condition, exemplar, strategies)?;
    let (image, trace) = pipe.sample(cfg)?;
    let d_gt = pipe.codec.encode(ground_truth)?;
    let phi = feature_extractors();
    let phi = phi.get("pyramid")?;

    let s_x = pipe.encoder.condition_features(&pipe.d_x)?;
    let s_gt = pipe.encoder.exemplar_features(&d_gt)?;
    let dom = loss_dom(&s_gt, &s_x)?;

    let cyclic: Vec<_> = trace.iterations.iter().map(|it| it.cyclic_warp.clone()).collect();
    let cycle = loss_cycle(&cyclic, &pipe.d_y)?;

    let self_warp = soft_warp(&correlation_map(&s_x, &s_gt)?, &d_gt, cfg.temperature)?;
    let src = loss_src(&pipe.codec.decode(&self_warp)?, ground_truth, phi)?;
    let perc = loss_perc(&image, ground_truth, phi)?;
    let style = loss_style_contextual(&image, exemplar, phi, &ContextualConfig::default())?;

    let sched = cfg.schedule()?;
    let mut rng = Rng::new(cfg.seed);
    let (mut preds, mut targets) = (Vec::new(), Vec::new());
    for it in &trace.iterations {
        let eps = rng.gaussian(d_gt.shape())?;
        let noisy = forward_diffuse(&d_gt, it.tau_n, &eps, &sched)?;
        preds.push(pipe.model.eval(&noisy, it.tau_n)?);
        targets.push(eps);
    }
    let diff = loss_diff(&preds, &targets)?;
    Ok(LossReport::new(dom, cycle, src, perc, style, diff, &LossWeights::default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::gen_synthetic_pair;

    #[test]
    fn oracle_contraction_holds() {
        let c = oracle_check(3).unwrap();
        assert!(c.max_relative_error < 1e-9, "{}", c.max_relative_error);
        assert!(c.gain > 0.0 && c.gain.is_finite());
    }

    #[test]
    fn losses_are_finite_and_non_negative() {
        let p = gen_synthetic_pair(0, (32, 32), 2, 4).unwrap();
        let r = evaluate_losses(&MidmConfig::default(), &p.condition, &p.exemplar, &p.ground_truth, &Strategies::default())
            .unwrap();
        for v in [r.dom, r.cycle, r.src, r.perc, r.style, r.diff, r.total] {
            assert!(v.is_finite() && v >= 0.0, "{r:?}");
        }
        let w = LossWeights::default();
        let total = w.dom * r.dom + w.cycle * r.cycle + w.src * r.src + w.perc * r.perc + w.style * r.style + w.diff * r.diff;
        assert!((r.total - total).abs() < 1e-12);
    }
}
