//! The interleaved matching-and-denoising sampler.
//!
//! The exemplar latent is softly warped onto the condition, noised to `τ_N`,
//! and then walked down the DDIM subsequence. At every step `n = N..2` the
//! clean prediction `r̃ⁿ` is re-matched against the exemplar, the rewarped
//! exemplar replaces `r̃ⁿ` wherever the cycle-consistency mask is confident,
//! and the blend is returned to the trajectory at `τ_{n−1}`. The last step is
//! a plain clean prediction from `τ_1`.

use serde::{Deserialize, Serialize};

use crate::denoise::{ddim_recombine, ddim_sample_from, eval_checked, predict_x0, x0_from_eps, EpsilonModel};
use crate::error::{invalid, mismatch, Result};
use crate::grid::{LatentGrid, RgbImage};
use crate::matching::{
    correlation_map, cycle_mask_from_flows, soft_argmax_flow, soft_warp, ConfidenceMask, CorrelationMap,
    CorrespondenceEncoder, DescriptorConfig, FlowField,
};
use crate::rng::Rng;
use crate::schedule::{
    forward_diffuse, linear_beta_schedule, make_subsequence, start_index_from_fraction, NoiseSchedule,
    TimestepSubsequence, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T_TRAIN,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenoiseConfig {
    pub enabled: bool,
    pub fraction: f64,
}

impl Default for RenoiseConfig {
    fn default() -> Self {
        Self { enabled: true, fraction: 0.10 }
    }
}

/// Every sampler hyperparameter. Serialises to the JSON run-config layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MidmConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Length `S` of the accelerated subsequence.
    pub s_steps: usize,
    /// Start index `N` as a fraction of `S`.
    pub noise_fraction: f64,
    pub temperature: f64,
    /// Squared cycle distance threshold, latent pixels².
    pub gamma: f64,
    pub skip_last_warp: bool,
    pub renoise_refine: RenoiseConfig,
    pub seed: u64,
    pub descriptor: DescriptorConfig,
}

impl Default for MidmConfig {
    fn default() -> Self {
        Self {
            t_train: DEFAULT_T_TRAIN,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            s_steps: 16,
            noise_fraction: 0.25,
            temperature: 0.01,
            gamma: 0.3,
            skip_last_warp: true,
            renoise_refine: RenoiseConfig::default(),
            seed: 0,
            descriptor: DescriptorConfig::default(),
        }
    }
}

impl MidmConfig {
    /// Long sampling profile: `S = 200`, `N = 50`.
    pub fn sampling_profile() -> Self {
        Self { s_steps: 200, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_steps < 2 || self.s_steps > self.t_train {
            return invalid(format!("s_steps must be in [2, t_train], got {}", self.s_steps));
        }
        if !(self.noise_fraction > 0.0 && self.noise_fraction <= 1.0) {
            return invalid(format!("noise_fraction must be in (0, 1], got {}", self.noise_fraction));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return invalid(format!("temperature must be positive, got {}", self.temperature));
        }
        // γ = 0 is the never-rewarp limit.
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return invalid(format!("gamma must be non-negative, got {}", self.gamma));
        }
        let rf = self.renoise_refine.fraction;
        if self.renoise_refine.enabled && !(rf > 0.0 && rf < self.noise_fraction) {
            return invalid(format!("renoise fraction must be in (0, noise_fraction), got {rf}"));
        }
        self.descriptor.validate()?;
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        linear_beta_schedule(self.t_train, self.beta_start, self.beta_end)
    }

    pub fn subsequence(&self) -> Result<TimestepSubsequence> {
        make_subsequence(self.t_train, self.s_steps)
    }

    pub fn start_index(&self) -> Result<usize> {
        start_index_from_fraction(self.noise_fraction, self.s_steps)
    }
}

/// Maps images to latent grids and back.
pub trait LatentCodec: Send + Sync {
    fn encode(&self, img: &RgbImage) -> Result<LatentGrid>;
    fn decode(&self, z: &LatentGrid) -> Result<RgbImage>;
}

#[derive(Debug, Clone)]
pub struct InitialWarp {
    pub warped: LatentGrid,
    pub correlation: CorrelationMap,
}

/// `R = warp(C(F_X(d_x), F_Y(d_y)), d_y)`.
pub fn initial_warp(
    d_x: &LatentGrid,
    d_y: &LatentGrid,
    temperature: f64,
    encoder: &dyn CorrespondenceEncoder,
) -> Result<InitialWarp> {
    if d_x.spatial() != d_y.spatial() {
        return mismatch(format!("initial_warp: {:?} vs {:?}", d_x.spatial(), d_y.spatial()));
    }
    let s_x = encoder.condition_features(d_x)?;
    let s_y = encoder.exemplar_features(d_y)?;
    let correlation = correlation_map(&s_x, &s_y)?;
    let warped = soft_warp(&correlation, d_y, temperature)?;
    Ok(InitialWarp { warped, correlation })
}

/// Everything one interleaved step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub n: usize,
    pub tau_n: usize,
    pub r_n: LatentGrid,
    /// Clean prediction `r̃ⁿ`.
    pub r_tilde: LatentGrid,
    /// Noise prediction `ε(rⁿ, τ_n)`.
    pub eps: LatentGrid,
    /// Exemplar rewarped through the iteration correlation.
    pub warped: LatentGrid,
    /// `warped` sent back to the exemplar frame through the reverse map.
    pub cyclic_warp: LatentGrid,
    pub mask: ConfidenceMask,
    pub mask_coverage: f64,
    /// Soft-argmax correspondence (condition → exemplar) of this step.
    pub flow: FlowField,
    pub r_prev: LatentGrid,
}

/// Inputs fixed for a whole sampling run.
pub struct IterationContext<'a> {
    pub d_x: &'a LatentGrid,
    pub d_y: &'a LatentGrid,
    /// Cached exemplar features for the iteration correlation.
    pub s_y: &'a crate::grid::FeatureGrid,
    pub model: &'a dyn EpsilonModel,
    pub encoder: &'a dyn CorrespondenceEncoder,
    pub sched: &'a NoiseSchedule,
    pub subseq: &'a TimestepSubsequence,
    pub temperature: f64,
    pub gamma: f64,
}

/// One interleaved matching-and-denoising step from `rⁿ` to `rⁿ⁻¹`.
/// `suppress_warp` forces an all-false mask (plain DDIM step).
pub fn midm_iteration(r_n: &LatentGrid, n: usize, ctx: &IterationContext<'_>, suppress_warp: bool) -> Result<IterationRecord> {
    if n < 2 || n > ctx.subseq.len() {
        return invalid(format!("iteration index {n} outside [2, {}]", ctx.subseq.len()));
    }
    if !r_n.same_shape(ctx.d_y) {
        return mismatch(format!("iteration latent {:?} vs exemplar {:?}", r_n.shape(), ctx.d_y.shape()));
    }
    let tau_n = ctx.subseq.tau(n)?;
    let tau_prev = ctx.subseq.tau(n - 1)?;
    let eps = eval_checked(ctx.model, r_n, tau_n)?;
    let r_tilde = x0_from_eps(r_n, &eps, ctx.sched.alpha_bar(tau_n)?)?;

    let s_iter = ctx.encoder.iteration_features(&r_tilde, ctx.d_x)?;
    let c_iter = correlation_map(&s_iter, ctx.s_y)?;
    let c_back = c_iter.transpose();
    let warped = soft_warp(&c_iter, ctx.d_y, ctx.temperature)?;
    let cyclic_warp = soft_warp(&c_back, &warped, ctx.temperature)?;
    let flow = soft_argmax_flow(&c_iter, ctx.temperature)?;
    let (h, w) = r_n.spatial();
    let mask = if suppress_warp {
        ConfidenceMask::uniform(h, w, false)
    } else {
        let back_flow = soft_argmax_flow(&c_back, ctx.temperature)?;
        cycle_mask_from_flows(&flow, &back_flow, ctx.gamma)?
    };

    let blended = masked_blend(&mask, &warped, &r_tilde)?;
    let r_prev = ddim_recombine(&blended, &eps, ctx.sched.alpha_bar(tau_prev)?)?;
    Ok(IterationRecord {
        n,
        tau_n,
        r_n: r_n.clone(),
        r_tilde,
        eps,
        warped,
        cyclic_warp,
        mask_coverage: mask.coverage(),
        mask,
        flow,
        r_prev,
    })
}

/// `M ⊙ warped + (1 − M) ⊙ fallback`, one mask bit per position across all channels.
pub fn masked_blend(mask: &ConfidenceMask, warped: &LatentGrid, fallback: &LatentGrid) -> Result<LatentGrid> {
    warped.ensure_same_shape(fallback, "masked_blend")?;
    if (mask.height(), mask.width()) != warped.spatial() {
        return mismatch("masked_blend: mask and grid dimensions differ");
    }
    let (c, h, w) = warped.shape();
    LatentGrid::from_fn(c, h, w, |ch, y, x| if mask.get(y, x) { warped.get(ch, y, x) } else { fallback.get(ch, y, x) })
}

/// Re-noises a clean latent to `τ_{n_r}` and runs plain DDIM back down.
pub fn refine_with_renoise(
    r0: &LatentGrid,
    model: &dyn EpsilonModel,
    fraction: f64,
    subseq: &TimestepSubsequence,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<LatentGrid> {
    if !(0.0..1.0).contains(&fraction) {
        return invalid(format!("renoise fraction must be in [0, 1), got {fraction}"));
    }
    if fraction == 0.0 {
        return Ok(r0.clone());
    }
    let n_r = start_index_from_fraction(fraction, subseq.len())?;
    let eps = rng.gaussian(r0.shape())?;
    let noisy = forward_diffuse(r0, subseq.tau(n_r)?, &eps, sched)?;
    ddim_sample_from(&noisy, n_r, subseq, model, sched)
}

/// Full record of one sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct MidmTrace {
    pub start_index: usize,
    pub taus: Vec<usize>,
    pub initial_warp: LatentGrid,
    pub initial_flow: FlowField,
    pub initial_correlation: CorrelationMap,
    /// `r^N`.
    pub r_start: LatentGrid,
    pub iterations: Vec<IterationRecord>,
    /// `r⁰ = f(r¹, τ_1)`.
    pub r0: LatentGrid,
    pub refined: Option<LatentGrid>,
}

impl MidmTrace {
    /// The latent handed to the decoder.
    pub fn output(&self) -> &LatentGrid {
        self.refined.as_ref().unwrap_or(&self.r0)
    }

    /// Flow of the last interleaved iteration.
    pub fn final_flow(&self) -> &FlowField {
        self.iterations.last().map(|it| &it.flow).unwrap_or(&self.initial_flow)
    }
}

/// A configured sampler. `refine_model` defaults to `model`.
pub struct MidmSampler<'a> {
    pub config: MidmConfig,
    pub model: &'a dyn EpsilonModel,
    pub refine_model: Option<&'a dyn EpsilonModel>,
    pub encoder: &'a dyn CorrespondenceEncoder,
}

impl<'a> MidmSampler<'a> {
    pub fn new(config: MidmConfig, model: &'a dyn EpsilonModel, encoder: &'a dyn CorrespondenceEncoder) -> Self {
        Self { config, model, refine_model: None, encoder }
    }

    pub fn with_refine_model(mut self, model: &'a dyn EpsilonModel) -> Self {
        self.refine_model = Some(model);
        self
    }

    /// Runs the sampler on already-encoded condition and exemplar latents.
    pub fn sample_latent(&self, d_x: &LatentGrid, d_y: &LatentGrid) -> Result<MidmTrace> {
        let cfg = &self.config;
        cfg.validate()?;
        if !d_x.same_shape(d_y) {
            return mismatch(format!("condition {:?} vs exemplar {:?}", d_x.shape(), d_y.shape()));
        }
        let sched = cfg.schedule()?;
        let subseq = cfg.subsequence()?;
        let start = cfg.start_index()?;
        if start < 2 {
            return invalid(format!(
                "start index N = {start} leaves no interleaved step; raise noise_fraction or s_steps"
            ));
        }

        let init = initial_warp(d_x, d_y, cfg.temperature, self.encoder)?;
        let initial_flow = soft_argmax_flow(&init.correlation, cfg.temperature)?;
        let mut rng = Rng::new(cfg.seed);
        let eps = rng.gaussian(d_y.shape())?;
        let r_start = forward_diffuse(&init.warped, subseq.tau(start)?, &eps, &sched)?;

        let s_y = self.encoder.exemplar_iteration_features(d_y)?;
        let ctx = IterationContext {
            d_x,
            d_y,
            s_y: &s_y,
            model: self.model,
            encoder: self.encoder,
            sched: &sched,
            subseq: &subseq,
            temperature: cfg.temperature,
            gamma: cfg.gamma,
        };
        let mut iterations = Vec::with_capacity(start - 1);
        let mut r = r_start.clone();
        for n in (2..=start).rev() {
            let record = midm_iteration(&r, n, &ctx, cfg.skip_last_warp && n == 2)?;
            r = record.r_prev.clone();
            iterations.push(record);
        }
        let r0 = predict_x0(&r, subseq.tau(1)?, self.model, &sched)?;
        let refined = if cfg.renoise_refine.enabled {
            let model = self.refine_model.unwrap_or(self.model);
            Some(refine_with_renoise(&r0, model, cfg.renoise_refine.fraction, &subseq, &sched, &mut rng)?)
        } else {
            None
        };
        Ok(MidmTrace {
            start_index: start,
            taus: subseq.taus().to_vec(),
            initial_warp: init.warped,
            initial_flow,
            initial_correlation: init.correlation,
            r_start,
            iterations,
            r0,
            refined,
        })
    }

    /// Encodes both images, samples, and decodes the result.
    pub fn sample(&self, condition: &RgbImage, exemplar: &RgbImage, codec: &dyn LatentCodec) -> Result<(RgbImage, MidmTrace)> {
        condition.ensure_same_dims(exemplar, "condition vs exemplar")?;
        let d_x = codec.encode(condition)?;
        let d_y = codec.encode(exemplar)?;
        let trace = self.sample_latent(&d_x, &d_y)?;
        let image = codec.decode(trace.output())?;
        Ok((image, trace))
    }
}

/// Convenience wrapper around [`MidmSampler::sample`].
pub fn midm_sample(
    condition: &RgbImage,
    exemplar: &RgbImage,
    model: &dyn EpsilonModel,
    cfg: &MidmConfig,
    codec: &dyn LatentCodec,
    encoder: &dyn CorrespondenceEncoder,
) -> Result<(RgbImage, MidmTrace)> {
    MidmSampler::new(cfg.clone(), model, encoder).sample(condition, exemplar, codec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{ddim_step, OracleModel};
    use crate::matching::{cycle_confidence_mask, PatchEncoder};

    fn cfg_without_refine() -> MidmConfig {
        MidmConfig { renoise_refine: RenoiseConfig { enabled: false, fraction: 0.1 }, ..MidmConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(MidmConfig::default().validate().is_ok());
        assert!(MidmConfig::sampling_profile().validate().is_ok());
        assert_eq!(MidmConfig::sampling_profile().start_index().unwrap(), 50);
        assert_eq!(MidmConfig::default().start_index().unwrap(), 4);
        let bad = [
            MidmConfig { s_steps: 1, ..MidmConfig::default() },
            MidmConfig { gamma: -1.0, ..MidmConfig::default() },
            MidmConfig { noise_fraction: 0.0, ..MidmConfig::default() },
            MidmConfig { temperature: -1.0, ..MidmConfig::default() },
            MidmConfig { renoise_refine: RenoiseConfig { enabled: true, fraction: 0.3 }, ..MidmConfig::default() },
        ];
        for b in bad {
            assert!(b.validate().is_err(), "{b:?}");
        }
    }

    #[test]
    fn start_index_below_two_rejected() {
        let d = Rng::new(0).gaussian((3, 4, 4)).unwrap();
        let cfg = MidmConfig { noise_fraction: 0.05, ..cfg_without_refine() };
        let sched = cfg.schedule().unwrap();
        let model = OracleModel::standard_normal((3, 4, 4), sched).unwrap();
        let enc = PatchEncoder::default();
        assert!(MidmSampler::new(cfg, &model, &enc).sample_latent(&d, &d).is_err());
    }

    #[test]
    fn self_matching_reproduces_exemplar() {
        let d = Rng::new(17).gaussian((3, 6, 6)).unwrap();
        let enc = PatchEncoder::default();
        let init = initial_warp(&d, &d, 1e-6, &enc).unwrap();
        assert!(init.warped.max_abs_diff(&d).unwrap() < 1e-6);
    }

    #[test]
    fn constant_exemplar_warps_to_constant() {
        let dx = Rng::new(2).gaussian((3, 5, 5)).unwrap();
        let dy = LatentGrid::filled(3, 5, 5, 0.4).unwrap();
        let init = initial_warp(&dx, &dy, 0.01, &PatchEncoder::default()).unwrap();
        assert!(init.warped.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn suppressed_iteration_is_plain_ddim() {
        let cfg = cfg_without_refine();
        let sched = cfg.schedule().unwrap();
        let subseq = cfg.subsequence().unwrap();
        let mut rng = Rng::new(3);
        let (dx, dy, r) = (rng.gaussian((3, 4, 4)).unwrap(), rng.gaussian((3, 4, 4)).unwrap(), rng.gaussian((3, 4, 4)).unwrap());
        let model = OracleModel::standard_normal((3, 4, 4), sched.clone()).unwrap();
        let enc = PatchEncoder::default();
        let s_y = enc.exemplar_iteration_features(&dy).unwrap();
        let ctx = IterationContext {
            d_x: &dx,
            d_y: &dy,
            s_y: &s_y,
            model: &model,
            encoder: &enc,
            sched: &sched,
            subseq: &subseq,
            temperature: 0.01,
            gamma: 0.3,
        };
        let rec = midm_iteration(&r, 4, &ctx, true).unwrap();
        let plain = ddim_step(&r, subseq.tau(4).unwrap(), subseq.tau(3).unwrap(), &model, &sched).unwrap();
        assert_eq!(rec.r_prev, plain);
        assert!(rec.mask.none());
        assert!(midm_iteration(&r, 1, &ctx, false).is_err());
        assert!(midm_iteration(&r, 17, &ctx, false).is_err());

        // the unsuppressed mask agrees with the correlation-level routine
        let rec = midm_iteration(&r, 4, &ctx, false).unwrap();
        let s_iter = enc.iteration_features(&rec.r_tilde, &dx).unwrap();
        let c = correlation_map(&s_iter, &s_y).unwrap();
        assert_eq!(rec.mask, cycle_confidence_mask(&c, &c.transpose(), 0.3, 0.01).unwrap());
    }

    #[test]
    fn trace_shape_and_determinism() {
        let cfg = MidmConfig::default();
        let sched = cfg.schedule().unwrap();
        let mut rng = Rng::new(9);
        let (dx, dy) = (rng.gaussian((3, 6, 6)).unwrap(), rng.gaussian((3, 6, 6)).unwrap());
        let model = OracleModel::standard_normal((3, 6, 6), sched).unwrap();
        let enc = PatchEncoder::default();
        let sampler = MidmSampler::new(cfg, &model, &enc);
        let a = sampler.sample_latent(&dx, &dy).unwrap();
        let b = sampler.sample_latent(&dx, &dy).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iterations.len(), 3);
        assert_eq!(a.iterations.iter().map(|i| i.n).collect::<Vec<_>>(), vec![4, 3, 2]);
        assert!(a.iterations.last().unwrap().mask.none());
        assert!(a.refined.is_some());
        for it in &a.iterations {
            assert_eq!(it.r_n.shape(), dy.shape());
            assert_eq!(it.r_tilde.shape(), dy.shape());
        }
    }

    #[test]
    fn refine_identity_and_determinism() {
        let sched = NoiseSchedule::default();
        let subseq = make_subsequence(1000, 16).unwrap();
        let r0 = Rng::new(1).gaussian((3, 4, 4)).unwrap();
        let model = OracleModel::standard_normal((3, 4, 4), sched.clone()).unwrap();
        let same = refine_with_renoise(&r0, &model, 0.0, &subseq, &sched, &mut Rng::new(5)).unwrap();
        assert_eq!(same, r0);
        let a = refine_with_renoise(&r0, &model, 0.1, &subseq, &sched, &mut Rng::new(5)).unwrap();
        let b = refine_with_renoise(&r0, &model, 0.1, &subseq, &sched, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(refine_with_renoise(&r0, &model, 1.0, &subseq, &sched, &mut Rng::new(5)).is_err());
    }

    #[test]
    fn refine_matches_affine_closed_form() {
        // N(0, I) oracle: output = gain · (sqrt(ā)·r0 + sqrt(1 − ā)·ε).
        let sched = NoiseSchedule::default();
        let subseq = make_subsequence(1000, 16).unwrap();
        let r0 = Rng::new(2).gaussian((3, 4, 4)).unwrap();
        let model = OracleModel::standard_normal((3, 4, 4), sched.clone()).unwrap();
        let out = refine_with_renoise(&r0, &model, 0.1, &subseq, &sched, &mut Rng::new(7)).unwrap();
        let eps = Rng::new(7).gaussian((3, 4, 4)).unwrap();
        let n_r = 2;
        let ab = sched.alpha_bar(subseq.tau(n_r).unwrap()).unwrap();
        let mut gain = 1.0;
        for n in (1..=n_r).rev() {
            let a = sched.alpha_bar(subseq.tau(n).unwrap()).unwrap();
            let b = sched.alpha_bar(subseq.tau(n - 1).unwrap()).unwrap();
            gain *= (a * b).sqrt() + ((1.0 - a) * (1.0 - b)).sqrt();
        }
        for i in 0..r0.len() {
            let expected = gain * (ab.sqrt() * r0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i]);
            assert!((out.data()[i] - expected).abs() < 1e-9);
        }
    }
}
