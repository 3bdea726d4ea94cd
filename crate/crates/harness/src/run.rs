//! End-to-end toy translation: fit the oracle to the exemplar, sample,
//! decode, score.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use midm_core::denoise::EpsilonModel;
use midm_core::grid::{LatentGrid, RgbImage};
use midm_core::matching::{CorrespondenceEncoder, FlowField};
use midm_core::midm::{LatentCodec, MidmConfig, MidmSampler, MidmTrace};
use midm_core::registry::{encoders, model_fitters};

use crate::codec::ToyCodec;
use crate::config::{load_config, Strategies};
use crate::error::{io_err, Result};
use crate::metrics::{flow_epe_median, metric_color_hist, metric_edge_f1, Metrics};
use crate::ppm::{read_ppm, write_pgm, write_ppm};
use crate::synthetic::flow_from_csv;

/// Ground-truth correspondence and the positions it is scored on.
#[derive(Debug, Clone, Copy)]
pub struct FlowTruth<'a> {
    pub flow: &'a FlowField,
    pub foreground: &'a [bool],
}

/// Fitted model and encoder for one run.
pub struct Pipeline {
    pub codec: ToyCodec,
    pub model: Box<dyn EpsilonModel>,
    pub encoder: Box<dyn CorrespondenceEncoder>,
    pub d_x: LatentGrid,
    pub d_y: LatentGrid,
}

impl Pipeline {
    pub fn new(cfg: &MidmConfig, condition: &RgbImage, exemplar: &RgbImage, strategies: &Strategies) -> Result<Self> {
        condition.ensure_same_dims(exemplar, "condition vs exemplar")?;
        let codec = ToyCodec::new(strategies.factor);
        let d_x = codec.encode(condition)?;
        let d_y = codec.encode(exemplar)?;
        let model = model_fitters().get(&strategies.model)?.fit(&d_y, &cfg.schedule()?)?;
        let encoder = (encoders().get(&strategies.encoder)?)(cfg.descriptor);
        Ok(Self { codec, model, encoder, d_x, d_y })
    }

    pub fn sample(&self, cfg: &MidmConfig) -> Result<(RgbImage, MidmTrace)> {
        let trace = MidmSampler::new(cfg.clone(), self.model.as_ref(), self.encoder.as_ref()).sample_latent(&self.d_x, &self.d_y)?;
        let image = self.codec.decode(trace.output())?;
        Ok((image, trace))
    }
}

#[derive(Debug, Clone)]
pub struct Translation {
    pub image: RgbImage,
    pub trace: MidmTrace,
    pub metrics: Metrics,
    /// Median endpoint error of the initial warp, when a truth is given.
    pub initial_epe_median: Option<f64>,
}

pub fn translate(
    cfg: &MidmConfig,
    condition: &RgbImage,
    exemplar: &RgbImage,
    strategies: &Strategies,
    truth: Option<FlowTruth<'_>>,
) -> Result<Translation> {
    let (image, trace) = Pipeline::new(cfg, condition, exemplar, strategies)?.sample(cfg)?;
    let (initial, last) = match truth {
        Some(t) => (
            flow_epe_median(&trace.initial_flow, t.flow, t.foreground)?,
            flow_epe_median(trace.final_flow(), t.flow, t.foreground)?,
        ),
        None => (None, None),
    };
    let metrics = Metrics {
        edge_f1: metric_edge_f1(&image, condition)?,
        color_hist_l1: metric_color_hist(&image, exemplar),
        flow_epe_median: last,
    };
    Ok(Translation { image, trace, metrics, initial_epe_median: initial })
}

/// Optional inputs and outputs of [`run_translation`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub strategies: Strategies,
    pub trace_dir: Option<PathBuf>,
    pub gt_flow: Option<PathBuf>,
}

/// Loads config and images, samples, writes the output (and trace), and
/// returns the metrics.
pub fn run_translation(
    cfg_path: &Path,
    condition_path: &Path,
    exemplar_path: &Path,
    out_path: &Path,
    opts: &RunOptions,
) -> Result<Metrics> {
    let cfg = load_config(cfg_path)?;
    let condition = read_ppm(condition_path)?;
    let exemplar = read_ppm(exemplar_path)?;
    let truth = match &opts.gt_flow {
        Some(p) => Some(flow_from_csv(&fs::read_to_string(p).map_err(io_err(p))?)?),
        None => None,
    };
    let t = translate(
        &cfg,
        &condition,
        &exemplar,
        &opts.strategies,
        truth.as_ref().map(|(flow, fg)| FlowTruth { flow, foreground: fg }),
    )?;
    write_ppm(out_path, &t.image)?;
    if let Some(dir) = &opts.trace_dir {
        write_trace(dir, &t.trace, &ToyCodec::new(opts.strategies.factor))?;
    }
    Ok(t.metrics)
}

pub fn trace_csv(trace: &MidmTrace) -> String {
    let mut out = String::from("n,tau_n,mask_coverage\n");
    for it in &trace.iterations {
        writeln!(out, "{},{},{}", it.n, it.tau_n, it.mask_coverage).unwrap();
    }
    out
}

/// `iter_<n>.ppm` holds the decoded clean prediction `r̃ⁿ`.
pub fn write_trace(dir: &Path, trace: &MidmTrace, codec: &ToyCodec) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for it in &trace.iterations {
        write_ppm(&dir.join(format!("iter_{}.ppm", it.n)), &codec.decode(&it.r_tilde)?)?;
    }
    let csv = dir.join("trace.csv");
    fs::write(&csv, trace_csv(trace)).map_err(io_err(csv))
}

/// Mask of iteration `n` (default: the first) as a 0/255 plane.
pub fn mask_plane(trace: &MidmTrace, n: Option<usize>) -> Result<(usize, usize, Vec<u8>)> {
    let it = match n {
        None => trace.iterations.first(),
        Some(n) => trace.iterations.iter().find(|it| it.n == n),
    }
    .ok_or_else(|| midm_core::MidmError::InvalidArgument(format!("no iteration {n:?} in the trace")))?;
    let gray = it.mask.flags().iter().map(|&b| if b { 255 } else { 0 }).collect();
    Ok((it.mask.width(), it.mask.height(), gray))
}

pub fn write_mask(path: &Path, trace: &MidmTrace, n: Option<usize>) -> Result<()> {
    let (w, h, gray) = mask_plane(trace, n)?;
    write_pgm(path, w, h, &gray)
}
