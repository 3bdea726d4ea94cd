//! Seeded synthetic sweeps over noise levels, run in parallel.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use midm_core::midm::MidmConfig;
use rayon::prelude::*;

use crate::config::Strategies;
use crate::error::{io_err, Result};
use crate::metrics::{median, Metrics};
use crate::ppm::write_ppm;
use crate::run::{translate, FlowTruth};
use crate::synthetic::gen_synthetic_pair;

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub noise: Vec<f64>,
    pub runs: usize,
    pub first_seed: u64,
    pub size: (usize, usize),
    pub shapes: usize,
    pub base: MidmConfig,
    pub strategies: Strategies,
    /// Per-seed outputs go to `<out_dir>/noise_<nf>/seed_<s>.ppm`.
    pub out_dir: Option<PathBuf>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            noise: vec![0.20, 0.25, 0.30, 0.35],
            runs: 100,
            first_seed: 0,
            size: (64, 64),
            shapes: 3,
            base: MidmConfig::default(),
            strategies: Strategies::default(),
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub noise_fraction: f64,
    pub seed: u64,
    pub metrics: Metrics,
    pub initial_epe_median: f64,
}

/// Rows are ordered by noise level, then seed. Each run uses the pair
/// seed as the sampler seed.
pub fn run_sweep(opts: &SweepOptions) -> Result<Vec<SweepRow>> {
    let jobs: Vec<(f64, u64)> = opts
        .noise
        .iter()
        .flat_map(|&nf| (0..opts.runs as u64).map(move |i| (nf, opts.first_seed + i)))
        .collect();
    jobs.par_iter()
        .map(|&(nf, seed)| {
            let pair = gen_synthetic_pair(seed, opts.size, opts.shapes, opts.strategies.factor)?;
            let cfg = MidmConfig { noise_fraction: nf, seed, ..opts.base.clone() };
            let truth = FlowTruth { flow: &pair.gt_flow, foreground: &pair.foreground };
            let t = translate(&cfg, &pair.condition, &pair.exemplar, &opts.strategies, Some(truth))?;
            if let Some(dir) = &opts.out_dir {
                let dir = dir.join(format!("noise_{nf:.2}"));
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                write_ppm(&dir.join(format!("seed_{seed}.ppm")), &t.image)?;
            }
            Ok(SweepRow {
                noise_fraction: nf,
                seed,
                metrics: t.metrics,
                initial_epe_median: t.initial_epe_median.unwrap_or(f64::NAN),
            })
        })
        .collect()
}

pub fn report_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("noise_fraction,seed,edge_f1,color_hist_l1,flow_epe_median\n");
    for r in rows {
        let epe = r.metrics.flow_epe_median.unwrap_or(f64::NAN);
        writeln!(out, "{},{},{},{},{}", r.noise_fraction, r.seed, r.metrics.edge_f1, r.metrics.color_hist_l1, epe).unwrap();
    }
    out
}

/// Per noise level: median initial-warp and final-iteration endpoint errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendSummary {
    pub noise_fraction: f64,
    pub runs: usize,
    pub initial_epe_median: f64,
    pub final_epe_median: f64,
    pub edge_f1_median: f64,
    pub color_hist_median: f64,
}

impl TrendSummary {
    pub fn holds(&self) -> bool {
        self.final_epe_median <= self.initial_epe_median
    }
}

pub fn summarize(rows: &[SweepRow]) -> Vec<TrendSummary> {
    let mut levels: Vec<f64> = Vec::new();
    for r in rows {
        if !levels.contains(&r.noise_fraction) {
            levels.push(r.noise_fraction);
        }
    }
    levels
        .into_iter()
        .map(|nf| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.noise_fraction == nf).collect();
            let med = |f: &dyn Fn(&SweepRow) -> f64| median(sel.iter().map(|r| f(r)).collect()).unwrap_or(f64::NAN);
            TrendSummary {
                noise_fraction: nf,
                runs: sel.len(),
                initial_epe_median: med(&|r| r.initial_epe_median),
                final_epe_median: med(&|r| r.metrics.flow_epe_median.unwrap_or(f64::NAN)),
                edge_f1_median: med(&|r| r.metrics.edge_f1),
                color_hist_median: med(&|r| r.metrics.color_hist_l1),
            }
        })
        .collect()
}
