use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use midm_core::midm::MidmConfig;
use midm_harness::config::{config_json, load_config, Strategies};
use midm_harness::evaluate::{evaluate_losses, oracle_check};
use midm_harness::ppm::read_ppm;
use midm_harness::run::{run_translation, write_mask, Pipeline, RunOptions};
use midm_harness::sweep::{report_csv, run_sweep, summarize, SweepOptions};
use midm_harness::synthetic::{gen_synthetic_pair, write_pair};

#[derive(Parser)]
#[command(name = "midm", version, about = "Exemplar-based toy translation with interleaved matching and denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct StrategyArgs {
    /// Epsilon model fitted to the exemplar latent.
    #[arg(long, default_value = "mixture")]
    model: String,
    /// Correspondence encoder.
    #[arg(long, default_value = "structure")]
    encoder: String,
    /// Codec downsampling factor.
    #[arg(long, default_value_t = 4)]
    factor: usize,
}

impl StrategyArgs {
    fn strategies(&self) -> Strategies {
        Strategies { model: self.model.clone(), encoder: self.encoder.clone(), factor: self.factor }
    }
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    condition: PathBuf,
    #[arg(long)]
    exemplar: PathBuf,
    #[command(flatten)]
    strategy: StrategyArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Translate a condition image using an exemplar.
    Sample {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        out: PathBuf,
        /// Directory for iter_<n>.ppm and trace.csv.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Ground-truth flow CSV for the endpoint-error metric.
        #[arg(long)]
        gt_flow: Option<PathBuf>,
    },
    /// Generate a synthetic pair with ground-truth flow.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        shapes: usize,
        #[arg(long, default_value_t = 4)]
        factor: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run seeded synthetic pairs over several noise levels.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0.20,0.25,0.30,0.35")]
        noise: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long)]
        report: PathBuf,
        /// Base config; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for per-seed output images.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        shapes: usize,
        #[command(flatten)]
        strategy: StrategyArgs,
    },
    /// Check the standard-normal oracle against its closed-form contraction.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the noise schedule.
    Schedule {
        /// Print t,beta,alpha_bar for every timestep.
        #[arg(long)]
        dump: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the cycle-consistency mask of one iteration as a PGM.
    MaskViz {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        out: PathBuf,
        /// Iteration index n; defaults to the first executed iteration.
        #[arg(long)]
        iteration: Option<usize>,
    },
    /// Loss evaluation.
    Losses {
        #[command(subcommand)]
        command: LossesCommand,
    },
}

#[derive(Subcommand)]
enum LossesCommand {
    /// Print all six losses and the weighted total as JSON.
    Eval {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        ground_truth: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sample { pair, out, trace, gt_flow } => {
            let opts = RunOptions { strategies: pair.strategy.strategies(), trace_dir: trace, gt_flow };
            let metrics = run_translation(&pair.config, &pair.condition, &pair.exemplar, &out, &opts)?;
            println!("{}", serde_json::to_string(&metrics)?);
        }
        Command::Gen { seed, size, shapes, factor, out } => {
            let pair = gen_synthetic_pair(seed, (size, size), shapes, factor)?;
            write_pair(&out, &pair)?;
        }
        Command::Sweep { noise, runs, report, config, out_dir, size, shapes, strategy } => {
            if noise.is_empty() || runs == 0 {
                bail!("sweep needs at least one noise level and one run");
            }
            let base = match config {
                Some(p) => load_config(&p)?,
                None => MidmConfig::default(),
            };
            let opts = SweepOptions {
                noise,
                runs,
                size: (size, size),
                shapes,
                base,
                strategies: strategy.strategies(),
                out_dir,
                ..SweepOptions::default()
            };
            let rows = run_sweep(&opts)?;
            fs::write(&report, report_csv(&rows)).with_context(|| format!("writing {}", report.display()))?;
            for s in summarize(&rows) {
                println!(
                    "noise {:.2}: runs {} initial_epe_median {:.4} final_epe_median {:.4} edge_f1 {:.3} color_hist_l1 {:.3} trend {}",
                    s.noise_fraction,
                    s.runs,
                    s.initial_epe_median,
                    s.final_epe_median,
                    s.edge_f1_median,
                    s.color_hist_median,
                    if s.holds() { "holds" } else { "violated" }
                );
            }
        }
        Command::OracleCheck { seed } => {
            let c = oracle_check(seed)?;
            println!("max_relative_error {:e} gain {:.12} elapsed_ms {:.3}", c.max_relative_error, c.gain, c.elapsed.as_secs_f64() * 1e3);
        }
        Command::Schedule { dump, config } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => MidmConfig::default(),
            };
            let sched = cfg.schedule()?;
            if dump {
                print!("{}", sched.to_csv());
            } else {
                let taus = cfg.subsequence()?;
                println!("{}", config_json(&cfg));
                println!("taus {:?}", taus.taus());
            }
        }
        Command::MaskViz { pair, out, iteration } => {
            let cfg = load_config(&pair.config)?;
            let condition = read_ppm(&pair.condition)?;
            let exemplar = read_ppm(&pair.exemplar)?;
            let (_, trace) = Pipeline::new(&cfg, &condition, &exemplar, &pair.strategy.strategies())?.sample(&cfg)?;
            write_mask(&out, &trace, iteration)?;
        }
        Command::Losses { command: LossesCommand::Eval { pair, ground_truth } } => {
            let cfg = load_config(&pair.config)?;
            let report = evaluate_losses(
                &cfg,
                &read_ppm(&pair.condition)?,
                &read_ppm(&pair.exemplar)?,
                &read_ppm(&ground_truth)?,
                &pair.strategy.strategies(),
            )?;
            println!("{}", serde_json::to_string(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("midm: {e:#}");
            ExitCode::FAILURE
        }
    }
}
