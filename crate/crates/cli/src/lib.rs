//! The `prlab` command line: experiment simulation, ablations, standalone
//! evaluation of detection files and stage-histogram rendering.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::builder::BoolishValueParser;
use clap::{Parser, Subcommand};

use crate::commands::eval::{EvalOptions, GtFormat};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PRLAB_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "prlab",
    version,
    about = "Few-shot detection lab: cascade refinement and RPN fine-tuning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a base detector, fine-tune it for each K and write all reports.
    Simulate {
        /// Experiment config (JSON); defaults are used when omitted.
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the K values, e.g. `--k 1,2,3,5,10`.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Override the output directory.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run the gamma_rpn x refinement x K grid over several seeds.
    Ablate {
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// gamma_rpn values, e.g. `--gammas 0,0.5`.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        /// Refinement settings, e.g. `--refinement on,off`.
        #[arg(long, value_delimiter = ',', value_parser = BoolishValueParser::new())]
        refinement: Option<Vec<bool>>,
        /// K values.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Seeds, e.g. `--seeds 0,1,2`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Score a detections JSON file against ground truth.
    Eval {
        /// Ground truth: a VOC directory or file, a COCO file or a synthetic dataset file.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        format: GtFormat,
        /// Detections JSON: `[{"scene_id", "class", "box": [x1, y1, x2, y2], "score"}]`.
        #[arg(long)]
        detections: PathBuf,
        /// IoU threshold of the primary AP.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also report AP averaged over IoU 0.50, 0.55, ..., 1.00.
        #[arg(long)]
        range: bool,
        /// Report class-agnostic recall of the top-k detections per scene.
        #[arg(long)]
        recall_k: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        recall_iou: f64,
        /// Use all-point instead of 11-point interpolation for the primary AP.
        #[arg(long)]
        all_point: bool,
        /// Include the per-detection matching trace in the JSON report.
        #[arg(long)]
        trace: bool,
        /// Write the JSON report here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Render stage IoU histogram CSVs as text.
    Histogram {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Width of the longest bar.
        #[arg(long, default_value_t = 40)]
        width: usize,
    },
}

/// Thread count requested through [`THREADS_ENV`], if any.
pub fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::usage(format!("{THREADS_ENV}: {e}"))),
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = threads_from_env().and_then(|threads| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(CliError::runtime)?;
        pool.install(|| run(cli.command))
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

/// Runs one command, printing its summary to stdout.
pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate { config, seed, k, out } => {
            let mut cfg = ExperimentConfig::load(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(k) = k {
                cfg.shots = k;
            }
            if let Some(out) = out {
                cfg.output = out;
            }
            cfg.validate()?;
            let report = commands::simulate::simulate(&cfg, &cfg.output)?;
            print!("{}", commands::simulate::summary(&report));
            println!("artifacts written to {}", cfg.output.display());
        }
        Command::Ablate {
            config,
            gammas,
            refinement,
            k,
            seeds,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(config.as_deref())?;
            if let Some(g) = gammas {
                cfg.ablation.gammas = g;
            }
            if let Some(r) = refinement {
                cfg.ablation.refinement = r;
            }
            if let Some(k) = k {
                cfg.ablation.shots = k;
            }
            if let Some(s) = seeds {
                cfg.ablation.seeds = s;
            }
            if let Some(out) = out {
                cfg.output = out;
            }
            cfg.validate()?;
            let table = commands::ablate::ablate(&cfg, &cfg.output)?;
            print!(
                "{}",
                commands::ablate::summary(&table, cfg.protocol.detector.stages.len())
            );
            println!("artifacts written to {}", cfg.output.display());
        }
        Command::Eval {
            gt,
            format,
            detections,
            iou,
            range,
            recall_k,
            recall_iou,
            all_point,
            trace,
            out,
        } => {
            let opts = EvalOptions {
                gt,
                format,
                detections,
                iou,
                range,
                recall_k,
                recall_iou,
                all_point,
                trace,
            };
            let report = commands::eval::eval(&opts)?;
            print!("{}", report.table());
            if let Some(out) = out {
                let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
                json.push('\n');
                std::fs::write(&out, json)
                    .map_err(|e| CliError::runtime(e).context(format!("writing {}", out.display())))?;
            }
        }
        Command::Histogram { files, width } => {
            for (i, f) in files.iter().enumerate() {
                let hist = commands::histogram::load(f)?;
                if i > 0 {
                    println!();
                }
                println!("{}", f.display());
                print!("{}", commands::histogram::render(&hist, width.max(1)));
            }
        }
    }
    Ok(())
}
