use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use edgeslam::config::{Config, Mode};
use edgeslam::dataset::Dataset;
use edgeslam::synth::{self, SynthConfig};
use edgeslam::{metrics, pipeline, tum, Result};

#[derive(Parser)]
#[command(name = "edgeslam", version, about = "Edge-aware lightweight monocular SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sequential,
    Pipelined,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline described by a TOML config.
    Run {
        config: PathBuf,
        /// Overrides the config's execution mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Compare a TUM trajectory against ground truth and print metrics JSON.
    Eval {
        estimated: PathBuf,
        groundtruth: PathBuf,
        /// Rigidly align the estimate to ground truth first.
        #[arg(long)]
        align: bool,
        #[arg(long, default_value_t = edgeslam_core::eval::DEFAULT_MAX_DT)]
        max_dt: f64,
    },
    /// Summarize a TUM-layout dataset.
    Info {
        dataset: PathBuf,
        #[arg(long, default_value_t = edgeslam_core::eval::DEFAULT_MAX_DT)]
        max_dt: f64,
    },
    /// Render a synthetic room sequence with ground truth and a config.
    Synth {
        output: PathBuf,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Omit depth images and depth.txt.
        #[arg(long)]
        no_depth: bool,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, mode } => {
            let mut cfg = Config::load(&config)?;
            match mode {
                Some(ModeArg::Sequential) => cfg.mode = Mode::Sequential,
                Some(ModeArg::Pipelined) => cfg.mode = Mode::Pipelined,
                None => {}
            }
            let s = pipeline::run(&cfg)?;
            println!(
                "{} frames, {} keyframes, {} map points -> {}",
                s.frames,
                s.keyframes,
                s.map.points.len(),
                s.output.display()
            );
            if let Some(m) = &s.metrics {
                println!(
                    "ape_rmse {:.4} m, ate_rmse {:.4} m (aligned: {})",
                    m.ape_rmse, m.ate_rmse, m.aligned
                );
            }
        }
        Command::Eval {
            estimated,
            groundtruth,
            align,
            max_dt,
        } => {
            let est = tum::read_trajectory(&estimated)?;
            let gt = tum::read_trajectory(&groundtruth)?;
            print!("{}", metrics::evaluate(&est, &gt, max_dt, align)?.to_json());
        }
        Command::Info { dataset, max_dt } => {
            print!("{}", Dataset::open(&dataset, max_dt, 0)?.summary());
        }
        Command::Synth {
            output,
            frames,
            seed,
            no_depth,
        } => {
            let cfg = SynthConfig {
                frames,
                seed,
                write_depth: !no_depth,
                ..SynthConfig::default()
            };
            synth::write_dataset(&output, &cfg)?;
            println!("wrote {frames} frames to {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
