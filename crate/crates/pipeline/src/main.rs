use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wavegp_pipeline::stages::{configure_threads, run_pipeline, run_stage, Stage};
use wavegp_pipeline::{write_synthetic, RunConfig, SynthSpec};

/// Wavelet spectra and Gaussian-process mixed-effects models for
/// multichannel recordings.
///
/// Set WAVEGP_THREADS to limit the worker thread count.
#[derive(Parser)]
#[command(name = "wavegp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic data set (recordings/ and metadata.csv) into OUT.
    Simulate {
        /// TOML file with simulation settings; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of subjects.
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Compute per-observation spectra.
    Spectra(RunArgs),
    /// Fit the model by NUTS and store the draws.
    Fit(RunArgs),
    /// Refine the draws onto the fine grid and summarize every panel.
    Refine(RunArgs),
    /// Draw the panels.
    Report(RunArgs),
    /// Run every stage, reusing stages whose inputs are unchanged.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Rerun every stage.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, String> {
        let mut cfg = RunConfig::load(&self.config).map_err(|e| e.to_string())?;
        if let Some(o) = &self.output {
            cfg.output = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.warmup {
            cfg.sampler.warmup = w;
        }
        if let Some(d) = self.draws {
            cfg.sampler.draws = d;
        }
        if let Some(c) = self.chains {
            cfg.sampler.chains = c;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), String> {
    configure_threads()?;
    let stage = |args: &RunArgs, s: Stage| run_stage(&args.load()?, s).map_err(|e| e.to_string());
    match cli.command {
        Command::Simulate {
            spec,
            out,
            seed,
            subjects,
        } => {
            let mut sp = match spec {
                Some(p) => {
                    let text =
                        std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
                    toml::from_str::<SynthSpec>(&text)
                        .map_err(|e| format!("{}: {e}", p.display()))?
                }
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                sp.seed = s;
            }
            if let Some(n) = subjects {
                sp.subjects = n;
            }
            let n = write_synthetic(&sp, &out)?;
            eprintln!("simulate: wrote {n} recordings to {}", out.display());
            Ok(())
        }
        Command::Spectra(a) => stage(&a, Stage::Spectra),
        Command::Fit(a) => stage(&a, Stage::Fit),
        Command::Refine(a) => stage(&a, Stage::Refine),
        Command::Report(a) => stage(&a, Stage::Report),
        Command::Run { args, force } => {
            let out = run_pipeline(&args.load()?, force).map_err(|e| e.to_string())?;
            for s in out.skipped {
                eprintln!("{s}: up to date");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
