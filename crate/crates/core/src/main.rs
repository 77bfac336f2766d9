use clap::{Args, Parser, Subcommand};
use ravit::cli::{self, report::Report, BenchArgs, BuildArgs, DetectArgs, FuseArgs, VerifyArgs};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ravit", version, about = "Reparameterizable backbone and detector toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ReportOut {
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a preset with seeded weights.
    Build {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Build the detector on top of the backbone.
        #[arg(long)]
        detector: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        report: ReportOut,
    },
    /// Collapse multi-branch kernels and fold norms.
    Fuse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        report: ReportOut,
    },
    /// Check fused against unfused outputs; exits 1 on any mismatch.
    Verify {
        #[arg(long = "in")]
        input: PathBuf,
        /// The other form of the same network.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        #[arg(long, default_value_t = cli::DEFAULT_BLOCK_TOL)]
        tol: f32,
        #[arg(long, default_value_t = cli::DEFAULT_MODEL_TOL)]
        model_tol: f32,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        model_trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        report: ReportOut,
    },
    /// Time forward passes.
    Bench {
        #[arg(long = "in")]
        input: PathBuf,
        /// Input extent as HxW.
        #[arg(long = "input", value_parser = parse_hw)]
        hw: Option<(usize, usize)>,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
        iters: u64,
        #[arg(long, conflicts_with = "unfused")]
        fused: bool,
        #[arg(long)]
        unfused: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        report: ReportOut,
    },
    /// Detect objects in a binary PPM image.
    Detect {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        score_thresh: Option<f32>,
        #[arg(long)]
        iou: Option<f32>,
        #[command(flatten)]
        report: ReportOut,
    },
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn emit(report: &Report, out: &ReportOut) -> ravit::Result<()> {
    match &out.report {
        Some(path) => report.write(path),
        None => {
            println!("{}", report.to_json()?);
            Ok(())
        }
    }
}

fn run(cmd: Command) -> ravit::Result<bool> {
    match cmd {
        Command::Build {
            variant,
            seed,
            detector,
            out,
            report,
        } => emit(&cli::cmd_build(&BuildArgs { variant, seed, detector, out })?, &report)?,
        Command::Fuse {
            input,
            out,
            trials,
            seed,
            report,
        } => {
            let r = cli::cmd_fuse(&FuseArgs {
                input,
                out,
                trials: trials as usize,
                seed,
            })?;
            emit(&r, &report)?;
        }
        Command::Verify {
            input,
            reference,
            trials,
            tol,
            model_tol,
            model_trials,
            seed,
            report,
        } => {
            let (r, pass) = cli::cmd_verify(&VerifyArgs {
                input,
                reference,
                trials: trials as usize,
                tol,
                model_tol,
                model_trials: model_trials as usize,
                seed,
            })?;
            emit(&r, &report)?;
            if !pass {
                let failed: Vec<String> = serde_json::from_value(r.results["failed"].clone()).unwrap_or_default();
                if failed.is_empty() {
                    eprintln!("verification failed at model level");
                } else {
                    eprintln!("verification failed in: {}", failed.join(", "));
                }
                return Ok(false);
            }
        }
        Command::Bench {
            input,
            hw,
            warmup,
            iters,
            fused,
            unfused,
            seed,
            report,
        } => {
            let mode = match (fused, unfused) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            };
            let (r, _) = cli::cmd_bench(&BenchArgs {
                input,
                hw,
                warmup,
                iters: iters as usize,
                fused: mode,
                seed,
            })?;
            emit(&r, &report)?;
        }
        Command::Detect {
            input,
            image,
            out,
            score_thresh,
            iou,
            report,
        } => emit(
            &cli::cmd_detect(&DetectArgs {
                input,
                image,
                out,
                score_thresh,
                iou,
            })?,
            &report,
        )?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
