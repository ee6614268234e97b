use clap::{Parser, Subcommand};
use mctrans_cli::*;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mctrans",
    about = "Multi-channel transformer translation: synthetic data, training, decoding, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic asynchronous-channel corpus (80/10/10 split).
    Synth {
        /// Output directory for manifests and feature files.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples to generate.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model as described by a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Translate a manifest; one translation per line in manifest order.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Beam width (0 and 1 mean greedy search).
        #[arg(long, default_value_t = 0)]
        beam: usize,
        /// Length-penalty exponent.
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, default_value_t = 60)]
        max_len: usize,
        /// Optional run config supplying data preparation (channel selection).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sweep beam width 0..=10 × alpha 0..=5 on a dev manifest; apply the
    /// best cell to a test manifest when given.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        max_len: usize,
        /// Optional run config supplying data preparation (channel selection).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient check of a tiny configured model (64-bit).
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Testing aid: corrupt one recorded gradient to verify detection.
        #[arg(long, hide = true, default_value_t = false)]
        sabotage: bool,
    },
}

fn run(cli: Cli) -> Result<i32, mctrans::error::Error> {
    match cli.command {
        Command::Synth { out, n, seed } => {
            let (train, dev, test) = run_synth(&out, n, seed)?;
            println!("synth out={} train={train} dev={dev} test={test}", out.display());
            Ok(EXIT_OK)
        }
        Command::Train { config } => {
            run_train(&config)?;
            Ok(EXIT_OK)
        }
        Command::Translate { checkpoint, manifest, beam, alpha, max_len, config } => {
            let lines =
                run_translate(&checkpoint, &manifest, beam, alpha, max_len, config.as_deref())?;
            for line in lines {
                println!("{line}");
            }
            Ok(EXIT_OK)
        }
        Command::Evaluate { checkpoint, manifest, test_manifest, max_len, config } => {
            let report = run_evaluate(
                &checkpoint,
                &manifest,
                test_manifest.as_deref(),
                max_len,
                config.as_deref(),
            )?;
            for cell in &report.cells {
                println!(
                    "cell width={} alpha={} dev_bleu4={:.4} dev_rougel={:.4}",
                    cell.width, cell.alpha, cell.bleu4, cell.rouge_l
                );
            }
            let b = report.best;
            println!(
                "best width={} alpha={} dev_bleu4={:.4} dev_rougel={:.4}",
                b.width, b.alpha, b.bleu4, b.rouge_l
            );
            if let Some(t) = report.test {
                println!(
                    "test width={} alpha={} test_bleu4={:.4} test_rougel={:.4}",
                    t.width, t.alpha, t.bleu4, t.rouge_l
                );
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck { config, seed, sabotage } => {
            let summary = run_gradcheck(&config, seed, sabotage)?;
            println!(
                "gradcheck checked={} max_rel_err={:.3e} passed={}",
                summary.checked_scalars, summary.max_rel_err, summary.passed
            );
            if summary.passed {
                Ok(EXIT_OK)
            } else {
                for (addr, idx, err) in &summary.worst {
                    println!("worst param={addr} index={idx} rel_err={err:.3e}");
                }
                Ok(EXIT_CHECK_FAILED)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
