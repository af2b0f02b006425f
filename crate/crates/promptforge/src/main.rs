use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use promptforge::harness::{execute_run, materialize_synthetic, RunConfig};
use promptforge::report::{build_report, write_report};
use promptforge::synth::SyntheticTaskSpec;

#[derive(Parser)]
#[command(name = "promptforge", version, about = "Optimize instructions and demonstrations of LM programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an optimizer from a JSON config and write a run directory.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Per-trial evaluation parallelism.
        #[arg(long)]
        parallelism: Option<usize>,
        /// Reuse (or persist) a bootstrapped demonstration store.
        #[arg(long)]
        demo_store: Option<PathBuf>,
        /// Run directory (defaults to the config's output_dir or ./runs/<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Repeat the run N times with seeds offset by the run index.
        #[arg(long)]
        repeat: Option<usize>,
    },
    /// Emit trials.csv, progression.json, and importance.csv for a run.
    Report {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
        format: ReportFormat,
    },
    /// Materialize a synthetic task bundle (dataset, splits, oracle, config).
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Optimize {
            config,
            seed,
            parallelism,
            demo_store,
            out,
            repeat,
        } => {
            let mut run_config = RunConfig::from_path(&config).map_err(|e| e.to_string())?;
            if let Some(seed) = seed {
                run_config.seed = seed;
            }
            if let Some(parallelism) = parallelism {
                run_config.parallelism = parallelism;
            }
            if let Some(path) = demo_store {
                run_config.demo_store = Some(path);
            }
            let base_out = out
                .or_else(|| run_config.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from(format!("runs/seed{}", run_config.seed)));
            let repeats = repeat.unwrap_or(1).max(1);
            let mut exhausted = false;
            for index in 0..repeats {
                let mut config = run_config.clone();
                config.seed = run_config.seed + index as u64;
                let out_dir = if repeats == 1 {
                    base_out.clone()
                } else {
                    base_out.join(format!("r{index}"))
                };
                let summary = execute_run(&config, &out_dir).map_err(|e| e.to_string())?;
                exhausted |= summary.budget_exhausted;
                println!(
                    "best full score {:.4} (trial {}) over {} trials -> {}",
                    summary.best_score_full,
                    summary.best_trial_index,
                    summary.trials,
                    summary.output_dir.display()
                );
                if summary.budget_exhausted {
                    eprintln!("note: LM call ceiling reached; result is best-so-far");
                }
            }
            Ok(ExitCode::from(if exhausted { 2 } else { 0 }))
        }
        Command::Report { run_dir, format } => {
            match format {
                ReportFormat::Csv => {
                    let written = write_report(&run_dir).map_err(|e| e.to_string())?;
                    for path in written {
                        println!("{}", path.display());
                    }
                }
                ReportFormat::Json => {
                    let report = build_report(&run_dir).map_err(|e| e.to_string())?;
                    let value = serde_json::json!({
                        "rows": report.rows,
                        "progression": report.progression,
                        "importance": report.importance,
                    });
                    println!("{}", serde_json::to_string_pretty(&value).map_err(|e| e.to_string())?);
                }
            }
            Ok(ExitCode::from(0))
        }
        Command::Synth { spec, out } => {
            let raw = std::fs::read_to_string(&spec)
                .map_err(|e| format!("{}: {e}", spec.display()))?;
            let spec: SyntheticTaskSpec =
                serde_json::from_str(&raw).map_err(|e| format!("spec: {e}"))?;
            materialize_synthetic(&spec, &out).map_err(|e| e.to_string())?;
            println!("synthetic task written to {}", out.display());
            Ok(ExitCode::from(0))
        }
    }
}
