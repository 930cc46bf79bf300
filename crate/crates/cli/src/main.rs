//! Command-line surface over the benchmark pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format/configuration error,
//! 3 training-sanity (diagnostic) failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lora_compose::io::RunConfig;
use lora_compose::pipeline;
use lora_compose::tasks::KShot;
use lora_compose::Error;

/// Thread-count override for the worker pool.
const THREADS_ENV: &str = "LORA_COMPOSE_THREADS";

#[derive(Parser)]
#[command(
    name = "lora-compose",
    about = "Low-rank adapter composition benchmarks on synthetic few-shot tasks",
    version
)]
struct Cli {
    /// Run-config JSON file.
    #[arg(long, global = true, default_value = "configs/default.json")]
    config: PathBuf,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the config's adaptation seeds with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base model on the suite's base task and checkpoint it.
    Pretrain,
    /// Train one upstream task's adapter set against the frozen base.
    TrainUpstream {
        /// Index of the upstream task within the suite.
        #[arg(long)]
        task: usize,
    },
    /// Adapt to one few-shot episode and report a single accuracy row.
    Adapt {
        /// Method name from the registry (e.g. learned_composition).
        #[arg(long)]
        method: String,
        /// Adaptation samples per class, or "all".
        #[arg(long, value_parser = parse_k)]
        k: KShot,
        /// Episode/adaptation seed.
        #[arg(long)]
        seed: u64,
    },
    /// Run the full (method x K x seed) benchmark grid.
    Bench,
    /// Run one of the ablation studies.
    Ablate {
        /// scaling-n | split-size | rank | entangled
        #[arg(long, value_parser = parse_kind)]
        kind: lora_compose::io::AblationKind,
    },
    /// Export CKA and learned-weight heatmaps plus the alignment summary.
    AnalyzeCka,
}

fn parse_k(s: &str) -> Result<KShot, String> {
    if s == "all" {
        return Ok(KShot::All);
    }
    s.parse::<usize>()
        .map(KShot::Shot)
        .map_err(|_| format!("k must be a positive integer or \"all\", got {s:?}"))
}

fn parse_kind(s: &str) -> Result<lora_compose::io::AblationKind, String> {
    use lora_compose::io::AblationKind::*;
    match s.replace('_', "-").as_str() {
        "scaling-n" => Ok(ScalingN),
        "split-size" => Ok(SplitSize),
        "rank" => Ok(Rank),
        "entangled" => Ok(Entangled),
        other => Err(format!(
            "unknown ablation kind {other:?}; expected scaling-n, split-size, rank, or entangled"
        )),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap prints help/version on stdout with success; usage errors
            // go to stderr with exit code 1
            if err.use_stderr() {
                eprint!("{err}");
                return ExitCode::from(1);
            }
            print!("{err}");
            return ExitCode::SUCCESS;
        }
    };

    if let Ok(threads) = std::env::var(THREADS_ENV) {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("{THREADS_ENV} must be a positive integer, got {threads:?}");
                return ExitCode::from(1);
            }
        }
    }

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Diagnostic(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }

    match cli.command {
        Command::Pretrain => {
            let path = pipeline::cmd_pretrain(&cfg)?;
            println!("base checkpoint: {}", path.display());
        }
        Command::TrainUpstream { task } => {
            let path = pipeline::cmd_train_upstream(&cfg, task)?;
            println!("adapter file: {}", path.display());
        }
        Command::Adapt { method, k, seed } => {
            let (path, accuracy) = pipeline::cmd_adapt(&cfg, &method, k, seed)?;
            println!("accuracy: {accuracy:.6}");
            println!("report row: {}", path.display());
        }
        Command::Bench => {
            let (paths, report) = pipeline::cmd_bench(&cfg)?;
            for agg in report.aggregates() {
                println!(
                    "{:<24} k={:<4} mean {:.4} +- {:.4}  |theta| {}",
                    agg.method, agg.k.to_string(), agg.mean, agg.std, agg.theta
                );
            }
            println!("report: {}", paths.report_csv.display());
            println!("json:   {}", paths.report_json.display());
            if report.incomplete {
                eprintln!("warning: {} cell(s) failed; report marked incomplete", report.failures.len());
                for f in &report.failures {
                    eprintln!("  {} k={} seed={}: {}", f.method, f.k, f.seed, f.error);
                }
            }
        }
        Command::Ablate { kind } => {
            cfg.ablation.kind = kind;
            let (paths, report) = pipeline::cmd_ablate(&cfg)?;
            for agg in report.aggregates() {
                println!(
                    "{:<24} {:<12} k={:<4} mean {:.4} +- {:.4}",
                    agg.method, agg.detail, agg.k.to_string(), agg.mean, agg.std
                );
            }
            println!("report: {}", paths.report_csv.display());
        }
        Command::AnalyzeCka => {
            let out = pipeline::cmd_analyze_cka(&cfg)?;
            println!("cka map:      {}", out.cka_csv.display());
            println!("weight map:   {}", out.weights_csv.display());
            println!("alignment:    {}", out.alignment_json.display());
            println!("argmax agreement: {:.3}", out.alignment_fraction);
        }
    }
    Ok(())
}
