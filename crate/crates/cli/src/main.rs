use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use clap::{Parser, Subcommand};
use repq_train::metrics::{read_summary, write_summary};
use repq_train::pipeline::{run_seed, seed_dir};
use repq_train::verify::{self, Sabotage};
use repq_train::{ExperimentConfig, TrainError};

const OK: u8 = 0;
const FAILURE: u8 = 1;
const USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "repq", version, about = "Quantization-aware training of re-parametrized convolution blocks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every seed of an experiment and write checkpoints, metrics and a summary table.
    Run {
        config: PathBuf,
        /// Seeds trained concurrently, each in its own process.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the invariant suites.
    Verify {
        #[arg(long)]
        json: bool,
        /// Inject a fault into one suite's code path.
        #[arg(long, value_name = "NAME")]
        sabotage: Option<String>,
    },
    /// Multiply counts of one training step, exact BN folding against estimated statistics.
    Flops {
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    #[command(hide = true)]
    RunSeed {
        config: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

fn fail(e: &TrainError) -> u8 {
    eprintln!("error: {e}");
    if e.is_usage() {
        USAGE
    } else {
        FAILURE
    }
}

fn cmd_run(config: &Path, jobs: usize) -> u8 {
    let cfg = match ExperimentConfig::load(config) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot locate executable: {e}");
            return FAILURE;
        }
    };
    let mut pending = cfg.seeds.iter().copied();
    let mut running: Vec<(u64, Child)> = Vec::new();
    let mut failed = Vec::new();
    loop {
        while running.len() < jobs.max(1) {
            let Some(seed) = pending.next() else { break };
            let child = Command::new(&exe).arg("run-seed").arg(config).arg("--seed").arg(seed.to_string()).spawn();
            match child {
                Ok(c) => running.push((seed, c)),
                Err(e) => {
                    eprintln!("error: seed {seed}: {e}");
                    failed.push(seed);
                }
            }
        }
        if running.is_empty() {
            break;
        }
        let (seed, mut child) = running.remove(0);
        match child.wait() {
            Ok(s) if s.success() => {}
            _ => failed.push(seed),
        }
    }
    if !failed.is_empty() {
        eprintln!("error: seeds {failed:?} failed");
        return FAILURE;
    }

    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        match read_summary(&seed_dir(&cfg, seed).join("summary.csv")) {
            Ok(r) => rows.extend(r),
            Err(e) => return fail(&e),
        }
    }
    let path = cfg.output_dir.join("summary.csv");
    if let Err(e) = write_summary(&path, &rows) {
        return fail(&e);
    }
    println!("{:<10} {:<12} {:>4} {:>5} {:>8}", "strategy", "bn_mode", "bits", "seed", "metric");
    for r in &rows {
        println!("{:<10} {:<12} {:>4} {:>5} {:>8.4}", r.strategy, r.bn_mode, r.bits, r.seed, r.metric);
    }
    println!("wrote {}", path.display());
    OK
}

fn cmd_run_seed(config: &Path, seed: u64) -> u8 {
    let cfg = match ExperimentConfig::load(config) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let dir = seed_dir(&cfg, seed);
    let mut log = |r: &repq_train::metrics::EpochRecord| {
        eprintln!(
            "seed {} {} epoch {:>3} lr {:.5} loss {:.4} acc {:.4} ({} ms)",
            r.seed, r.stage, r.epoch, r.lr, r.train_loss, r.eval_accuracy, r.wall_ms
        );
    };
    match run_seed::<f32>(&cfg, seed, Some(&dir), &mut log) {
        Ok(_) => OK,
        Err(e) => fail(&e),
    }
}

fn cmd_verify(json: bool, sabotage: Option<&str>) -> u8 {
    let fault = match sabotage {
        None => None,
        Some(name) => match Sabotage::parse(name) {
            Some(f) => Some(f),
            None => {
                let known: Vec<&str> = Sabotage::ALL.iter().map(|s| s.name()).collect();
                eprintln!("error: unknown sabotage `{name}`, expected one of {}", known.join(", "));
                return USAGE;
            }
        },
    };
    let report = verify::run(fault);
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    if report.passed() {
        OK
    } else {
        FAILURE
    }
}

fn cmd_flops(config: &Path, json: bool) -> u8 {
    let report = match ExperimentConfig::load(config).and_then(|c| repq_train::flops::flops_report(&c)) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    if json {
        match serde_json::to_string_pretty(&report) {
            Ok(s) => println!("{s}"),
            Err(e) => {
                eprintln!("error: {e}");
                return FAILURE;
            }
        }
    } else {
        print!("{}", report.to_text());
    }
    OK
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Cmd::Run { config, jobs } => cmd_run(&config, jobs),
        Cmd::Verify { json, sabotage } => cmd_verify(json, sabotage.as_deref()),
        Cmd::Flops { config, json } => cmd_flops(&config, json),
        Cmd::RunSeed { config, seed } => cmd_run_seed(&config, seed),
    };
    ExitCode::from(code)
}
