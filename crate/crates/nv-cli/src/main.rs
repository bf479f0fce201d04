//! `nv`: reproducible experiment runner for the neuro-vesicle engine.
//!
//! Exit codes: 0 success, 2 usage errors (bad flags, unknown mode), 3 config
//! errors (missing file, parse or constraint failure), 4 numeric abort
//! (non-finite state; the event log collected so far is still written),
//! 1 anything else.

use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;

use clap::Parser;

use nv_core::config::{parse_config, ExperimentConfig, Mode};
use nv_core::runner::{execute, exit_code_for};

#[derive(Parser, Debug)]
#[command(name = "nv", version, about = "Neuro-vesicle simulation runner")]
struct Args {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Override the config's run mode.
    #[arg(long, value_parser = clap::value_parser!(Mode))]
    mode: Option<Mode>,

    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the number of steps (ticks in snn mode).
    #[arg(long)]
    steps: Option<u64>,

    /// Output directory.
    #[arg(long, default_value = "nv-out")]
    out: PathBuf,

    /// Also write per-step per-node tables for external plotting.
    #[arg(long)]
    emit_plots: bool,

    /// Run this many consecutive seeds (starting at the run seed), each into
    /// its own `seed-<n>` subdirectory. Parallelism is capped by NV_THREADS.
    #[arg(long)]
    sweep_seeds: Option<u64>,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let args = Args::parse();

    let text = match fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("nv: cannot read config {}: {e}", args.config.display());
            return 3;
        }
    };
    let mut cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("nv: {e}");
            return 3;
        }
    };
    if let Some(mode) = args.mode {
        cfg.run.mode = mode;
    }
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.run.steps = steps;
        // In rl mode the step budget is the episode count.
        if cfg.run.mode == Mode::Rl {
            cfg.rl.episodes = steps;
        }
    }

    match args.sweep_seeds {
        None => run_single(&cfg, &args),
        Some(n) => run_sweep(&cfg, &args, n),
    }
}

fn run_single(cfg: &ExperimentConfig, args: &Args) -> i32 {
    match execute(cfg, &args.out, args.emit_plots) {
        Ok(summary) => {
            println!("{summary}");
            println!("outputs: {}", args.out.display());
            0
        }
        Err(e) => {
            eprintln!("nv: {e}");
            exit_code_for(&e)
        }
    }
}

fn sweep_threads(jobs: usize) -> usize {
    let cap = std::env::var("NV_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0);
    let hw = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    cap.unwrap_or(hw).min(jobs.max(1))
}

fn run_sweep(cfg: &ExperimentConfig, args: &Args, n: u64) -> i32 {
    let seeds: Vec<u64> = (0..n).map(|i| cfg.run.seed + i).collect();
    let workers = sweep_threads(seeds.len());
    let next = Mutex::new(0usize);
    let failures: Mutex<Vec<(u64, i32, String)>> = Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = {
                    let mut guard = next.lock().unwrap();
                    let i = *guard;
                    *guard += 1;
                    i
                };
                if idx >= seeds.len() {
                    break;
                }
                let seed = seeds[idx];
                let mut run_cfg = cfg.clone();
                run_cfg.run.seed = seed;
                let out = args.out.join(format!("seed-{seed}"));
                match execute(&run_cfg, &out, args.emit_plots) {
                    Ok(summary) => println!("seed {seed}: {summary}"),
                    Err(e) => {
                        failures
                            .lock()
                            .unwrap()
                            .push((seed, exit_code_for(&e), format!("{e}")))
                    }
                }
            });
        }
    });

    let failures = failures.into_inner().unwrap();
    if failures.is_empty() {
        println!(
            "sweep complete: {} seeds under {}",
            seeds.len(),
            args.out.display()
        );
        0
    } else {
        for (seed, _, msg) in &failures {
            eprintln!("nv: seed {seed} failed: {msg}");
        }
        failures[0].1
    }
}
