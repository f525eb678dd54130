use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use darcy_core::harness::{self, Experiment, ExperimentConfig, KEYS};

fn key_help() -> String {
    let mut s = String::from("Config keys (flat `key = value` lines, `#` comments):\n");
    for (key, default, what) in KEYS {
        let default = if default.is_empty() { "(derived)" } else { default };
        s.push_str(&format!("  {key:<15} {what}\n  {:<15} default: {default}\n", ""));
    }
    s
}

/// Runs one experiment pipeline over its (eps, seed) grid and writes the
/// CSV tables and `summary.json`. Exits 0 iff every gate passes.
#[derive(Parser, Debug)]
#[command(name = "darcy", version, after_help = key_help())]
struct Args {
    /// sample | coverage | chains | partition | discrepancy | solve | sweep
    experiment: Experiment,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to every core.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `master_seed` from the config.
    #[arg(long)]
    master_seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("darcy: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let text = match &args.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("darcy: cannot read {}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        None => String::new(),
    };
    let mut config = match ExperimentConfig::parse(&text, Some(args.experiment)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("darcy: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.master_seed {
        config.master_seed = seed;
    }
    let summary = match harness::run(&config, &args.out) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("darcy: {e}");
            return ExitCode::from(2);
        }
    };
    for (name, v) in &summary.verdicts {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    for f in &summary.failures {
        println!("FAILED CELL {}: {}", f.cell, f.error);
    }
    println!("wrote {} files to {} in {:.1} s", summary.outputs.len(), args.out.display(), summary.wall_time_s);
    if summary.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
