use std::path::PathBuf;
use std::process::ExitCode;

use a2q::report::run::{run, seed_dir, Command};
use a2q::report::ExperimentConfig;
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

/// Aggregation-aware mixed-precision quantization for graph neural networks.
#[derive(Parser, Debug)]
#[command(name = "a2q", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train in the configured quant mode and write a checkpoint.
    Train(Common),
    /// Quantization-aware fine-tuning of an FP32 model.
    Quantize(Common),
    /// Integer inference of a trained checkpoint.
    Infer(Common),
    /// Accelerator cycle and energy estimate of a trained checkpoint.
    Simulate(Common),
    /// Summarise run records into summary.csv and summary.json.
    Report(Common),
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Quantize(c) => (Command::Quantize, c),
        Cmd::Infer(c) => (Command::Infer, c),
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Report(c) => (Command::Report, c),
    };
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading config {}", common.config.display()))?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = common.out {
        cfg.out = o;
    }
    let records = run(cmd, &cfg).with_context(|| format!("{} failed", cmd.name()))?;
    if cmd == Command::Report {
        println!("wrote {} and {}", cfg.out.join("summary.csv").display(), cfg.out.join("summary.json").display());
    }
    for r in &records {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut line = format!(
            "{} seed={} test_acc={} avg_bits={} compression={}",
            cmd.name(),
            r.seed,
            fmt(r.test_accuracy),
            fmt(r.avg_bits),
            fmt(r.compression_ratio)
        );
        if r.int_test_accuracy.is_some() {
            line += &format!(" int_test_acc={}", fmt(r.int_test_accuracy));
        }
        if let Some(c) = &r.cycle_report {
            line += &format!(
                " cycles={} speedup_vs_int4={:.3} energy_pj={:.3e}",
                c.total_cycles, c.speedup_vs_int4, c.energy_pj
            );
        }
        println!("{line} -> {}", seed_dir(&cfg, r.seed).display());
    }
    Ok(())
}
