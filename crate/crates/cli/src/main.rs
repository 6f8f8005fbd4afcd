use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::Parser;
use impact_core::channel::Policy;
use impact_core::config::{parse_config, Config};
use impact_core::experiments::{run_experiment, Experiment, RunOptions};

/// Row-buffer timing channel experiments on a simulated PiM-enabled DRAM.
#[derive(Debug, Parser)]
#[command(name = "impact", version)]
struct Args {
    /// poc-pnm, poc-pum, latency-gap, throughput-sweep, sender-breakdown,
    /// side-channel-sweep, mitigation-overhead or mitigation-channel
    experiment: String,

    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory for <experiment>.csv and <experiment>.summary.txt.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    #[arg(long, env = "IMPACT_SEED", default_value_t = 0)]
    seed: u64,

    /// Send N random bits instead of the default message.
    #[arg(long, conflicts_with = "message")]
    random_bits: Option<usize>,

    /// Message as hex, most significant bit first.
    #[arg(long)]
    message: Option<String>,

    /// open, closed, constant or partition
    #[arg(long)]
    policy: Option<String>,

    /// Side channel: bank counts to sweep.
    #[arg(long, value_delimiter = ',')]
    banks: Option<Vec<usize>>,

    /// Side channel: hash entry size in bytes at 1024 banks.
    #[arg(long)]
    entry_size: Option<u64>,

    /// Side channel: number of victim reads.
    #[arg(long)]
    reads: Option<usize>,

    /// Side channel: victim lookups per kilocycle.
    #[arg(long)]
    victim_rate: Option<f64>,
}

fn run(args: Args) -> anyhow::Result<()> {
    let exp = Experiment::parse(&args.experiment).ok_or_else(|| {
        let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
        anyhow!("unknown experiment {:?}; expected one of: {}", args.experiment, names.join(", "))
    })?;
    let policy = args
        .policy
        .as_deref()
        .map(|p| Policy::parse(p).ok_or_else(|| anyhow!("unknown policy {p:?}; expected open, closed, constant or partition")))
        .transpose()?;
    let mut cfg = match &args.config {
        Some(path) => parse_config(path)?,
        None => Config::default(),
    };
    if let Some(b) = args.banks {
        cfg.sidechannel_banks = b;
    }
    let sc = &mut cfg.sidechannel;
    sc.entry_size_bytes = args.entry_size.unwrap_or(sc.entry_size_bytes);
    sc.victim.n_reads = args.reads.unwrap_or(sc.victim.n_reads);
    sc.victim.lookups_per_kilocycle = args.victim_rate.unwrap_or(sc.victim.lookups_per_kilocycle);
    let opts = RunOptions { seed: args.seed, random_bits: args.random_bits, message: args.message, policy };
    let artifacts = run_experiment(exp, &cfg, &opts).with_context(|| format!("experiment {} failed", exp.name()))?;
    artifacts
        .write(&args.out, exp)
        .with_context(|| format!("writing results to {}", args.out.display()))?;
    print!("{}", artifacts.summary);
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
