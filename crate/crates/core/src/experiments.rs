//! Named experiments. Each produces one CSV and a short text summary; output
//! depends only on the configuration and the run seed.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::cache::{self, AttackKind};
use crate::channel::{
    self, calibrate_threshold, parse_hex_message, random_message, run_channel, transmit_detailed, ChannelKind, Policy,
};
use crate::config::Config;
use crate::dram::{Cycle, DramState, MemoryAccess, Origin};
use crate::error::{Result, SimError};
use crate::mitigation::{self, overhead_report};
use crate::pim::{line_addr, PeiOp, PeiRequest, PimEngine, RowCloneRequest};
use crate::sidechannel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    PocPnm,
    PocPum,
    LatencyGap,
    ThroughputSweep,
    SenderBreakdown,
    SideChannelSweep,
    MitigationOverhead,
    MitigationChannel,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::PocPnm,
        Experiment::PocPum,
        Experiment::LatencyGap,
        Experiment::ThroughputSweep,
        Experiment::SenderBreakdown,
        Experiment::SideChannelSweep,
        Experiment::MitigationOverhead,
        Experiment::MitigationChannel,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::PocPnm => "poc-pnm",
            Experiment::PocPum => "poc-pum",
            Experiment::LatencyGap => "latency-gap",
            Experiment::ThroughputSweep => "throughput-sweep",
            Experiment::SenderBreakdown => "sender-breakdown",
            Experiment::SideChannelSweep => "side-channel-sweep",
            Experiment::MitigationOverhead => "mitigation-overhead",
            Experiment::MitigationChannel => "mitigation-channel",
        }
    }

    pub fn parse(s: &str) -> Option<Experiment> {
        Experiment::ALL.into_iter().find(|e| e.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Mixed into every seed in the configuration.
    pub seed: u64,
    pub random_bits: Option<usize>,
    pub message: Option<String>,
    pub policy: Option<Policy>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub csv: String,
    pub summary: String,
}

impl Artifacts {
    pub fn write(&self, out_dir: &Path, exp: Experiment) -> io::Result<()> {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join(format!("{}.csv", exp.name())), &self.csv)?;
        fs::write(out_dir.join(format!("{}.summary.txt", exp.name())), &self.summary)
    }
}

/// LLC ways used for the size sweep and the ways sweep's fixed size.
pub const SWEEP_WAYS: [u32; 7] = [2, 4, 8, 16, 32, 64, 128];
pub const FIXED_WAYS: u32 = 16;
pub const FIXED_SIZE_MB: u32 = 16;

fn seeded(cfg: &Config, seed: u64) -> Config {
    let mut c = cfg.clone();
    c.channel.noise.seed ^= seed;
    c.sidechannel.victim.seed ^= seed;
    c.sidechannel.noise.seed ^= seed;
    for p in &mut c.profiles {
        p.seed ^= seed;
    }
    c
}

fn message(opts: &RunOptions, default_bits: usize, default_hex: Option<&str>) -> Result<Vec<bool>> {
    if let Some(hex) = &opts.message {
        return parse_hex_message(hex);
    }
    if let Some(n) = opts.random_bits {
        if n == 0 {
            return Err(SimError::InvalidMessage("--random-bits must be positive".into()));
        }
        return Ok(random_message(n, opts.seed));
    }
    match default_hex {
        Some(hex) => parse_hex_message(hex),
        None => Ok(random_message(default_bits, opts.seed)),
    }
}

pub fn run_experiment(exp: Experiment, cfg: &Config, opts: &RunOptions) -> Result<Artifacts> {
    cfg.validate()?;
    let cfg = &seeded(cfg, opts.seed);
    match exp {
        Experiment::PocPnm => poc(ChannelKind::Pnm, cfg, opts),
        Experiment::PocPum => poc(ChannelKind::Pum, cfg, opts),
        Experiment::LatencyGap => latency_gap(cfg),
        Experiment::ThroughputSweep => throughput_sweep(cfg),
        Experiment::SenderBreakdown => sender_breakdown(cfg, opts),
        Experiment::SideChannelSweep => side_channel_sweep(cfg),
        Experiment::MitigationOverhead => mitigation_overhead(cfg),
        Experiment::MitigationChannel => mitigation_channel(cfg, opts),
    }
}

fn poc(kind: ChannelKind, cfg: &Config, opts: &RunOptions) -> Result<Artifacts> {
    let msg = message(opts, 16, Some("A5A5"))?;
    let policy = opts.policy.unwrap_or(Policy::Open);
    let dram = policy.apply(&cfg.dram);
    let run = transmit_detailed(kind, &msg, &cfg.channel, &dram, &cfg.pim)?;
    let r = &run.result;
    let mut csv = String::from("bit,bank,sent,latency_cycles,decoded\n");
    for p in &r.probes {
        if p.bit < msg.len() {
            let _ = writeln!(csv, "{},{},{},{},{}", p.bit, p.bank, msg[p.bit] as u8, p.latency_cycles, p.decoded as u8);
        }
    }
    let mut summary = String::new();
    let _ = writeln!(summary, "{} proof of concept, policy {}", kind.name(), policy.name());
    let _ = writeln!(summary, "bits {} errors {} error_rate {:.4}", r.bits_sent, r.bits_sent - r.bits_correct, r.error_rate);
    let _ = writeln!(summary, "threshold {} cycles", cfg.channel.threshold_cycles);
    let _ = writeln!(summary, "throughput {:.3} Mb/s over {} cycles", r.throughput_mbps, r.total_cycles);
    Ok(Artifacts { csv, summary })
}

/// Host, PEI and RowClone latencies of each row-buffer class on an idle device.
pub fn measure_latencies(cfg: &Config) -> Result<Vec<(&'static str, &'static str, Cycle)>> {
    let dram_cfg = crate::dram::DramConfig { partition_map: None, ..cfg.dram.clone() };
    let mut out = Vec::new();

    let host = |row_first: Option<u64>, row: u64| -> Result<Cycle> {
        let mut d = DramState::new(dram_cfg.clone())?.without_log();
        if let Some(r) = row_first {
            d.access(&MemoryAccess { process_id: 1, bank: 0, row: r, issue_cycle: 0, origin: Origin::Host })?;
        }
        let o = d.access(&MemoryAccess { process_id: 1, bank: 0, row, issue_cycle: 200, origin: Origin::Host })?;
        Ok(o.latency_cycles)
    };
    out.push(("host", "hit", host(Some(1), 1)?));
    out.push(("host", "empty", host(None, 1)?));
    out.push(("host", "conflict", host(Some(2), 1)?));

    let pei = |row_first: Option<u64>, row: u64| -> Result<Cycle> {
        let mut d = DramState::new(dram_cfg.clone())?.without_log();
        let mut p = PimEngine::new(cfg.pim.clone())?;
        if let Some(r) = row_first {
            let req = PeiRequest { process_id: 1, target_addr: line_addr(0, r, 0, &dram_cfg), op: PeiOp::Add };
            p.execute_pei(&mut d, &req, 0)?;
        }
        let req = PeiRequest { process_id: 1, target_addr: line_addr(0, row, 1, &dram_cfg), op: PeiOp::Add };
        Ok(p.execute_pei(&mut d, &req, 1000)?.latency_cycles)
    };
    out.push(("pei", "hit", pei(Some(1), 1)?));
    out.push(("pei", "empty", pei(None, 1)?));
    out.push(("pei", "conflict", pei(Some(2), 1)?));

    let clone = |first: Option<(u64, u64)>, src: u64, dst: u64| -> Result<Cycle> {
        let mut d = DramState::new(dram_cfg.clone())?.without_log();
        let p = PimEngine::new(cfg.pim.clone())?;
        let mut mask = vec![false; dram_cfg.n_banks];
        mask[0] = true;
        if let Some((s, t)) = first {
            p.execute_rowclone(&mut d, &RowCloneRequest::spanning(1, s, t, mask.clone(), &dram_cfg), 0)?;
        }
        let req = RowCloneRequest::spanning(1, src, dst, mask, &dram_cfg);
        Ok(p.execute_rowclone(&mut d, &req, 1000)?.latency_cycles)
    };
    out.push(("rowclone", "hit", clone(Some((2, 1)), 1, 2)?));
    out.push(("rowclone", "empty", clone(None, 1, 2)?));
    out.push(("rowclone", "conflict", clone(Some((3, 4)), 1, 2)?));
    Ok(out)
}

fn latency_gap(cfg: &Config) -> Result<Artifacts> {
    let lat = measure_latencies(cfg)?;
    let mut csv = String::from("path,class,latency_cycles\n");
    for (path, class, c) in &lat {
        let _ = writeln!(csv, "{path},{class},{c}");
    }
    let get = |path: &str, class: &str| lat.iter().find(|l| l.0 == path && l.1 == class).map(|l| l.2).unwrap();
    let t = cfg.dram.timings();
    let mut summary = String::new();
    let _ = writeln!(summary, "host conflict - hit gap: {} cycles", get("host", "conflict") as i64 - get("host", "hit") as i64);
    let _ = writeln!(summary, "raw model term tRP + tRCD: {} cycles", t.t_rp + t.t_rcd);
    let _ = writeln!(summary, "pei conflict - hit gap: {} cycles", get("pei", "conflict") as i64 - get("pei", "hit") as i64);
    match calibrate_threshold(&cfg.dram, &cfg.pim, 16) {
        Ok(th) => {
            let _ = writeln!(summary, "calibrated pei threshold: {th} cycles");
        }
        Err(e) => {
            let _ = writeln!(summary, "calibration: {e}");
        }
    }
    Ok(Artifacts { csv, summary })
}

/// Sweep points: sizes at the fixed associativity, then ways at the fixed size.
pub fn sweep_points(cfg: &Config) -> Vec<(u32, u32)> {
    let mut pts: Vec<(u32, u32)> = cfg.cache.sizes().into_iter().map(|s| (s, FIXED_WAYS)).collect();
    for w in SWEEP_WAYS {
        if !pts.contains(&(FIXED_SIZE_MB, w)) {
            pts.push((FIXED_SIZE_MB, w));
        }
    }
    pts
}

/// Simulated PnM and PuM channel throughput for the configured device.
pub fn impact_throughput(cfg: &Config, bits: usize, seed: u64) -> Result<[(ChannelKind, channel::ChannelResult); 2]> {
    let msg = random_message(bits, seed);
    let pnm = channel::pnm_transmit(&msg, &cfg.channel, &cfg.dram, &cfg.pim)?;
    let pum = channel::pum_transmit(&msg, &cfg.channel, &cfg.dram, &cfg.pim)?;
    Ok([(ChannelKind::Pnm, pnm), (ChannelKind::Pum, pum)])
}

fn throughput_sweep(cfg: &Config) -> Result<Artifacts> {
    let points = sweep_points(cfg);
    let mut rows = Vec::new();
    for &(size, ways) in &points {
        rows.extend(cache::sweep(&AttackKind::ALL, &[size], &[ways], &cfg.cache, &cfg.analytic, cfg.dram.clock_ghz)?);
    }
    rows.sort_by_key(|r| AttackKind::ALL.iter().position(|k| *k == r.kind));
    let mut csv = cache::sweep_csv(&rows);
    let impact = impact_throughput(cfg, 1024, cfg.channel.noise.seed)?;
    for (kind, r) in &impact {
        let per_bit = r.total_cycles / r.bits_sent as u64;
        for &(size, ways) in &points {
            let _ = writeln!(csv, "{},{},{},{},{:.4}", kind.name(), size, ways, per_bit, r.throughput_mbps);
        }
    }
    let mut summary = String::new();
    for (kind, r) in &impact {
        let _ = writeln!(summary, "{}: {:.3} Mb/s (independent of LLC)", kind.name(), r.throughput_mbps);
    }
    let _ = writeln!(summary, "PuM / PnM throughput: {:.3}", impact[1].1.throughput_mbps / impact[0].1.throughput_mbps);
    for kind in AttackKind::ALL {
        let t: Vec<f64> = rows.iter().filter(|r| r.kind == kind).map(|r| r.throughput_mbps).collect();
        let (lo, hi) = t.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        let _ = writeln!(summary, "{}: {:.3} .. {:.3} Mb/s", kind.name(), lo, hi);
    }
    Ok(Artifacts { csv, summary })
}

fn sender_breakdown(cfg: &Config, opts: &RunOptions) -> Result<Artifacts> {
    let msg = message(opts, 16, Some("A5A5"))?;
    let mut csv = String::from("kind,bits,sender_cycles,receiver_cycles,total_cycles\n");
    let mut sender = Vec::new();
    for kind in [ChannelKind::Pnm, ChannelKind::Pum] {
        let r = transmit_detailed(kind, &msg, &cfg.channel, &cfg.dram, &cfg.pim)?.result;
        let _ = writeln!(csv, "{},{},{},{},{}", kind.name(), r.bits_sent, r.sender_cycles, r.receiver_cycles, r.total_cycles);
        sender.push(r.sender_cycles);
    }
    let summary = format!(
        "sender cycles PnM {} PuM {}; PuM sends {:.2}x faster\n",
        sender[0],
        sender[1],
        sender[0] as f64 / sender[1].max(1) as f64
    );
    Ok(Artifacts { csv, summary })
}

fn side_channel_sweep(cfg: &Config) -> Result<Artifacts> {
    let points = sidechannel::sweep(&cfg.sidechannel, &cfg.sidechannel_banks, &cfg.dram, &cfg.pim)?;
    let csv = sidechannel::sweep_csv(&points);
    let mut summary = String::new();
    for p in &points {
        let r = &p.result;
        let _ = writeln!(
            summary,
            "{} banks: {:.3} Mb/s, error {:.4}, accuracy {:.4}, {} candidates per hit",
            p.n_banks, r.throughput_mbps, r.error_rate, r.identification_accuracy, r.candidates_per_hit
        );
    }
    Ok(Artifacts { csv, summary })
}

fn mitigation_overhead(cfg: &Config) -> Result<Artifacts> {
    let report = overhead_report(&cfg.profiles, &cfg.dram, &cfg.trace)?;
    let csv = mitigation::report_csv(&report);
    let mut summary = String::new();
    for p in &report.profiles {
        let _ = writeln!(summary, "{}: closed-row {:+.2}%, constant-time {:+.2}%", p.profile, p.crp_overhead_pct, p.ctd_overhead_pct);
    }
    let _ = writeln!(summary, "mean closed-row {:.2}%, mean constant-time {:.2}%", report.mean_crp_pct, report.mean_ctd_pct);
    Ok(Artifacts { csv, summary })
}

fn mitigation_channel(cfg: &Config, opts: &RunOptions) -> Result<Artifacts> {
    let msg = message(opts, 1024, None)?;
    let policies = match opts.policy {
        Some(p) => vec![p],
        None => vec![Policy::Open, Policy::Closed, Policy::Constant, Policy::Partition],
    };
    let mut csv = format!("{},outcome\n", channel::RUN_HEADER);
    let mut summary = String::new();
    for kind in [ChannelKind::Pnm, ChannelKind::Pum] {
        for &policy in &policies {
            match run_channel(kind, &msg, &cfg.channel, &cfg.dram, &cfg.pim, policy) {
                Ok(r) => {
                    let _ = writeln!(csv, "{},ok", channel::run_csv_row(kind, policy, cfg.dram.n_banks, &r));
                    let _ = writeln!(summary, "{} {}: error_rate {:.4}", kind.name(), policy.name(), r.error_rate);
                }
                Err(SimError::PartitionViolation { process, bank }) => {
                    let _ = writeln!(
                        csv,
                        "{},{},{},{},,,,,,,partition_violation",
                        kind.name(),
                        policy.name(),
                        cfg.dram.n_banks,
                        msg.len()
                    );
                    let _ = writeln!(summary, "{} {}: blocked (process {process} denied bank {bank})", kind.name(), policy.name());
                }
                Err(e) => return Err(e),
            }
        }
    }
    for policy in policies {
        let d = policy.apply(&cfg.dram);
        let line = match calibrate_threshold(&d, &cfg.pim, 16) {
            Ok(t) => format!("threshold calibration under {}: {t} cycles", policy.name()),
            Err(e) => format!("threshold calibration under {}: {e}", policy.name()),
        };
        let _ = writeln!(summary, "{line}");
    }
    Ok(Artifacts { csv, summary })
}
