//! Performance cost of row-buffer mitigations on synthetic co-runner traces.
//!
//! A workload is two dependent access streams sharing the banks. Each stream
//! issues an access, waits for it, computes for `think_cycles`, and issues
//! the next. Row locality is a single reuse probability per profile.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dram::{AccessKind, Cycle, DramConfig, DramState, MemoryAccess, Origin, RowPolicy};
use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadProfile {
    pub name: String,
    /// Descriptor only; reuse is ranked by it.
    pub llc_mpki: f64,
    pub row_reuse_prob: f64,
    pub accesses: usize,
    pub seed: u64,
}

impl WorkloadProfile {
    pub fn new(name: &str, llc_mpki: f64, row_reuse_prob: f64, seed: u64) -> Self {
        WorkloadProfile { name: name.to_string(), llc_mpki, row_reuse_prob, accesses: 20_000, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.row_reuse_prob) {
            return Err(SimError::InvalidConfig(format!(
                "profile {}: row_reuse_prob must be in [0, 1]",
                self.name
            )));
        }
        if self.accesses == 0 {
            return Err(SimError::InvalidConfig(format!("profile {}: accesses must be positive", self.name)));
        }
        Ok(())
    }
}

/// Graph workloads, reuse decreasing with MPKI.
pub fn default_profiles() -> Vec<WorkloadProfile> {
    vec![
        WorkloadProfile::new("BC", 0.57, 0.99, 11),
        WorkloadProfile::new("PR", 1.86, 0.97, 12),
        WorkloadProfile::new("TC", 5.08, 0.8, 13),
        WorkloadProfile::new("BFS", 38.59, 0.55, 14),
        WorkloadProfile::new("CC", 45.2, 0.5, 15),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceConfig {
    pub streams: usize,
    pub think_cycles: Cycle,
    pub rows_per_bank: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig { streams: 2, think_cycles: 120, rows_per_bank: 65_536 }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.streams == 0 || self.rows_per_bank == 0 {
            return Err(SimError::InvalidConfig("streams and rows_per_bank must be positive".into()));
        }
        Ok(())
    }
}

/// One (bank, row) sequence per stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessTrace {
    pub streams: Vec<Vec<(usize, u64)>>,
}

impl AccessTrace {
    pub fn len(&self) -> usize {
        self.streams.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn gen_trace(profile: &WorkloadProfile, dram_cfg: &DramConfig, tcfg: &TraceConfig) -> Result<AccessTrace> {
    profile.validate()?;
    tcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let mut streams = vec![Vec::new(); tcfg.streams];
    let mut last: Vec<Option<(usize, u64)>> = vec![None; tcfg.streams];
    for i in 0..profile.accesses {
        let s = i % tcfg.streams;
        // all three draws are always taken so traces for different reuse
        // probabilities share their random locations
        let u: f64 = rng.random();
        let fresh = (rng.random_range(0..dram_cfg.n_banks), rng.random_range(0..tcfg.rows_per_bank));
        let next = match last[s] {
            Some(prev) if u < profile.row_reuse_prob => prev,
            _ => fresh,
        };
        streams[s].push(next);
        last[s] = Some(next);
    }
    Ok(AccessTrace { streams })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TraceRun {
    /// Cycle the last stream finished, compute included.
    pub total_cycles: Cycle,
    /// Sum of per-access service latencies.
    pub service_cycles: Cycle,
    pub hits: usize,
    pub empties: usize,
    pub conflicts: usize,
}

pub fn run_trace(trace: &AccessTrace, dram_cfg: &DramConfig, policy: RowPolicy, tcfg: &TraceConfig) -> Result<TraceRun> {
    let cfg = DramConfig { row_policy: policy, partition_map: None, ..dram_cfg.clone() };
    let mut dram = DramState::new(cfg)?.without_log();
    let mut clocks = vec![0 as Cycle; trace.streams.len()];
    let mut pos = vec![0usize; trace.streams.len()];
    let mut run = TraceRun::default();
    loop {
        let next = (0..trace.streams.len())
            .filter(|&s| pos[s] < trace.streams[s].len())
            .min_by_key(|&s| (clocks[s], s));
        let Some(s) = next else { break };
        let (bank, row) = trace.streams[s][pos[s]];
        pos[s] += 1;
        let out = dram.access(&MemoryAccess {
            process_id: s as u32,
            bank,
            row,
            issue_cycle: clocks[s],
            origin: Origin::Host,
        })?;
        run.service_cycles += out.latency_cycles;
        match out.kind {
            AccessKind::Hit => run.hits += 1,
            AccessKind::Empty => run.empties += 1,
            AccessKind::Conflict => run.conflicts += 1,
        }
        clocks[s] = out.completion_cycle + tcfg.think_cycles;
    }
    run.total_cycles = clocks.into_iter().max().unwrap_or(0);
    Ok(run)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileOverhead {
    pub profile: String,
    pub baseline_cycles: Cycle,
    pub crp_cycles: Cycle,
    pub ctd_cycles: Cycle,
    pub crp_overhead_pct: f64,
    pub ctd_overhead_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadReport {
    pub profiles: Vec<ProfileOverhead>,
    pub mean_crp_pct: f64,
    pub mean_ctd_pct: f64,
}

pub fn overhead_pct(cycles: Cycle, baseline: Cycle) -> f64 {
    (cycles as f64 - baseline as f64) / baseline as f64 * 100.0
}

/// Open-row (the configured open policy) versus closed-row and constant-time.
pub fn overhead_report(profiles: &[WorkloadProfile], dram_cfg: &DramConfig, tcfg: &TraceConfig) -> Result<OverheadReport> {
    if profiles.is_empty() {
        return Err(SimError::InvalidConfig("overhead report needs at least one profile".into()));
    }
    let open = match dram_cfg.row_policy {
        p @ RowPolicy::OpenTimeout { .. } => p,
        _ => DramConfig::default().row_policy,
    };
    let mut rows = Vec::with_capacity(profiles.len());
    for p in profiles {
        let trace = gen_trace(p, dram_cfg, tcfg)?;
        let base = run_trace(&trace, dram_cfg, open, tcfg)?.total_cycles;
        let crp = run_trace(&trace, dram_cfg, RowPolicy::ClosedRow, tcfg)?.total_cycles;
        let ctd = run_trace(&trace, dram_cfg, RowPolicy::ConstantTime, tcfg)?.total_cycles;
        rows.push(ProfileOverhead {
            profile: p.name.clone(),
            baseline_cycles: base,
            crp_cycles: crp,
            ctd_cycles: ctd,
            crp_overhead_pct: overhead_pct(crp, base),
            ctd_overhead_pct: overhead_pct(ctd, base),
        });
    }
    let n = rows.len() as f64;
    Ok(OverheadReport {
        mean_crp_pct: rows.iter().map(|r| r.crp_overhead_pct).sum::<f64>() / n,
        mean_ctd_pct: rows.iter().map(|r| r.ctd_overhead_pct).sum::<f64>() / n,
        profiles: rows,
    })
}

pub const REPORT_HEADER: &str = "profile,policy,total_cycles,overhead_pct";

pub fn report_csv(report: &OverheadReport) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in &report.profiles {
        for (policy, cycles, pct) in [
            ("open", r.baseline_cycles, 0.0),
            ("closed", r.crp_cycles, r.crp_overhead_pct),
            ("constant", r.ctd_cycles, r.ctd_overhead_pct),
        ] {
            let _ = writeln!(s, "{},{},{},{:.4}", r.profile, policy, cycles, pct);
        }
    }
    s
}
