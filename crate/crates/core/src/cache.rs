//! Closed-form per-bit cost of the cache-mediated baseline channels.
//!
//! Each baseline pays the DRAM signalling cost of one bit plus whatever it
//! takes to get a request past the cache hierarchy. LLC lookup latencies
//! per size are inputs, not derived.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackKind {
    DramaClflush,
    DramaEviction,
    Streamline,
    DmaEngine,
    PnmOffChip,
    DirectAccess,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::DirectAccess,
        AttackKind::DramaClflush,
        AttackKind::DramaEviction,
        AttackKind::Streamline,
        AttackKind::DmaEngine,
        AttackKind::PnmOffChip,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::DramaClflush => "drama-clflush",
            AttackKind::DramaEviction => "drama-eviction",
            AttackKind::Streamline => "streamline",
            AttackKind::DmaEngine => "dma-engine",
            AttackKind::PnmOffChip => "pnm-offchip",
            AttackKind::DirectAccess => "direct-access",
        }
    }

    /// Whether every request goes through the cache hierarchy.
    pub fn is_cache_mediated(&self) -> bool {
        matches!(self, AttackKind::DramaClflush | AttackKind::DramaEviction | AttackKind::Streamline)
    }
}

/// LLC lookup latency per LLC size plus the average miss cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheModel {
    pub lookup_cycles: BTreeMap<u32, u64>,
    pub mem_miss_cycles: u64,
}

impl Default for CacheModel {
    fn default() -> Self {
        CacheModel {
            lookup_cycles: BTreeMap::from([(8, 280), (16, 340), (32, 430), (64, 560), (128, 761)]),
            mem_miss_cycles: 112,
        }
    }
}

impl CacheModel {
    pub fn validate(&self) -> Result<()> {
        if self.lookup_cycles.is_empty() {
            return Err(SimError::InvalidConfig("LLC lookup table is empty".into()));
        }
        let lat: Vec<u64> = self.lookup_cycles.values().copied().collect();
        if lat.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SimError::InvalidConfig(
                "LLC lookup cycles must be strictly increasing in LLC size".into(),
            ));
        }
        Ok(())
    }

    pub fn lookup(&self, llc_size_mb: u32) -> Result<u64> {
        self.lookup_cycles.get(&llc_size_mb).copied().ok_or_else(|| {
            SimError::InvalidConfig(format!("no LLC lookup latency for {llc_size_mb} MB"))
        })
    }

    pub fn sizes(&self) -> Vec<u32> {
        self.lookup_cycles.keys().copied().collect()
    }

    pub fn point(&self, llc_size_mb: u32, llc_ways: u32) -> Result<CacheConfig> {
        if llc_ways == 0 {
            return Err(SimError::InvalidConfig("llc_ways must be >= 1".into()));
        }
        Ok(CacheConfig {
            llc_size_mb,
            llc_ways,
            llc_lookup_cycles: self.lookup(llc_size_mb)?,
            mem_miss_cycles: self.mem_miss_cycles,
        })
    }
}

/// One LLC configuration point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    pub llc_size_mb: u32,
    pub llc_ways: u32,
    pub llc_lookup_cycles: u64,
    pub mem_miss_cycles: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticParams {
    /// Cycles to signal one bit through the row buffer with direct access.
    pub dram_bit_cost_cycles: u64,
    /// Per-bit cost of the locality-monitor-bypassing PnM channel; base of PnM-OffChip.
    pub pnm_bit_cost_cycles: u64,
    pub dma_os_overhead_cycles: u64,
    /// Off-chip predictor probability of keeping data on chip at the
    /// smallest and largest LLC sizes; log-linear in size between them.
    pub offchip_prob_min: f64,
    pub offchip_prob_max: f64,
    pub offchip_size_min_mb: u32,
    pub offchip_size_max_mb: u32,
    pub streamline_fixed_cycles: u64,
    pub streamline_round_trips: u64,
}

impl Default for AnalyticParams {
    fn default() -> Self {
        AnalyticParams {
            dram_bit_cost_cycles: 231,
            pnm_bit_cost_cycles: 202,
            dma_os_overhead_cycles: 262,
            offchip_prob_min: 0.018,
            offchip_prob_max: 0.173,
            offchip_size_min_mb: 8,
            offchip_size_max_mb: 128,
            streamline_fixed_cycles: 123,
            streamline_round_trips: 3,
        }
    }
}

impl AnalyticParams {
    pub fn validate(&self) -> Result<()> {
        for p in [self.offchip_prob_min, self.offchip_prob_max] {
            if !(0.0..1.0).contains(&p) {
                return Err(SimError::InvalidConfig(format!("predictor probability {p} not in [0,1)")));
            }
        }
        if self.dram_bit_cost_cycles == 0 || self.pnm_bit_cost_cycles == 0 {
            return Err(SimError::InvalidConfig("bit costs must be positive".into()));
        }
        if self.offchip_size_max_mb < self.offchip_size_min_mb {
            return Err(SimError::InvalidConfig("offchip size range is inverted".into()));
        }
        Ok(())
    }

    pub fn offchip_cache_prob(&self, llc_size_mb: u32) -> f64 {
        let lo = (self.offchip_size_min_mb.max(1) as f64).log2();
        let hi = (self.offchip_size_max_mb.max(1) as f64).log2();
        if hi <= lo {
            return self.offchip_prob_min;
        }
        let x = ((llc_size_mb.max(1) as f64).log2() - lo) / (hi - lo);
        let x = x.clamp(0.0, 1.0);
        self.offchip_prob_min + (self.offchip_prob_max - self.offchip_prob_min) * x
    }
}

/// Fully serialized eviction: one lookup plus one miss per way.
pub fn eviction_latency(cfg: &CacheConfig) -> u64 {
    cfg.llc_ways as u64 * (cfg.llc_lookup_cycles + cfg.mem_miss_cycles)
}

pub fn bit_cost(kind: AttackKind, cfg: &CacheConfig, p: &AnalyticParams) -> u64 {
    let dram = p.dram_bit_cost_cycles;
    match kind {
        AttackKind::DirectAccess => dram,
        AttackKind::DramaClflush => dram + cfg.llc_lookup_cycles,
        AttackKind::DramaEviction => dram + eviction_latency(cfg),
        AttackKind::Streamline => p.streamline_fixed_cycles + p.streamline_round_trips * cfg.llc_lookup_cycles,
        AttackKind::DmaEngine => dram + p.dma_os_overhead_cycles,
        AttackKind::PnmOffChip => {
            // requests kept on chip carry no signal and are retried
            let prob = p.offchip_cache_prob(cfg.llc_size_mb);
            (p.pnm_bit_cost_cycles as f64 / (1.0 - prob)).round() as u64
        }
    }
}

/// Megabits per second for one bit per `bit_cost_cycles`.
pub fn throughput_mbps(bit_cost_cycles: u64, clock_ghz: f64) -> f64 {
    assert!(bit_cost_cycles > 0, "bit cost must be positive");
    clock_ghz * 1000.0 / bit_cost_cycles as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kind: AttackKind,
    pub llc_size_mb: u32,
    pub llc_ways: u32,
    pub bit_cost_cycles: u64,
    pub throughput_mbps: f64,
}

pub const SWEEP_HEADER: &str = "kind,llc_size_mb,llc_ways,bit_cost_cycles,throughput_mbps";

/// Every (kind, size, ways) combination, kinds outermost.
pub fn sweep(
    kinds: &[AttackKind],
    sizes: &[u32],
    ways: &[u32],
    model: &CacheModel,
    params: &AnalyticParams,
    clock_ghz: f64,
) -> Result<Vec<SweepRow>> {
    if kinds.is_empty() || sizes.is_empty() || ways.is_empty() {
        return Err(SimError::InvalidConfig("sweep lists must be nonempty".into()));
    }
    let mut rows = Vec::with_capacity(kinds.len() * sizes.len() * ways.len());
    for &kind in kinds {
        for &size in sizes {
            for &w in ways {
                let cfg = model.point(size, w)?;
                let cost = bit_cost(kind, &cfg, params);
                rows.push(SweepRow {
                    kind,
                    llc_size_mb: size,
                    llc_ways: w,
                    bit_cost_cycles: cost,
                    throughput_mbps: throughput_mbps(cost, clock_ghz),
                });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4}",
            r.kind.name(),
            r.llc_size_mb,
            r.llc_ways,
            r.bit_cost_cycles,
            r.throughput_mbps
        );
    }
    out
}
