//! TOML configuration. Every key is optional and falls back to the calibrated
//! default; unknown keys are errors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::cache::{AnalyticParams, CacheModel};
use crate::channel::ChannelConfig;
use crate::dram::{DramConfig, RowPolicy};
use crate::error::{Result, SimError};
use crate::mitigation::{default_profiles, TraceConfig, WorkloadProfile};
use crate::pim::PimConfig;
use crate::sidechannel::{SideChannelConfig, SWEEP_BANKS};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub dram: DramConfig,
    pub pim: PimConfig,
    pub cache: CacheModel,
    pub analytic: AnalyticParams,
    pub channel: ChannelConfig,
    pub sidechannel: SideChannelConfig,
    pub sidechannel_banks: Vec<usize>,
    pub trace: TraceConfig,
    pub profiles: Vec<WorkloadProfile>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            dram: DramConfig::default(),
            pim: PimConfig::default(),
            cache: CacheModel::default(),
            analytic: AnalyticParams::default(),
            channel: ChannelConfig::default(),
            sidechannel: SideChannelConfig::default(),
            sidechannel_banks: SWEEP_BANKS.to_vec(),
            trace: TraceConfig::default(),
            profiles: default_profiles(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.dram.validate()?;
        self.pim.validate()?;
        self.cache.validate()?;
        self.analytic.validate()?;
        self.channel.validate(self.dram.n_banks)?;
        self.sidechannel.victim.validate()?;
        self.trace.validate()?;
        if self.sidechannel_banks.is_empty() {
            return Err(SimError::InvalidConfig("sidechannel.banks is empty".into()));
        }
        if self.profiles.is_empty() {
            return Err(SimError::InvalidConfig("no workload profiles".into()));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dram: Option<RawDram>,
    pim: Option<RawPim>,
    cache: Option<RawCache>,
    channel: Option<RawChannel>,
    sidechannel: Option<RawSideChannel>,
    mitigation: Option<RawMitigation>,
    profiles: Option<BTreeMap<String, RawProfile>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDram {
    t_rcd_ns: Option<f64>,
    t_rp_ns: Option<f64>,
    t_ras_ns: Option<f64>,
    clock_ghz: Option<f64>,
    column_access_cycles: Option<u64>,
    controller_overhead_cycles: Option<u64>,
    n_channels: Option<usize>,
    n_ranks: Option<usize>,
    n_banks: Option<usize>,
    row_size_bytes: Option<u64>,
    row_policy: Option<String>,
    row_timeout_ns: Option<f64>,
    issue_gap_cycles: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPim {
    pei_op_latency_cycles: Option<u64>,
    offload_transit_cycles: Option<u64>,
    offload_sched_cycles_per_kilobank: Option<u64>,
    rowclone_issue_overhead_cycles: Option<u64>,
    host_pcu_cycles: Option<u64>,
    pmu_capacity: Option<usize>,
    pmu_routing_threshold: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCache {
    /// LLC size in MB (as a string key) to lookup cycles.
    lookup_cycles: Option<BTreeMap<String, u64>>,
    mem_miss_cycles: Option<u64>,
    dram_bit_cost_cycles: Option<u64>,
    pnm_bit_cost_cycles: Option<u64>,
    dma_os_overhead_cycles: Option<u64>,
    offchip_prob_min: Option<f64>,
    offchip_prob_max: Option<f64>,
    streamline_fixed_cycles: Option<u64>,
    streamline_round_trips: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChannel {
    batch_size: Option<usize>,
    threshold_cycles: Option<u64>,
    fence_cycles: Option<u64>,
    semaphore_cycles: Option<u64>,
    barrier_cycles: Option<u64>,
    noise_rate_per_kilocycle: Option<f64>,
    noise_seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSideChannel {
    banks: Option<Vec<usize>>,
    n_entries: Option<usize>,
    entry_size_bytes: Option<u64>,
    reads: Option<usize>,
    read_len: Option<usize>,
    seed_len: Option<usize>,
    seed_stride: Option<usize>,
    victim_rate_per_kilocycle: Option<f64>,
    victim_seed: Option<u64>,
    noise_rate_per_kilocycle: Option<f64>,
    noise_seed: Option<u64>,
    sched_cycles_per_kilobank: Option<u64>,
    calibration_samples: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMitigation {
    streams: Option<usize>,
    think_cycles: Option<u64>,
    rows_per_bank: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    llc_mpki: Option<f64>,
    row_reuse_prob: f64,
    accesses: Option<usize>,
    seed: Option<u64>,
}

fn set<T>(target: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *target = v;
    }
}

fn parse_policy(name: &str, timeout_ns: f64) -> Result<RowPolicy> {
    match name {
        "open" | "open_timeout" => Ok(RowPolicy::OpenTimeout { timeout_ns }),
        "closed" | "closed_row" => Ok(RowPolicy::ClosedRow),
        "constant" | "constant_time" => Ok(RowPolicy::ConstantTime),
        other => Err(SimError::InvalidConfig(format!(
            "dram.row_policy: unknown policy {other:?} (expected open_timeout, closed_row or constant_time)"
        ))),
    }
}

pub fn parse_config_str(text: &str) -> Result<Config> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| SimError::ConfigParse(e.to_string()))?;
    let mut c = Config::default();

    if let Some(d) = raw.dram {
        let cfg = &mut c.dram;
        set(&mut cfg.t_rcd_ns, d.t_rcd_ns);
        set(&mut cfg.t_rp_ns, d.t_rp_ns);
        set(&mut cfg.t_ras_ns, d.t_ras_ns);
        set(&mut cfg.clock_ghz, d.clock_ghz);
        set(&mut cfg.column_access_cycles, d.column_access_cycles);
        set(&mut cfg.controller_overhead_cycles, d.controller_overhead_cycles);
        set(&mut cfg.n_channels, d.n_channels);
        set(&mut cfg.n_ranks, d.n_ranks);
        set(&mut cfg.n_banks, d.n_banks);
        set(&mut cfg.row_size_bytes, d.row_size_bytes);
        set(&mut cfg.issue_gap_cycles, d.issue_gap_cycles);
        let timeout = d.row_timeout_ns.unwrap_or(match cfg.row_policy {
            RowPolicy::OpenTimeout { timeout_ns } => timeout_ns,
            _ => 100.0,
        });
        let name = d.row_policy.as_deref().unwrap_or("open_timeout");
        cfg.row_policy = parse_policy(name, timeout)?;
    }

    if let Some(p) = raw.pim {
        let cfg = &mut c.pim;
        set(&mut cfg.pei_op_latency_cycles, p.pei_op_latency_cycles);
        set(&mut cfg.offload_transit_cycles, p.offload_transit_cycles);
        set(&mut cfg.offload_sched_cycles_per_kilobank, p.offload_sched_cycles_per_kilobank);
        set(&mut cfg.rowclone_issue_overhead_cycles, p.rowclone_issue_overhead_cycles);
        set(&mut cfg.host_pcu_cycles, p.host_pcu_cycles);
        set(&mut cfg.pmu_capacity, p.pmu_capacity);
        set(&mut cfg.pmu_routing_threshold, p.pmu_routing_threshold);
    }

    if let Some(k) = raw.cache {
        if let Some(table) = k.lookup_cycles {
            let mut parsed = BTreeMap::new();
            for (size, cycles) in table {
                let mb: u32 = size
                    .parse()
                    .map_err(|_| SimError::ConfigParse(format!("cache.lookup_cycles: bad LLC size key {size:?}")))?;
                parsed.insert(mb, cycles);
            }
            c.cache.lookup_cycles = parsed;
        }
        set(&mut c.cache.mem_miss_cycles, k.mem_miss_cycles);
        let a = &mut c.analytic;
        set(&mut a.dram_bit_cost_cycles, k.dram_bit_cost_cycles);
        set(&mut a.pnm_bit_cost_cycles, k.pnm_bit_cost_cycles);
        set(&mut a.dma_os_overhead_cycles, k.dma_os_overhead_cycles);
        set(&mut a.offchip_prob_min, k.offchip_prob_min);
        set(&mut a.offchip_prob_max, k.offchip_prob_max);
        set(&mut a.streamline_fixed_cycles, k.streamline_fixed_cycles);
        set(&mut a.streamline_round_trips, k.streamline_round_trips);
    }

    if let Some(ch) = raw.channel {
        let cfg = &mut c.channel;
        set(&mut cfg.batch_size, ch.batch_size);
        set(&mut cfg.threshold_cycles, ch.threshold_cycles);
        set(&mut cfg.fence_cycles, ch.fence_cycles);
        set(&mut cfg.semaphore_cycles, ch.semaphore_cycles);
        set(&mut cfg.barrier_cycles, ch.barrier_cycles);
        set(&mut cfg.noise.rate_per_kilocycle, ch.noise_rate_per_kilocycle);
        set(&mut cfg.noise.seed, ch.noise_seed);
    }

    if let Some(s) = raw.sidechannel {
        set(&mut c.sidechannel_banks, s.banks);
        let cfg = &mut c.sidechannel;
        set(&mut cfg.n_entries, s.n_entries);
        set(&mut cfg.entry_size_bytes, s.entry_size_bytes);
        set(&mut cfg.victim.n_reads, s.reads);
        set(&mut cfg.victim.read_len, s.read_len);
        set(&mut cfg.victim.seed_len, s.seed_len);
        set(&mut cfg.victim.seed_stride, s.seed_stride);
        set(&mut cfg.victim.lookups_per_kilocycle, s.victim_rate_per_kilocycle);
        set(&mut cfg.victim.seed, s.victim_seed);
        set(&mut cfg.noise.rate_per_kilocycle, s.noise_rate_per_kilocycle);
        set(&mut cfg.noise.seed, s.noise_seed);
        set(&mut cfg.sched_cycles_per_kilobank, s.sched_cycles_per_kilobank);
        set(&mut cfg.calibration_samples, s.calibration_samples);
    }

    if let Some(m) = raw.mitigation {
        set(&mut c.trace.streams, m.streams);
        set(&mut c.trace.think_cycles, m.think_cycles);
        set(&mut c.trace.rows_per_bank, m.rows_per_bank);
    }

    if let Some(profiles) = raw.profiles {
        let mut list: Vec<WorkloadProfile> = profiles
            .into_iter()
            .enumerate()
            .map(|(i, (name, p))| {
                let mut w = WorkloadProfile::new(&name, p.llc_mpki.unwrap_or(0.0), p.row_reuse_prob, 100 + i as u64);
                set(&mut w.accesses, p.accesses);
                set(&mut w.seed, p.seed);
                w
            })
            .collect();
        // lowest MPKI first, like the built-in list
        list.sort_by(|a, b| a.llc_mpki.total_cmp(&b.llc_mpki).then_with(|| a.name.cmp(&b.name)));
        c.profiles = list;
    }

    c.validate()?;
    Ok(c)
}

pub fn parse_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::ConfigParse(format!("{}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| match e {
        SimError::ConfigParse(m) => SimError::ConfigParse(format!("{}: {m}", path.display())),
        other => other,
    })
}
