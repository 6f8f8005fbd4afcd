//! Processing-in-memory engines: PEI offload through a locality monitor
//! (near-bank compute) and RowClone bulk copies (in-array compute).

use std::collections::{BTreeMap, HashMap};

use crate::dram::{
    map_address, unmap_address, AccessOutcome, Cycle, DramConfig, DramState, Location, MemoryAccess, Origin,
    ProcessId,
};
use crate::error::{Result, SimError};

pub const CACHE_LINE_BYTES: u64 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct PimConfig {
    pub pei_op_latency_cycles: Cycle,
    /// Host to near-bank PCU and back.
    pub offload_transit_cycles: Cycle,
    /// Extra controller scheduling delay per PEI, per 1024 banks in the device.
    pub offload_sched_cycles_per_kilobank: Cycle,
    pub rowclone_issue_overhead_cycles: Cycle,
    /// Latency of a PEI executed on the host-side PCU (an LLC hit).
    pub host_pcu_cycles: Cycle,
    pub pmu_capacity: usize,
    pub pmu_routing_threshold: u32,
}

impl Default for PimConfig {
    fn default() -> Self {
        PimConfig {
            pei_op_latency_cycles: 3,
            offload_transit_cycles: 55,
            offload_sched_cycles_per_kilobank: 0,
            rowclone_issue_overhead_cycles: 56,
            host_pcu_cycles: 32,
            pmu_capacity: 256,
            pmu_routing_threshold: 2,
        }
    }
}

impl PimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pmu_capacity == 0 {
            return Err(SimError::InvalidConfig("pmu_capacity must be positive".into()));
        }
        Ok(())
    }

    pub fn transit_cycles(&self, n_banks: usize) -> Cycle {
        self.offload_transit_cycles + self.offload_sched_cycles_per_kilobank * n_banks as u64 / 1024
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Route {
    HostPcu,
    MemoryPcu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct MonitorEntry {
    ignore_flag: bool,
    hit_count: u32,
    stamp: u64,
}

/// Locality monitor deciding where a PEI executes. Entries allocated by a
/// PEI carry an ignore flag, so their first hit is not counted as locality.
#[derive(Debug, Clone)]
pub struct LocalityMonitor {
    capacity: usize,
    routing_threshold: u32,
    entries: HashMap<u64, MonitorEntry>,
    lru: BTreeMap<u64, u64>,
    clock: u64,
}

impl LocalityMonitor {
    pub fn new(capacity: usize, routing_threshold: u32) -> Self {
        LocalityMonitor {
            capacity,
            routing_threshold,
            entries: HashMap::new(),
            lru: BTreeMap::new(),
            clock: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// (ignore_flag, hit_count) of the entry tracking `addr`, if present.
    pub fn entry(&self, addr: u64) -> Option<(bool, u32)> {
        self.entries.get(&tag(addr)).map(|e| (e.ignore_flag, e.hit_count))
    }

    fn bump(&mut self, t: u64) {
        self.clock += 1;
        let e = self.entries.get_mut(&t).expect("entry present");
        self.lru.remove(&e.stamp);
        e.stamp = self.clock;
        self.lru.insert(self.clock, t);
    }

    fn allocate(&mut self, t: u64, ignore_flag: bool) {
        if self.entries.len() >= self.capacity {
            if let Some((_, victim)) = self.lru.pop_first() {
                self.entries.remove(&victim);
            }
        }
        self.clock += 1;
        self.entries.insert(t, MonitorEntry { ignore_flag, hit_count: 0, stamp: self.clock });
        self.lru.insert(self.clock, t);
    }

    /// Ordinary host load/store to `addr`; allocates without an ignore flag.
    pub fn record_host_access(&mut self, addr: u64) {
        let t = tag(addr);
        if self.entries.contains_key(&t) {
            self.entries.get_mut(&t).unwrap().hit_count += 1;
            self.bump(t);
        } else {
            self.allocate(t, false);
        }
    }

    pub fn route(&mut self, addr: u64) -> Route {
        let t = tag(addr);
        let Some(e) = self.entries.get_mut(&t) else {
            self.allocate(t, true);
            return Route::MemoryPcu;
        };
        let route = if e.ignore_flag {
            e.ignore_flag = false;
            Route::MemoryPcu
        } else {
            e.hit_count += 1;
            if e.hit_count >= self.routing_threshold {
                Route::HostPcu
            } else {
                Route::MemoryPcu
            }
        };
        self.bump(t);
        route
    }
}

fn tag(addr: u64) -> u64 {
    addr / CACHE_LINE_BYTES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeiOp {
    Add,
    Nop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeiRequest {
    pub process_id: ProcessId,
    pub target_addr: u64,
    pub op: PeiOp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PimCompletion {
    pub latency_cycles: Cycle,
    pub completion_cycle: Cycle,
    pub per_bank_outcomes: Vec<(usize, AccessOutcome)>,
    /// `None` for operations that never reached a PCU (NOP).
    pub routed_to: Option<Route>,
}

/// Half-open physical address range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddrRange {
    pub start: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowCloneRequest {
    pub process_id: ProcessId,
    pub src: AddrRange,
    pub dst: AddrRange,
    pub mask: Vec<bool>,
}

impl RowCloneRequest {
    /// Ranges of one row-sized page per bank, `src_row` to `dst_row`.
    pub fn spanning(process_id: ProcessId, src_row: u64, dst_row: u64, mask: Vec<bool>, cfg: &DramConfig) -> Self {
        let range = |row| AddrRange {
            start: unmap_address(&Location { channel: 0, rank: 0, bank: 0, row, column: 0 }, cfg),
            len: cfg.n_banks as u64 * cfg.row_size_bytes,
        };
        RowCloneRequest { process_id, src: range(src_row), dst: range(dst_row), mask }
    }

    /// bank -> row covered by `range`, requiring one row per bank.
    fn bank_rows(range: &AddrRange, cfg: &DramConfig) -> Result<BTreeMap<usize, u64>> {
        if range.len == 0 || !range.start.is_multiple_of(cfg.row_size_bytes) || !range.len.is_multiple_of(cfg.row_size_bytes) {
            return Err(SimError::InvalidRowClone("ranges must be nonempty and row aligned".into()));
        }
        let mut rows = BTreeMap::new();
        let mut addr = range.start;
        while addr < range.start + range.len {
            let loc = map_address(addr, cfg);
            if rows.insert(loc.bank, loc.row).is_some() {
                return Err(SimError::InvalidRowClone(format!("range covers bank {} twice", loc.bank)));
            }
            addr += cfg.row_size_bytes;
        }
        Ok(rows)
    }

    /// Per masked bank (src row, dst row), after validating the request.
    pub fn plan(&self, cfg: &DramConfig) -> Result<Vec<(usize, u64, u64)>> {
        if self.mask.len() != cfg.n_banks {
            return Err(SimError::InvalidRowClone(format!(
                "mask has {} bits, device has {} banks",
                self.mask.len(),
                cfg.n_banks
            )));
        }
        if !self.mask.iter().any(|&b| b) {
            return Err(SimError::InvalidRowClone("mask selects no bank".into()));
        }
        let src = Self::bank_rows(&self.src, cfg)?;
        let dst = Self::bank_rows(&self.dst, cfg)?;
        if src.keys().ne(dst.keys()) {
            return Err(SimError::InvalidRowClone("source and destination cover different banks".into()));
        }
        let mut plan = Vec::new();
        for (bank, _) in self.mask.iter().enumerate().filter(|(_, &m)| m) {
            let (Some(&s), Some(&d)) = (src.get(&bank), dst.get(&bank)) else {
                return Err(SimError::MaskRangeMismatch { bank });
            };
            if s == d {
                return Err(SimError::InvalidRowClone(format!("bank {bank}: src row equals dst row")));
            }
            plan.push((bank, s, d));
        }
        Ok(plan)
    }
}

/// PEI and RowClone execution on top of a [`DramState`].
#[derive(Debug, Clone)]
pub struct PimEngine {
    cfg: PimConfig,
    monitor: LocalityMonitor,
}

impl PimEngine {
    pub fn new(cfg: PimConfig) -> Result<Self> {
        cfg.validate()?;
        let monitor = LocalityMonitor::new(cfg.pmu_capacity, cfg.pmu_routing_threshold);
        Ok(PimEngine { cfg, monitor })
    }

    pub fn config(&self) -> &PimConfig {
        &self.cfg
    }

    pub fn monitor(&self) -> &LocalityMonitor {
        &self.monitor
    }

    pub fn route_pei(&mut self, req: &PeiRequest) -> Route {
        self.monitor.route(req.target_addr)
    }

    pub fn execute_pei(&mut self, dram: &mut DramState, req: &PeiRequest, now: Cycle) -> Result<PimCompletion> {
        if req.op == PeiOp::Nop {
            return Ok(PimCompletion {
                latency_cycles: 0,
                completion_cycle: now,
                per_bank_outcomes: Vec::new(),
                routed_to: None,
            });
        }
        let loc = map_address(req.target_addr, dram.config());
        // reject before the monitor sees the address
        dram.check_access(req.process_id, loc.bank)?;
        match self.route_pei(req) {
            Route::HostPcu => {
                let latency = self.cfg.host_pcu_cycles + self.cfg.pei_op_latency_cycles;
                Ok(PimCompletion {
                    latency_cycles: latency,
                    completion_cycle: now + latency,
                    per_bank_outcomes: Vec::new(),
                    routed_to: Some(Route::HostPcu),
                })
            }
            Route::MemoryPcu => {
                let transit = self.cfg.transit_cycles(dram.config().n_banks);
                let acc = MemoryAccess {
                    process_id: req.process_id,
                    bank: loc.bank,
                    row: loc.row,
                    issue_cycle: now + transit,
                    origin: Origin::MemoryPcu,
                };
                let out = dram.access(&acc)?;
                let completion = out.completion_cycle + self.cfg.pei_op_latency_cycles;
                Ok(PimCompletion {
                    latency_cycles: completion - now,
                    completion_cycle: completion,
                    per_bank_outcomes: vec![(loc.bank, out)],
                    routed_to: Some(Route::MemoryPcu),
                })
            }
        }
    }

    /// One request split into parallel per-bank copies; the request
    /// completes when the slowest bank does.
    pub fn execute_rowclone(&self, dram: &mut DramState, req: &RowCloneRequest, now: Cycle) -> Result<PimCompletion> {
        let plan = req.plan(dram.config())?;
        for &(bank, _, _) in &plan {
            dram.check_access(req.process_id, bank)?;
        }
        let issue = now + self.cfg.rowclone_issue_overhead_cycles;
        let mut outcomes = Vec::with_capacity(plan.len());
        let mut completion = issue;
        for (bank, src, dst) in plan {
            let out = dram.row_clone_bank(req.process_id, bank, src, dst, issue)?;
            completion = completion.max(out.completion_cycle);
            outcomes.push((bank, out));
        }
        Ok(PimCompletion {
            latency_cycles: completion - now,
            completion_cycle: completion,
            per_bank_outcomes: outcomes,
            routed_to: Some(Route::MemoryPcu),
        })
    }
}

/// Address of cache line `line` within (`bank`, `row`).
pub fn line_addr(bank: usize, row: u64, line: u64, cfg: &DramConfig) -> u64 {
    let lines = cfg.row_size_bytes / CACHE_LINE_BYTES;
    unmap_address(
        &Location { channel: 0, rank: 0, bank, row, column: (line % lines) * CACHE_LINE_BYTES },
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::AccessKind;

    fn setup() -> (DramState, PimEngine) {
        (DramState::new(DramConfig::default()).unwrap(), PimEngine::new(PimConfig::default()).unwrap())
    }

    #[test]
    fn ignore_flag_state_machine() {
        let mut m = LocalityMonitor::new(8, 2);
        assert_eq!(m.route(0x1000), Route::MemoryPcu);
        assert_eq!(m.entry(0x1000), Some((true, 0)));
        assert_eq!(m.route(0x1000), Route::MemoryPcu);
        assert_eq!(m.entry(0x1000), Some((false, 0)));
        assert_eq!(m.route(0x1000), Route::MemoryPcu);
        // threshold + 2 = fourth touch goes to the host
        assert_eq!(m.route(0x1000), Route::HostPcu);
    }

    #[test]
    fn host_allocated_entries_have_no_ignore_flag() {
        let mut m = LocalityMonitor::new(8, 2);
        m.record_host_access(0x40);
        assert_eq!(m.entry(0x40), Some((false, 0)));
        assert_eq!(m.route(0x40), Route::MemoryPcu);
        assert_eq!(m.route(0x40), Route::HostPcu);
    }

    #[test]
    fn monitor_capacity_evicts_lru() {
        let mut m = LocalityMonitor::new(2, 2);
        m.route(0);
        m.route(64);
        m.route(0);
        m.route(128);
        assert_eq!(m.len(), 2);
        assert!(m.entry(64).is_none());
        assert!(m.entry(0).is_some());
    }

    #[test]
    fn pei_latencies_compose() {
        let (mut dram, mut pim) = setup();
        let cfg = dram.config().clone();
        let t = *dram.timings();
        let transit = pim.config().transit_cycles(cfg.n_banks);
        let first = PeiRequest { process_id: 1, target_addr: line_addr(0, 7, 0, &cfg), op: PeiOp::Add };
        let c = pim.execute_pei(&mut dram, &first, 0).unwrap();
        assert_eq!(c.latency_cycles, transit + t.empty() + 3);
        let again = PeiRequest { target_addr: line_addr(0, 7, 1, &cfg), ..first };
        let h = pim.execute_pei(&mut dram, &again, 10_000).unwrap();
        assert_eq!(h.per_bank_outcomes[0].1.kind, AccessKind::Hit);
        assert_eq!(h.latency_cycles, transit + t.hit + 3);
        let other = PeiRequest { target_addr: line_addr(0, 8, 0, &cfg), ..first };
        let k = pim.execute_pei(&mut dram, &other, 20_000).unwrap();
        assert_eq!(k.per_bank_outcomes[0].1.kind, AccessKind::Conflict);
    }

    #[test]
    fn nop_and_host_routes_leave_banks_alone() {
        let (mut dram, mut pim) = setup();
        let cfg = dram.config().clone();
        let nop = PeiRequest { process_id: 1, target_addr: 0, op: PeiOp::Nop };
        let c = pim.execute_pei(&mut dram, &nop, 5).unwrap();
        assert_eq!(c.latency_cycles, 0);
        assert!(c.routed_to.is_none());

        let req = PeiRequest { process_id: 1, target_addr: line_addr(2, 3, 0, &cfg), op: PeiOp::Add };
        for i in 0..3 {
            let c = pim.execute_pei(&mut dram, &req, i * 1000).unwrap();
            assert_eq!(c.routed_to, Some(Route::MemoryPcu));
        }
        let before = dram.banks().to_vec();
        let c = pim.execute_pei(&mut dram, &req, 5000).unwrap();
        assert_eq!(c.routed_to, Some(Route::HostPcu));
        assert_eq!(dram.banks(), &before[..]);
    }

    #[test]
    fn rowclone_single_bank_cold() {
        let (mut dram, pim) = setup();
        let cfg = dram.config().clone();
        let t = *dram.timings();
        let mut mask = vec![false; 16];
        mask[3] = true;
        let req = RowCloneRequest::spanning(1, 10, 11, mask, &cfg);
        let c = pim.execute_rowclone(&mut dram, &req, 0).unwrap();
        let expected = pim.config().rowclone_issue_overhead_cycles
            + t.t_rcd.max(t.t_ras)
            + t.t_rcd
            + cfg.controller_overhead_cycles;
        assert_eq!(c.latency_cycles, expected);
        assert_eq!(dram.bank(3).open_row, Some(11));
        assert_eq!(dram.bank(2).open_row, None);
    }

    #[test]
    fn rowclone_latency_independent_of_popcount() {
        let (mut d1, pim) = setup();
        let (mut d16, _) = setup();
        let cfg = d1.config().clone();
        let mut one = vec![false; 16];
        one[0] = true;
        let a = pim.execute_rowclone(&mut d1, &RowCloneRequest::spanning(1, 1, 2, one, &cfg), 0).unwrap();
        let b = pim.execute_rowclone(&mut d16, &RowCloneRequest::spanning(1, 1, 2, vec![true; 16], &cfg), 0).unwrap();
        assert_eq!(a.latency_cycles, b.latency_cycles);
        assert_eq!(b.per_bank_outcomes.len(), 16);
    }

    #[test]
    fn rowclone_rejects_bad_requests() {
        let (mut dram, pim) = setup();
        let cfg = dram.config().clone();
        let zero = RowCloneRequest::spanning(1, 1, 2, vec![false; 16], &cfg);
        assert!(matches!(pim.execute_rowclone(&mut dram, &zero, 0), Err(SimError::InvalidRowClone(_))));

        // ranges cover banks 0..8 only
        let mut narrow = RowCloneRequest::spanning(1, 1, 2, vec![true; 16], &cfg);
        narrow.src.len = 8 * cfg.row_size_bytes;
        narrow.dst.len = 8 * cfg.row_size_bytes;
        assert_eq!(pim.execute_rowclone(&mut dram, &narrow, 0), Err(SimError::MaskRangeMismatch { bank: 8 }));

        let same = RowCloneRequest::spanning(1, 4, 4, vec![true; 16], &cfg);
        assert!(pim.execute_rowclone(&mut dram, &same, 0).is_err());
        assert!(dram.command_log().is_empty());
    }

    #[test]
    fn rowclone_partition_violation_is_atomic() {
        let cfg = DramConfig::default().with_split_partition(1, 2);
        let mut dram = DramState::new(cfg.clone()).unwrap();
        let pim = PimEngine::new(PimConfig::default()).unwrap();
        let req = RowCloneRequest::spanning(1, 1, 2, vec![true; 16], &cfg);
        assert_eq!(
            pim.execute_rowclone(&mut dram, &req, 0),
            Err(SimError::PartitionViolation { process: 1, bank: 8 })
        );
        assert!(dram.command_log().is_empty());
    }
}
