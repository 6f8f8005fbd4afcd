//! DRAM banks, row-buffer state and the controller page policies.
//!
//! Latencies are computed in closed form per access. Every command the
//! controller would have issued (ACT/PRE/RD) is still appended to an
//! optional per-device log so timing constraints can be checked after
//! the fact.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Result, SimError};

pub type ProcessId = u32;
pub type Cycle = u64;

/// Converts nanoseconds to CPU cycles, rounding up.
pub fn ns_to_cycles(ns: f64, clock_ghz: f64) -> Cycle {
    debug_assert!(ns >= 0.0 && clock_ghz > 0.0);
    // absorb float noise such as 100.0 * 2.6 = 260.00000000000003
    let raw = ns * clock_ghz;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as Cycle
    } else {
        raw.ceil() as Cycle
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowPolicy {
    /// Rows stay open until a conflict or until idle for `timeout_ns`.
    OpenTimeout { timeout_ns: f64 },
    ClosedRow,
    ConstantTime,
}

impl RowPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            RowPolicy::OpenTimeout { .. } => "open",
            RowPolicy::ClosedRow => "closed",
            RowPolicy::ConstantTime => "constant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DramConfig {
    pub t_rcd_ns: f64,
    pub t_rp_ns: f64,
    pub t_ras_ns: f64,
    pub clock_ghz: f64,
    pub column_access_cycles: Cycle,
    pub controller_overhead_cycles: Cycle,
    pub n_channels: usize,
    pub n_ranks: usize,
    pub n_banks: usize,
    pub row_size_bytes: u64,
    pub row_policy: RowPolicy,
    /// Minimum spacing between consecutive access starts on the channel.
    pub issue_gap_cycles: Cycle,
    pub partition_map: Option<BTreeMap<ProcessId, BTreeSet<usize>>>,
}

impl Default for DramConfig {
    /// DDR4-2400, 16 banks, 4 ranks, 1 channel, 8 KiB rows, open-row with a
    /// 100 ns timeout, 2.6 GHz core clock.
    fn default() -> Self {
        DramConfig {
            t_rcd_ns: 13.5,
            t_rp_ns: 13.5,
            t_ras_ns: 13.5,
            clock_ghz: 2.6,
            column_access_cycles: 16,
            controller_overhead_cycles: 40,
            n_channels: 1,
            n_ranks: 4,
            n_banks: 16,
            row_size_bytes: 8192,
            row_policy: RowPolicy::OpenTimeout { timeout_ns: 100.0 },
            issue_gap_cycles: 0,
            partition_map: None,
        }
    }
}

impl DramConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        for (name, v) in [
            ("t_rcd_ns", self.t_rcd_ns),
            ("t_rp_ns", self.t_rp_ns),
            ("t_ras_ns", self.t_ras_ns),
            ("clock_ghz", self.clock_ghz),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(SimError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.t_ras_ns < self.t_rcd_ns {
            return bad("t_ras_ns must be >= t_rcd_ns");
        }
        if let RowPolicy::OpenTimeout { timeout_ns } = self.row_policy {
            if timeout_ns.is_nan() || timeout_ns <= 0.0 {
                return bad("row_timeout_ns must be positive");
            }
        }
        if self.column_access_cycles == 0 {
            return bad("column_access_cycles must be positive");
        }
        if self.n_banks == 0 || !self.n_banks.is_power_of_two() {
            return bad("n_banks must be a power of two");
        }
        if self.n_channels == 0 || self.n_ranks == 0 {
            return bad("n_channels and n_ranks must be positive");
        }
        if !self.n_banks.is_multiple_of(self.n_channels * self.n_ranks) {
            return bad("n_banks must be divisible by n_channels * n_ranks");
        }
        if self.row_size_bytes == 0 {
            return bad("row_size_bytes must be positive");
        }
        if let Some(map) = &self.partition_map {
            let mut seen = BTreeSet::new();
            for banks in map.values() {
                for &b in banks {
                    if b >= self.n_banks {
                        return bad("partition_map names a bank outside the device");
                    }
                    if !seen.insert(b) {
                        return bad("partition_map bank sets must be disjoint");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn timings(&self) -> Timings {
        let c = |ns| ns_to_cycles(ns, self.clock_ghz);
        Timings {
            t_rcd: c(self.t_rcd_ns),
            t_rp: c(self.t_rp_ns),
            t_ras: c(self.t_ras_ns),
            timeout: match self.row_policy {
                RowPolicy::OpenTimeout { timeout_ns } => Some(c(timeout_ns)),
                _ => None,
            },
            hit: self.column_access_cycles + self.controller_overhead_cycles,
        }
    }

    /// Splits the banks into two disjoint halves, low half for `a`, high half for `b`.
    pub fn with_split_partition(mut self, a: ProcessId, b: ProcessId) -> Self {
        let half = self.n_banks / 2;
        let mut map = BTreeMap::new();
        map.insert(a, (0..half).collect());
        map.insert(b, (half..self.n_banks).collect());
        self.partition_map = Some(map);
        self
    }
}

/// Timing parameters in CPU cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timings {
    pub t_rcd: Cycle,
    pub t_rp: Cycle,
    pub t_ras: Cycle,
    pub timeout: Option<Cycle>,
    /// Row-hit service latency (column access plus controller overhead).
    pub hit: Cycle,
}

impl Timings {
    pub fn empty(&self) -> Cycle {
        self.hit + self.t_rcd
    }

    pub fn conflict(&self) -> Cycle {
        self.hit + self.t_rp + self.t_rcd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Host,
    MemoryPcu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryAccess {
    pub process_id: ProcessId,
    pub bank: usize,
    pub row: u64,
    pub issue_cycle: Cycle,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AccessKind {
    Hit,
    Conflict,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessOutcome {
    pub kind: AccessKind,
    /// Service latency, from the cycle the bank starts serving the access.
    pub latency_cycles: Cycle,
    pub start_cycle: Cycle,
    pub completion_cycle: Cycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BankState {
    pub open_row: Option<u64>,
    /// Whether the open row was activated by the host controller (and is
    /// therefore subject to the idle timeout).
    pub opened_by_host: bool,
    pub last_activate_cycle: Cycle,
    pub last_use_cycle: Cycle,
    pub busy_until_cycle: Cycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Activate(u64),
    Precharge,
    Read(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandRecord {
    pub cycle: Cycle,
    pub bank: usize,
    pub command: Command,
    pub process: ProcessId,
}

/// Physical location of an address under page interleaving.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Location {
    pub channel: usize,
    pub rank: usize,
    pub bank: usize,
    pub row: u64,
    pub column: u64,
}

/// Page interleaving: consecutive row-sized pages go to consecutive banks,
/// wrapping to the next row after the last bank.
pub fn map_address(phys_addr: u64, cfg: &DramConfig) -> Location {
    let page = phys_addr / cfg.row_size_bytes;
    let column = phys_addr % cfg.row_size_bytes;
    let n_banks = cfg.n_banks as u64;
    let bank = (page % n_banks) as usize;
    let row = page / n_banks;
    let banks_per_channel = cfg.n_banks / cfg.n_channels;
    let banks_per_rank = banks_per_channel / cfg.n_ranks;
    Location {
        channel: bank / banks_per_channel,
        rank: (bank % banks_per_channel) / banks_per_rank,
        bank,
        row,
        column,
    }
}

pub fn unmap_address(loc: &Location, cfg: &DramConfig) -> u64 {
    (loc.row * cfg.n_banks as u64 + loc.bank as u64) * cfg.row_size_bytes + loc.column
}

/// Mutable device state: one row buffer per bank plus the command log.
#[derive(Debug, Clone)]
pub struct DramState {
    cfg: DramConfig,
    timings: Timings,
    banks: Vec<BankState>,
    last_start: Option<Cycle>,
    log: Option<Vec<CommandRecord>>,
}

impl DramState {
    pub fn new(cfg: DramConfig) -> Result<Self> {
        cfg.validate()?;
        let timings = cfg.timings();
        Ok(DramState {
            banks: vec![BankState::default(); cfg.n_banks],
            cfg,
            timings,
            last_start: None,
            log: Some(Vec::new()),
        })
    }

    /// Drops the command log; long sweeps do not need it.
    pub fn without_log(mut self) -> Self {
        self.log = None;
        self
    }

    pub fn config(&self) -> &DramConfig {
        &self.cfg
    }

    pub fn timings(&self) -> &Timings {
        &self.timings
    }

    pub fn bank(&self, bank: usize) -> &BankState {
        &self.banks[bank]
    }

    pub fn banks(&self) -> &[BankState] {
        &self.banks
    }

    pub fn command_log(&self) -> &[CommandRecord] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn check_access(&self, process: ProcessId, bank: usize) -> Result<()> {
        if bank >= self.cfg.n_banks {
            return Err(SimError::BankOutOfRange { bank, n_banks: self.cfg.n_banks });
        }
        if let Some(map) = &self.cfg.partition_map {
            if !map.get(&process).is_some_and(|banks| banks.contains(&bank)) {
                return Err(SimError::PartitionViolation { process, bank });
            }
        }
        Ok(())
    }

    fn record(&mut self, cycle: Cycle, bank: usize, command: Command, process: ProcessId) {
        if let Some(log) = &mut self.log {
            log.push(CommandRecord { cycle, bank, command, process });
        }
    }

    /// Closes host-opened rows that have idled past the timeout. Rows
    /// activated by near-bank PCUs are not tracked by the host page timer.
    pub fn expire_rows(&mut self, now: Cycle) {
        for bank in 0..self.banks.len() {
            self.expire_bank(bank, now);
        }
    }

    fn expire_bank(&mut self, bank: usize, now: Cycle) {
        let Some(timeout) = self.timings.timeout else { return };
        let state = self.banks[bank];
        if state.open_row.is_none() || !state.opened_by_host {
            return;
        }
        let deadline = state.last_use_cycle + timeout;
        if now >= deadline {
            let pre = deadline.max(state.busy_until_cycle);
            self.record(pre, bank, Command::Precharge, ProcessId::MAX);
            let b = &mut self.banks[bank];
            b.open_row = None;
            b.opened_by_host = false;
            b.busy_until_cycle = b.busy_until_cycle.max(pre + self.timings.t_rp);
        }
    }

    fn start_cycle(&self, bank: usize, issue: Cycle) -> Cycle {
        let mut start = issue.max(self.banks[bank].busy_until_cycle);
        if let Some(last) = self.last_start {
            start = start.max(last + self.cfg.issue_gap_cycles);
        }
        start
    }

    /// Cycle at which a precharge may be issued, given the earliest
    /// desired cycle (tRAS since the last activation).
    fn earliest_precharge(&self, bank: usize, want: Cycle) -> Cycle {
        want.max(self.banks[bank].last_activate_cycle + self.timings.t_ras)
    }

    /// Serves one column access and updates the bank.
    pub fn access(&mut self, acc: &MemoryAccess) -> Result<AccessOutcome> {
        self.check_access(acc.process_id, acc.bank)?;
        let bank = acc.bank;
        self.expire_bank(bank, acc.issue_cycle.max(self.banks[bank].busy_until_cycle));
        let start = self.start_cycle(bank, acc.issue_cycle);
        self.last_start = Some(start);
        let t = self.timings;
        let pid = acc.process_id;
        let open = self.banks[bank].open_row;

        let kind = match open {
            Some(r) if r == acc.row => AccessKind::Hit,
            Some(_) => AccessKind::Conflict,
            None => AccessKind::Empty,
        };

        match self.cfg.row_policy {
            RowPolicy::ClosedRow => {
                // open_row is always None between accesses here
                let act = start;
                self.record(act, bank, Command::Activate(acc.row), pid);
                let rd = act + t.t_rcd;
                self.record(rd, bank, Command::Read(acc.row), pid);
                let completion = start + t.empty();
                let pre = self.earliest_precharge_after(act, rd);
                self.record(pre, bank, Command::Precharge, pid);
                let b = &mut self.banks[bank];
                b.open_row = None;
                b.opened_by_host = false;
                b.last_activate_cycle = act;
                b.last_use_cycle = start;
                b.busy_until_cycle = completion.max(pre + t.t_rp);
                Ok(AccessOutcome {
                    kind: AccessKind::Empty,
                    latency_cycles: completion - start,
                    start_cycle: start,
                    completion_cycle: completion,
                })
            }
            policy => {
                let rd = match kind {
                    AccessKind::Hit => start,
                    AccessKind::Empty => {
                        self.record(start, bank, Command::Activate(acc.row), pid);
                        self.banks[bank].last_activate_cycle = start;
                        start + t.t_rcd
                    }
                    AccessKind::Conflict => {
                        let pre = self.earliest_precharge(bank, start);
                        self.record(pre, bank, Command::Precharge, pid);
                        let act = pre + t.t_rp;
                        self.record(act, bank, Command::Activate(acc.row), pid);
                        self.banks[bank].last_activate_cycle = act;
                        act + t.t_rcd
                    }
                };
                self.record(rd, bank, Command::Read(acc.row), pid);
                let natural = rd + t.hit;
                let completion = if policy == RowPolicy::ConstantTime {
                    natural.max(start + t.conflict())
                } else {
                    natural
                };
                let b = &mut self.banks[bank];
                if kind != AccessKind::Hit {
                    b.opened_by_host = acc.origin == Origin::Host;
                }
                b.open_row = Some(acc.row);
                b.busy_until_cycle = completion;
                b.last_use_cycle = start;
                Ok(AccessOutcome {
                    kind,
                    latency_cycles: completion - start,
                    start_cycle: start,
                    completion_cycle: completion,
                })
            }
        }
    }

    fn earliest_precharge_after(&self, act: Cycle, want: Cycle) -> Cycle {
        want.max(act + self.timings.t_ras)
    }

    /// One bank's share of a RowClone Fast Parallel Mode copy: activate
    /// `src` (unless it is already in the row buffer), then activate `dst`
    /// no earlier than tRAS after the source activation.
    pub fn row_clone_bank(
        &mut self,
        process: ProcessId,
        bank: usize,
        src: u64,
        dst: u64,
        issue: Cycle,
    ) -> Result<AccessOutcome> {
        self.check_access(process, bank)?;
        if src == dst {
            return Err(SimError::InvalidRowClone(format!("bank {bank}: src row equals dst row")));
        }
        self.expire_bank(bank, issue.max(self.banks[bank].busy_until_cycle));
        let start = self.start_cycle(bank, issue);
        self.last_start = Some(start);
        let t = self.timings;
        let open = self.banks[bank].open_row;
        let closed = self.cfg.row_policy == RowPolicy::ClosedRow;

        let kind = match open {
            Some(r) if r == src => AccessKind::Hit,
            Some(_) => AccessKind::Conflict,
            None => AccessKind::Empty,
        };
        let src_act = match kind {
            AccessKind::Hit => self.banks[bank].last_activate_cycle,
            AccessKind::Empty => {
                self.record(start, bank, Command::Activate(src), process);
                start
            }
            AccessKind::Conflict => {
                let pre = self.earliest_precharge(bank, start);
                self.record(pre, bank, Command::Precharge, process);
                let act = pre + t.t_rp;
                self.record(act, bank, Command::Activate(src), process);
                act
            }
        };
        let ready = match kind {
            AccessKind::Hit => start,
            _ => src_act + t.t_rcd,
        };
        let dst_act = ready.max(src_act + t.t_ras);
        self.record(dst_act, bank, Command::Activate(dst), process);
        let natural = dst_act + t.t_rcd + self.cfg.controller_overhead_cycles;

        let worst = start + t.t_rp + t.t_rcd.max(t.t_ras) + t.t_rcd + self.cfg.controller_overhead_cycles;
        let completion = match self.cfg.row_policy {
            RowPolicy::ConstantTime => natural.max(worst),
            _ => natural,
        };
        let b = &mut self.banks[bank];
        b.last_activate_cycle = dst_act;
        b.last_use_cycle = start;
        b.opened_by_host = false;
        if closed {
            let pre = (dst_act + t.t_rcd).max(dst_act + t.t_ras);
            b.open_row = None;
            b.busy_until_cycle = completion.max(pre + t.t_rp);
            self.record(pre, bank, Command::Precharge, process);
        } else {
            b.open_row = Some(dst);
            b.busy_until_cycle = completion;
        }
        Ok(AccessOutcome {
            kind: if closed { AccessKind::Empty } else { kind },
            latency_cycles: completion - start,
            start_cycle: start,
            completion_cycle: completion,
        })
    }
}

/// Checks that every precharge on a bank comes at least tRAS after the
/// activation it closes. Returns the first offending record.
pub fn check_tras(log: &[CommandRecord], t_ras: Cycle) -> Option<CommandRecord> {
    let mut last_act: BTreeMap<usize, Cycle> = BTreeMap::new();
    let mut sorted: Vec<&CommandRecord> = log.iter().collect();
    sorted.sort_by_key(|r| (r.bank, r.cycle));
    for r in sorted {
        match r.command {
            Command::Activate(_) => {
                last_act.insert(r.bank, r.cycle);
            }
            Command::Precharge => {
                if let Some(&act) = last_act.get(&r.bank) {
                    if r.cycle < act + t_ras {
                        return Some(*r);
                    }
                }
            }
            Command::Read(_) => {}
        }
    }
    None
}
