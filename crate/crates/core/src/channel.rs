//! Row-buffer covert channels built on PiM operations.
//!
//! Sender and receiver are logical processes running small straight-line
//! programs inside one deterministic event loop. The process with the
//! smallest local clock runs next; semaphores and barriers are simulated
//! objects with a fixed cost per operation.
//!
//! Encoding: logic-1 is interference in a bank's row buffer, logic-0 is none.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dram::{Cycle, DramConfig, DramState, ProcessId, RowPolicy};
use crate::error::{Result, SimError};
use crate::noise::{NoiseModel, NoiseSource};
use crate::pim::{line_addr, PeiOp, PeiRequest, PimConfig, PimEngine, RowCloneRequest, CACHE_LINE_BYTES};

pub const SENDER_PID: ProcessId = 1;
pub const RECEIVER_PID: ProcessId = 2;

const RECEIVER_ROW: u64 = 0x10;
const SENDER_ROW: u64 = 0x20;
const RECEIVER_ROW_ALT: u64 = 0x11;
const SENDER_SRC_ROW: u64 = 0x30;
const SENDER_DST_ROW: u64 = 0x31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    /// PEI-based: one near-bank instruction per bank and bit.
    Pnm,
    /// RowClone-based: the whole turn is one masked copy.
    Pum,
}

impl ChannelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ChannelKind::Pnm => "impact-pnm",
            ChannelKind::Pum => "impact-pum",
        }
    }
}

/// Controller mitigation applied to a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    Open,
    Closed,
    Constant,
    Partition,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Open => "open",
            Policy::Closed => "closed",
            Policy::Constant => "constant",
            Policy::Partition => "partition",
        }
    }

    pub fn parse(s: &str) -> Option<Policy> {
        match s {
            "open" => Some(Policy::Open),
            "closed" => Some(Policy::Closed),
            "constant" => Some(Policy::Constant),
            "partition" => Some(Policy::Partition),
            _ => None,
        }
    }

    /// `base` with this policy applied. `Open` keeps the base page policy.
    pub fn apply(&self, base: &DramConfig) -> DramConfig {
        let mut cfg = base.clone();
        match self {
            Policy::Open => {}
            Policy::Closed => cfg.row_policy = RowPolicy::ClosedRow,
            Policy::Constant => cfg.row_policy = RowPolicy::ConstantTime,
            Policy::Partition => cfg = cfg.with_split_partition(RECEIVER_PID, SENDER_PID),
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub batch_size: usize,
    pub threshold_cycles: Cycle,
    pub fence_cycles: Cycle,
    pub semaphore_cycles: Cycle,
    pub barrier_cycles: Cycle,
    pub noise: NoiseModel,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            batch_size: 4,
            threshold_cycles: 150,
            fence_cycles: 230,
            semaphore_cycles: 20,
            barrier_cycles: 20,
            noise: NoiseModel::default(),
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self, n_banks: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n_banks {
            return Err(SimError::InvalidConfig(format!(
                "batch_size must be in 1..={n_banks}, got {}",
                self.batch_size
            )));
        }
        if self.noise.rate_per_kilocycle.is_nan() || self.noise.rate_per_kilocycle < 0.0 {
            return Err(SimError::InvalidConfig("noise rate must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeRecord {
    pub bit: usize,
    pub bank: usize,
    pub latency_cycles: Cycle,
    pub decoded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelResult {
    pub bits_sent: usize,
    pub bits_correct: usize,
    pub error_rate: f64,
    pub total_cycles: Cycle,
    pub throughput_mbps: f64,
    pub sender_cycles: Cycle,
    pub receiver_cycles: Cycle,
    pub decoded: Vec<bool>,
    pub probes: Vec<ProbeRecord>,
}

/// Span a RowClone held a bank, for atomicity checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CloneSpan {
    pub process: ProcessId,
    pub bank: usize,
    pub start: Cycle,
    pub end: Cycle,
}

/// A finished run with the device state kept for inspection.
#[derive(Debug, Clone)]
pub struct ChannelRun {
    pub result: ChannelResult,
    pub dram: DramState,
    pub clone_spans: Vec<CloneSpan>,
    /// Semaphore value after every event-loop step.
    pub semaphore_trace: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Pei { bank: usize, row: u64, line: u64, bit: Option<usize> },
    Nop,
    Fence,
    SemPost,
    SemWait,
    Barrier,
    /// Marks the start of the measured transmission.
    Start,
    RowClone { src: u64, dst: u64, mask: Vec<bool> },
    ProbeClone { bank: usize, src: u64, dst: u64, bit: usize },
}

#[derive(Debug)]
struct Proc {
    pid: ProcessId,
    program: Vec<Op>,
    pc: usize,
    clock: Cycle,
    blocked: bool,
    busy: Cycle,
    measuring: bool,
}

impl Proc {
    fn new(pid: ProcessId, program: Vec<Op>) -> Self {
        Proc { pid, program, pc: 0, clock: 0, blocked: false, busy: 0, measuring: false }
    }

    fn done(&self) -> bool {
        self.pc >= self.program.len()
    }
}

struct Sim<'a> {
    dram: DramState,
    pim: PimEngine,
    noise: NoiseSource,
    cfg: &'a ChannelConfig,
    procs: [Proc; 2],
    semaphore: i64,
    posts: i64,
    consumed: i64,
    barrier_arrival: Option<(usize, Cycle)>,
    start: Option<Cycle>,
    last_decode: Cycle,
    decoded: Vec<Option<bool>>,
    probes: Vec<ProbeRecord>,
    clone_spans: Vec<CloneSpan>,
    semaphore_trace: Vec<i64>,
}

impl<'a> Sim<'a> {
    fn run(&mut self) -> Result<()> {
        loop {
            let next = (0..2)
                .filter(|&i| !self.procs[i].done() && !self.procs[i].blocked)
                .min_by_key(|&i| (self.procs[i].clock, i));
            let Some(i) = next else {
                if self.procs.iter().all(Proc::done) {
                    return Ok(());
                }
                return Err(SimError::SyncDeadlock(format!(
                    "both processes blocked (sender pc {}, receiver pc {})",
                    self.procs[0].pc, self.procs[1].pc
                )));
            };
            let now = self.procs[i].clock;
            self.noise.advance(&mut self.dram, now);
            self.step(i)?;
            if self.semaphore != self.posts - self.consumed || self.semaphore < 0 {
                return Err(SimError::SyncDeadlock(format!("semaphore out of sync: {}", self.semaphore)));
            }
            self.semaphore_trace.push(self.semaphore);
        }
    }

    fn charge(&mut self, i: usize, cycles: Cycle) {
        let p = &mut self.procs[i];
        p.clock += cycles;
        if p.measuring {
            p.busy += cycles;
        }
    }

    fn step(&mut self, i: usize) -> Result<()> {
        let op = self.procs[i].program[self.procs[i].pc].clone();
        let now = self.procs[i].clock;
        let pid = self.procs[i].pid;
        let dram_cfg = self.dram.config().clone();
        match op {
            Op::Start => {
                self.start.get_or_insert(now);
                self.procs[i].measuring = true;
            }
            Op::Nop => {}
            Op::Fence => self.charge(i, self.cfg.fence_cycles),
            Op::SemPost => {
                self.charge(i, self.cfg.semaphore_cycles);
                self.semaphore += 1;
                self.posts += 1;
                let t = self.procs[i].clock;
                for p in self.procs.iter_mut().filter(|p| p.blocked) {
                    p.blocked = false;
                    p.clock = p.clock.max(t);
                }
            }
            Op::SemWait => {
                if self.semaphore == 0 {
                    self.procs[i].blocked = true;
                    return Ok(());
                }
                self.semaphore -= 1;
                self.consumed += 1;
                self.charge(i, self.cfg.semaphore_cycles);
            }
            Op::Barrier => match self.barrier_arrival.take() {
                None => {
                    self.barrier_arrival = Some((i, now));
                    self.procs[i].blocked = true;
                    return Ok(());
                }
                Some((j, _)) if j == i => {
                    return Err(SimError::SyncDeadlock("process re-entered a barrier".into()));
                }
                Some((j, t)) => {
                    let release = now.max(t) + self.cfg.barrier_cycles;
                    for k in [i, j] {
                        let p = &mut self.procs[k];
                        p.clock = release;
                        p.blocked = false;
                    }
                    self.procs[j].pc += 1;
                }
            },
            Op::Pei { bank, row, line, bit } => {
                let req = PeiRequest { process_id: pid, target_addr: line_addr(bank, row, line, &dram_cfg), op: PeiOp::Add };
                let c = self.pim.execute_pei(&mut self.dram, &req, now)?;
                self.charge(i, c.latency_cycles);
                if let Some(bit) = bit {
                    self.record_probe(bit, bank, c.latency_cycles, self.procs[i].clock);
                }
            }
            Op::RowClone { src, dst, mask } => {
                // an all-zero mask leaves every bank idle
                if mask.iter().any(|&m| m) {
                    let req = RowCloneRequest::spanning(pid, src, dst, mask, &dram_cfg);
                    let c = self.pim.execute_rowclone(&mut self.dram, &req, now)?;
                    for &(bank, out) in &c.per_bank_outcomes {
                        self.clone_spans.push(CloneSpan { process: pid, bank, start: out.start_cycle, end: out.completion_cycle });
                    }
                    self.charge(i, c.latency_cycles);
                }
            }
            Op::ProbeClone { bank, src, dst, bit } => {
                let mut mask = vec![false; dram_cfg.n_banks];
                mask[bank] = true;
                let req = RowCloneRequest::spanning(pid, src, dst, mask, &dram_cfg);
                let c = self.pim.execute_rowclone(&mut self.dram, &req, now)?;
                for &(bank, out) in &c.per_bank_outcomes {
                    self.clone_spans.push(CloneSpan { process: pid, bank, start: out.start_cycle, end: out.completion_cycle });
                }
                self.charge(i, c.latency_cycles);
                self.record_probe(bit, bank, c.latency_cycles, self.procs[i].clock);
            }
        }
        self.procs[i].pc += 1;
        Ok(())
    }

    fn record_probe(&mut self, bit: usize, bank: usize, latency: Cycle, at: Cycle) {
        let decoded = latency > self.cfg.threshold_cycles;
        self.decoded[bit] = Some(decoded);
        self.probes.push(ProbeRecord { bit, bank, latency_cycles: latency, decoded });
        self.last_decode = self.last_decode.max(at);
    }
}

fn turns(message: &[bool], n_banks: usize) -> Vec<Vec<bool>> {
    message
        .chunks(n_banks)
        .map(|c| {
            let mut t = c.to_vec();
            t.resize(n_banks, false);
            t
        })
        .collect()
}

/// Cache line used in turn `turn`. Line 0 is reserved for initialization;
/// rotating lines keeps every touch a locality-monitor miss.
fn turn_line(turn: usize, lines: u64) -> u64 {
    1 + (turn as u64 % (lines - 1))
}

fn pnm_programs(message: &[bool], n_banks: usize, batch: usize, lines: u64) -> (Vec<Op>, Vec<Op>) {
    let mut sender = Vec::new();
    let mut receiver: Vec<Op> = (0..n_banks)
        .map(|bank| Op::Pei { bank, row: RECEIVER_ROW, line: 0, bit: None })
        .collect();
    for (k, bits) in turns(message, n_banks).iter().enumerate() {
        let line = turn_line(k, lines);
        sender.push(Op::Barrier);
        receiver.push(Op::Barrier);
        if k == 0 {
            sender.push(Op::Start);
            receiver.push(Op::Start);
        }
        for chunk in (0..n_banks).collect::<Vec<_>>().chunks(batch) {
            for &bank in chunk {
                sender.push(if bits[bank] {
                    Op::Pei { bank, row: SENDER_ROW, line, bit: None }
                } else {
                    Op::Nop
                });
            }
            sender.push(Op::Fence);
            sender.push(Op::SemPost);
            receiver.push(Op::SemWait);
            for &bank in chunk {
                let bit = k * n_banks + bank;
                // the probe re-opens the receiver row, so a fresh line per
                // turn is all the re-initialization that is needed
                receiver.push(Op::Pei { bank, row: RECEIVER_ROW, line, bit: Some(bit) });
            }
        }
    }
    (sender, receiver)
}

fn pum_programs(message: &[bool], n_banks: usize) -> (Vec<Op>, Vec<Op>) {
    let mut sender = Vec::new();
    let mut receiver = vec![Op::RowClone { src: RECEIVER_ROW_ALT, dst: RECEIVER_ROW, mask: vec![true; n_banks] }];
    // receiver rows alternate direction so the row it reads from is the one
    // it left open
    let mut open = RECEIVER_ROW;
    let mut other = RECEIVER_ROW_ALT;
    for (k, bits) in turns(message, n_banks).iter().enumerate() {
        sender.push(Op::Barrier);
        receiver.push(Op::Barrier);
        if k == 0 {
            sender.push(Op::Start);
            receiver.push(Op::Start);
        }
        sender.push(Op::RowClone { src: SENDER_SRC_ROW, dst: SENDER_DST_ROW, mask: bits.clone() });
        sender.push(Op::Barrier);
        receiver.push(Op::Barrier);
        for bank in 0..n_banks {
            receiver.push(Op::ProbeClone { bank, src: open, dst: other, bit: k * n_banks + bank });
        }
        std::mem::swap(&mut open, &mut other);
    }
    (sender, receiver)
}

/// Runs one transmission and keeps the device state.
pub fn transmit_detailed(
    kind: ChannelKind,
    message: &[bool],
    cfg: &ChannelConfig,
    dram_cfg: &DramConfig,
    pim_cfg: &PimConfig,
) -> Result<ChannelRun> {
    let n_banks = dram_cfg.n_banks;
    cfg.validate(n_banks)?;
    if message.is_empty() {
        return Err(SimError::InvalidMessage("message is empty".into()));
    }
    let lines = dram_cfg.row_size_bytes / CACHE_LINE_BYTES;
    if lines < 2 {
        return Err(SimError::InvalidConfig("rows must hold at least two cache lines".into()));
    }
    let (sender, receiver) = match kind {
        ChannelKind::Pnm => pnm_programs(message, n_banks, cfg.batch_size, lines),
        ChannelKind::Pum => pum_programs(message, n_banks),
    };
    let padded = message.len().div_ceil(n_banks) * n_banks;
    let mut sim = Sim {
        dram: DramState::new(dram_cfg.clone())?,
        pim: PimEngine::new(pim_cfg.clone())?,
        noise: NoiseSource::new(&cfg.noise, n_banks, 0),
        cfg,
        procs: [Proc::new(SENDER_PID, sender), Proc::new(RECEIVER_PID, receiver)],
        semaphore: 0,
        posts: 0,
        consumed: 0,
        barrier_arrival: None,
        start: None,
        last_decode: 0,
        decoded: vec![None; padded],
        probes: Vec::new(),
        clone_spans: Vec::new(),
        semaphore_trace: Vec::new(),
    };
    sim.run()?;

    let decoded: Vec<bool> = sim.decoded[..message.len()]
        .iter()
        .map(|d| d.ok_or_else(|| SimError::SyncDeadlock("bit never probed".into())))
        .collect::<Result<_>>()?;
    let bits_correct = decoded.iter().zip(message).filter(|(a, b)| a == b).count();
    let start = sim.start.unwrap_or(0);
    let total_cycles = sim.last_decode.saturating_sub(start).max(1);
    let result = ChannelResult {
        bits_sent: message.len(),
        bits_correct,
        error_rate: 1.0 - bits_correct as f64 / message.len() as f64,
        total_cycles,
        throughput_mbps: bits_correct as f64 * dram_cfg.clock_ghz * 1000.0 / total_cycles as f64,
        sender_cycles: sim.procs[0].busy,
        receiver_cycles: sim.procs[1].busy,
        decoded,
        probes: sim.probes,
    };
    Ok(ChannelRun { result, dram: sim.dram, clone_spans: sim.clone_spans, semaphore_trace: sim.semaphore_trace })
}

pub fn pnm_transmit(message: &[bool], cfg: &ChannelConfig, dram_cfg: &DramConfig, pim_cfg: &PimConfig) -> Result<ChannelResult> {
    transmit_detailed(ChannelKind::Pnm, message, cfg, dram_cfg, pim_cfg).map(|r| r.result)
}

pub fn pum_transmit(message: &[bool], cfg: &ChannelConfig, dram_cfg: &DramConfig, pim_cfg: &PimConfig) -> Result<ChannelResult> {
    transmit_detailed(ChannelKind::Pum, message, cfg, dram_cfg, pim_cfg).map(|r| r.result)
}

/// Applies `policy` to the device and runs one transmission. The decode
/// threshold comes from `cfg`; it is not re-calibrated per policy.
pub fn run_channel(
    kind: ChannelKind,
    message: &[bool],
    cfg: &ChannelConfig,
    dram_cfg: &DramConfig,
    pim_cfg: &PimConfig,
    policy: Policy,
) -> Result<ChannelResult> {
    let dram_cfg = policy.apply(dram_cfg);
    transmit_detailed(kind, message, cfg, &dram_cfg, pim_cfg).map(|r| r.result)
}

/// Samples `samples` row-hit and row-conflict PEI probe latencies on an
/// otherwise idle device and returns the midpoint of the two means.
pub fn calibrate_threshold(dram_cfg: &DramConfig, pim_cfg: &PimConfig, samples: usize) -> Result<Cycle> {
    let (hits, conflicts) = sample_probe_latencies(dram_cfg, pim_cfg, samples)?;
    let mean = |v: &[Cycle]| v.iter().sum::<Cycle>() as f64 / v.len() as f64;
    let (hit_mean, conflict_mean) = (mean(&hits), mean(&conflicts));
    let hit_max = *hits.iter().max().unwrap();
    let conflict_min = *conflicts.iter().min().unwrap();
    if hit_max >= conflict_min {
        return Err(SimError::CalibrationFailed { hit_mean, conflict_mean });
    }
    let mid = ((hit_mean + conflict_mean) / 2.0).floor() as Cycle;
    if !(hit_max <= mid && mid < conflict_min) {
        return Err(SimError::CalibrationFailed { hit_mean, conflict_mean });
    }
    Ok(mid)
}

/// (hit latencies, conflict latencies) of PEI probes to bank 0.
pub fn sample_probe_latencies(dram_cfg: &DramConfig, pim_cfg: &PimConfig, samples: usize) -> Result<(Vec<Cycle>, Vec<Cycle>)> {
    if samples == 0 {
        return Err(SimError::InvalidConfig("need at least one calibration sample".into()));
    }
    let mut cfg = dram_cfg.clone();
    cfg.partition_map = None;
    let mut dram = DramState::new(cfg.clone())?.without_log();
    let mut pim = PimEngine::new(pim_cfg.clone())?;
    let lines = cfg.row_size_bytes / CACHE_LINE_BYTES;
    let mut now = 0;
    let mut line = 0u64;
    let mut probe = |row: u64, dram: &mut DramState, now: &mut Cycle| -> Result<Cycle> {
        line += 1;
        let req = PeiRequest { process_id: RECEIVER_PID, target_addr: line_addr(0, row, line % lines, &cfg), op: PeiOp::Add };
        let c = pim.execute_pei(dram, &req, *now)?;
        *now = c.completion_cycle + 1000;
        Ok(c.latency_cycles)
    };
    let mut hits = Vec::with_capacity(samples);
    let mut conflicts = Vec::with_capacity(samples);
    for _ in 0..samples {
        probe(RECEIVER_ROW, &mut dram, &mut now)?;
        hits.push(probe(RECEIVER_ROW, &mut dram, &mut now)?);
        conflicts.push(probe(SENDER_ROW, &mut dram, &mut now)?);
    }
    Ok((hits, conflicts))
}

/// MSB-first bits of a hex string.
pub fn parse_hex_message(hex: &str) -> Result<Vec<bool>> {
    let hex = hex.trim().trim_start_matches("0x").trim_start_matches("0X");
    if hex.is_empty() {
        return Err(SimError::InvalidMessage("empty hex message".into()));
    }
    let mut bits = Vec::with_capacity(hex.len() * 4);
    for c in hex.chars() {
        let v = c.to_digit(16).ok_or_else(|| SimError::InvalidMessage(format!("not a hex digit: {c:?}")))?;
        bits.extend((0..4).rev().map(|s| v >> s & 1 == 1));
    }
    Ok(bits)
}

pub fn random_message(n_bits: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_bits).map(|_| rng.random_bool(0.5)).collect()
}

pub const RUN_HEADER: &str =
    "kind,policy,n_banks,bits,errors,error_rate,total_cycles,throughput_mbps,sender_cycles,receiver_cycles";

pub fn run_csv_row(kind: ChannelKind, policy: Policy, n_banks: usize, r: &ChannelResult) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{},{},{},{},{},{:.6},{},{:.4},{},{}",
        kind.name(),
        policy.name(),
        n_banks,
        r.bits_sent,
        r.bits_sent - r.bits_correct,
        r.error_rate,
        r.total_cycles,
        r.throughput_mbps,
        r.sender_cycles,
        r.receiver_cycles
    );
    s
}
