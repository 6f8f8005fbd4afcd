//! Side channel against a read mapper whose seeding step probes a
//! page-interleaved hash table with PEIs. The attacker scans every bank with
//! timed PEIs to a sentinel row and infers which hash rows the victim opened.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::channel::calibrate_threshold;
use crate::dram::{map_address, AccessKind, Cycle, DramConfig, DramState, ProcessId};
use crate::error::{Result, SimError};
use crate::noise::{NoiseModel, NoiseSource};
use crate::pim::{line_addr, PeiOp, PeiRequest, PimConfig, PimEngine, CACHE_LINE_BYTES};

pub const VICTIM_PID: ProcessId = 3;
pub const ATTACKER_PID: ProcessId = 4;

const SENTINEL_ROW: u64 = 0x10;
/// First row of the hash table in every bank.
const TABLE_ROW_BASE: u64 = 0x100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntrySlot {
    pub bank: usize,
    pub row: u64,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashTableLayout {
    pub n_entries: usize,
    pub entry_size_bytes: u64,
    pub entries_per_row: usize,
    pub n_banks: usize,
    base_addr: u64,
    row_size_bytes: u64,
}

impl HashTableLayout {
    pub fn entry_addr(&self, index: usize) -> u64 {
        self.base_addr + index as u64 * self.entry_size_bytes
    }

    pub fn locate(&self, index: usize, cfg: &DramConfig) -> EntrySlot {
        let loc = map_address(self.entry_addr(index), cfg);
        EntrySlot { bank: loc.bank, row: loc.row, slot: (loc.column / self.entry_size_bytes) as usize }
    }

    /// Rows of the table that live in `bank`.
    pub fn rows_in_bank(&self, bank: usize) -> Vec<u64> {
        let n_rows = self.n_entries.div_ceil(self.entries_per_row);
        (0..n_rows)
            .filter(|r| r % self.n_banks == bank)
            .map(|r| TABLE_ROW_BASE + (r / self.n_banks) as u64)
            .collect()
    }

    pub fn entries_in_row(&self, bank: usize, row: u64) -> std::ops::Range<usize> {
        let r = (row - TABLE_ROW_BASE) as usize * self.n_banks + bank;
        let start = r * self.entries_per_row;
        start..(start + self.entries_per_row).min(self.n_entries)
    }

    pub fn row_size_bytes(&self) -> u64 {
        self.row_size_bytes
    }
}

pub fn build_layout(n_entries: usize, entry_size: u64, dram_cfg: &DramConfig) -> Result<HashTableLayout> {
    let row = dram_cfg.row_size_bytes;
    if entry_size == 0 || !row.is_multiple_of(entry_size) {
        return Err(SimError::SizeMismatch { entry_size, row_size: row });
    }
    if n_entries == 0 {
        return Err(SimError::InvalidConfig("hash table needs at least one entry".into()));
    }
    Ok(HashTableLayout {
        n_entries,
        entry_size_bytes: entry_size,
        entries_per_row: (row / entry_size) as usize,
        n_banks: dram_cfg.n_banks,
        base_addr: TABLE_ROW_BASE * dram_cfg.n_banks as u64 * row,
        row_size_bytes: row,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimModel {
    pub n_reads: usize,
    pub read_len: usize,
    pub seed_len: usize,
    /// Distance between consecutive seed start positions in a read.
    pub seed_stride: usize,
    /// Poisson rate of hash-table lookups.
    pub lookups_per_kilocycle: f64,
    pub seed: u64,
}

impl Default for VictimModel {
    fn default() -> Self {
        VictimModel {
            n_reads: 16_000,
            read_len: 100,
            seed_len: 15,
            seed_stride: 10,
            lookups_per_kilocycle: 4.5,
            seed: 1,
        }
    }
}

impl VictimModel {
    pub fn validate(&self) -> Result<()> {
        if self.seed_len == 0 || self.seed_len > 32 || self.seed_len > self.read_len {
            return Err(SimError::InvalidConfig("seed_len must be in 1..=min(32, read_len)".into()));
        }
        if self.seed_stride == 0 {
            return Err(SimError::InvalidConfig("seed_stride must be positive".into()));
        }
        if self.lookups_per_kilocycle.is_nan() || self.lookups_per_kilocycle <= 0.0 {
            return Err(SimError::InvalidConfig("victim rate must be positive".into()));
        }
        Ok(())
    }

    pub fn seeds_per_read(&self) -> usize {
        (self.read_len - self.seed_len) / self.seed_stride + 1
    }

    /// Synthetic reads over {A,C,G,T}, 2 bits per base.
    pub fn reads(&self) -> Vec<Vec<u8>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_reads)
            .map(|_| (0..self.read_len).map(|_| rng.random_range(0..4u8)).collect())
            .collect()
    }

    /// Seeded multiplicative hash of every seed in `read`.
    pub fn hash_read(&self, read: &[u8], n_entries: usize) -> Vec<usize> {
        let mult = self.hash_multiplier();
        (0..self.seeds_per_read())
            .map(|i| {
                let s = i * self.seed_stride;
                let kmer = read[s..s + self.seed_len].iter().fold(0u64, |acc, &b| acc << 2 | b as u64);
                seed_hash(kmer, mult, n_entries)
            })
            .collect()
    }

    fn hash_multiplier(&self) -> u64 {
        ChaCha8Rng::seed_from_u64(self.seed ^ 0x6861_7368).random::<u64>() | 1
    }
}

pub fn seed_hash(kmer: u64, multiplier: u64, n_entries: usize) -> usize {
    ((kmer.wrapping_mul(multiplier) >> 32) % n_entries as u64) as usize
}

/// One row activation caused by the victim.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Activation {
    pub bank: usize,
    pub row: u64,
    pub cycle: Cycle,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub lookups: usize,
    pub activations: Vec<Activation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeObservation {
    pub bank: usize,
    pub probed_row: u64,
    pub latency_cycles: Cycle,
    pub inferred_active: bool,
    /// Hash row the attacker attributes the activation to; `None` when only
    /// the bank is known.
    pub inferred_row: Option<u64>,
    /// Cycle the sentinel probe reached the bank.
    pub cycle: Cycle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideChannelResult {
    pub throughput_mbps: f64,
    pub error_rate: f64,
    pub identification_accuracy: f64,
    pub candidates_per_hit: usize,
    pub correct_inferences: usize,
    pub inferences: usize,
    pub activations: usize,
    pub total_cycles: Cycle,
}

/// Issues the victim's lookups for `entries`, one PEI each at the given
/// arrival cycles, and returns its ground-truth activations.
pub fn victim_round(
    entries: &[(usize, Cycle)],
    layout: &HashTableLayout,
    dram: &mut DramState,
    pim: &mut PimEngine,
) -> Result<GroundTruth> {
    let mut truth = GroundTruth::default();
    for &(index, at) in entries {
        victim_lookup(index, at, layout, dram, pim, &mut truth)?;
    }
    Ok(truth)
}

fn victim_lookup(
    index: usize,
    at: Cycle,
    layout: &HashTableLayout,
    dram: &mut DramState,
    pim: &mut PimEngine,
    truth: &mut GroundTruth,
) -> Result<()> {
    let req = PeiRequest { process_id: VICTIM_PID, target_addr: layout.entry_addr(index), op: PeiOp::Add };
    let c = pim.execute_pei(dram, &req, at)?;
    truth.lookups += 1;
    for (bank, out) in c.per_bank_outcomes {
        if out.kind != AccessKind::Hit {
            let row = map_address(req.target_addr, dram.config()).row;
            truth.activations.push(Activation { bank, row, cycle: out.start_cycle });
        }
    }
    Ok(())
}

/// Attacker state carried between scans.
#[derive(Debug, Clone)]
pub struct Attacker {
    pub threshold: Cycle,
    pub clock: Cycle,
    lines: u64,
    next_line: u64,
}

impl Attacker {
    pub fn new(threshold: Cycle, start: Cycle, cfg: &DramConfig) -> Self {
        Attacker { threshold, clock: start, lines: cfg.row_size_bytes / CACHE_LINE_BYTES, next_line: 0 }
    }

    // every probe uses a fresh line so the locality monitor keeps
    // offloading it
    fn probe(&mut self, bank: usize, row: u64, dram: &mut DramState, pim: &mut PimEngine) -> Result<(Cycle, Cycle)> {
        self.next_line = (self.next_line + 1) % self.lines;
        let req = PeiRequest {
            process_id: ATTACKER_PID,
            target_addr: line_addr(bank, row, self.next_line, dram.config()),
            op: PeiOp::Add,
        };
        let at = self.clock;
        let c = pim.execute_pei(dram, &req, at)?;
        self.clock = c.completion_cycle;
        let cycle = c.per_bank_outcomes.first().map_or(at, |(_, o)| o.start_cycle);
        Ok((c.latency_cycles, cycle))
    }

    pub fn open_sentinels(&mut self, dram: &mut DramState, pim: &mut PimEngine) -> Result<()> {
        for bank in 0..dram.config().n_banks {
            self.probe(bank, SENTINEL_ROW, dram, pim)?;
        }
        Ok(())
    }

    /// Timed sentinel probe of one bank.
    pub fn probe_bank(
        &mut self,
        bank: usize,
        layout: &HashTableLayout,
        dram: &mut DramState,
        pim: &mut PimEngine,
    ) -> Result<ProbeObservation> {
        let (latency, cycle) = self.probe(bank, SENTINEL_ROW, dram, pim)?;
        let active = latency > self.threshold;
        let mut obs = ProbeObservation {
            bank,
            probed_row: SENTINEL_ROW,
            latency_cycles: latency,
            inferred_active: active,
            inferred_row: None,
            cycle,
        };
        if !active {
            return Ok(obs);
        }
        // with several table rows in the bank the sentinel probe has already
        // closed the victim's row, so only the bank is learned
        if let [only] = layout.rows_in_bank(bank).as_slice() {
            obs.inferred_row = Some(*only);
        }
        Ok(obs)
    }
}

/// One full round-robin scan over all banks.
pub fn attacker_round(
    attacker: &mut Attacker,
    layout: &HashTableLayout,
    dram: &mut DramState,
    pim: &mut PimEngine,
) -> Result<Vec<ProbeObservation>> {
    (0..layout.n_banks).map(|b| attacker.probe_bank(b, layout, dram, pim)).collect()
}

/// Scores observations against the victim's activations. An inference
/// is correct when the victim activated the inferred row of that bank since
/// the previous probe of the bank.
pub fn evaluate(truth: &GroundTruth, observations: &[ProbeObservation], total_cycles: Cycle, clock_ghz: f64, layout: &HashTableLayout) -> SideChannelResult {
    let mut acts: BTreeMap<usize, Vec<&Activation>> = BTreeMap::new();
    for a in &truth.activations {
        acts.entry(a.bank).or_default().push(a);
    }
    let mut cursor: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut inferences, mut correct, mut detected) = (0usize, 0usize, 0usize);
    for obs in observations {
        let list = acts.get(&obs.bank).map(Vec::as_slice).unwrap_or(&[]);
        let cur = cursor.entry(obs.bank).or_insert(0);
        let begin = *cur;
        while *cur < list.len() && list[*cur].cycle < obs.cycle {
            *cur += 1;
        }
        let window = &list[begin..*cur];
        if !obs.inferred_active {
            continue;
        }
        inferences += 1;
        let hits = window.iter().filter(|a| obs.inferred_row.is_none_or(|r| r == a.row)).count();
        if hits > 0 {
            correct += 1;
            detected += hits;
        }
    }
    let activations = truth.activations.len();
    let total_cycles = total_cycles.max(1);
    SideChannelResult {
        throughput_mbps: correct as f64 * clock_ghz * 1000.0 / total_cycles as f64,
        error_rate: if inferences == 0 { 0.0 } else { (inferences - correct) as f64 / inferences as f64 },
        identification_accuracy: if activations == 0 { 1.0 } else { detected as f64 / activations as f64 },
        candidates_per_hit: layout.entries_per_row,
        correct_inferences: correct,
        inferences,
        activations,
        total_cycles,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideChannelConfig {
    pub n_entries: usize,
    /// Entry size at 1024 banks; scaled with the bank count so the table
    /// always fills one row per bank.
    pub entry_size_bytes: u64,
    pub victim: VictimModel,
    pub noise: NoiseModel,
    pub calibration_samples: usize,
    /// Offload scheduling delay applied on large devices; overrides the
    /// PiM config value for the sweep.
    pub sched_cycles_per_kilobank: u64,
}

impl Default for SideChannelConfig {
    fn default() -> Self {
        SideChannelConfig {
            n_entries: 16_384,
            entry_size_bytes: 512,
            victim: VictimModel::default(),
            noise: NoiseModel { rate_per_kilocycle: 0.4, seed: 7 },
            calibration_samples: 16,
            sched_cycles_per_kilobank: 86,
        }
    }
}

pub const SWEEP_BANKS: [usize; 4] = [1024, 2048, 4096, 8192];

/// Victim lookups with Poisson arrival cycles starting at `start`.
pub fn victim_schedule(v: &VictimModel, n_entries: usize, start: Cycle) -> Vec<(usize, Cycle)> {
    let mut rng = ChaCha8Rng::seed_from_u64(v.seed ^ 0x7469_6d65);
    let gap = Exp::new(v.lookups_per_kilocycle / 1000.0).unwrap();
    let mut t = start as f64;
    v.reads()
        .iter()
        .flat_map(|r| v.hash_read(r, n_entries))
        .map(|idx| {
            t += gap.sample(&mut rng);
            (idx, t as Cycle)
        })
        .collect()
}

/// Runs victim and attacker concurrently on a device with `dram_cfg`.
pub fn run_attack(
    cfg: &SideChannelConfig,
    entry_size: u64,
    dram_cfg: &DramConfig,
    pim_cfg: &PimConfig,
) -> Result<(SideChannelResult, GroundTruth, Vec<ProbeObservation>)> {
    cfg.victim.validate()?;
    let layout = build_layout(cfg.n_entries, entry_size, dram_cfg)?;
    let threshold = calibrate_threshold(dram_cfg, pim_cfg, cfg.calibration_samples)?;
    let mut dram = DramState::new(dram_cfg.clone())?.without_log();
    let mut pim = PimEngine::new(pim_cfg.clone())?;
    let transit = pim_cfg.transit_cycles(dram_cfg.n_banks);

    let mut attacker = Attacker::new(threshold, 0, dram_cfg);
    attacker.open_sentinels(&mut dram, &mut pim)?;
    let start = attacker.clock;
    let schedule = victim_schedule(&cfg.victim, cfg.n_entries, start);
    let end = schedule.last().map_or(start, |&(_, t)| t);
    let mut noise = NoiseSource::new(&cfg.noise, dram_cfg.n_banks, start);

    let mut truth = GroundTruth::default();
    let mut observations = Vec::new();
    let mut next = 0;
    let mut bank = 0;
    let mut scan_after_end = false;
    loop {
        if bank == 0 {
            scan_after_end = next == schedule.len() && attacker.clock > end;
        }
        // victim requests that reach the device before this probe does
        while next < schedule.len() && schedule[next].1 <= attacker.clock {
            let (idx, at) = schedule[next];
            noise.advance(&mut dram, at + transit);
            victim_lookup(idx, at, &layout, &mut dram, &mut pim, &mut truth)?;
            next += 1;
        }
        noise.advance(&mut dram, attacker.clock + transit);
        observations.push(attacker.probe_bank(bank, &layout, &mut dram, &mut pim)?);
        bank = (bank + 1) % dram_cfg.n_banks;
        // stop after one full scan that started once the victim finished
        if bank == 0 && scan_after_end {
            break;
        }
    }
    let total = attacker.clock - start;
    let result = evaluate(&truth, &observations, total, dram_cfg.clock_ghz, &layout);
    Ok((result, truth, observations))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub n_banks: usize,
    pub result: SideChannelResult,
}

/// Bank sweep; the entry size grows with the bank count.
pub fn sweep(cfg: &SideChannelConfig, banks: &[usize], dram_cfg: &DramConfig, pim_cfg: &PimConfig) -> Result<Vec<SweepPoint>> {
    let pim_cfg = &PimConfig { offload_sched_cycles_per_kilobank: cfg.sched_cycles_per_kilobank, ..pim_cfg.clone() };
    banks
        .iter()
        .map(|&n| {
            let d = DramConfig { n_banks: n, ..dram_cfg.clone() };
            d.validate()?;
            let entry = cfg.entry_size_bytes * n as u64 / 1024;
            let (result, _, _) = run_attack(cfg, entry.max(1), &d, pim_cfg)?;
            Ok(SweepPoint { n_banks: n, result })
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "n_banks,entries_per_row,throughput_mbps,error_rate,accuracy,total_cycles";

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for p in points {
        let r = &p.result;
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.6},{:.6},{}",
            p.n_banks, r.candidates_per_hit, r.throughput_mbps, r.error_rate, r.identification_accuracy, r.total_cycles
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_examples() {
        let d = DramConfig::default();
        assert_eq!(build_layout(64, 512, &d).unwrap().entries_per_row, 16);
        assert_eq!(build_layout(64, 1024, &d).unwrap().entries_per_row, 8);
        assert_eq!(build_layout(64, 8192, &d).unwrap().entries_per_row, 1);
        assert!(matches!(build_layout(64, 3000, &d), Err(SimError::SizeMismatch { .. })));
    }

    #[test]
    fn layout_is_bijective_and_interleaved() {
        let d = DramConfig::default();
        let l = build_layout(1000, 1024, &d).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..l.n_entries {
            let s = l.locate(i, &d);
            assert!(seen.insert((s.bank, s.row, s.slot)));
            assert!(l.entries_in_row(s.bank, s.row).contains(&i));
            assert!(l.rows_in_bank(s.bank).contains(&s.row));
        }
        // consecutive rows of entries land on consecutive banks
        assert_eq!(l.locate(0, &d).bank, 0);
        assert_eq!(l.locate(8, &d).bank, 1);
    }

    #[test]
    fn victim_lookups() {
        let d = DramConfig::default();
        let l = build_layout(16 * 16, 512, &d).unwrap();
        let mut dram = DramState::new(d).unwrap();
        let mut pim = PimEngine::new(PimConfig::default()).unwrap();
        let t = victim_round(&[(5, 0)], &l, &mut dram, &mut pim).unwrap();
        assert_eq!(t.activations.len(), 1);
        // two entries of the same row: one activation, two accesses
        let t = victim_round(&[(32, 1000), (33, 2000)], &l, &mut dram, &mut pim).unwrap();
        assert_eq!(t.lookups, 2);
        assert_eq!(t.activations.len(), 1);
    }

    #[test]
    fn idle_victim_gives_no_inferences() {
        let d = DramConfig::default();
        let l = build_layout(256, 512, &d).unwrap();
        let mut dram = DramState::new(d.clone()).unwrap();
        let mut pim = PimEngine::new(PimConfig::default()).unwrap();
        let mut a = Attacker::new(150, 0, &d);
        a.open_sentinels(&mut dram, &mut pim).unwrap();
        let obs = attacker_round(&mut a, &l, &mut dram, &mut pim).unwrap();
        assert!(obs.iter().all(|o| !o.inferred_active));
    }

    #[test]
    fn attacker_finds_victim_row() {
        let d = DramConfig::default();
        let l = build_layout(256, 512, &d).unwrap();
        let mut dram = DramState::new(d.clone()).unwrap();
        let mut pim = PimEngine::new(PimConfig::default()).unwrap();
        let mut a = Attacker::new(150, 0, &d);
        a.open_sentinels(&mut dram, &mut pim).unwrap();
        let slot = l.locate(40, &d);
        let truth = victim_round(&[(40, a.clock)], &l, &mut dram, &mut pim).unwrap();
        a.clock += 1000;
        let obs = attacker_round(&mut a, &l, &mut dram, &mut pim).unwrap();
        let hits: Vec<_> = obs.iter().filter(|o| o.inferred_active).collect();
        assert_eq!(hits.len(), 1);
        assert_eq!((hits[0].bank, hits[0].inferred_row), (slot.bank, Some(slot.row)));
        let r = evaluate(&truth, &obs, a.clock, 2.6, &l);
        assert_eq!((r.error_rate, r.identification_accuracy), (0.0, 1.0));
        assert_eq!(r.candidates_per_hit, 16);
    }
}
