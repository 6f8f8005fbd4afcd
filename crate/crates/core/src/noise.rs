//! Background memory traffic (prefetchers, page walks) as a Poisson process
//! of host accesses to uniformly chosen banks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::dram::{Cycle, DramState, MemoryAccess, Origin, ProcessId};

pub const NOISE_PID: ProcessId = 0xFFFF;
/// Noise rows are drawn from this window so they never alias protocol rows.
pub const NOISE_ROW_BASE: u64 = 1 << 20;
pub const NOISE_ROW_SPAN: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub rate_per_kilocycle: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { rate_per_kilocycle: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    gap: Option<Exp<f64>>,
    n_banks: usize,
    next: f64,
    pub injected: u64,
}

impl NoiseSource {
    pub fn new(model: &NoiseModel, n_banks: usize, start: Cycle) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ 0x006e_6f69_7365);
        let gap = (model.rate_per_kilocycle > 0.0).then(|| Exp::new(model.rate_per_kilocycle / 1000.0).unwrap());
        let next = match &gap {
            Some(g) => start as f64 + g.sample(&mut rng),
            None => f64::INFINITY,
        };
        NoiseSource { rng, gap, n_banks, next, injected: 0 }
    }

    /// Issues every background access that arrives at or before `now`.
    /// Accesses refused by the device (partitioned banks) are dropped.
    pub fn advance(&mut self, dram: &mut DramState, now: Cycle) {
        let Some(gap) = self.gap else { return };
        while self.next <= now as f64 {
            let bank = self.rng.random_range(0..self.n_banks);
            let row = NOISE_ROW_BASE + self.rng.random_range(0..NOISE_ROW_SPAN);
            let acc = MemoryAccess {
                process_id: NOISE_PID,
                bank,
                row,
                issue_cycle: self.next as Cycle,
                origin: Origin::Host,
            };
            if dram.access(&acc).is_ok() {
                self.injected += 1;
            }
            self.next += gap.sample(&mut self.rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::DramConfig;

    #[test]
    fn zero_rate_injects_nothing() {
        let mut d = DramState::new(DramConfig::default()).unwrap();
        let mut n = NoiseSource::new(&NoiseModel::default(), 16, 0);
        n.advance(&mut d, 1_000_000);
        assert_eq!(n.injected, 0);
        assert!(d.command_log().is_empty());
    }

    #[test]
    fn rate_and_determinism() {
        let model = NoiseModel { rate_per_kilocycle: 2.0, seed: 9 };
        let run = || {
            let mut d = DramState::new(DramConfig::default()).unwrap();
            let mut n = NoiseSource::new(&model, 16, 0);
            n.advance(&mut d, 1_000_000);
            (n.injected, d.command_log().to_vec())
        };
        let (a, log_a) = run();
        let (b, log_b) = run();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        // expected 2000 arrivals
        assert!((1800..2200).contains(&a), "{a}");
    }
}
