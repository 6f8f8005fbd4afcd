//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

use impact_core::cache::{self, AttackKind};
use impact_core::channel::{
    calibrate_threshold, parse_hex_message, pnm_transmit, pum_transmit, random_message, run_channel, transmit_detailed,
    ChannelConfig, ChannelKind, Policy,
};
use impact_core::config::Config;
use impact_core::dram::{check_tras, ns_to_cycles, DramConfig, DramState, MemoryAccess, Origin, RowPolicy};
use impact_core::experiments::{measure_latencies, run_experiment, sweep_points, Experiment, RunOptions, FIXED_SIZE_MB, FIXED_WAYS};
use impact_core::mitigation::{default_profiles, overhead_report, TraceConfig};
use impact_core::pim::{PimConfig, PimEngine, RowCloneRequest};
use impact_core::sidechannel::{self, SideChannelConfig, SWEEP_BANKS};
use impact_core::SimError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= target * tol
}

fn defaults() -> (ChannelConfig, DramConfig, PimConfig) {
    (ChannelConfig::default(), DramConfig::default(), PimConfig::default())
}

fn latency_gap() -> Outcome {
    let cfg = Config::default();
    let lat = measure_latencies(&cfg).map_err(|e| e.to_string())?;
    let get = |c: &str| lat.iter().find(|l| l.0 == "host" && l.1 == c).unwrap().2;
    let gap = get("conflict") - get("hit");
    let raw = ns_to_cycles(13.5, 2.6) + ns_to_cycles(13.5, 2.6);
    check((70..=78).contains(&gap) && raw == 72, format!("gap {gap} cycles, raw term {raw}"))
}

fn poc_decode() -> Outcome {
    let (c, d, p) = defaults();
    let msg = parse_hex_message("A5A5").unwrap();
    let mut details = Vec::new();
    for kind in [ChannelKind::Pnm, ChannelKind::Pum] {
        let r = transmit_detailed(kind, &msg, &c, &d, &p).map_err(|e| e.to_string())?.result;
        let classes_ok = r
            .probes
            .iter()
            .all(|pr| if msg[pr.bit] { pr.latency_cycles > 150 } else { pr.latency_cycles < 150 });
        let lo = r.probes.iter().map(|p| p.latency_cycles).min().unwrap();
        let hi = r.probes.iter().map(|p| p.latency_cycles).max().unwrap();
        if r.decoded != msg || r.error_rate != 0.0 || !classes_ok {
            return Err(format!("{} decoded {:?} latencies {lo}..{hi}", kind.name(), r.decoded));
        }
        details.push(format!("{} 0 errors, latencies {lo}..{hi}", kind.name()));
    }
    Ok(details.join("; "))
}

fn throughput_anchors() -> Outcome {
    let (c, d, p) = defaults();
    let msg = random_message(1024, 42);
    let pnm = pnm_transmit(&msg, &c, &d, &p).map_err(|e| e.to_string())?.throughput_mbps;
    let pum = pum_transmit(&msg, &c, &d, &p).map_err(|e| e.to_string())?.throughput_mbps;
    let ratio = pum / pnm;
    check(
        within(pnm, 12.87, 0.15) && within(pum, 14.16, 0.15) && (1.05..=1.15).contains(&ratio),
        format!("PnM {pnm:.2} Mb/s, PuM {pum:.2} Mb/s, ratio {ratio:.3}"),
    )
}

fn sender_breakdown() -> Outcome {
    let (c, d, p) = defaults();
    let msg = parse_hex_message("A5A5").unwrap();
    let pnm = pnm_transmit(&msg, &c, &d, &p).map_err(|e| e.to_string())?.sender_cycles;
    let pum = pum_transmit(&msg, &c, &d, &p).map_err(|e| e.to_string())?.sender_cycles;
    let ratio = pnm as f64 / pum as f64;
    check((10.0..=18.0).contains(&ratio), format!("sender PnM {pnm} / PuM {pum} = {ratio:.2}"))
}

fn tput(kind: AttackKind, size: u32, ways: u32) -> f64 {
    let model = cache::CacheModel::default();
    let cfg = model.point(size, ways).unwrap();
    cache::throughput_mbps(cache::bit_cost(kind, &cfg, &cache::AnalyticParams::default()), 2.6)
}

fn baseline_scaling() -> Outcome {
    let model = cache::CacheModel::default();
    let sizes = model.sizes();
    let ways = [2u32, 4, 8, 16, 32, 64, 128];
    let direct: Vec<f64> = sizes.iter().map(|&s| tput(AttackKind::DirectAccess, s, FIXED_WAYS)).collect();
    let direct_ok = direct.iter().all(|&t| within(t, 11.27, 0.10));
    let ev_size: Vec<f64> = sizes.iter().map(|&s| tput(AttackKind::DramaEviction, s, FIXED_WAYS)).collect();
    let ev_ways: Vec<f64> = ways.iter().map(|&w| tput(AttackKind::DramaEviction, FIXED_SIZE_MB, w)).collect();
    let dec = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let ev_max = ev_size.iter().chain(&ev_ways).cloned().fold(f64::MIN, f64::max);
    let lat: Vec<i64> = ways
        .iter()
        .map(|&w| cache::eviction_latency(&model.point(FIXED_SIZE_MB, w).unwrap()) as i64)
        .collect();
    let inc = lat.windows(2).all(|w| w[1] > w[0]);
    // exactly linear in ways
    let linear = ways.windows(2).zip(lat.windows(2)).all(|(w, l)| {
        (l[1] - l[0]) * (ways[1] - ways[0]) as i64 == (lat[1] - lat[0]) * (w[1] - w[0]) as i64
    });
    check(
        direct_ok && dec(&ev_size) && dec(&ev_ways) && ev_max <= 2.29 * 1.10 && inc && linear,
        format!("direct {:.2}..{:.2} Mb/s, eviction max {ev_max:.3} Mb/s, eviction latency {:?}", direct[0], direct[direct.len() - 1], lat),
    )
}

fn comparison_ordering() -> Outcome {
    let (c, d, p) = defaults();
    let msg = random_message(1024, 42);
    let pnm = pnm_transmit(&msg, &c, &d, &p).map_err(|e| e.to_string())?.throughput_mbps;
    let pum = pum_transmit(&msg, &c, &d, &p).map_err(|e| e.to_string())?.throughput_mbps;
    let cfg = Config::default();
    for (size, ways) in sweep_points(&cfg) {
        let off = tput(AttackKind::PnmOffChip, size, ways);
        let dma = tput(AttackKind::DmaEngine, size, ways);
        let fl = tput(AttackKind::DramaClflush, size, ways);
        let ev = tput(AttackKind::DramaEviction, size, ways);
        if !(pum > pnm && pnm > off && off >= dma && within(dma, 5.27, 0.10) && dma > fl && fl > ev) {
            return Err(format!(
                "at {size} MB/{ways} ways: PuM {pum:.2} PnM {pnm:.2} OffChip {off:.2} DMA {dma:.2} clflush {fl:.2} eviction {ev:.2}"
            ));
        }
    }
    let sizes = cfg.cache.sizes();
    let first = tput(AttackKind::PnmOffChip, sizes[0], FIXED_WAYS);
    let last = tput(AttackKind::PnmOffChip, *sizes.last().unwrap(), FIXED_WAYS);
    check(
        within(first, 12.64, 0.15) && within(last, 10.64, 0.15) && last < first,
        format!("ordering holds at all points; PnM-OffChip {first:.2} -> {last:.2} Mb/s"),
    )
}

fn side_channel() -> Outcome {
    let cfg = SideChannelConfig::default();
    let pts = sidechannel::sweep(&cfg, &SWEEP_BANKS, &DramConfig::default(), &PimConfig::default())
        .map_err(|e| e.to_string())?;
    let r = |i: usize| &pts[i].result;
    let detail = pts
        .iter()
        .map(|p| {
            format!(
                "{}: {:.2} Mb/s err {:.4} acc {:.3}",
                p.n_banks, p.result.throughput_mbps, p.result.error_rate, p.result.identification_accuracy
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    let first = r(0);
    let last = r(pts.len() - 1);
    let ok = within(first.throughput_mbps, 7.57, 0.20)
        && first.error_rate < 0.05
        && first.identification_accuracy >= 0.93
        && r(1).identification_accuracy >= 0.88
        && pts.windows(2).all(|w| w[1].result.throughput_mbps <= w[0].result.throughput_mbps)
        && within(last.throughput_mbps, 2.56, 0.25)
        && pts.iter().all(|p| p.result.error_rate < 0.15);
    check(ok, detail)
}

fn mitigation_kill() -> Outcome {
    let (c, d, p) = defaults();
    let msg = random_message(1024, 7);
    let mut details = Vec::new();
    for kind in [ChannelKind::Pnm, ChannelKind::Pum] {
        for policy in [Policy::Constant, Policy::Closed] {
            let r = run_channel(kind, &msg, &c, &d, &p, policy).map_err(|e| e.to_string())?;
            if !(0.45..=0.55).contains(&r.error_rate) {
                return Err(format!("{} under {}: error_rate {:.3}", kind.name(), policy.name(), r.error_rate));
            }
            details.push(format!("{}/{} {:.3}", kind.name(), policy.name(), r.error_rate));
        }
        match run_channel(kind, &msg, &c, &d, &p, Policy::Partition) {
            Err(SimError::PartitionViolation { .. }) => {}
            other => return Err(format!("{} under partition: {other:?}", kind.name())),
        }
    }
    let ctd = DramConfig { row_policy: RowPolicy::ConstantTime, ..d };
    match calibrate_threshold(&ctd, &p, 16) {
        Err(SimError::CalibrationFailed { .. }) => {}
        other => return Err(format!("calibration under constant-time: {other:?}")),
    }
    details.push("partition blocks both, constant-time calibration fails".into());
    Ok(details.join("; "))
}

fn mitigation_overhead() -> Outcome {
    let report = overhead_report(&default_profiles(), &DramConfig::default(), &TraceConfig::default())
        .map_err(|e| e.to_string())?;
    let mut by_ctd: Vec<_> = report.profiles.iter().collect();
    by_ctd.sort_by(|a, b| b.ctd_overhead_pct.total_cmp(&a.ctd_overhead_pct));
    let top: Vec<&str> = by_ctd.iter().take(2).map(|p| p.profile.as_str()).collect();
    let high_reuse_top = top.contains(&"PR") && top.contains(&"BC");
    check(
        report.mean_ctd_pct > report.mean_crp_pct
            && report.mean_crp_pct > 0.0
            && high_reuse_top
            && (20.0..=35.0).contains(&report.mean_ctd_pct)
            && (10.0..=22.0).contains(&report.mean_crp_pct),
        format!(
            "mean CTD {:.1}%, mean CRP {:.1}%, largest CTD overheads {:?}",
            report.mean_ctd_pct, report.mean_crp_pct, top
        ),
    )
}

fn property_suites() -> Outcome {
    let seeds = 100u64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // latency ordering on a random timing point
        let t = rng.random_range(5.0..30.0);
        let d = DramConfig { t_rcd_ns: t, t_rp_ns: rng.random_range(5.0..30.0), t_ras_ns: t + rng.random_range(0.0..30.0), ..DramConfig::default() };
        let tm = d.timings();
        if !(tm.hit < tm.empty() && tm.empty() < tm.conflict()) {
            return Err(format!("seed {seed}: latency ordering broken"));
        }

        // tRAS in the command log of a random access stream
        let mut dram = DramState::new(d.clone()).map_err(|e| e.to_string())?;
        let mut now = 0;
        for _ in 0..200 {
            now += rng.random_range(0..40);
            let acc = MemoryAccess {
                process_id: 1,
                bank: rng.random_range(0..d.n_banks),
                row: rng.random_range(0..4),
                issue_cycle: now,
                origin: if rng.random_bool(0.5) { Origin::Host } else { Origin::MemoryPcu },
            };
            dram.access(&acc).map_err(|e| e.to_string())?;
        }
        if let Some(bad) = check_tras(dram.command_log(), tm.t_ras) {
            return Err(format!("seed {seed}: tRAS violated by {bad:?}"));
        }

        // RowClone mask and parallelism
        let mask: Vec<bool> = (0..16).map(|_| rng.random_bool(0.5)).collect();
        if mask.iter().any(|&m| m) {
            let dc = DramConfig::default();
            let mut dram = DramState::new(dc.clone()).map_err(|e| e.to_string())?;
            let pim = PimEngine::new(PimConfig::default()).map_err(|e| e.to_string())?;
            let req = RowCloneRequest::spanning(1, 3, 4, mask.clone(), &dc);
            let c = pim.execute_rowclone(&mut dram, &req, 0).map_err(|e| e.to_string())?;
            let banks: Vec<usize> = c.per_bank_outcomes.iter().map(|(b, _)| *b).collect();
            let want: Vec<usize> = (0..16).filter(|&b| mask[b]).collect();
            let starts_equal = c.per_bank_outcomes.windows(2).all(|w| w[0].1.start_cycle == w[1].1.start_cycle);
            let max_done = c.per_bank_outcomes.iter().map(|(_, o)| o.completion_cycle).max().unwrap();
            let untouched = (0..16).filter(|&b| !mask[b]).all(|b| dram.bank(b).open_row.is_none());
            if banks != want || !starts_equal || max_done != c.completion_cycle || !untouched {
                return Err(format!("seed {seed}: RowClone invariants broken for mask {mask:?}"));
            }
        }

        // semaphore safety
        let (c, d, p) = defaults();
        let msg = random_message(32, seed);
        let run = transmit_detailed(ChannelKind::Pnm, &msg, &c, &d, &p).map_err(|e| e.to_string())?;
        if run.semaphore_trace.iter().any(|&s| s < 0) || run.semaphore_trace.last() != Some(&0) {
            return Err(format!("seed {seed}: semaphore trace unsafe"));
        }

        // byte-identical CSV on repeated runs
        let opts = RunOptions { seed, random_bits: Some(48), ..RunOptions::default() };
        for exp in [Experiment::PocPnm, Experiment::PocPum] {
            let a = run_experiment(exp, &Config::default(), &opts).map_err(|e| e.to_string())?;
            let b = run_experiment(exp, &Config::default(), &opts).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("seed {seed}: {} not deterministic", exp.name()));
            }
        }
    }
    Ok(format!("latency ordering, tRAS log, RowClone mask, semaphore safety, determinism over {seeds} seeds"))
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 10] = [
        ("latency gap", latency_gap),
        ("proof-of-concept decode", poc_decode),
        ("throughput anchors", throughput_anchors),
        ("sender breakdown", sender_breakdown),
        ("baseline scaling", baseline_scaling),
        ("comparison ordering", comparison_ordering),
        ("side channel", side_channel),
        ("mitigation channel kill", mitigation_kill),
        ("mitigation overhead", mitigation_overhead),
        ("property suites", property_suites),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(d) => println!("criterion {:>2} PASS {name}: {d}", i + 1),
            Err(d) => {
                println!("criterion {:>2} FAIL {name}: {d}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
