use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn impact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_impact"))
        .args(args)
        .env_remove("IMPACT_SEED")
        .output()
        .expect("run impact")
}

fn run_ok(args: &[&str]) -> Output {
    let out = impact(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(dir: &Path, file: &str) -> String {
    fs::read_to_string(dir.join(file)).unwrap()
}

#[test]
fn poc_pnm_writes_alternating_latencies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["poc-pnm", "--out", out]);
    let csv = read(dir.path(), "poc-pnm.csv");
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "bit,bank,sent,latency_cycles,decoded");
    assert_eq!(rows.len(), 17);
    for row in &rows[1..] {
        let f: Vec<&str> = row.split(',').collect();
        let lat: u64 = f[3].parse().unwrap();
        assert_eq!(f[2], f[4], "{row}");
        assert_eq!(lat > 150, f[2] == "1", "{row}");
    }
    assert!(read(dir.path(), "poc-pnm.summary.txt").contains("errors 0"));
}

#[test]
fn unknown_experiment_fails_with_usage() {
    let out = impact(&["no-such-thing"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown experiment") && err.contains("poc-pnm"), "{err}");
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[dram]\nwhat = 1\n").unwrap();
    let out = impact(&["latency-gap", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("what"));

    fs::write(&cfg, "[dram]\nt_rcd_ns = -1\n").unwrap();
    let out = impact(&["latency-gap", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn constant_time_config_closes_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ctd.toml");
    fs::write(&cfg, "[dram]\nrow_policy = \"constant_time\"\n").unwrap();
    run_ok(&["latency-gap", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let summary = read(dir.path(), "latency-gap.summary.txt");
    assert!(summary.contains("conflict - hit gap: 0 cycles"), "{summary}");
    assert!(summary.contains("calibration failed"), "{summary}");
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        run_ok(&["poc-pum", "--random-bits", "64", "--seed", "9", "--out", dir.path().to_str().unwrap()]);
    }
    assert_eq!(read(a.path(), "poc-pum.csv"), read(b.path(), "poc-pum.csv"));
}

#[test]
fn seed_from_environment() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_ok(&["poc-pnm", "--random-bits", "64", "--seed", "5", "--out", a.path().to_str().unwrap()]);
    let out = Command::new(env!("CARGO_BIN_EXE_impact"))
        .args(["poc-pnm", "--random-bits", "64", "--out", b.path().to_str().unwrap()])
        .env("IMPACT_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read(a.path(), "poc-pnm.csv"), read(b.path(), "poc-pnm.csv"));
}

#[test]
fn message_and_policy_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["poc-pum", "--message", "FF00", "--out", out]);
    let csv = read(dir.path(), "poc-pum.csv");
    let ones = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[2] == "1" && f[4] == "1")
        .count();
    assert_eq!(ones, 8);

    run_ok(&["mitigation-channel", "--policy", "partition", "--random-bits", "32", "--out", out]);
    assert!(read(dir.path(), "mitigation-channel.csv").contains("partition_violation"));

    let bad = impact(&["poc-pnm", "--policy", "sideways", "--out", out]);
    assert!(!bad.status.success());
}

#[test]
fn sweep_and_overhead_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["throughput-sweep", "--out", out]);
    let csv = read(dir.path(), "throughput-sweep.csv");
    assert!(csv.starts_with("kind,llc_size_mb,llc_ways,bit_cost_cycles,throughput_mbps\n"));
    assert!(csv.contains("impact-pum,128,16,"));

    run_ok(&["mitigation-overhead", "--out", out]);
    let csv = read(dir.path(), "mitigation-overhead.csv");
    assert_eq!(csv.lines().count(), 1 + 5 * 3);
}

#[test]
fn side_channel_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["side-channel-sweep", "--banks", "16,32", "--entry-size", "1024", "--reads", "50", "--out", out]);
    let csv = read(dir.path(), "side-channel-sweep.csv");
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "n_banks,entries_per_row,throughput_mbps,error_rate,accuracy,total_cycles");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("16,512,") && rows[2].starts_with("32,256,"), "{csv}");
}
