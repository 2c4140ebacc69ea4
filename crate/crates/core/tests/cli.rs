use std::process::Command;

use lsm_rebalance::harness::metrics::Metrics;
use lsm_rebalance::harness::{ClusterConfig, ReportFormat, Scenario};
use lsm_rebalance::sim::SimConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lsm-rebalance"))
}

fn ingest_config(nodes: u32, per_node: u32, records: u64) -> ClusterConfig {
    let mut cfg = ClusterConfig {
        sim: SimConfig { nodes, initial_nodes: nodes, partitions_per_node: per_node, ..SimConfig::default() },
        ..ClusterConfig::default()
    };
    cfg.workload.records = records;
    cfg
}

#[test]
fn uniform_ingest_spreads_evenly() {
    let cfg = ingest_config(4, 1, 100_000);
    let mut s = Scenario::from_config(&cfg).unwrap();
    let m = s.ingest();
    assert_eq!(m.records, 100_000);
    let metrics = s.metrics();
    assert_eq!(metrics.partitions.len(), 4);
    for p in &metrics.partitions {
        let off = (p.records as f64 - 25_000.0).abs() / 25_000.0;
        assert!(off <= 0.10, "{} holds {}", p.partition, p.records);
    }
    assert!(s.verify(32).passed);
}

#[test]
fn empty_ingest_succeeds() {
    let cfg = ingest_config(2, 2, 0);
    let mut s = Scenario::from_config(&cfg).unwrap();
    let m = s.ingest();
    assert_eq!(m.records, 0);
    let metrics = s.metrics();
    assert_eq!(metrics.records_live, 0);
    assert!(metrics.partitions.iter().all(|p| p.records == 0));
    let v = s.verify(8);
    assert!(v.passed, "{:?}", v.problems);
}

#[test]
fn small_split_threshold_grows_bucket_count() {
    let mut cfg = ingest_config(2, 2, 16_384);
    cfg.sim.partition.lsm.split_threshold_bytes = 64 * 1024;
    cfg.sim.partition.memory_budget_bytes = 64 * 1024;
    let mut s = Scenario::from_config(&cfg).unwrap();
    let m = s.ingest();
    assert!(m.splits > 0);
    s.drain(10_000);
    for p in s.metrics().partitions {
        assert!(p.buckets > cfg.sim.buckets_per_partition as u64, "{} has {} buckets", p.partition, p.buckets);
    }
    let v = s.verify(32);
    assert!(v.passed, "{:?}", v.problems);
}

#[test]
fn removing_a_node_at_default_scale() {
    let mut cfg = ClusterConfig::default();
    cfg.sim.nodes = 4;
    cfg.sim.initial_nodes = 4;
    let mut s = Scenario::from_config(&cfg).unwrap();
    s.ingest();
    let r = s.rebalance(cfg.sim.partitions_of(3), cfg.max_rebalance_ticks);
    assert_eq!(r.outcome, "committed");
    assert!(r.moved_fraction < r.baseline_fraction);
    let m = s.metrics();
    assert!(m.load_spread <= m.largest_bucket_load);
    let v = s.verify(32);
    assert!(v.passed, "{:?}", v.problems);
}

#[test]
fn report_round_trips_and_names_fields() {
    let mut cfg = ingest_config(2, 1, 500);
    cfg.sim.nodes = 3;
    let mut s = Scenario::from_config(&cfg).unwrap();
    s.ingest();
    s.rebalance(cfg.sim.partitions_of(3), cfg.max_rebalance_ticks);
    let mut m = s.metrics();
    m.verification = Some(s.verify(8));
    let json = m.render(ReportFormat::Json);
    assert_eq!(Metrics::parse_json(&json).unwrap(), m);
    let text = m.render(ReportFormat::Text);
    assert!(text.contains("records_moved"));
    assert!(text.contains("load_spread"));
}

#[test]
fn binary_run_is_reproducible_and_exits_zero() {
    let run = || {
        bin()
            .args(["--records", "2000", "--seed", "5", "--report-format", "json", "run"])
            .output()
            .unwrap()
    };
    let a = run();
    let b = run();
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let m = Metrics::parse_json(std::str::from_utf8(&a.stdout).unwrap()).unwrap();
    assert_eq!(m.rebalance.unwrap().outcome, "committed");
    assert!(m.verification.unwrap().passed);
}

#[test]
fn binary_survives_injected_crash() {
    let out = bin()
        .args(["--records", "2000", "--crash-point", "cc.after-commit-force", "run"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("crashes               1"));
    assert!(text.contains("verification          pass"));
}

#[test]
fn binary_rejects_bad_arguments() {
    let out = bin().args(["--crash-point", "event:x@cc", "run"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["--nodes", "1", "run", "--remove-nodes", "2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn binary_reads_config_file() {
    let dir = std::env::temp_dir().join(format!("lsm-rebalance-cfg-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let file = dir.join("cluster.toml");
    std::fs::write(&file, "[sim]\ninitial_nodes = 2\npartitions_per_node = 1\n\n[workload]\nrecords = 300\n").unwrap();
    let out = bin().arg("--config").arg(&file).args(["--report-format", "json", "ingest"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = Metrics::parse_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(m.ingest.records, 300);
    assert_eq!(m.partitions.len(), 2);
    std::fs::remove_dir_all(&dir).unwrap();
}
