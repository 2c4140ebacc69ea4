use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use lsm_rebalance::harness::matrix::{event_matrix, point_matrix, MatrixSetup, ALL_POINTS};
use lsm_rebalance::harness::{ClusterConfig, ReportFormat, Scenario};
use lsm_rebalance::sim::{ActorId, CrashSpec};

#[derive(Parser, Debug)]
#[command(version, about = "Bucketed LSM cluster simulator with online rebalancing")]
struct Cli {
    /// TOML file with `[sim]` and `[workload]` tables; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Nodes holding data before the rebalance.
    #[arg(long, global = true)]
    nodes: Option<u32>,
    #[arg(long, global = true)]
    partitions_per_node: Option<u32>,
    #[arg(long, global = true)]
    buckets_per_partition: Option<u32>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    records: Option<u64>,
    #[arg(long, global = true)]
    payload_bytes: Option<usize>,
    #[arg(long, global = true)]
    split_threshold_bytes: Option<u64>,
    #[arg(long, global = true)]
    merge_ratio: Option<f64>,
    /// Concurrent writes during the rebalance, as a fraction of the ingest rate.
    #[arg(long, global = true)]
    write_rate: Option<f64>,
    /// Crash injection: `LABEL[@ACTOR][#NTH]` or `event:INDEX@ACTOR`.
    /// ACTOR is `cc` or `nN`. Repeatable.
    #[arg(long = "crash-point", global = true)]
    crash_points: Vec<String>,
    #[arg(long, value_enum, default_value = "text", global = true)]
    report_format: ReportFormat,
    /// Write the event trace as JSON lines to this file.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest, rebalance under concurrent writes, verify and report.
    Run {
        #[arg(long, default_value_t = 1)]
        add_nodes: u32,
        #[arg(long, default_value_t = 0)]
        remove_nodes: u32,
    },
    /// Ingest only, then verify and report.
    Ingest,
    /// Crash matrix over a small rebalance.
    Matrix {
        /// Also crash every actor before every event of the rebalance.
        #[arg(long)]
        exhaustive: bool,
    },
}

fn parse_actor(s: &str) -> anyhow::Result<ActorId> {
    if s == "cc" {
        return Ok(ActorId::Coordinator);
    }
    match s.strip_prefix('n').map(str::parse) {
        Some(Ok(n)) => Ok(ActorId::Node(n)),
        _ => bail!("unknown actor {s:?}; use cc or nN"),
    }
}

fn parse_crash(s: &str) -> anyhow::Result<CrashSpec> {
    let (body, nth) = match s.split_once('#') {
        Some((b, n)) => (b, n.parse().context("crash point occurrence")?),
        None => (s, 0),
    };
    let (label, actor) = match body.split_once('@') {
        Some((l, a)) => (l, Some(parse_actor(a)?)),
        None => (body, None),
    };
    if let Some(index) = label.strip_prefix("event:") {
        let actor = actor.context("event crashes need an actor")?;
        return Ok(CrashSpec::BeforeEvent { actor, index: index.parse().context("event index")? });
    }
    let actor = actor.unwrap_or(if label.starts_with("cc.") { ActorId::Coordinator } else { ActorId::Node(0) });
    Ok(CrashSpec::AtPoint { actor, label: label.to_string(), nth })
}

fn load_config(cli: &Cli) -> anyhow::Result<ClusterConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ClusterConfig::default(),
    };
    if let Some(n) = cli.nodes {
        cfg.sim.initial_nodes = n;
    }
    if let Some(p) = cli.partitions_per_node {
        cfg.sim.partitions_per_node = p;
    }
    if let Some(b) = cli.buckets_per_partition {
        cfg.sim.buckets_per_partition = b;
    }
    if let Some(s) = cli.seed {
        cfg.sim.seed = s;
        cfg.workload.seed = s;
    }
    if let Some(r) = cli.records {
        cfg.workload.records = r;
    }
    if let Some(p) = cli.payload_bytes {
        cfg.workload.payload_bytes = p;
    }
    if let Some(t) = cli.split_threshold_bytes {
        cfg.sim.partition.lsm.split_threshold_bytes = t;
    }
    if let Some(m) = cli.merge_ratio {
        cfg.sim.partition.lsm.merge_ratio = m;
    }
    if let Some(w) = cli.write_rate {
        cfg.workload.write_rate = w;
    }
    cfg.sim.trace = cli.trace.is_some();
    Ok(cfg)
}

fn write_trace(cli: &Cli, s: &Scenario) -> anyhow::Result<()> {
    if let Some(path) = &cli.trace {
        let mut out = String::new();
        for line in s.sim().trace() {
            out.push_str(&serde_json::to_string(line)?);
            out.push('\n');
        }
        std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let mut cfg = load_config(cli)?;
    let crashes = cli.crash_points.iter().map(|c| parse_crash(c)).collect::<anyhow::Result<Vec<_>>>()?;
    match &cli.command {
        Some(Command::Matrix { exhaustive }) => {
            let setup = MatrixSetup::small(cfg.sim.seed);
            let mut verdicts = point_matrix(&setup, ALL_POINTS);
            if *exhaustive {
                verdicts.extend(event_matrix(&setup));
            }
            let failed = verdicts.iter().filter(|v| !v.passed).count();
            match cli.report_format {
                ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&verdicts)?),
                ReportFormat::Text => {
                    for v in &verdicts {
                        let outcome = match v.committed {
                            Some(true) => "committed",
                            Some(false) => "aborted",
                            None => "none",
                        };
                        println!(
                            "{:<48} {} fired={} {outcome}",
                            v.case,
                            if v.passed { "pass" } else { "FAIL" },
                            v.fired
                        );
                        for p in &v.problems {
                            println!("    {p}");
                        }
                    }
                    println!("{} cases, {failed} failed", verdicts.len());
                }
            }
            Ok(failed == 0)
        }
        Some(Command::Ingest) => {
            cfg.sim.nodes = cfg.sim.initial_nodes;
            let mut s = Scenario::from_config(&cfg)?;
            for c in crashes {
                s.sim_mut().arm(c);
            }
            s.ingest();
            s.drain(cfg.max_rebalance_ticks);
            let mut m = s.metrics();
            let report = s.verify(cfg.verify_probes);
            let passed = report.passed;
            m.verification = Some(report);
            println!("{}", m.render(cli.report_format));
            write_trace(cli, &s)?;
            Ok(passed)
        }
        Some(Command::Run { add_nodes, remove_nodes }) => run_rebalance(cli, cfg, crashes, *add_nodes, *remove_nodes),
        None => run_rebalance(cli, cfg, crashes, 1, 0),
    }
}

fn run_rebalance(cli: &Cli, mut cfg: ClusterConfig, crashes: Vec<CrashSpec>, add: u32, remove: u32) -> anyhow::Result<bool> {
    if remove >= cfg.sim.initial_nodes + add {
        bail!("cannot remove every node");
    }
    cfg.sim.nodes = cfg.sim.initial_nodes + add;
    let after = cfg.sim.nodes - remove;
    let targets = cfg.sim.partitions_of(after);
    let mut s = Scenario::from_config(&cfg)?;
    s.ingest();
    for c in crashes {
        s.sim_mut().arm(c);
    }
    let r = s.rebalance(targets, cfg.max_rebalance_ticks);
    let settled = s.drain(cfg.max_rebalance_ticks);
    let mut m = s.metrics();
    let mut report = s.verify(cfg.verify_probes);
    if !settled || r.outcome == "timeout" {
        report.problems.push(format!("rebalance did not finish: {}", r.outcome));
        report.passed = false;
    }
    let passed = report.passed;
    m.verification = Some(report);
    println!("{}", m.render(cli.report_format));
    write_trace(cli, &s)?;
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
