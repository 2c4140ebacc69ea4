use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::verify::VerifyReport;
use crate::sim::Counters;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean: f64,
    pub p50: u64,
    pub p99: u64,
    pub max: u64,
}

impl LatencyStats {
    pub fn from_samples(mut v: Vec<u64>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_unstable();
        let at = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
        Self {
            count: v.len() as u64,
            mean: v.iter().sum::<u64>() as f64 / v.len() as f64,
            p50: at(0.5),
            p99: at(0.99),
            max: *v.last().expect("non-empty"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestMetrics {
    pub records: u64,
    pub ticks: u64,
    pub failed_writes: u64,
    pub write_latency: LatencyStats,
    pub splits: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RebalanceMetrics {
    pub rebalance_id: Option<u64>,
    pub outcome: String,
    pub abort_reason: Option<String>,
    pub nodes_before: u32,
    pub nodes_after: u32,
    pub records_before: u64,
    pub buckets_total: u64,
    pub buckets_moved: u64,
    pub records_moved: u64,
    pub bytes_moved: u64,
    pub replicated_writes: u64,
    pub moved_fraction: f64,
    pub baseline_moved_estimate: u64,
    pub baseline_fraction: f64,
    pub duration_ticks: u64,
    pub blocked_window_ticks: u64,
    pub concurrent_writes: u64,
    pub concurrent_reads: u64,
    pub stale_reads: u64,
    pub read_latency: LatencyStats,
    pub write_latency: LatencyStats,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionMetrics {
    pub partition: String,
    pub records: u64,
    pub buckets: u64,
    /// Directory slots owned.
    pub normalized_load: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub seed: u64,
    pub records_live: u64,
    pub ingest: IngestMetrics,
    pub rebalance: Option<RebalanceMetrics>,
    pub partitions: Vec<PartitionMetrics>,
    /// max - min normalized load over the partitions in the directory.
    pub load_spread: u64,
    pub largest_bucket_load: u64,
    pub counters: Counters,
    pub events: u64,
    pub final_tick: u64,
    pub trace_digest: String,
    pub verification: Option<VerifyReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Text,
    Json,
}

impl Metrics {
    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => serde_json::to_string_pretty(self).expect("metrics serialize"),
            ReportFormat::Text => self.text(),
        }
    }

    pub fn parse_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed                  {}", self.seed);
        let _ = writeln!(s, "records_live          {}", self.records_live);
        let _ = writeln!(s, "ingest_records        {}", self.ingest.records);
        let _ = writeln!(s, "ingest_ticks          {}", self.ingest.ticks);
        let _ = writeln!(s, "ingest_splits         {}", self.ingest.splits);
        let _ = writeln!(s, "ingest_write_latency  mean {:.2} p99 {}", self.ingest.write_latency.mean, self.ingest.write_latency.p99);
        if let Some(r) = &self.rebalance {
            let _ = writeln!(s, "rebalance_outcome     {}", r.outcome);
            if let Some(why) = &r.abort_reason {
                let _ = writeln!(s, "abort_reason          {why}");
            }
            let _ = writeln!(s, "nodes                 {} -> {}", r.nodes_before, r.nodes_after);
            let _ = writeln!(s, "buckets_moved         {} of {}", r.buckets_moved, r.buckets_total);
            let _ = writeln!(s, "records_moved         {}", r.records_moved);
            let _ = writeln!(s, "bytes_moved           {}", r.bytes_moved);
            let _ = writeln!(s, "replicated_writes     {}", r.replicated_writes);
            let _ = writeln!(s, "moved_fraction        {:.4}", r.moved_fraction);
            let _ = writeln!(s, "baseline_moved        {}", r.baseline_moved_estimate);
            let _ = writeln!(s, "baseline_fraction     {:.4}", r.baseline_fraction);
            let _ = writeln!(s, "duration_ticks        {}", r.duration_ticks);
            let _ = writeln!(s, "blocked_window_ticks  {}", r.blocked_window_ticks);
            let _ = writeln!(s, "concurrent_writes     {}", r.concurrent_writes);
            let _ = writeln!(s, "concurrent_reads      {}", r.concurrent_reads);
            let _ = writeln!(s, "stale_reads           {}", r.stale_reads);
            let _ = writeln!(s, "read_latency          mean {:.2} p99 {} max {}", r.read_latency.mean, r.read_latency.p99, r.read_latency.max);
            let _ = writeln!(s, "write_latency         mean {:.2} p99 {} max {}", r.write_latency.mean, r.write_latency.p99, r.write_latency.max);
        }
        let _ = writeln!(s, "load_spread           {}", self.load_spread);
        let _ = writeln!(s, "largest_bucket_load   {}", self.largest_bucket_load);
        for p in &self.partitions {
            let _ = writeln!(
                s,
                "partition {:<8} records {:>8} buckets {:>3} load {:>4}",
                p.partition, p.records, p.buckets, p.normalized_load
            );
        }
        let _ = writeln!(s, "events                {}", self.events);
        let _ = writeln!(s, "crashes               {}", self.counters.crashes);
        let _ = writeln!(s, "trace_digest          {}", self.trace_digest);
        if let Some(v) = &self.verification {
            let _ = writeln!(s, "verification          {}", if v.passed { "pass" } else { "FAIL" });
            for p in &v.problems {
                let _ = writeln!(s, "  {p}");
            }
            if v.suppressed > 0 {
                let _ = writeln!(s, "  ... and {} more", v.suppressed);
            }
            for l in &v.repro {
                let _ = writeln!(s, "  trace {l}");
            }
        }
        s
    }
}
