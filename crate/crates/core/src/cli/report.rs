//! JSON reports and latency statistics.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub config: Value,
    pub results: Value,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl Report {
    pub fn new(command: &str, config: impl Serialize, results: impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            results: serde_json::to_value(results)?,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Nearest-rank 95th percentile.
    pub p95_ms: f64,
    pub throughput: f64,
}

impl LatencyStats {
    pub fn from_latencies(latencies_ms: &[f64], batch: usize) -> Result<Self> {
        if latencies_ms.is_empty() {
            return Err(Error::invalid("latency statistics", "no timed iterations"));
        }
        let n = latencies_ms.len();
        let mean = latencies_ms.iter().sum::<f64>() / n as f64;
        let mut sorted = latencies_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let rank = (0.95 * n as f64).ceil() as usize;
        Ok(Self {
            mean_ms: mean,
            median_ms: median,
            p95_ms: sorted[rank.clamp(1, n) - 1],
            throughput: batch as f64 * 1000.0 / mean,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: String,
    pub fused: bool,
    /// `[n, h, w, c]`.
    pub input: [usize; 4],
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
    pub latencies_ms: Vec<f64>,
    #[serde(flatten)]
    pub stats: LatencyStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_by_hand() {
        let s = LatencyStats::from_latencies(&[4.0, 1.0, 3.0, 2.0], 1).unwrap();
        assert_eq!((s.mean_ms, s.median_ms, s.p95_ms), (2.5, 2.5, 4.0));
        assert_eq!(s.throughput, 400.0);
        let lat: Vec<f64> = (1..=20).map(f64::from).collect();
        let s = LatencyStats::from_latencies(&lat, 2).unwrap();
        assert_eq!((s.median_ms, s.p95_ms), (10.5, 19.0));
        assert!(LatencyStats::from_latencies(&[], 1).is_err());
    }

    #[test]
    fn report_schema() {
        let r = Report::new("build", serde_json::json!({"variant": "S26"}), serde_json::json!({"params": 1})).unwrap();
        let v: Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in ["command", "config", "results", "timestamp"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
