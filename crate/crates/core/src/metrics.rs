//! Per-step training metrics as line-delimited JSON records.
//!
//! Wall time is measured and surfaced on the console but excluded from the
//! serialized stream: metrics files are part of the determinism contract
//! (byte-identical across reruns of the same config and seed).

use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: usize,
    pub l_task: f64,
    pub l_veteran: f64,
    pub u_hard: f64,
    pub u_soft: f64,
    /// Fraction of routing decisions per expert; sums to 1 within 1e-9.
    pub expert_histogram: Vec<f64>,
    #[serde(skip_serializing, default)]
    pub wall_ms: f64,
}

pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        MetricsWriter { out }
    }

    pub fn write(&mut self, record: &MetricsRecord) -> std::io::Result<()> {
        let line = serde_json::to_string(record).expect("metrics serialize");
        writeln!(self.out, "{line}")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Parse a metrics file back into records (ignores blank lines).
pub fn read_metrics(text: &str) -> Result<Vec<MetricsRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Moving-average smoothing used by the training smoke checks.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / window.min(i + 1) as f64);
    }
    out
}
