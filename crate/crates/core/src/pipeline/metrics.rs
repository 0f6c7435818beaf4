use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Offline,
    Online,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Offline => "offline",
            Phase::Online => "online",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Phase::Offline),
            "online" => Ok(Phase::Online),
            _ => Err(Error::invalid(format!("unknown phase {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub phase: Phase,
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

/// Long-format metric stream: one row per (run, phase, step, metric).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

pub const METRICS_HEADER: &str = "run_id,phase,step,metric,value";

impl MetricsLog {
    pub fn push(&mut self, run_id: &str, phase: Phase, step: u64, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            run_id: run_id.to_string(),
            phase,
            step,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.rows.extend(other.rows);
    }

    /// (step, value) pairs of one metric in one phase, in insertion order.
    pub fn series(&self, phase: Phase, metric: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.phase == phase && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    /// Floats use Rust's shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{:?}\n", r.run_id, r.phase, r.step, r.metric, r.value));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<MetricsLog> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == METRICS_HEADER => {}
            _ => return Err(Error::invalid(format!("metrics CSV must start with {METRICS_HEADER:?}"))),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |m: &str| Error::invalid(format!("metrics line {}: {m}", i + 1));
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            rows.push(MetricRow {
                run_id: f[0].to_string(),
                phase: f[1].parse()?,
                step: f[2].parse().map_err(|_| bad("bad step"))?,
                metric: f[3].to_string(),
                value: f[4].parse().map_err(|_| bad("bad value"))?,
            });
        }
        Ok(MetricsLog { rows })
    }
}
