use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::pipeline::RegretRecord;
use crate::{Error, Result};

const CELLS_HEADER: &str = "env,offline_alg,online_alg,mean_regret,stderr";

/// Mean regret of one (env, offline, online) combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretCell {
    pub env: String,
    pub offline_alg: String,
    pub online_alg: String,
    pub mean_regret: f64,
    pub stderr: f64,
}

impl From<&RegretRecord> for RegretCell {
    fn from(r: &RegretRecord) -> Self {
        RegretCell {
            env: r.env.clone(),
            offline_alg: r.offline_alg.clone(),
            online_alg: r.online_alg.clone(),
            mean_regret: r.mean_regret,
            stderr: r.stderr,
        }
    }
}

/// Parses `env,offline_alg,online_alg,mean_regret,stderr` rows.
pub fn parse_regret_cells(text: &str) -> Result<Vec<RegretCell>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CELLS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                offset: 0,
                message: format!("expected header {CELLS_HEADER:?}"),
            })
        }
    }
    let mut offset = text.lines().next().map_or(0, |h| h.len() as u64 + 1);
    let mut cells = Vec::new();
    for (i, line) in lines {
        let bad = |message: String| Error::Parse {
            line: i + 1,
            offset,
            message,
        };
        if !line.trim().is_empty() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            cells.push(RegretCell {
                env: f[0].to_string(),
                offline_alg: f[1].to_string(),
                online_alg: f[2].to_string(),
                mean_regret: num(f[3])?,
                stderr: num(f[4])?,
            });
        }
        offset += line.len() as u64 + 1;
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretTableRow {
    pub env: String,
    pub offline_alg: String,
    pub online_alg: String,
    pub mean_regret: f64,
    pub stderr: f64,
    /// (regret − env min) / (env max − env min), 0 when the range is empty.
    pub normalized: f64,
}

/// Normalized regret of one (offline, online) pair averaged over envs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAverage {
    pub offline_alg: String,
    pub online_alg: String,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretTable {
    pub rows: Vec<RegretTableRow>,
    pub averages: Vec<PairAverage>,
}

impl RegretTable {
    pub fn average(&self, offline_alg: &str, online_alg: &str) -> Option<f64> {
        self.averages
            .iter()
            .find(|a| a.offline_alg == offline_alg && a.online_alg == online_alg)
            .map(|a| a.normalized)
    }

    /// Per-cell raw and normalized values.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("env,offline_alg,online_alg,mean_regret,stderr,normalized\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?}\n",
                r.env, r.offline_alg, r.online_alg, r.mean_regret, r.stderr, r.normalized
            ));
        }
        out
    }

    pub fn averages_csv(&self) -> String {
        let mut out = String::from("offline_alg,online_alg,normalized_regret\n");
        for a in &self.averages {
            out.push_str(&format!("{},{},{:?}\n", a.offline_alg, a.online_alg, a.normalized));
        }
        out
    }
}

/// Min-max normalizes each cell against the minimum and maximum regret of
/// its environment over every offline × online combination, then averages
/// over environments per (offline, online) pair.
pub fn aggregate_normalized_regret(cells: &[RegretCell]) -> Result<RegretTable> {
    if cells.is_empty() {
        return Err(Error::invalid("no regret cells"));
    }
    let mut by_key: BTreeMap<(&str, &str, &str), &RegretCell> = BTreeMap::new();
    for c in cells {
        if !c.mean_regret.is_finite() {
            return Err(Error::non_finite(format!("regret of {}/{}/{}", c.env, c.offline_alg, c.online_alg)));
        }
        if by_key.insert((&c.env, &c.offline_alg, &c.online_alg), c).is_some() {
            return Err(Error::invalid(format!(
                "duplicate regret cell {}/{}/{}",
                c.env, c.offline_alg, c.online_alg
            )));
        }
    }
    let envs: BTreeSet<&str> = cells.iter().map(|c| c.env.as_str()).collect();
    let offs: BTreeSet<&str> = cells.iter().map(|c| c.offline_alg.as_str()).collect();
    let ons: BTreeSet<&str> = cells.iter().map(|c| c.online_alg.as_str()).collect();
    let mut missing = Vec::new();
    for e in &envs {
        for o in &offs {
            for n in &ons {
                if !by_key.contains_key(&(*e, *o, *n)) {
                    missing.push(format!("{e}/{o}/{n}"));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::invalid(format!("missing regret cells: {}", missing.join(", "))));
    }

    let mut range: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for c in cells {
        let r = range.entry(&c.env).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        r.0 = r.0.min(c.mean_regret);
        r.1 = r.1.max(c.mean_regret);
    }
    let rows: Vec<RegretTableRow> = by_key
        .values()
        .map(|c| {
            let (lo, hi) = range[c.env.as_str()];
            let normalized = if hi > lo { (c.mean_regret - lo) / (hi - lo) } else { 0.0 };
            RegretTableRow {
                env: c.env.clone(),
                offline_alg: c.offline_alg.clone(),
                online_alg: c.online_alg.clone(),
                mean_regret: c.mean_regret,
                stderr: c.stderr,
                normalized,
            }
        })
        .collect();
    let mut averages = Vec::new();
    for o in &offs {
        for n in &ons {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.offline_alg == *o && r.online_alg == *n)
                .map(|r| r.normalized)
                .collect();
            averages.push(PairAverage {
                offline_alg: o.to_string(),
                online_alg: n.to_string(),
                normalized: vals.iter().sum::<f64>() / vals.len() as f64,
            });
        }
    }
    Ok(RegretTable { rows, averages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cell(env: &str, off: &str, on: &str, r: f64) -> RegretCell {
        RegretCell {
            env: env.into(),
            offline_alg: off.into(),
            online_alg: on.into(),
            mean_regret: r,
            stderr: 0.0,
        }
    }

    #[test]
    fn two_env_example_by_hand() {
        let cells = vec![
            cell("a", "x", "p", 1.0),
            cell("a", "y", "p", 3.0),
            cell("b", "x", "p", 10.0),
            cell("b", "y", "p", 5.0),
        ];
        let t = aggregate_normalized_regret(&cells).unwrap();
        assert_eq!(t.average("x", "p"), Some(0.5));
        assert_eq!(t.average("y", "p"), Some(0.5));
        assert_eq!(t.rows[0].normalized, 0.0);
    }

    #[test]
    fn degenerate_range_maps_to_zero() {
        let cells = vec![cell("a", "x", "p", 2.0), cell("a", "y", "p", 2.0)];
        let t = aggregate_normalized_regret(&cells).unwrap();
        assert!(t.rows.iter().all(|r| r.normalized == 0.0));
    }

    #[test]
    fn missing_cells_are_listed() {
        let cells = vec![cell("a", "x", "p", 1.0), cell("a", "y", "q", 2.0)];
        let err = aggregate_normalized_regret(&cells).unwrap_err().to_string();
        assert!(err.contains("a/x/q") && err.contains("a/y/p"), "{err}");
        let dup = vec![cell("a", "x", "p", 1.0), cell("a", "x", "p", 2.0)];
        assert!(aggregate_normalized_regret(&dup).is_err());
    }

    #[test]
    fn cells_csv_parses_back() {
        let text = "env,offline_alg,online_alg,mean_regret,stderr\na,x,p,1.5,0.25\n\nb,x,p,2,0\n";
        let cells = parse_regret_cells(text).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0], RegretCell { stderr: 0.25, ..cell("a", "x", "p", 1.5) });
        assert!(matches!(parse_regret_cells("env\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse_regret_cells("env,offline_alg,online_alg,mean_regret,stderr\na,x,p,oops,0\n"),
            Err(Error::Parse { line: 2, offset: 46, .. })
        ));
    }

    proptest! {
        #[test]
        fn normalized_values_span_unit_interval(regrets in prop::collection::vec(0.0f64..1e4, 6)) {
            let algs = ["x", "y", "z"];
            let mut cells = Vec::new();
            for (k, r) in regrets.iter().enumerate() {
                cells.push(cell(if k < 3 { "a" } else { "b" }, algs[k % 3], "p", *r));
            }
            let t = aggregate_normalized_regret(&cells).unwrap();
            for env in ["a", "b"] {
                let vals: Vec<f64> = t.rows.iter().filter(|r| r.env == env).map(|r| r.normalized).collect();
                prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(vals.contains(&0.0));
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(hi == 1.0 || hi == lo);
            }
        }
    }
}
