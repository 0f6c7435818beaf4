use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::eval::{mean_stderr, normalized_score};
use crate::{Error, Result};

/// Evaluation stream of one fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env: String,
    pub offline_alg: String,
    pub online_alg: String,
    pub seed: u64,
    /// Mean evaluation return R_t at each evaluation point, starting with J(π_0).
    pub eval_returns: Vec<f64>,
}

/// Regret of one (env, offline, online) cell over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    pub env: String,
    pub offline_alg: String,
    pub online_alg: String,
    /// R_t streams, one per seed.
    pub rewards: Vec<Vec<f64>>,
    pub r_star: f64,
    pub mean_regret: f64,
    pub stderr: f64,
}

/// (1/T)·Σ_t (R* − R_t).
pub fn regret(rewards: &[f64], r_star: f64) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::invalid("regret needs at least one evaluation"));
    }
    Ok(rewards.iter().map(|r| r_star - r).sum::<f64>() / rewards.len() as f64)
}

/// Groups runs into cells. R* is the largest evaluation return observed in
/// any run on the same environment.
pub fn regret_records(runs: &[RunSummary]) -> Result<Vec<RegretRecord>> {
    let mut r_star: BTreeMap<&str, f64> = BTreeMap::new();
    for run in runs {
        let best = run.eval_returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = r_star.entry(run.env.as_str()).or_insert(f64::NEG_INFINITY);
        *e = e.max(best);
    }
    let mut cells: BTreeMap<(&str, &str, &str), Vec<&RunSummary>> = BTreeMap::new();
    for run in runs {
        cells
            .entry((run.env.as_str(), run.offline_alg.as_str(), run.online_alg.as_str()))
            .or_default()
            .push(run);
    }
    cells
        .into_iter()
        .map(|((env, off, on), group)| {
            let star = r_star[env];
            let per_seed = group
                .iter()
                .map(|r| regret(&r.eval_returns, star))
                .collect::<Result<Vec<_>>>()?;
            let (mean_regret, stderr) = mean_stderr(&per_seed);
            Ok(RegretRecord {
                env: env.to_string(),
                offline_alg: off.to_string(),
                online_alg: on.to_string(),
                rewards: group.iter().map(|r| r.eval_returns.clone()).collect(),
                r_star: star,
                mean_regret,
                stderr,
            })
        })
        .collect()
}

/// J(π_0) and J(π_1) on the normalized scale, π_1 being the first
/// evaluation after fine-tuning starts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableTransfer {
    pub j0: f64,
    pub j1: f64,
    pub delta: f64,
}

impl StableTransfer {
    pub fn from_returns(eval_returns: &[f64], random: f64, expert: f64) -> Result<StableTransfer> {
        if eval_returns.len() < 2 {
            return Err(Error::invalid("stable transfer needs the initial and one later evaluation"));
        }
        let j0 = normalized_score(eval_returns[0], random, expert);
        let j1 = normalized_score(eval_returns[1], random, expert);
        Ok(StableTransfer { j0, j1, delta: j1 - j0 })
    }

    /// J(π_1) ≥ fraction·J(π_0).
    pub fn holds(&self, fraction: f64) -> bool {
        self.j1 >= fraction * self.j0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(off: &str, seed: u64, r: &[f64]) -> RunSummary {
        RunSummary {
            env: "reach2d".into(),
            offline_alg: off.into(),
            online_alg: "sac".into(),
            seed,
            eval_returns: r.to_vec(),
        }
    }

    #[test]
    fn regret_is_recomputable_and_nonnegative() {
        let runs = vec![run("smac", 0, &[-3.0, -2.0, -1.0]), run("smac", 1, &[-4.0, -2.5, -2.0]), run("iql", 0, &[-5.0, -5.0, -0.5])];
        let recs = regret_records(&runs).unwrap();
        assert_eq!(recs.len(), 2);
        for rec in &recs {
            assert_eq!(rec.r_star, -0.5);
            let per: Vec<f64> = rec.rewards.iter().map(|r| regret(r, rec.r_star).unwrap()).collect();
            let (m, _) = mean_stderr(&per);
            assert!((m - rec.mean_regret).abs() <= 1e-12);
            assert!(rec.mean_regret >= 0.0);
        }
        let smac = recs.iter().find(|r| r.offline_alg == "smac").unwrap();
        assert!((smac.mean_regret - (1.5 + 2.3333333333333335) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn stable_transfer_statistic() {
        let st = StableTransfer::from_returns(&[-20.0, -15.0, -10.0], -40.0, -10.0).unwrap();
        assert!((st.j0 - 200.0 / 3.0).abs() < 1e-12);
        assert!((st.j1 - 250.0 / 3.0).abs() < 1e-12);
        assert!(st.holds(0.9));
        assert!(StableTransfer::from_returns(&[1.0], 0.0, 2.0).is_err());
    }
}
