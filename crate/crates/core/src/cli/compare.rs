use std::fs;
use std::path::Path;

use serde::Serialize;

use super::train::AgentCheckpoint;
use super::RunConfig;
use crate::agent::Agent;
use crate::envs::TabularMdp;
use crate::envs::{distributional_dp_oracle, OracleOptions, Policy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub state: usize,
    pub action: usize,
    pub learned_mean: f64,
    pub learned_variance: f64,
    pub oracle_mean: f64,
    pub oracle_variance: f64,
    pub mean_error: f64,
    pub variance_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorQuantiles {
    pub min: f64,
    pub median: f64,
    pub q90: f64,
    pub max: f64,
}

impl ErrorQuantiles {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.collect();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            if v.is_empty() {
                return f64::NAN;
            }
            // Linear interpolation between order statistics.
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            min: q(0.0),
            median: q(0.5),
            q90: q(0.9),
            max: q(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleComparison {
    /// Greedy action per state under the learned scores.
    pub policy: Vec<usize>,
    pub rows: Vec<OracleRow>,
    pub mean_error: ErrorQuantiles,
    pub variance_error: ErrorQuantiles,
    pub projection_error: f64,
}

impl OracleComparison {
    pub fn row(&self, state: usize, action: usize) -> Option<&OracleRow> {
        self.rows
            .iter()
            .find(|r| r.state == state && r.action == action)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary_toml(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            compared_pairs: usize,
            projection_error: f64,
            mean_error: &'a ErrorQuantiles,
            variance_error: &'a ErrorQuantiles,
        }
        toml::to_string(&Summary {
            compared_pairs: self.rows.len(),
            projection_error: self.projection_error,
            mean_error: &self.mean_error,
            variance_error: &self.variance_error,
        })
        .expect("summary serializes")
    }
}

/// Non-terminal states reachable from the initial state under `policy`.
fn visited_states(mdp: &TabularMdp, policy: &[usize]) -> Vec<usize> {
    let mut seen = vec![false; mdp.n_states];
    let mut stack = vec![mdp.initial_state];
    seen[mdp.initial_state] = true;
    while let Some(s) = stack.pop() {
        if mdp.terminal[s] {
            continue;
        }
        for o in mdp.outcomes(s, policy[s]) {
            if o.prob > 0.0 && !seen[o.next] {
                seen[o.next] = true;
                stack.push(o.next);
            }
        }
    }
    (0..mdp.n_states)
        .filter(|&s| seen[s] && !mdp.terminal[s])
        .collect()
}

/// Compares the agent's predicted mean and variance with the exact return
/// distribution of its own greedy policy, for every action at each visited state.
pub fn compare_with_oracle(
    agent: &Agent,
    mdp: &TabularMdp,
    support_size: usize,
) -> Result<OracleComparison> {
    let policy =
        (0..mdp.n_states)
            .map(|s| {
                if mdp.terminal[s] {
                    return Ok(0);
                }
                let scores = agent.action_scores(&mdp.features(s))?;
                Ok((0..scores.len())
                    .fold(0, |best, a| if scores[a] > scores[best] { a } else { best }))
            })
            .collect::<Result<Vec<usize>>>()?;
    let iterations = ((1e-10f64).ln() / mdp.gamma.ln()).ceil() as usize;
    let report = distributional_dp_oracle(
        mdp,
        &Policy::deterministic(&policy, mdp.n_actions)?,
        &OracleOptions::new(support_size, iterations.max(1)),
    )?;
    let mut rows = Vec::new();
    for s in visited_states(mdp, &policy) {
        let features = mdp.features(s);
        for a in 0..mdp.n_actions {
            let learned = agent.predict(&features, a)?;
            let truth = report.get(s, a);
            rows.push(OracleRow {
                state: s,
                action: a,
                learned_mean: learned.mean(),
                learned_variance: learned.variance(),
                oracle_mean: truth.mean,
                oracle_variance: truth.variance,
                mean_error: (learned.mean() - truth.mean).abs(),
                variance_error: (learned.variance() - truth.variance).abs(),
            });
        }
    }
    Ok(OracleComparison {
        policy,
        mean_error: ErrorQuantiles::of(rows.iter().map(|r| r.mean_error)),
        variance_error: ErrorQuantiles::of(rows.iter().map(|r| r.variance_error)),
        rows,
        projection_error: report.projection_error,
    })
}

/// Loads a checkpoint written by `cmd_train`, checks it against the config, and
/// writes `oracle.csv` plus `oracle_summary.toml` into `out` when given.
pub fn cmd_oracle(
    config_path: &Path,
    checkpoint: &Path,
    out: Option<&Path>,
) -> Result<OracleComparison> {
    let config = RunConfig::load(config_path)?;
    let agent = AgentCheckpoint::load(checkpoint)?.restore(&config)?;
    let comparison = compare_with_oracle(&agent, &config.mdp()?, 501)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        comparison.write_csv(&dir.join("oracle.csv"))?;
        let summary = dir.join("oracle_summary.toml");
        fs::write(&summary, comparison.summary_toml()).map_err(|e| Error::io(&summary, e))?;
    }
    Ok(comparison)
}
