use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{RunConfig, BUILD_VERSION};
use crate::agent::{Agent, EpisodeStats, PolicyMode};
use crate::belief::Belief;
use crate::envs::TabularEnv;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Takes precedence over `output_dir` in the config.
    pub out: Option<PathBuf>,
    pub force: bool,
    /// Worker threads; 0 and 1 both mean sequential.
    pub parallel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_id: String,
    pub seed: u64,
    pub policy_mode: PolicyMode,
    pub episodes: usize,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub runs: Vec<RunOutcome>,
}

impl TrainSummary {
    pub fn n_failed(&self) -> usize {
        self.runs.iter().filter(|r| r.failed()).count()
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config_hash: String,
    build_version: &'static str,
    runs: &'a [RunOutcome],
    config: &'a RunConfig,
}

/// Trained belief plus what is needed to check it against a config later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub env: String,
    pub policy_mode: PolicyMode,
    pub seed: u64,
    pub state_dim: usize,
    pub n_actions: usize,
    pub hidden: Vec<usize>,
    pub components: usize,
    pub belief: serde_json::Value,
}

impl AgentCheckpoint {
    pub fn new(config: &RunConfig, agent: &Agent, seed: u64) -> Self {
        let net = agent.network();
        Self {
            env: config.env.label().into(),
            policy_mode: agent.config().policy_mode,
            seed,
            state_dim: net.state_dim,
            n_actions: net.n_actions,
            hidden: net.hidden.clone(),
            components: net.components,
            belief: serde_json::from_str(&agent.belief().to_checkpoint())
                .expect("belief checkpoint is JSON"),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn belief(&self) -> Result<Belief> {
        Belief::from_checkpoint(&self.belief.to_string())
    }

    /// Rebuilds the agent, failing if the checkpoint was produced for a different setup.
    pub fn restore(&self, config: &RunConfig) -> Result<Agent> {
        let mdp = config.mdp()?;
        let mismatch = |what: &str, ours: String, theirs: String| {
            Err(Error::invalid(format!(
                "checkpoint {what} `{theirs}` does not match config {what} `{ours}`"
            )))
        };
        if self.env != config.env.label() {
            return mismatch("environment", config.env.label().into(), self.env.clone());
        }
        if (self.state_dim, self.n_actions) != (mdp.n_states, mdp.n_actions) {
            return mismatch(
                "state/action sizes",
                format!("{}x{}", mdp.n_states, mdp.n_actions),
                format!("{}x{}", self.state_dim, self.n_actions),
            );
        }
        if self.hidden != config.agent.hidden || self.components != config.agent.components {
            return mismatch(
                "network",
                format!("{:?}/{}", config.agent.hidden, config.agent.components),
                format!("{:?}/{}", self.hidden, self.components),
            );
        }
        let mut agent_config = config.agent.clone();
        agent_config.policy_mode = self.policy_mode;
        let fresh = Agent::new(
            agent_config.clone(),
            mdp.n_states,
            mdp.n_actions,
            mdp.gamma,
            self.seed,
        )?;
        let belief = self.belief()?;
        if belief.shape() != fresh.belief().shape() {
            return Err(Error::invalid(
                "checkpoint belief shape does not match the config",
            ));
        }
        Agent::from_belief(
            agent_config,
            fresh.network().clone(),
            mdp.gamma,
            belief,
            self.seed,
        )
    }
}

/// Trains one `(mode, seed)` run, streaming stats rows to `stats` as episodes finish.
/// On failure the rows written so far stay in `stats`.
pub fn run_single<W: Write>(
    config: &RunConfig,
    mode: PolicyMode,
    seed: u64,
    stats: W,
) -> (Result<Agent>, usize) {
    let mut episodes = 0;
    let result = (|| {
        let mdp = config.mdp()?;
        let mut agent_config = config.agent.clone();
        agent_config.policy_mode = mode;
        let mut agent = Agent::new(agent_config, mdp.n_states, mdp.n_actions, mdp.gamma, seed)?;
        let mut env = TabularEnv::new(mdp, seed);
        let mut writer = csv::Writer::from_writer(stats);
        let run_id = config.run_id(mode, seed);
        agent.run_episodes(
            &mut env,
            config.n_episodes,
            &run_id,
            seed,
            |row: EpisodeStats| {
                writer
                    .serialize(&row)
                    .map_err(|e| Error::Format(e.to_string()))?;
                writer.flush().map_err(|e| Error::Format(e.to_string()))?;
                episodes += 1;
                Ok(())
            },
        )?;
        writer.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(agent)
    })();
    (result, episodes)
}

fn run_job(config: &RunConfig, out: &Path, mode: PolicyMode, seed: u64) -> RunOutcome {
    let run_id = config.run_id(mode, seed);
    let stats_path = out.join("stats").join(format!("{run_id}.csv"));
    let (result, episodes) = match File::create(&stats_path) {
        Ok(f) => run_single(config, mode, seed, BufWriter::new(f)),
        Err(e) => (Err(Error::io(&stats_path, e)), 0),
    };
    let result = result.and_then(|agent| {
        let path = out.join("checkpoints").join(format!("{run_id}.json"));
        AgentCheckpoint::new(config, &agent, seed).write(&path)
    });
    let error = result.err().map(|e| e.to_string());
    if let Some(msg) = &error {
        // Best effort: the manifest records the failure as well.
        let _ = fs::write(
            out.join("stats").join(format!("{run_id}.FAILED")),
            format!("{msg}\n"),
        );
    }
    RunOutcome {
        run_id,
        seed,
        policy_mode: mode,
        episodes,
        status: if error.is_some() {
            "failed"
        } else {
            "complete"
        }
        .into(),
        error,
    }
}

fn prepare_output(out: &Path, force: bool) -> Result<()> {
    let occupied = match fs::read_dir(out) {
        Ok(mut entries) => entries.next().is_some(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
        Err(e) => return Err(Error::io(out, e)),
    };
    if occupied {
        if !force {
            return Err(Error::invalid(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        for dir in ["stats", "checkpoints"] {
            let p = out.join(dir);
            if p.exists() {
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        for file in ["manifest.toml", "config.toml"] {
            let p = out.join(file);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    for dir in ["stats", "checkpoints"] {
        let p = out.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Runs every `(policy_mode, seed)` pair of the config and writes per-run stats
/// CSVs, checkpoints and a manifest. Nothing is written if the config is invalid.
pub fn cmd_train(config_path: &Path, options: &TrainOptions) -> Result<TrainSummary> {
    let config = RunConfig::load(config_path)?;
    let out = options
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Config {
            key: "output_dir".into(),
            message: "no output directory; set it in the config or pass --out".into(),
        })?;
    prepare_output(&out, options.force)?;
    let config_copy = out.join("config.toml");
    fs::write(&config_copy, config.to_toml()).map_err(|e| Error::io(&config_copy, e))?;

    let jobs: Vec<(PolicyMode, u64)> = config
        .policy_modes
        .iter()
        .flat_map(|&m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallel.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let runs: Vec<RunOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(mode, seed)| run_job(&config, &out, mode, seed))
            .collect()
    });

    let manifest = Manifest {
        config_hash: config.hash(),
        build_version: BUILD_VERSION,
        runs: &runs,
        config: &config,
    };
    let manifest_path = out.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(TrainSummary { out_dir: out, runs })
}
