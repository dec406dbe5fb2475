//! The control loop: composite-uncertainty action selection, bootstrap targets
//! from the lagged belief, JTD loss, and the chained belief update.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{chain_gradient, Belief, BeliefShape};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::gmm::{jtd, GmmReturn};
use crate::mdn::{jtd_gradient, NetworkSpec};
use crate::optim::{Optimizer, OptimizerKind};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// `E[Z] - c_var Var[Z]`.
    #[default]
    Composite,
    /// Variance bonus `+ c_var decay^t sqrt(Var[Z])`.
    AleatoryOnly,
    /// Bonus on the spread of the mean across single-delta restrictions.
    EpistemicOnly,
    /// Both bonuses added.
    Additive,
    MeanGreedy,
}

impl PolicyMode {
    pub const ALL: [PolicyMode; 5] = [
        PolicyMode::Composite,
        PolicyMode::AleatoryOnly,
        PolicyMode::EpistemicOnly,
        PolicyMode::Additive,
        PolicyMode::MeanGreedy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyMode::Composite => "composite",
            PolicyMode::AleatoryOnly => "aleatory_only",
            PolicyMode::EpistemicOnly => "epistemic_only",
            PolicyMode::Additive => "additive",
            PolicyMode::MeanGreedy => "mean_greedy",
        }
    }

    fn uses_epistemic_spread(&self) -> bool {
        matches!(self, PolicyMode::EpistemicOnly | PolicyMode::Additive)
    }

    /// Action score from the predicted moments. `aleatory_coef` already includes the decay.
    pub fn score(
        &self,
        mean: f64,
        variance: f64,
        spread: f64,
        aleatory_coef: f64,
        c_var: f64,
        c_epi: f64,
    ) -> f64 {
        match self {
            PolicyMode::Composite => mean - c_var * variance,
            PolicyMode::AleatoryOnly => mean + aleatory_coef * variance.sqrt(),
            PolicyMode::EpistemicOnly => mean + c_epi * spread,
            PolicyMode::Additive => mean + aleatory_coef * variance.sqrt() + c_epi * spread,
            PolicyMode::MeanGreedy => mean,
        }
    }
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown policy mode `{s}`")))
    }
}

/// How the bootstrap action is chosen under the lagged belief.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// `argmax E[Z] - c_var Var[Z]`, the same rule as action selection.
    #[default]
    Composite,
    MeanGreedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Chosen per run by the experiment layer, so never read from config files.
    #[serde(skip)]
    pub policy_mode: PolicyMode,
    /// Mixture components `L`.
    pub components: usize,
    /// Point masses per belief group `K`.
    pub deltas: usize,
    /// Moment orders `M`.
    pub moments: usize,
    /// Coordinates per belief group `D`.
    pub group_dim: usize,
    pub hidden: Vec<usize>,
    pub step_size: f64,
    pub optimizer: OptimizerKind,
    pub c_var: f64,
    pub c_epi: f64,
    /// Per-step multiplicative decay of the variance bonus.
    pub aleatory_decay: f64,
    /// Probability of a uniformly random action; 0 disables the floor.
    pub epsilon: f64,
    pub target_rule: TargetRule,
    pub replay: bool,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Multiplier applied to rewards before they enter the targets; logged returns stay raw.
    pub reward_scale: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            policy_mode: PolicyMode::Composite,
            components: 5,
            deltas: 10,
            moments: 10,
            group_dim: 1,
            hidden: vec![64, 64],
            step_size: 1e-3,
            optimizer: OptimizerKind::Sgd,
            c_var: 1.0,
            c_epi: 1.0,
            aleatory_decay: 0.999,
            epsilon: 0.01,
            target_rule: TargetRule::Composite,
            replay: false,
            replay_capacity: 10_000,
            batch_size: 32,
            reward_scale: 1.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("components", self.components),
            ("deltas", self.deltas),
            ("moments", self.moments),
            ("group_dim", self.group_dim),
            ("replay_capacity", self.replay_capacity),
            ("batch_size", self.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    message: "must be at least 1".into(),
                });
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config {
                key: "hidden".into(),
                message: "layer widths must be positive".into(),
            });
        }
        let checks = [
            ("step_size", self.step_size, self.step_size > 0.0),
            ("c_var", self.c_var, self.c_var >= 0.0),
            ("reward_scale", self.reward_scale, self.reward_scale > 0.0),
            ("c_epi", self.c_epi, self.c_epi >= 0.0),
            (
                "aleatory_decay",
                self.aleatory_decay,
                self.aleatory_decay > 0.0 && self.aleatory_decay <= 1.0,
            ),
            ("epsilon", self.epsilon, (0.0..=1.0).contains(&self.epsilon)),
        ];
        for (key, v, ok) in checks {
            if !v.is_finite() || !ok {
                return Err(Error::Config {
                    key: key.into(),
                    message: format!("value {v} out of range"),
                });
            }
        }
        Ok(())
    }
}

/// `(s_t, a_t, r_t, s_{t+1})` plus whether `s_{t+1}` ended the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub run_id: String,
    pub seed: u64,
    pub episode: usize,
    pub steps: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub mean_loss: f64,
    pub epistemic_var: f64,
    pub mean_aleatory_var: f64,
    pub policy_mode: PolicyMode,
}

/// Moment features of a belief, truncated to the network's weight count.
#[derive(Debug, Clone)]
struct WeightCache {
    weights: Vec<f64>,
    /// Per-delta restricted weights, only built for modes that need them.
    restricted: Vec<Vec<f64>>,
}

impl WeightCache {
    fn build(belief: &Belief, n_weights: usize, with_restrictions: bool) -> Self {
        let mut weights = belief.features().into_vec();
        weights.truncate(n_weights);
        let restricted = if with_restrictions {
            (0..belief.shape().deltas)
                .map(|i| {
                    let mut w = belief.restricted_features(i).into_vec();
                    w.truncate(n_weights);
                    w
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            weights,
            restricted,
        }
    }
}

/// Random stream for exploration and tie-breaking, derived from the run seed.
pub fn action_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn init_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

/// Index of the largest score; ties are broken uniformly with `rng`.
pub fn argmax_random_tie<R: Rng + ?Sized>(scores: &[f64], rng: &mut R) -> usize {
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] == best).collect();
    match tied.len() {
        0 => 0,
        1 => tied[0],
        n => tied[rng.random_range(0..n)],
    }
}

fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    net: NetworkSpec,
    gamma: f64,
    belief: Belief,
    target: Belief,
    cache: WeightCache,
    target_cache: WeightCache,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    steps: u64,
    replay: VecDeque<Transition>,
}

impl Agent {
    pub fn new(
        config: AgentConfig,
        state_dim: usize,
        n_actions: usize,
        gamma: f64,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let net = NetworkSpec::new(
            state_dim,
            n_actions,
            config.hidden.clone(),
            config.components,
        )?;
        let shape = BeliefShape::covering(
            net.n_weights(),
            config.deltas,
            config.group_dim,
            config.moments,
        )?;
        let scales: Vec<f64> = (0..shape.groups * shape.dim)
            .map(|c| 1.0 / (net.fan_in_of(c * shape.order) as f64).sqrt())
            .collect();
        let belief = Belief::initialize(shape, &scales, &mut init_stream(seed))?;
        Self::from_belief(config, net, gamma, belief, seed)
    }

    pub fn from_belief(
        config: AgentConfig,
        net: NetworkSpec,
        gamma: f64,
        belief: Belief,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::invalid(format!(
                "gamma must lie in (0, 1], got {gamma}"
            )));
        }
        if belief.shape().n_features() < net.n_weights() {
            return Err(Error::DimensionMismatch {
                what: "belief features",
                expected: net.n_weights(),
                actual: belief.shape().n_features(),
            });
        }
        let restrict = config.policy_mode.uses_epistemic_spread();
        let cache = WeightCache::build(&belief, net.n_weights(), restrict);
        let optimizer = Optimizer::new(config.optimizer, config.step_size, &belief);
        Ok(Self {
            net,
            gamma,
            target: belief.clone(),
            target_cache: cache.clone(),
            cache,
            belief,
            optimizer,
            rng: action_stream(seed),
            steps: 0,
            replay: VecDeque::new(),
            config,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn network(&self) -> &NetworkSpec {
        &self.net
    }

    pub fn belief(&self) -> &Belief {
        &self.belief
    }

    pub fn target_belief(&self) -> &Belief {
        &self.target
    }

    /// Current network weights `m̃(φ)`.
    pub fn weights(&self) -> &[f64] {
        &self.cache.weights
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn predict(&self, state: &[f64], action: usize) -> Result<GmmReturn> {
        self.net.forward(&self.cache.weights, state, action)
    }

    fn aleatory_coef(&self) -> f64 {
        self.config.c_var * self.config.aleatory_decay.powf(self.steps as f64)
    }

    /// Standard deviation of the predicted mean across the single-delta restrictions.
    pub fn epistemic_spread(&self, state: &[f64], action: usize) -> Result<f64> {
        let restricted = if self.cache.restricted.is_empty() {
            WeightCache::build(&self.belief, self.net.n_weights(), true).restricted
        } else {
            self.cache.restricted.clone()
        };
        let means = restricted
            .iter()
            .map(|w| Ok(self.net.forward(w, state, action)?.mean()))
            .collect::<Result<Vec<f64>>>()?;
        let n = means.len() as f64;
        let avg = means.iter().sum::<f64>() / n;
        Ok((means.iter().map(|m| (m - avg) * (m - avg)).sum::<f64>() / n).sqrt())
    }

    pub fn score_action(&self, state: &[f64], action: usize) -> Result<f64> {
        let g = self.predict(state, action)?;
        let spread = if self.config.policy_mode.uses_epistemic_spread() {
            self.epistemic_spread(state, action)?
        } else {
            0.0
        };
        Ok(self.config.policy_mode.score(
            g.mean(),
            g.variance(),
            spread,
            self.aleatory_coef(),
            self.config.c_var,
            self.config.c_epi,
        ))
    }

    pub fn action_scores(&self, state: &[f64]) -> Result<Vec<f64>> {
        (0..self.net.n_actions)
            .map(|a| self.score_action(state, a))
            .collect()
    }

    /// Greedy action under the configured score, with the ε floor and random tie-breaks.
    pub fn select_action(&mut self, state: &[f64]) -> Result<usize> {
        let n = self.net.n_actions;
        if self.config.epsilon > 0.0 && self.rng.random::<f64>() < self.config.epsilon {
            return Ok(self.rng.random_range(0..n));
        }
        let scores = self.action_scores(state)?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.steps,
                diagnostics: format!(
                    "non-finite action scores {scores:?}; {}",
                    self.belief.summary()
                ),
            });
        }
        Ok(argmax_random_tie(&scores, &mut self.rng))
    }

    fn target_action(&self, state: &[f64]) -> Result<usize> {
        let scores = (0..self.net.n_actions)
            .map(|a| {
                let g = self.net.forward(&self.target_cache.weights, state, a)?;
                Ok(match self.config.target_rule {
                    TargetRule::Composite => g.mean() - self.config.c_var * g.variance(),
                    TargetRule::MeanGreedy => g.mean(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(argmax_first(&scores))
    }

    /// `r + γ Z_{m̃(φ⁻)}(s', a')`, or a point mass at `r` when `s'` is terminal.
    pub fn td_target(&self, t: &Transition) -> Result<GmmReturn> {
        if t.terminal {
            return Ok(GmmReturn::degenerate(t.reward));
        }
        let next_action = self.target_action(&t.next_state)?;
        self.net
            .forward(&self.target_cache.weights, &t.next_state, next_action)?
            .affine(t.reward, self.gamma)
    }

    /// Loss and gradient with respect to the network weights for one prediction.
    fn weight_gradient(
        &self,
        state: &[f64],
        action: usize,
        target: &GmmReturn,
    ) -> Result<(f64, Vec<f64>)> {
        let pred = self.predict(state, action)?;
        let loss = jtd(&pred, target);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.steps,
                diagnostics: self.belief.summary(),
            });
        }
        let head = jtd_gradient(&pred, target);
        let grad = self
            .net
            .backward(&self.cache.weights, state, action, &head)?;
        Ok((loss, grad))
    }

    fn apply_weight_gradient(&mut self, mut grad: Vec<f64>) -> Result<()> {
        grad.resize(self.belief.shape().n_features(), 0.0);
        let step = {
            let jac = self.belief.jacobian();
            chain_gradient(&jac, &grad)?
        };
        if step.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.steps,
                diagnostics: format!("non-finite gradient; {}", self.belief.summary()),
            });
        }
        self.belief = self.optimizer.step(&self.belief, &step)?;
        self.cache = WeightCache::build(
            &self.belief,
            self.net.n_weights(),
            self.config.policy_mode.uses_epistemic_spread(),
        );
        // φ⁻ ← φ
        self.target = self.belief.clone();
        self.target_cache = self.cache.clone();
        Ok(())
    }

    /// One update toward an explicit target distribution. Returns the pre-update loss.
    pub fn train_toward(
        &mut self,
        state: &[f64],
        action: usize,
        target: &GmmReturn,
    ) -> Result<f64> {
        let (loss, grad) = self.weight_gradient(state, action, target)?;
        self.apply_weight_gradient(grad)?;
        Ok(loss)
    }

    /// Algorithm step: JTD against the bootstrap target, chained belief update,
    /// then the lagged belief catches up. Returns the pre-update loss (batch mean
    /// in replay mode).
    pub fn train_step(&mut self, t: &Transition) -> Result<f64> {
        if !t.reward.is_finite() {
            return Err(Error::invalid("transition reward must be finite"));
        }
        if !self.config.replay {
            let target = self.td_target(t)?;
            return self.train_toward(&t.state, t.action, &target);
        }
        if self.replay.len() == self.config.replay_capacity {
            self.replay.pop_front();
        }
        self.replay.push_back(t.clone());
        let batch = self.config.batch_size.min(self.replay.len());
        let mut total = vec![0.0; self.net.n_weights()];
        let mut loss = 0.0;
        for _ in 0..batch {
            let pick = self.rng.random_range(0..self.replay.len());
            let sample = &self.replay[pick];
            let target = self.td_target(sample)?;
            let (l, g) = self.weight_gradient(&sample.state, sample.action, &target)?;
            loss += l;
            for (a, b) in total.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let scale = 1.0 / batch as f64;
        total.iter_mut().for_each(|g| *g *= scale);
        self.apply_weight_gradient(total)?;
        Ok(loss * scale)
    }

    /// Runs `n_episodes`, handing each episode's statistics to `sink` as it finishes.
    pub fn run_episodes<E, F>(
        &mut self,
        env: &mut E,
        n_episodes: usize,
        run_id: &str,
        seed: u64,
        mut sink: F,
    ) -> Result<()>
    where
        E: Environment,
        F: FnMut(EpisodeStats) -> Result<()>,
    {
        for episode in 0..n_episodes {
            let stats =
                self.run_episode(env, episode, run_id, seed)
                    .map_err(|e| Error::Episode {
                        episode,
                        source: Box::new(e),
                    })?;
            sink(stats)?;
        }
        Ok(())
    }

    pub fn collect_episodes<E: Environment>(
        &mut self,
        env: &mut E,
        n_episodes: usize,
        run_id: &str,
        seed: u64,
    ) -> Result<Vec<EpisodeStats>> {
        let mut out = Vec::with_capacity(n_episodes);
        self.run_episodes(env, n_episodes, run_id, seed, |s| {
            out.push(s);
            Ok(())
        })?;
        Ok(out)
    }

    fn run_episode<E: Environment>(
        &mut self,
        env: &mut E,
        episode: usize,
        run_id: &str,
        seed: u64,
    ) -> Result<EpisodeStats> {
        let mut state = env.reset();
        let (mut steps, mut ret, mut loss_sum, mut var_sum) = (0usize, 0.0, 0.0, 0.0);
        loop {
            let action = self.select_action(&state)?;
            var_sum += self.predict(&state, action)?.variance();
            let step = env.step(action)?;
            let t = Transition {
                state,
                action,
                reward: step.reward * self.config.reward_scale,
                next_state: step.next_state,
                terminal: step.terminal,
            };
            loss_sum += self.train_step(&t)?;
            self.steps += 1;
            steps += 1;
            ret += step.reward;
            if step.terminal || step.truncated {
                break;
            }
            state = t.next_state;
        }
        Ok(EpisodeStats {
            run_id: run_id.to_string(),
            seed,
            episode,
            steps,
            episode_return: ret,
            mean_loss: loss_sum / steps as f64,
            epistemic_var: self.belief.epistemic_variance(),
            mean_aleatory_var: var_sum / steps as f64,
            policy_mode: self.config.policy_mode,
        })
    }
}
