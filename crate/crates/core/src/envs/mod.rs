//! Seeded tabular environments with reward sparsity and risk.
//!
//! Termination is part of the transition model: moving into a state flagged
//! terminal ends the episode and contributes no further return.

mod oracle;

pub use oracle::{
    distributional_dp_oracle, evaluate_policy, gauss_hermite, OracleOptions, OracleReport, Policy,
    StateActionDistribution,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite mixture of Gaussians; a zero `std` is a point mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardDist {
    pub components: Vec<RewardComponent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

impl RewardDist {
    pub fn constant(value: f64) -> Self {
        Self::gaussian(value, 0.0)
    }

    pub fn gaussian(mean: f64, std: f64) -> Self {
        Self {
            components: vec![RewardComponent {
                weight: 1.0,
                mean,
                std,
            }],
        }
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let second: f64 = self
            .components
            .iter()
            .map(|c| c.weight * (c.std * c.std + c.mean * c.mean))
            .sum();
        (second - m * m).max(0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let pick: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if pick < acc {
                chosen = *c;
                break;
            }
        }
        if chosen.std == 0.0 {
            chosen.mean
        } else {
            let z: f64 = StandardNormal.sample(rng);
            chosen.mean + chosen.std * z
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub prob: f64,
    pub next: usize,
    pub reward: RewardDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub name: String,
    pub n_states: usize,
    pub n_actions: usize,
    /// Outcomes indexed by `s * n_actions + a`.
    pub outcomes: Vec<Vec<Outcome>>,
    pub gamma: f64,
    pub terminal: Vec<bool>,
    pub initial_state: usize,
    /// Episodes are truncated (not terminated) after this many steps.
    pub max_steps: usize,
}

impl TabularMdp {
    pub fn outcomes(&self, state: usize, action: usize) -> &[Outcome] {
        &self.outcomes[state * self.n_actions + action]
    }

    pub fn validate(&self) -> Result<()> {
        if self.outcomes.len() != self.n_states * self.n_actions {
            return Err(Error::invalid("outcome table does not cover every (s, a)"));
        }
        if self.terminal.len() != self.n_states || self.initial_state >= self.n_states {
            return Err(Error::invalid(
                "terminal flags or initial state out of range",
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        for (idx, outs) in self.outcomes.iter().enumerate() {
            let total: f64 = outs.iter().map(|o| o.prob).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "transition probabilities at (s, a) = ({}, {}) sum to {total}",
                    idx / self.n_actions,
                    idx % self.n_actions
                )));
            }
            for o in outs {
                if o.next >= self.n_states || o.prob < 0.0 {
                    return Err(Error::invalid("outcome points outside the state space"));
                }
                let w: f64 = o.reward.components.iter().map(|c| c.weight).sum();
                if (w - 1.0).abs() > 1e-12
                    || o.reward
                        .components
                        .iter()
                        .any(|c| !c.mean.is_finite() || !c.std.is_finite() || c.std < 0.0)
                {
                    return Err(Error::invalid(
                        "reward mixture must be normalized and finite",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Expected immediate reward of `(s, a)`.
    pub fn mean_reward(&self, state: usize, action: usize) -> f64 {
        self.outcomes(state, action)
            .iter()
            .map(|o| o.prob * o.reward.mean())
            .sum()
    }

    /// One-hot encoding of a state.
    pub fn features(&self, state: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.n_states];
        x[state] = 1.0;
        x
    }
}

fn outcome(prob: f64, next: usize, reward: RewardDist) -> Outcome {
    Outcome { prob, next, reward }
}

/// One decision state with two arms of equal mean: arm 0 ~ N(1, 0.01), arm 1 ~ N(1, 4).
pub fn risky_bandit() -> TabularMdp {
    let done = 1;
    let arms = [
        RewardDist::gaussian(1.0, 0.1),
        RewardDist::gaussian(1.0, 2.0),
    ];
    let mut outcomes = Vec::new();
    for _state in 0..2 {
        for arm in &arms {
            outcomes.push(vec![outcome(1.0, done, arm.clone())]);
        }
    }
    TabularMdp {
        name: "risky_bandit".into(),
        n_states: 2,
        n_actions: 2,
        outcomes,
        gamma: 0.99,
        terminal: vec![false, true],
        initial_state: 0,
        max_steps: 1,
    }
}

pub mod chain_actions {
    pub const FORWARD: usize = 0;
    pub const QUIT: usize = 1;
    pub const RISKY: usize = 2;
}

/// Chain of `length` safe states beside a risky corridor.
///
/// States `0..N` are the safe corridor, `N..2N` the risky corridor (entry `N + i`
/// mirrors safe position `i`), and `2N` is terminal. Forward moves along the
/// current corridor with reward 0, the last step paying 10. Quit ends the
/// episode with reward 1. Risky moves into (or along) the risky corridor, where
/// every step adds `N(0, 25)` noise to the same reward schedule.
pub fn risky_chain(length: usize) -> Result<TabularMdp> {
    use chain_actions::*;
    if length < 3 {
        return Err(Error::invalid(format!(
            "risky_chain needs length >= 3, got {length}"
        )));
    }
    let n = length;
    let done = 2 * n;
    let n_states = 2 * n + 1;
    let n_actions = 3;
    let noise = 5.0;
    let mut outcomes = vec![Vec::new(); n_states * n_actions];
    for risky in [false, true] {
        for i in 0..n {
            let s = if risky { n + i } else { i };
            let last = i == n - 1;
            let pay = if last { 10.0 } else { 0.0 };
            let safe_next = if last { done } else { i + 1 };
            let risky_next = if last { done } else { n + i + 1 };
            let fwd = if risky {
                outcome(1.0, risky_next, RewardDist::gaussian(pay, noise))
            } else {
                outcome(1.0, safe_next, RewardDist::constant(pay))
            };
            outcomes[s * n_actions + FORWARD] = vec![fwd];
            outcomes[s * n_actions + QUIT] = vec![outcome(1.0, done, RewardDist::constant(1.0))];
            outcomes[s * n_actions + RISKY] =
                vec![outcome(1.0, risky_next, RewardDist::gaussian(pay, noise))];
        }
    }
    for a in 0..n_actions {
        outcomes[done * n_actions + a] = vec![outcome(1.0, done, RewardDist::constant(0.0))];
    }
    let mut terminal = vec![false; n_states];
    terminal[done] = true;
    let mdp = TabularMdp {
        name: "risky_chain".into(),
        n_states,
        n_actions,
        outcomes,
        gamma: 0.99,
        terminal,
        initial_state: 0,
        max_steps: 2 * n,
    };
    mdp.validate()?;
    Ok(mdp)
}

pub mod grid_actions {
    pub const UP: usize = 0;
    pub const RIGHT: usize = 1;
    pub const DOWN: usize = 2;
    pub const LEFT: usize = 3;
}

/// Cliff walk on a `width x height` grid with a downward wind.
///
/// The start is the bottom-left cell and the goal the bottom-right; the cells
/// between them are cliff. Every move costs 1, entering the goal pays 10 and
/// the cliff costs 100, both terminal. After each move the wind pushes the
/// agent one row down with probability `wind_prob`.
pub fn cliff_gridworld(width: usize, height: usize, wind_prob: f64) -> Result<TabularMdp> {
    use grid_actions::*;
    if width < 3 || height < 2 {
        return Err(Error::invalid(
            "cliff_gridworld needs width >= 3 and height >= 2",
        ));
    }
    if !(0.0..=0.5).contains(&wind_prob) {
        return Err(Error::invalid(format!(
            "wind_prob must lie in [0, 0.5], got {wind_prob}"
        )));
    }
    let n_states = width * height;
    let n_actions = 4;
    let idx = |row: usize, col: usize| row * width + col;
    let bottom = height - 1;
    let goal = idx(bottom, width - 1);
    let is_cliff = |s: usize| s / width == bottom && (1..width - 1).contains(&(s % width));
    let mut terminal = vec![false; n_states];
    terminal[goal] = true;
    for (s, t) in terminal.iter_mut().enumerate() {
        if is_cliff(s) {
            *t = true;
        }
    }
    let reward_for = |s: usize| {
        if s == goal {
            10.0
        } else if is_cliff(s) {
            -100.0
        } else {
            -1.0
        }
    };
    let step = |s: usize, a: usize| {
        let (row, col) = (s / width, s % width);
        match a {
            UP => idx(row.saturating_sub(1), col),
            RIGHT => idx(row, (col + 1).min(width - 1)),
            DOWN => idx((row + 1).min(bottom), col),
            _ => idx(row, col.saturating_sub(1)),
        }
    };
    let mut outcomes = vec![Vec::new(); n_states * n_actions];
    for s in 0..n_states {
        for a in 0..n_actions {
            let cell = &mut outcomes[s * n_actions + a];
            if terminal[s] {
                cell.push(outcome(1.0, s, RewardDist::constant(0.0)));
                continue;
            }
            let moved = step(s, a);
            let mut add = |prob: f64, next: usize| {
                if prob <= 0.0 {
                    return;
                }
                if let Some(o) = cell.iter_mut().find(|o| o.next == next) {
                    o.prob += prob;
                } else {
                    cell.push(outcome(prob, next, RewardDist::constant(reward_for(next))));
                }
            };
            if terminal[moved] {
                add(1.0, moved);
            } else {
                add(1.0 - wind_prob, moved);
                add(wind_prob, step(moved, DOWN));
            }
        }
    }
    let mdp = TabularMdp {
        name: "cliff_gridworld".into(),
        n_states,
        n_actions,
        outcomes,
        gamma: 0.99,
        terminal,
        initial_state: idx(bottom, 0),
        max_steps: width * height * 50,
    };
    mdp.validate()?;
    Ok(mdp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: usize,
    pub reward: f64,
    /// The episode ended in a terminal state; bootstrapping stops.
    pub terminal: bool,
    /// The episode hit its step limit without terminating.
    pub truncated: bool,
}

/// A running episode of a tabular MDP with its own random stream.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: TabularMdp,
    rng: ChaCha8Rng,
    state: usize,
    steps: usize,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp, seed: u64) -> Self {
        let state = mdp.initial_state;
        Self {
            mdp,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state,
            steps: 0,
        }
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn reset_state(&mut self) -> usize {
        self.state = self.mdp.initial_state;
        self.steps = 0;
        self.state
    }

    pub fn step_state(&mut self, action: usize) -> Result<Step> {
        if action >= self.mdp.n_actions {
            return Err(Error::invalid(format!(
                "action {action} out of range for {} actions",
                self.mdp.n_actions
            )));
        }
        if self.mdp.terminal[self.state] {
            return Err(Error::invalid("step called on a finished episode"));
        }
        let outs = self.mdp.outcomes(self.state, action);
        let pick: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut chosen = &outs[outs.len() - 1];
        for o in outs {
            acc += o.prob;
            if pick < acc {
                chosen = o;
                break;
            }
        }
        let reward = chosen.reward.sample(&mut self.rng);
        self.state = chosen.next;
        self.steps += 1;
        let terminal = self.mdp.terminal[self.state];
        Ok(Step {
            next_state: self.state,
            reward,
            terminal,
            truncated: !terminal && self.steps >= self.mdp.max_steps,
        })
    }
}

/// Interaction surface the agent trains against.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn gamma(&self) -> f64;
    /// Starts an episode and returns the initial state features.
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<EnvStep>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
}

impl Environment for TabularEnv {
    fn state_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions
    }

    fn gamma(&self) -> f64 {
        self.mdp.gamma
    }

    fn reset(&mut self) -> Vec<f64> {
        let s = self.reset_state();
        self.mdp.features(s)
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        let step = self.step_state(action)?;
        Ok(EnvStep {
            next_state: self.mdp.features(step.next_state),
            reward: step.reward,
            terminal: step.terminal,
            truncated: step.truncated,
        })
    }
}
