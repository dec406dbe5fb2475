//! Ground-truth return distributions for tabular MDPs.
//!
//! Categorical dynamic programming on a fixed, evenly spaced support. Each
//! sweep pushes every state-action distribution through `r + γ Z'` and
//! projects it back onto the support by linear interpolation. Gaussian reward
//! components are discretized with Gauss-Hermite nodes first.
//!
//! Interpolation keeps the mean exactly but spreads off-grid atoms. The spread
//! it adds is tracked through the same recursion and removed from the reported
//! variance.

use std::io::Write;

use serde::Serialize;

use super::TabularMdp;
use crate::error::{Error, Result};

/// Action probabilities for every state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: Vec<Vec<f64>>,
}

impl Policy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        for row in &probs {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                return Err(Error::invalid("policy rows must be probability vectors"));
            }
        }
        Ok(Self { probs })
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        if actions.iter().any(|a| *a >= n_actions) {
            return Err(Error::invalid("policy action out of range"));
        }
        Ok(Self {
            probs: actions
                .iter()
                .map(|&a| {
                    (0..n_actions)
                        .map(|b| if a == b { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect(),
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state][action]
    }

    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        if self.probs.len() != mdp.n_states || self.probs.iter().any(|r| r.len() != mdp.n_actions) {
            return Err(Error::invalid("policy shape does not match the MDP"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub support_size: usize,
    pub iterations: usize,
    /// Support bounds; derived from reward bounds when absent.
    pub bounds: Option<(f64, f64)>,
    /// Gauss-Hermite nodes per Gaussian reward component.
    pub quadrature_nodes: usize,
    /// Largest tolerated probability mass outside the support.
    pub truncation_tol: f64,
}

impl OracleOptions {
    pub fn new(support_size: usize, iterations: usize) -> Self {
        Self {
            support_size,
            iterations,
            bounds: None,
            quadrature_nodes: 10,
            truncation_tol: 1e-9,
        }
    }

    pub fn with_bounds(mut self, v_min: f64, v_max: f64) -> Self {
        self.bounds = Some((v_min, v_max));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateActionDistribution {
    pub state: usize,
    pub action: usize,
    #[serde(skip)]
    pub probs: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    /// Mass that fell outside the support in the final sweep.
    pub truncation_error: f64,
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub support: Vec<f64>,
    pub entries: Vec<StateActionDistribution>,
    /// Upper bound on the variance added by projection, `Δ² / (4 (1 - γ²))`.
    pub projection_error: f64,
    /// Largest change of any probability in the final sweep.
    pub residual: f64,
}

impl OracleReport {
    pub fn get(&self, state: usize, action: usize) -> &StateActionDistribution {
        self.entries
            .iter()
            .find(|e| e.state == state && e.action == action)
            .expect("oracle covers every state-action pair")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}

/// Nodes and weights for expectations under the standard normal, exact for
/// polynomials up to degree `2n - 1`.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    // Newton iteration on orthonormal physicists' Hermite polynomials.
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z: f64 = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (PIM4, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut nodes: Vec<(f64, f64)> = x
        .iter()
        .zip(&w)
        .map(|(xi, wi)| (std::f64::consts::SQRT_2 * xi, wi / sqrt_pi))
        .collect();
    nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
    nodes
}

/// Reward atoms `(value, prob)` of one outcome.
fn reward_atoms(reward: &super::RewardDist, nodes: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut atoms = Vec::new();
    for c in &reward.components {
        if c.std == 0.0 {
            atoms.push((c.mean, c.weight));
        } else {
            atoms.extend(
                nodes
                    .iter()
                    .map(|(z, p)| (c.mean + c.std * z, c.weight * p)),
            );
        }
    }
    atoms
}

/// Bounds on the return over all policies: smallest and largest reachable discounted sums.
fn reachable_bounds(mdp: &TabularMdp, atoms: &[Vec<Vec<(f64, f64)>>]) -> (f64, f64) {
    let mut lo = vec![0.0; mdp.n_states];
    let mut hi = vec![0.0; mdp.n_states];
    for _ in 0..100_000 {
        let mut change: f64 = 0.0;
        for s in 0..mdp.n_states {
            if mdp.terminal[s] {
                continue;
            }
            let (mut l, mut h) = (f64::INFINITY, f64::NEG_INFINITY);
            for a in 0..mdp.n_actions {
                for (o, out) in mdp.outcomes(s, a).iter().enumerate() {
                    if out.prob == 0.0 {
                        continue;
                    }
                    let cont = !mdp.terminal[out.next];
                    for (r, _) in &atoms[s * mdp.n_actions + a][o] {
                        let (nl, nh) = if cont {
                            (mdp.gamma * lo[out.next], mdp.gamma * hi[out.next])
                        } else {
                            (0.0, 0.0)
                        };
                        l = l.min(r + nl);
                        h = h.max(r + nh);
                    }
                }
            }
            change = change.max((l - lo[s]).abs()).max((h - hi[s]).abs());
            lo[s] = l;
            hi[s] = h;
        }
        if change < 1e-10 {
            break;
        }
    }
    let l = lo.iter().cloned().fold(0.0, f64::min);
    let h = hi.iter().cloned().fold(0.0, f64::max);
    // Pad by a sliver so boundary atoms never count as truncated.
    let pad = 1e-9 * (h - l).max(1.0);
    (l - pad, h + pad)
}

struct Grid {
    v_min: f64,
    delta: f64,
    size: usize,
}

impl Grid {
    fn atom(&self, i: usize) -> f64 {
        self.v_min + self.delta * i as f64
    }

    /// Adds `prob` at `x`; returns (truncated mass, added spread).
    fn project(&self, x: f64, prob: f64, into: &mut [f64]) -> (f64, f64) {
        let b = (x - self.v_min) / self.delta;
        let last = (self.size - 1) as f64;
        if b <= 0.0 {
            into[0] += prob;
            return (if b < -1e-9 { prob } else { 0.0 }, 0.0);
        }
        if b >= last {
            into[self.size - 1] += prob;
            return (if b > last + 1e-9 { prob } else { 0.0 }, 0.0);
        }
        let l = b.floor();
        let li = l as usize;
        let frac = b - l;
        if frac == 0.0 {
            into[li] += prob;
            return (0.0, 0.0);
        }
        into[li] += prob * (1.0 - frac);
        into[li + 1] += prob * frac;
        let (zl, zu) = (self.atom(li), self.atom(li + 1));
        (0.0, prob * (zu - x) * (x - zl))
    }
}

/// Categorical distributional policy evaluation.
pub fn distributional_dp_oracle(
    mdp: &TabularMdp,
    policy: &Policy,
    options: &OracleOptions,
) -> Result<OracleReport> {
    mdp.validate()?;
    policy.check(mdp)?;
    if options.support_size < 2 {
        return Err(Error::invalid("support needs at least two atoms"));
    }
    let nodes = gauss_hermite(options.quadrature_nodes.max(1));
    let atoms: Vec<Vec<Vec<(f64, f64)>>> = mdp
        .outcomes
        .iter()
        .map(|outs| {
            outs.iter()
                .map(|o| reward_atoms(&o.reward, &nodes))
                .collect()
        })
        .collect();
    let (v_min, v_max) = match options.bounds {
        Some(b) => b,
        None => reachable_bounds(mdp, &atoms),
    };
    if v_max.partial_cmp(&v_min) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid(format!("empty support [{v_min}, {v_max}]")));
    }
    let grid = Grid {
        v_min,
        delta: (v_max - v_min) / (options.support_size - 1) as f64,
        size: options.support_size,
    };
    let n_sa = mdp.n_states * mdp.n_actions;
    let (zero_index, zero_spread) = {
        let mut dist = vec![0.0; grid.size];
        let (_, spread) = grid.project(0.0, 1.0, &mut dist);
        (dist, spread)
    };

    // Continuation distribution of each state under the policy, plus its spread.
    let mut state_dist: Vec<Vec<f64>> = vec![zero_index.clone(); mdp.n_states];
    let mut state_spread = vec![zero_spread; mdp.n_states];
    let mut q_dist: Vec<Vec<f64>> = vec![zero_index.clone(); n_sa];
    let mut q_spread = vec![zero_spread; n_sa];
    let mut q_trunc = vec![0.0; n_sa];
    let mut residual = 0.0;

    for _ in 0..options.iterations {
        residual = 0.0f64;
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let sa = s * mdp.n_actions + a;
                let mut dist = vec![0.0; grid.size];
                let (mut trunc, mut spread) = (0.0, 0.0);
                if mdp.terminal[s] {
                    dist.copy_from_slice(&zero_index);
                    spread = zero_spread;
                } else {
                    for (o, out) in mdp.outcomes(s, a).iter().enumerate() {
                        if out.prob == 0.0 {
                            continue;
                        }
                        let terminal = mdp.terminal[out.next];
                        if !terminal {
                            spread += out.prob * mdp.gamma * mdp.gamma * state_spread[out.next];
                        }
                        for &(r, pr) in &atoms[sa][o] {
                            let p = out.prob * pr;
                            if terminal {
                                let (t, v) = grid.project(r, p, &mut dist);
                                trunc += t;
                                spread += v;
                                continue;
                            }
                            for (i, &q) in state_dist[out.next].iter().enumerate() {
                                if q == 0.0 {
                                    continue;
                                }
                                let (t, v) =
                                    grid.project(r + mdp.gamma * grid.atom(i), p * q, &mut dist);
                                trunc += t;
                                spread += v;
                            }
                        }
                    }
                }
                for (new, old) in dist.iter().zip(&q_dist[sa]) {
                    residual = residual.max((new - old).abs());
                }
                q_dist[sa] = dist;
                q_spread[sa] = spread;
                q_trunc[sa] = trunc;
            }
        }
        for s in 0..mdp.n_states {
            if mdp.terminal[s] {
                continue;
            }
            let mut dist = vec![0.0; grid.size];
            let mut spread = 0.0;
            for a in 0..mdp.n_actions {
                let p = policy.prob(s, a);
                if p == 0.0 {
                    continue;
                }
                let sa = s * mdp.n_actions + a;
                for (d, q) in dist.iter_mut().zip(&q_dist[sa]) {
                    *d += p * q;
                }
                spread += p * q_spread[sa];
            }
            state_dist[s] = dist;
            state_spread[s] = spread;
        }
    }

    let worst = q_trunc.iter().cloned().fold(0.0, f64::max);
    if worst > options.truncation_tol {
        return Err(Error::SupportTruncation {
            mass: worst,
            v_min,
            v_max,
        });
    }

    let support: Vec<f64> = (0..grid.size).map(|i| grid.atom(i)).collect();
    let scale = support.iter().fold(0.0f64, |m, z| m.max(z.abs())).max(1.0);
    let round_off = 64.0 * f64::EPSILON * scale * scale;
    let mut entries = Vec::with_capacity(n_sa);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let sa = s * mdp.n_actions + a;
            let probs = q_dist[sa].clone();
            let mean: f64 = probs.iter().zip(&support).map(|(p, z)| p * z).sum();
            let raw: f64 = probs
                .iter()
                .zip(&support)
                .map(|(p, z)| p * (z - mean) * (z - mean))
                .sum();
            let corrected = raw - q_spread[sa];
            entries.push(StateActionDistribution {
                state: s,
                action: a,
                probs,
                mean,
                variance: if corrected <= round_off {
                    0.0
                } else {
                    corrected
                },
                truncation_error: q_trunc[sa],
            });
        }
    }
    Ok(OracleReport {
        support,
        entries,
        projection_error: grid.delta * grid.delta / (4.0 * (1.0 - mdp.gamma * mdp.gamma)),
        residual,
    })
}

/// Scalar policy evaluation: `Q(s, a) = r̄(s, a) + γ Σ p(s') Σ π(a'|s') Q(s', a')`,
/// iterated to a fixed point. Returns `Q` indexed by `s * n_actions + a`.
pub fn evaluate_policy(mdp: &TabularMdp, policy: &Policy) -> Result<Vec<f64>> {
    mdp.validate()?;
    policy.check(mdp)?;
    let n_sa = mdp.n_states * mdp.n_actions;
    let mut q = vec![0.0; n_sa];
    for _ in 0..1_000_000 {
        let v: Vec<f64> = (0..mdp.n_states)
            .map(|s| {
                if mdp.terminal[s] {
                    0.0
                } else {
                    (0..mdp.n_actions)
                        .map(|a| policy.prob(s, a) * q[s * mdp.n_actions + a])
                        .sum()
                }
            })
            .collect();
        let mut change: f64 = 0.0;
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let sa = s * mdp.n_actions + a;
                let next = if mdp.terminal[s] {
                    0.0
                } else {
                    mdp.mean_reward(s, a)
                        + mdp.gamma
                            * mdp
                                .outcomes(s, a)
                                .iter()
                                .map(|o| o.prob * v[o.next])
                                .sum::<f64>()
                };
                change = change.max((next - q[sa]).abs());
                q[sa] = next;
            }
        }
        if change < 1e-12 {
            break;
        }
    }
    Ok(q)
}
