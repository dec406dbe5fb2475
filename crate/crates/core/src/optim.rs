use serde::{Deserialize, Serialize};

use crate::belief::{Belief, BeliefGradient};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain `φ ← φ - η ∇L(φ)`.
    #[default]
    Sgd,
    Adam,
}

/// First-order update rule over belief parameters. Locations are clipped by
/// [`Belief::stepped`] after every update.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        step_size: f64,
    },
    Adam {
        step_size: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: i32,
        m: BeliefGradient,
        v: BeliefGradient,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, step_size: f64, like: &Belief) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { step_size },
            OptimizerKind::Adam => Optimizer::Adam {
                step_size,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: 0,
                m: BeliefGradient::zeros(like.shape()),
                v: BeliefGradient::zeros(like.shape()),
            },
        }
    }

    pub fn step(&mut self, belief: &Belief, grad: &BeliefGradient) -> Result<Belief> {
        match self {
            Optimizer::Sgd { step_size } => belief.stepped(grad, *step_size),
            Optimizer::Adam {
                step_size,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                let update = |mv: &mut [f64], vv: &mut [f64], g: &[f64]| -> Vec<f64> {
                    mv.iter_mut()
                        .zip(vv.iter_mut())
                        .zip(g)
                        .map(|((m, v), g)| {
                            *m = *beta1 * *m + (1.0 - *beta1) * g;
                            *v = *beta2 * *v + (1.0 - *beta2) * g * g;
                            (*m / c1) / ((*v / c2).sqrt() + *eps)
                        })
                        .collect()
                };
                let direction = BeliefGradient {
                    locations: update(&mut m.locations, &mut v.locations, &grad.locations),
                    logits: update(&mut m.logits, &mut v.logits, &grad.logits),
                };
                belief.stepped(&direction, *step_size)
            }
        }
    }
}
