use proptest::prelude::*;

use uuae::agent::PolicyMode;
use uuae::belief::{chain_gradient, Belief, BeliefShape};
use uuae::envs::{cliff_gridworld, TabularEnv};
use uuae::gmm::{jtd, GmmReturn};

fn gmm() -> impl Strategy<Value = GmmReturn> {
    (1usize..=5).prop_flat_map(|l| {
        (
            prop::collection::vec(0.05f64..1.0, l),
            prop::collection::vec(-10.0f64..10.0, l),
            prop::collection::vec(0.1f64..5.0, l),
        )
            .prop_map(|(w, m, s)| {
                let total: f64 = w.iter().sum();
                GmmReturn::new(w.iter().map(|x| x / total).collect(), m, s).unwrap()
            })
    })
}

fn belief() -> impl Strategy<Value = Belief> {
    (1usize..=3, 1usize..=4, 1usize..=2, 1usize..=4).prop_flat_map(|(g, k, d, m)| {
        let shape = BeliefShape::new(g, k, d, m).unwrap();
        (
            prop::collection::vec(-3.0f64..3.0, shape.n_locations()),
            prop::collection::vec(-2.0f64..2.0, shape.n_logits()),
        )
            .prop_map(move |(h, a)| Belief::new(shape, h, a).unwrap())
    })
}

proptest! {
    #[test]
    fn jtd_is_a_symmetric_nonnegative_divergence(p in gmm(), q in gmm()) {
        let d = jtd(&p, &q);
        prop_assert!(d >= 0.0);
        prop_assert!((d - jtd(&q, &p)).abs() <= 1e-12 * d.max(1.0));
        prop_assert!(jtd(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn affine_map_moves_mean_and_scales_variance(p in gmm(), r in -5.0f64..5.0, gamma in 0.1f64..1.0) {
        let t = p.affine(r, gamma).unwrap();
        prop_assert!((t.mean() - (r + gamma * p.mean())).abs() < 1e-9);
        prop_assert!((t.variance() - gamma * gamma * p.variance()).abs() < 1e-9 * p.variance().max(1.0));
    }

    #[test]
    fn first_moment_is_the_weighted_mean_and_mgf_is_one_at_zero(b in belief()) {
        let s = *b.shape();
        let f = b.features();
        for g in 0..s.groups {
            let alphas = b.alphas(g);
            prop_assert_eq!(b.mgf(g, &vec![0.0; s.dim]).unwrap(), 1.0);
            for d in 0..s.dim {
                let mean: f64 = (0..s.deltas).map(|i| alphas[i] * b.location(g, i, d)).sum();
                prop_assert!((f.get(g, d, 1) - mean).abs() < 1e-12);
            }
        }
        prop_assert!(b.epistemic_variance() >= 0.0);
    }

    #[test]
    fn chain_gradient_is_linear(b in belief(), c in -3.0f64..3.0, seed in 0u64..1000) {
        let n = b.shape().n_features();
        let u: Vec<f64> = (0..n).map(|i| ((i as u64 * 31 + seed) % 17) as f64 / 17.0 - 0.5).collect();
        let v: Vec<f64> = (0..n).map(|i| ((i as u64 * 7 + seed) % 13) as f64 / 13.0 - 0.5).collect();
        let w: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + c * b).collect();
        let j = b.jacobian();
        let (gu, gv, gw) = (chain_gradient(&j, &u).unwrap(), chain_gradient(&j, &v).unwrap(), chain_gradient(&j, &w).unwrap());
        for ((x, y), z) in gu.iter().zip(gv.iter()).zip(gw.iter()) {
            prop_assert!((x + c * y - z).abs() < 1e-9 * (1.0 + z.abs()));
        }
    }

    #[test]
    fn score_ranking_ignores_a_common_mean_shift(
        means in prop::collection::vec(-5.0f64..5.0, 2..6),
        shift in -10.0f64..10.0,
        c_var in 0.0f64..3.0,
    ) {
        let vars: Vec<f64> = means.iter().map(|m| (m * 1.7).sin().abs() * 2.0).collect();
        for mode in PolicyMode::ALL {
            let score = |s: f64| -> Vec<f64> {
                means.iter().zip(&vars).map(|(m, v)| mode.score(m + s, *v, 0.3, c_var, c_var, 1.0)).collect()
            };
            let (a, b) = (score(0.0), score(shift));
            let argmax = |x: &[f64]| (0..x.len()).fold(0, |best, i| if x[i] > x[best] { i } else { best });
            let i = argmax(&b);
            // Rounding can only swap near-ties.
            prop_assert!(a[argmax(&a)] - a[i] < 1e-9);
        }
    }

    #[test]
    fn environments_are_functions_of_seed_and_actions(seed in 0u64..500, actions in prop::collection::vec(0usize..4, 1..40)) {
        let mdp = cliff_gridworld(5, 3, 0.3).unwrap();
        let run = || {
            let mut env = TabularEnv::new(mdp.clone(), seed);
            env.reset_state();
            let mut trace = Vec::new();
            for &a in &actions {
                let s = env.step_state(a).unwrap();
                trace.push((s.next_state, s.reward.to_bits(), s.terminal));
                if s.terminal || s.truncated {
                    env.reset_state();
                }
            }
            trace
        };
        prop_assert_eq!(run(), run());
    }
}
