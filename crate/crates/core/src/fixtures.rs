//! Named desk-scale MDP fixtures, generated deterministically from fixed
//! seeds. T1, C3 and L1 are exactly linearly realizable; X1 is a designed
//! realizability failure.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::mdp::LayeredMdp;
use crate::policy::Policy;

/// All shipped fixtures in a stable order.
pub fn fixtures() -> Vec<(&'static str, LayeredMdp)> {
    vec![("T1", t1()), ("C3", c3()), ("L1", l1()), ("X1", x1())]
}

pub fn by_name(name: &str) -> Option<LayeredMdp> {
    match name {
        "T1" => Some(t1()),
        "C3" => Some(c3()),
        "L1" => Some(l1()),
        "X1" => Some(x1()),
        _ => None,
    }
}

fn one_hot_features(layer_sizes: &[usize], actions: usize) -> (usize, Vec<Vec<Vec<DVector<f64>>>>) {
    let d: usize = layer_sizes.iter().map(|&n| n * actions).sum();
    let mut features = Vec::with_capacity(layer_sizes.len());
    let mut offset = 0usize;
    for &n in layer_sizes {
        let mut layer = Vec::with_capacity(n);
        for x in 0..n {
            let mut row = Vec::with_capacity(actions);
            for a in 0..actions {
                let mut phi = DVector::zeros(d);
                phi[offset + x * actions + a] = 1.0;
                row.push(phi);
            }
            layer.push(row);
        }
        features.push(layer);
        offset += n * actions;
    }
    (d, features)
}

/// Random probability vector whose entries sum to exactly 1.
fn random_dist(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.1..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let mut out: Vec<f64> = raw.iter().map(|v| v / sum).collect();
    let partial: f64 = out[..len - 1].iter().sum();
    out[len - 1] = 1.0 - partial;
    out
}

/// T1: 2 states per layer, 2 actions, horizon 2, one-hot features (d = 8),
/// seeded random rewards and transitions. One-hot features make every policy's
/// Q-function exactly linear; rewards are scaled so the layer parameters stay
/// inside the H-ball.
pub fn t1() -> LayeredMdp {
    let mut rng = ChaCha12Rng::seed_from_u64(0x5431);
    let layer_sizes = vec![2usize, 2];
    let actions = 2usize;
    let (d, features) = one_hot_features(&layer_sizes, actions);
    let transitions = vec![vec![
        vec![random_dist(2, &mut rng), random_dist(2, &mut rng)],
        vec![random_dist(2, &mut rng), random_dist(2, &mut rng)],
    ]];
    let rewards = (0..2)
        .map(|_| {
            (0..2)
                .map(|_| (0..actions).map(|_| rng.random_range(0.0..0.25)).collect())
                .collect()
        })
        .collect();
    LayeredMdp::new(
        2,
        layer_sizes,
        actions,
        d,
        vec![0.5, 0.5],
        transitions,
        rewards,
        features,
    )
    .expect("T1 fixture must validate")
}

/// T1 with the two action labels swapped everywhere.
pub fn t1_swapped_actions() -> LayeredMdp {
    let base = t1();
    let swap = |a: usize| 1 - a;
    let transitions = vec![(0..2)
        .map(|x| {
            (0..2)
                .map(|a| base.transition(1, x, swap(a)).to_vec())
                .collect()
        })
        .collect()];
    let rewards = (1..=2)
        .map(|h| {
            (0..2)
                .map(|x| (0..2).map(|a| base.reward(h, x, swap(a))).collect())
                .collect()
        })
        .collect();
    let features = (1..=2)
        .map(|h| {
            (0..2)
                .map(|x| (0..2).map(|a| base.feature(h, x, swap(a)).clone()).collect())
                .collect()
        })
        .collect();
    LayeredMdp::new(
        2,
        vec![2, 2],
        2,
        base.feature_dim(),
        vec![0.5, 0.5],
        transitions,
        rewards,
        features,
    )
    .expect("swapped T1 must validate")
}

/// C3: a length-3 deterministic chain with a distractor action. The chain
/// state at each layer pays off only if the agent stays on it; the distractor
/// pays slightly more immediately and then strands the agent on a dead layer,
/// so myopic play is suboptimal. One-hot features (d = 10).
pub fn c3() -> LayeredMdp {
    let layer_sizes = vec![1usize, 2, 2];
    let actions = 2usize;
    let (d, features) = one_hot_features(&layer_sizes, actions);
    // State 0 is the chain state, state 1 the stranded state.
    let transitions = vec![
        vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
        vec![
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ],
    ];
    let rewards = vec![
        vec![vec![0.6, 0.7]],
        vec![vec![0.6, 0.7], vec![0.0, 0.0]],
        vec![vec![0.9, 0.0], vec![0.0, 0.0]],
    ];
    LayeredMdp::new(
        3,
        layer_sizes,
        actions,
        d,
        vec![1.0],
        transitions,
        rewards,
        features,
    )
    .expect("C3 fixture must validate")
}

/// L1: a low-rank linear MDP (d = 3, H = 3). Features live on the probability
/// simplex and transitions are feature-linear (`P(x'|x,a) = phi(x,a)^T nu(x')`),
/// so every policy's Q-function is linear without the features being one-hot.
pub fn l1() -> LayeredMdp {
    let mut rng = ChaCha12Rng::seed_from_u64(0x11);
    let horizon = 3usize;
    let n_states = 3usize;
    let actions = 2usize;
    let d = 3usize;
    let layer_sizes = vec![n_states; horizon];
    let features: Vec<Vec<Vec<DVector<f64>>>> = (0..horizon)
        .map(|_| {
            (0..n_states)
                .map(|_| {
                    (0..actions)
                        .map(|_| DVector::from_vec(random_dist(d, &mut rng)))
                        .collect()
                })
                .collect()
        })
        .collect();
    // One next-state distribution per feature coordinate and layer.
    let mut transitions = Vec::with_capacity(horizon - 1);
    for h in 0..horizon - 1 {
        let nu: Vec<Vec<f64>> = (0..d).map(|_| random_dist(n_states, &mut rng)).collect();
        let mut layer = Vec::with_capacity(n_states);
        for x in 0..n_states {
            let mut rows = Vec::with_capacity(actions);
            for a in 0..actions {
                let phi = &features[h][x][a];
                let mut row = vec![0.0; n_states];
                for i in 0..d {
                    for (x2, r) in row.iter_mut().enumerate() {
                        *r += phi[i] * nu[i][x2];
                    }
                }
                let partial: f64 = row[..n_states - 1].iter().sum();
                row[n_states - 1] = 1.0 - partial;
                rows.push(row);
            }
            layer.push(rows);
        }
        transitions.push(layer);
    }
    let theta_r: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..0.3)).collect();
    let rewards: Vec<Vec<Vec<f64>>> = (0..horizon)
        .map(|h| {
            (0..n_states)
                .map(|x| {
                    (0..actions)
                        .map(|a| {
                            features[h][x][a]
                                .iter()
                                .zip(&theta_r)
                                .map(|(p, t)| p * t)
                                .sum()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    LayeredMdp::new(
        horizon,
        layer_sizes,
        actions,
        d,
        random_dist(n_states, &mut rng),
        transitions,
        rewards,
        features,
    )
    .expect("L1 fixture must validate")
}

/// X1: deliberately non-realizable. Two layer-2 states share identical
/// features but carry different rewards, so no parameter vector can fit both
/// and the linear-fit residual is at least 0.45.
pub fn x1() -> LayeredMdp {
    let d = 2usize;
    let e = |i: usize| {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        v
    };
    let features = vec![
        vec![
            vec![e(0), e(1)],
            vec![
                DVector::from_vec(vec![0.6, 0.8]),
                DVector::from_vec(vec![0.8, -0.6]),
            ],
        ],
        vec![vec![e(0), e(1)], vec![e(0), e(1)]],
    ];
    let transitions = vec![vec![
        vec![vec![0.5, 0.5], vec![0.2, 0.8]],
        vec![vec![0.7, 0.3], vec![0.4, 0.6]],
    ]];
    let rewards = vec![
        vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        vec![vec![0.0, 0.3], vec![0.9, 0.3]],
    ];
    LayeredMdp::new(
        2,
        vec![2, 2],
        2,
        d,
        vec![0.5, 0.5],
        transitions,
        rewards,
        features,
    )
    .expect("X1 fixture must validate")
}

/// Deterministic single-state chain with reward 1 everywhere; J = H.
pub fn reward_one_mdp() -> LayeredMdp {
    let horizon = 3usize;
    let phi = DVector::from_vec(vec![1.0]);
    LayeredMdp::new(
        horizon,
        vec![1; horizon],
        1,
        1,
        vec![1.0],
        vec![vec![vec![vec![1.0]]]; horizon - 1],
        vec![vec![vec![1.0]]; horizon],
        vec![vec![vec![phi]]; horizon],
    )
    .expect("fixture must validate")
}

/// T1 with all rewards set to zero.
pub fn zero_reward_mdp() -> LayeredMdp {
    let base = t1();
    let rewards = (1..=2)
        .map(|h| {
            (0..base.layer_size(h))
                .map(|_| vec![0.0; base.num_actions()])
                .collect()
        })
        .collect();
    let transitions = vec![(0..2)
        .map(|x| (0..2).map(|a| base.transition(1, x, a).to_vec()).collect())
        .collect()];
    let features = (1..=2)
        .map(|h| {
            (0..base.layer_size(h))
                .map(|x| {
                    (0..base.num_actions())
                        .map(|a| base.feature(h, x, a).clone())
                        .collect()
                })
                .collect()
        })
        .collect();
    LayeredMdp::new(
        2,
        vec![2, 2],
        2,
        base.feature_dim(),
        vec![0.5, 0.5],
        transitions,
        rewards,
        features,
    )
    .expect("fixture must validate")
}

/// Two layers, two states each, one action.
pub fn single_action_mdp() -> LayeredMdp {
    let phi = |v: Vec<f64>| DVector::from_vec(v);
    LayeredMdp::new(
        2,
        vec![2, 2],
        1,
        2,
        vec![0.3, 0.7],
        vec![vec![vec![vec![0.6, 0.4]], vec![vec![0.1, 0.9]]]],
        vec![vec![vec![0.2], vec![0.8]], vec![vec![0.5], vec![0.1]]],
        vec![
            vec![vec![phi(vec![1.0, 0.0])], vec![phi(vec![0.0, 1.0])]],
            vec![
                vec![phi(vec![0.8, 0.6])],
                vec![phi(vec![0.6, -0.8])],
            ],
        ],
    )
    .expect("fixture must validate")
}

/// One layer, one state, two actions with features e1 and e2.
pub fn two_feature_mdp() -> LayeredMdp {
    LayeredMdp::new(
        1,
        vec![1],
        2,
        2,
        vec![1.0],
        vec![],
        vec![vec![vec![0.5, 0.5]]],
        vec![vec![vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
        ]]],
    )
    .expect("fixture must validate")
}

/// Uniformly random deterministic tabular policy.
pub fn random_tabular_policy(mdp: &LayeredMdp, rng: &mut impl Rng) -> Policy {
    let actions = (1..=mdp.horizon())
        .map(|h| {
            (0..mdp.layer_size(h))
                .map(|_| rng.random_range(0..mdp.num_actions()))
                .collect()
        })
        .collect();
    Policy::Tabular { actions }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        let a = t1();
        let b = t1();
        for h in 1..=2 {
            for x in 0..2 {
                for a2 in 0..2 {
                    assert_eq!(a.reward(h, x, a2), b.reward(h, x, a2));
                    assert_eq!(a.feature(h, x, a2), b.feature(h, x, a2));
                }
            }
        }
        assert_eq!(l1().transition(1, 0, 0), l1().transition(1, 0, 0));
    }

    #[test]
    fn c3_optimal_play_stays_on_chain() {
        let mdp = c3();
        let (pi, j) = crate::dp::optimal_policy(&mdp).unwrap();
        approx::assert_abs_diff_eq!(j, 2.1, epsilon = 1e-12);
        let Policy::Tabular { actions } = &pi else {
            unreachable!()
        };
        assert_eq!(actions[0][0], 0);
        assert_eq!(actions[1][0], 0);
        assert_eq!(actions[2][0], 0);
    }

    #[test]
    fn fixture_lookup_by_name() {
        assert!(by_name("T1").is_some());
        assert!(by_name("nope").is_none());
        assert_eq!(fixtures().len(), 4);
    }
}
