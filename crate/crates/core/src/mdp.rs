//! Layered MDP representation and trajectory sampling.
//!
//! Layers are indexed 1..=H to match the usual dynamic-programming
//! conventions; states and actions are dense 0-based indices within a layer.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ActionSelection, Policy};

pub const STOCHASTIC_TOL: f64 = 1e-12;
pub const FEATURE_NORM_TOL: f64 = 1e-9;

/// A finite layered MDP with per-pair feature vectors.
#[derive(Clone, Debug)]
pub struct LayeredMdp {
    horizon: usize,
    layer_sizes: Vec<usize>,
    action_count: usize,
    feature_dim: usize,
    init_dist: Vec<f64>,
    /// `transitions[h-1][x][a]` is the distribution over layer h+1 states, for h < H.
    transitions: Vec<Vec<Vec<Vec<f64>>>>,
    /// `rewards[h-1][x][a]` in [0, 1].
    rewards: Vec<Vec<Vec<f64>>>,
    /// `features[h-1][x][a]` with Euclidean norm at most 1.
    features: Vec<Vec<Vec<DVector<f64>>>>,
}

impl LayeredMdp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        horizon: usize,
        layer_sizes: Vec<usize>,
        action_count: usize,
        feature_dim: usize,
        init_dist: Vec<f64>,
        transitions: Vec<Vec<Vec<Vec<f64>>>>,
        rewards: Vec<Vec<Vec<f64>>>,
        features: Vec<Vec<Vec<DVector<f64>>>>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidMdp("horizon must be positive".into()));
        }
        if layer_sizes.len() != horizon || layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidMdp(format!(
                "expected {horizon} non-empty layers, got {:?}",
                layer_sizes
            )));
        }
        if action_count == 0 {
            return Err(Error::InvalidMdp("action count must be positive".into()));
        }
        if feature_dim == 0 {
            return Err(Error::InvalidMdp("feature dimension must be positive".into()));
        }
        check_distribution(&init_dist, layer_sizes[0], "init distribution")?;
        if transitions.len() != horizon - 1 {
            return Err(Error::InvalidMdp(format!(
                "expected transitions for {} layers, got {}",
                horizon - 1,
                transitions.len()
            )));
        }
        for (hi, layer) in transitions.iter().enumerate() {
            if layer.len() != layer_sizes[hi] {
                return Err(Error::InvalidMdp(format!(
                    "layer {} has {} transition rows, expected {}",
                    hi + 1,
                    layer.len(),
                    layer_sizes[hi]
                )));
            }
            for (x, rows) in layer.iter().enumerate() {
                if rows.len() != action_count {
                    return Err(Error::InvalidMdp(format!(
                        "state ({}, {x}) has {} action rows, expected {action_count}",
                        hi + 1,
                        rows.len()
                    )));
                }
                for (a, row) in rows.iter().enumerate() {
                    check_distribution(
                        row,
                        layer_sizes[hi + 1],
                        &format!("transition row (layer {}, state {x}, action {a})", hi + 1),
                    )?;
                }
            }
        }
        check_table_shape(&rewards, &layer_sizes, action_count, "rewards")?;
        for (hi, layer) in rewards.iter().enumerate() {
            for (x, row) in layer.iter().enumerate() {
                for (a, &r) in row.iter().enumerate() {
                    if !(0.0..=1.0).contains(&r) {
                        return Err(Error::InvalidMdp(format!(
                            "reward (layer {}, state {x}, action {a}) = {r} outside [0, 1]",
                            hi + 1
                        )));
                    }
                }
            }
        }
        check_table_shape(&features, &layer_sizes, action_count, "features")?;
        for (hi, layer) in features.iter().enumerate() {
            for (x, row) in layer.iter().enumerate() {
                for (a, phi) in row.iter().enumerate() {
                    if phi.len() != feature_dim {
                        return Err(Error::InvalidMdp(format!(
                            "feature (layer {}, state {x}, action {a}) has dim {}, expected {feature_dim}",
                            hi + 1,
                            phi.len()
                        )));
                    }
                    let norm = phi.norm();
                    if norm > 1.0 + FEATURE_NORM_TOL {
                        return Err(Error::InvalidMdp(format!(
                            "feature (layer {}, state {x}, action {a}) has norm {norm} > 1",
                            hi + 1
                        )));
                    }
                }
            }
        }
        Ok(LayeredMdp {
            horizon,
            layer_sizes,
            action_count,
            feature_dim,
            init_dist,
            transitions,
            rewards,
            features,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_actions(&self) -> usize {
        self.action_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Number of states at layer `h` (1-based).
    pub fn layer_size(&self, h: usize) -> usize {
        self.layer_sizes[h - 1]
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.init_dist
    }

    pub fn reward(&self, h: usize, x: usize, a: usize) -> f64 {
        self.rewards[h - 1][x][a]
    }

    pub fn feature(&self, h: usize, x: usize, a: usize) -> &DVector<f64> {
        &self.features[h - 1][x][a]
    }

    /// Transition distribution out of `(h, x, a)` over layer `h + 1`; `h < H`.
    pub fn transition(&self, h: usize, x: usize, a: usize) -> &[f64] {
        &self.transitions[h - 1][x][a]
    }

    /// Total number of (state, action) trajectories through all layers,
    /// used to guard exact path enumeration.
    pub fn path_count(&self) -> f64 {
        self.layer_sizes
            .iter()
            .map(|&n| n as f64 * self.action_count as f64)
            .product()
    }

    /// Total number of deterministic Markov policies.
    pub fn policy_count(&self) -> f64 {
        self.layer_sizes
            .iter()
            .map(|&n| (self.action_count as f64).powi(n as i32))
            .product()
    }
}

fn check_distribution(p: &[f64], expected_len: usize, what: &str) -> Result<()> {
    if p.len() != expected_len {
        return Err(Error::InvalidMdp(format!(
            "{what} has length {}, expected {expected_len}",
            p.len()
        )));
    }
    if p.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidMdp(format!("{what} has a negative entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidMdp(format!("{what} sums to {sum}, expected 1")));
    }
    Ok(())
}

fn check_table_shape<T>(
    table: &[Vec<Vec<T>>],
    layer_sizes: &[usize],
    action_count: usize,
    what: &str,
) -> Result<()> {
    if table.len() != layer_sizes.len() {
        return Err(Error::InvalidMdp(format!(
            "{what} covers {} layers, expected {}",
            table.len(),
            layer_sizes.len()
        )));
    }
    for (hi, layer) in table.iter().enumerate() {
        if layer.len() != layer_sizes[hi] {
            return Err(Error::InvalidMdp(format!(
                "{what} layer {} has {} states, expected {}",
                hi + 1,
                layer.len(),
                layer_sizes[hi]
            )));
        }
        for (x, row) in layer.iter().enumerate() {
            if row.len() != action_count {
                return Err(Error::InvalidMdp(format!(
                    "{what} (layer {}, state {x}) has {} actions, expected {action_count}",
                    hi + 1,
                    row.len()
                )));
            }
        }
    }
    Ok(())
}

/// One episode: `(x_h, a_h, r_h)` for h = 1..=H.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize, f64)>,
}

impl Trajectory {
    pub fn state(&self, h: usize) -> usize {
        self.steps[h - 1].0
    }

    pub fn action(&self, h: usize) -> usize {
        self.steps[h - 1].1
    }

    pub fn reward(&self, h: usize) -> f64 {
        self.steps[h - 1].2
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.2).sum()
    }
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Draw one trajectory from `P^pi`, deterministic given the RNG stream.
pub fn sample_trajectory(
    mdp: &LayeredMdp,
    policy: &Policy,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let mut steps = Vec::with_capacity(mdp.horizon());
    let mut x = sample_categorical(mdp.init_dist(), rng);
    for h in 1..=mdp.horizon() {
        let a = match policy.act(mdp, h, x)? {
            ActionSelection::Action(a) => a,
            ActionSelection::Uniform => rng.random_range(0..mdp.num_actions()),
        };
        if a >= mdp.num_actions() {
            return Err(Error::Contract(format!(
                "policy returned action {a} at layer {h}, action count is {}",
                mdp.num_actions()
            )));
        }
        let r = mdp.reward(h, x, a);
        steps.push((x, a, r));
        if h < mdp.horizon() {
            x = sample_categorical(mdp.transition(h, x, a), rng);
        }
    }
    Ok(Trajectory { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp;
    use crate::fixtures;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Deterministic 2-layer chain: one state per layer, single action.
    fn chain() -> LayeredMdp {
        let phi = DVector::from_vec(vec![1.0]);
        LayeredMdp::new(
            2,
            vec![1, 1],
            1,
            1,
            vec![1.0],
            vec![vec![vec![vec![1.0]]]],
            vec![vec![vec![0.5]], vec![vec![1.0]]],
            vec![vec![vec![phi.clone()]], vec![vec![phi]]],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_chain_has_unique_path() {
        let mdp = chain();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let t = sample_trajectory(&mdp, &Policy::Uniform, &mut rng).unwrap();
        assert_eq!(t.steps, vec![(0, 0, 0.5), (0, 0, 1.0)]);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mdp = fixtures::t1();
        let a = {
            let mut rng = ChaCha12Rng::seed_from_u64(42);
            (0..50)
                .map(|_| sample_trajectory(&mdp, &Policy::Uniform, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        let b = {
            let mut rng = ChaCha12Rng::seed_from_u64(42);
            (0..50)
                .map(|_| sample_trajectory(&mdp, &Policy::Uniform, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn layer2_frequencies_match_exact_occupancy() {
        let mdp = fixtures::t1();
        let policy = Policy::Uniform;
        let occ = dp::state_occupancy(&mdp, &policy).unwrap();
        let n = 100_000usize;
        let mut counts = vec![0usize; mdp.layer_size(2)];
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..n {
            let t = sample_trajectory(&mdp, &policy, &mut rng).unwrap();
            counts[t.state(2)] += 1;
        }
        for x in 0..mdp.layer_size(2) {
            let p = occ[1][x];
            let freq = counts[x] as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * sigma.max(1e-12),
                "state {x}: freq {freq} vs exact {p}"
            );
        }
    }

    #[test]
    fn invalid_transition_row_rejected() {
        let phi = DVector::from_vec(vec![1.0]);
        let res = LayeredMdp::new(
            2,
            vec![1, 1],
            1,
            1,
            vec![1.0],
            vec![vec![vec![vec![0.9]]]],
            vec![vec![vec![0.5]], vec![vec![1.0]]],
            vec![vec![vec![phi.clone()]], vec![vec![phi]]],
        );
        assert!(matches!(res, Err(Error::InvalidMdp(_))));
    }

    #[test]
    fn oversized_feature_rejected() {
        let phi = DVector::from_vec(vec![1.5]);
        let res = LayeredMdp::new(
            1,
            vec![1],
            1,
            1,
            vec![1.0],
            vec![],
            vec![vec![vec![0.5]]],
            vec![vec![vec![phi]]],
        );
        assert!(matches!(res, Err(Error::InvalidMdp(_))));
    }

    #[test]
    fn out_of_range_policy_action_is_contract_violation() {
        let mdp = chain();
        let bad = Policy::Tabular {
            actions: vec![vec![3], vec![3]],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(matches!(
            sample_trajectory(&mdp, &bad, &mut rng),
            Err(Error::Contract(_))
        ));
    }
}
