//! Exact dynamic-programming oracles: Q/V tables, policy values, optimal
//! policies, and occupancy measures. These serve both the algorithm (in
//! exact-expectation mode) and the verification suite.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg::least_squares_min_norm;
use crate::mdp::LayeredMdp;
use crate::policy::Policy;

/// Exact Q/V tables for a policy, with per-layer linear fits of the
/// Q-function against the feature map.
#[derive(Clone, Debug)]
pub struct QTable {
    /// `q[h-1][x][a] = Q^pi_h(x, a)`.
    pub q: Vec<Vec<Vec<f64>>>,
    /// `v[h-1][x] = V^pi_h(x)`.
    pub v: Vec<Vec<f64>>,
    /// Min-norm least-squares parameter per layer.
    pub theta: Vec<DVector<f64>>,
    /// Max absolute linear-fit error per layer.
    pub residual_per_layer: Vec<f64>,
    /// Max over layers.
    pub residual: f64,
}

impl QTable {
    pub fn q(&self, h: usize, x: usize, a: usize) -> f64 {
        self.q[h - 1][x][a]
    }

    pub fn v(&self, h: usize, x: usize) -> f64 {
        self.v[h - 1][x]
    }
}

/// Backward DP under `policy`, then exact least squares of `Q_h` on the
/// features of every `(x, a)` pair at layer h.
pub fn q_values_dp(mdp: &LayeredMdp, policy: &Policy) -> Result<QTable> {
    let (q, v) = q_tables_for_rewards(mdp, policy, |h, x, a| mdp.reward(h, x, a))?;
    let mut theta = Vec::with_capacity(mdp.horizon());
    let mut residual_per_layer = Vec::with_capacity(mdp.horizon());
    for h in 1..=mdp.horizon() {
        let rows = mdp.layer_size(h) * mdp.num_actions();
        let mut x_mat = DMatrix::zeros(rows, mdp.feature_dim());
        let mut y = DVector::zeros(rows);
        let mut r = 0usize;
        for x in 0..mdp.layer_size(h) {
            for a in 0..mdp.num_actions() {
                x_mat.row_mut(r).copy_from(&mdp.feature(h, x, a).transpose());
                y[r] = q[h - 1][x][a];
                r += 1;
            }
        }
        let (th, resid) = least_squares_min_norm(&x_mat, &y)?;
        theta.push(th);
        residual_per_layer.push(resid);
    }
    let residual = residual_per_layer.iter().cloned().fold(0.0, f64::max);
    Ok(QTable {
        q,
        v,
        theta,
        residual_per_layer,
        residual,
    })
}

/// Backward DP for an arbitrary state-action reward table.
pub fn q_tables_for_rewards(
    mdp: &LayeredMdp,
    policy: &Policy,
    reward: impl Fn(usize, usize, usize) -> f64,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
    let horizon = mdp.horizon();
    let mut q = vec![Vec::new(); horizon];
    let mut v = vec![Vec::new(); horizon];
    for h in (1..=horizon).rev() {
        let n = mdp.layer_size(h);
        let mut qh = vec![vec![0.0; mdp.num_actions()]; n];
        let mut vh = vec![0.0; n];
        for x in 0..n {
            for a in 0..mdp.num_actions() {
                let mut val = reward(h, x, a);
                if h < horizon {
                    for (x2, &p) in mdp.transition(h, x, a).iter().enumerate() {
                        if p > 0.0 {
                            val += p * v[h][x2];
                        }
                    }
                }
                qh[x][a] = val;
            }
            let probs = policy.action_probs(mdp, h, x)?;
            vh[x] = probs
                .iter()
                .enumerate()
                .map(|(a, &p)| p * qh[x][a])
                .sum();
        }
        q[h - 1] = qh;
        v[h - 1] = vh;
    }
    Ok((q, v))
}

/// `J(pi) = E[sum r_h]`, computed exactly.
pub fn policy_value(mdp: &LayeredMdp, policy: &Policy) -> Result<f64> {
    let q = q_tables_for_rewards(mdp, policy, |h, x, a| mdp.reward(h, x, a))?;
    Ok(mdp
        .init_dist()
        .iter()
        .enumerate()
        .map(|(x, &p)| p * q.1[0][x])
        .sum())
}

/// Deterministic optimal policy by backward value iteration, ties broken by
/// the smallest action index; returns the policy and its value.
pub fn optimal_policy(mdp: &LayeredMdp) -> Result<(Policy, f64)> {
    let horizon = mdp.horizon();
    let mut v = vec![Vec::new(); horizon + 1];
    v[horizon] = Vec::new();
    let mut actions = vec![Vec::new(); horizon];
    let mut next_v: Vec<f64> = Vec::new();
    for h in (1..=horizon).rev() {
        let n = mdp.layer_size(h);
        let mut vh = vec![0.0; n];
        let mut ah = vec![0usize; n];
        for x in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut best_a = 0usize;
            for a in 0..mdp.num_actions() {
                let mut val = mdp.reward(h, x, a);
                if h < horizon {
                    for (x2, &p) in mdp.transition(h, x, a).iter().enumerate() {
                        if p > 0.0 {
                            val += p * next_v[x2];
                        }
                    }
                }
                if val > best {
                    best = val;
                    best_a = a;
                }
            }
            vh[x] = best;
            ah[x] = best_a;
        }
        next_v = vh.clone();
        v[h - 1] = vh;
        actions[h - 1] = ah;
    }
    let value = mdp
        .init_dist()
        .iter()
        .enumerate()
        .map(|(x, &p)| p * v[0][x])
        .sum();
    Ok((Policy::Tabular { actions }, value))
}

/// Forward state-occupancy per layer: `occ[h-1][x] = P^pi[x_h = x]`.
pub fn state_occupancy(mdp: &LayeredMdp, policy: &Policy) -> Result<Vec<Vec<f64>>> {
    let mut occ = Vec::with_capacity(mdp.horizon());
    occ.push(mdp.init_dist().to_vec());
    for h in 1..mdp.horizon() {
        let mut next = vec![0.0; mdp.layer_size(h + 1)];
        for x in 0..mdp.layer_size(h) {
            let px = occ[h - 1][x];
            if px == 0.0 {
                continue;
            }
            let probs = policy.action_probs(mdp, h, x)?;
            for (a, &pa) in probs.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for (x2, &pt) in mdp.transition(h, x, a).iter().enumerate() {
                    next[x2] += px * pa * pt;
                }
            }
        }
        occ.push(next);
    }
    Ok(occ)
}

/// Forward state-action occupancy: `occ[h-1][x][a] = P^pi[x_h = x, a_h = a]`.
pub fn state_action_occupancy(mdp: &LayeredMdp, policy: &Policy) -> Result<Vec<Vec<Vec<f64>>>> {
    let states = state_occupancy(mdp, policy)?;
    let mut occ = Vec::with_capacity(mdp.horizon());
    for h in 1..=mdp.horizon() {
        let mut layer = vec![vec![0.0; mdp.num_actions()]; mdp.layer_size(h)];
        for x in 0..mdp.layer_size(h) {
            let px = states[h - 1][x];
            if px == 0.0 {
                continue;
            }
            let probs = policy.action_probs(mdp, h, x)?;
            for (a, &pa) in probs.iter().enumerate() {
                layer[x][a] = px * pa;
            }
        }
        occ.push(layer);
    }
    Ok(occ)
}
