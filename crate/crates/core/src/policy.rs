//! The policy sum type, time composition, tie-breaking, and the
//! preconditioned feature gap.
//!
//! Policies are plain serializable values (parameters, not closures) so that
//! the policy sets built during a run can persist in experiment logs.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::LayeredMdp;

/// What a policy does at a state: a fixed action, or uniform over all actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSelection {
    Action(usize),
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    /// Uniform over actions at every state.
    Uniform,
    /// `argmax_a phi(x, a)^T theta`, ties to the smallest action index.
    LinearArgmax { theta: DVector<f64> },
    /// Range-gated switch between two linear-argmax policies: plays `on_gate`
    /// at states where `max_{a, a', i} (phi(x,a) - phi(x,a'))^T gates[i] >= gamma`
    /// and `off_gate` elsewhere.
    GatedBenchmark {
        gates: Vec<DVector<f64>>,
        gamma: f64,
        on_gate: Arc<Policy>,
        off_gate: Arc<Policy>,
    },
    /// `prefix` on layers `< switch_layer`, `suffix` on layers `>= switch_layer`.
    Composed {
        prefix: Arc<Policy>,
        switch_layer: usize,
        suffix: Arc<Policy>,
    },
    /// Explicit action per state, indexed `[layer - 1][state]`.
    Tabular { actions: Vec<Vec<usize>> },
}

impl Policy {
    pub fn linear_argmax(theta: DVector<f64>) -> Policy {
        Policy::LinearArgmax { theta }
    }

    pub fn gated_benchmark(
        gates: Vec<DVector<f64>>,
        gamma: f64,
        on_gate: Policy,
        off_gate: Policy,
    ) -> Result<Policy> {
        if gamma <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "benchmark gate threshold must be positive, got {gamma}"
            )));
        }
        if !matches!(on_gate, Policy::LinearArgmax { .. })
            || !matches!(off_gate, Policy::LinearArgmax { .. })
        {
            return Err(Error::InvalidParam(
                "benchmark inner policies must be linear-argmax".into(),
            ));
        }
        Ok(Policy::GatedBenchmark {
            gates,
            gamma,
            on_gate: Arc::new(on_gate),
            off_gate: Arc::new(off_gate),
        })
    }

    /// The action taken at `(h, x)`; total and deterministic except for `Uniform`.
    pub fn act(&self, mdp: &LayeredMdp, h: usize, x: usize) -> Result<ActionSelection> {
        match self {
            Policy::Uniform => Ok(ActionSelection::Uniform),
            Policy::LinearArgmax { theta } => Ok(ActionSelection::Action(linear_argmax_action(
                mdp, h, x, theta,
            )?)),
            Policy::GatedBenchmark {
                gates,
                gamma,
                on_gate,
                off_gate,
            } => {
                let gap = max_feature_gap(mdp, h, x, gates);
                if gap >= *gamma {
                    on_gate.act(mdp, h, x)
                } else {
                    off_gate.act(mdp, h, x)
                }
            }
            Policy::Composed {
                prefix,
                switch_layer,
                suffix,
            } => {
                if h < *switch_layer {
                    prefix.act(mdp, h, x)
                } else {
                    suffix.act(mdp, h, x)
                }
            }
            Policy::Tabular { actions } => {
                let a = actions
                    .get(h - 1)
                    .and_then(|layer| layer.get(x))
                    .copied()
                    .ok_or_else(|| {
                        Error::Contract(format!("tabular policy undefined at layer {h}, state {x}"))
                    })?;
                if a >= mdp.num_actions() {
                    return Err(Error::Contract(format!(
                        "tabular policy action {a} out of range at layer {h}, state {x}"
                    )));
                }
                Ok(ActionSelection::Action(a))
            }
        }
    }

    /// Probability the policy puts on each action at `(h, x)`.
    pub fn action_probs(&self, mdp: &LayeredMdp, h: usize, x: usize) -> Result<Vec<f64>> {
        let a_count = mdp.num_actions();
        match self.act(mdp, h, x)? {
            ActionSelection::Action(a) => {
                let mut p = vec![0.0; a_count];
                p[a] = 1.0;
                Ok(p)
            }
            ActionSelection::Uniform => Ok(vec![1.0 / a_count as f64; a_count]),
        }
    }
}

/// `pi o_t pi'`: prefix below layer `t`, suffix from `t` on. `t` in 1..=H+1.
pub fn compose(mdp: &LayeredMdp, prefix: Policy, t: usize, suffix: Policy) -> Result<Policy> {
    if t < 1 || t > mdp.horizon() + 1 {
        return Err(Error::InvalidParam(format!(
            "composition layer {t} outside 1..={}",
            mdp.horizon() + 1
        )));
    }
    Ok(Policy::Composed {
        prefix: Arc::new(prefix),
        switch_layer: t,
        suffix: Arc::new(suffix),
    })
}

pub fn compose_arc(
    mdp: &LayeredMdp,
    prefix: Arc<Policy>,
    t: usize,
    suffix: Arc<Policy>,
) -> Result<Policy> {
    if t < 1 || t > mdp.horizon() + 1 {
        return Err(Error::InvalidParam(format!(
            "composition layer {t} outside 1..={}",
            mdp.horizon() + 1
        )));
    }
    Ok(Policy::Composed {
        prefix,
        switch_layer: t,
        suffix,
    })
}

pub(crate) fn linear_argmax_action(
    mdp: &LayeredMdp,
    h: usize,
    x: usize,
    theta: &DVector<f64>,
) -> Result<usize> {
    if theta.len() != mdp.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "policy parameter dim {} vs feature dim {}",
            theta.len(),
            mdp.feature_dim()
        )));
    }
    let mut best = 0usize;
    let mut best_val = mdp.feature(h, x, 0).dot(theta);
    for a in 1..mdp.num_actions() {
        let v = mdp.feature(h, x, a).dot(theta);
        if v > best_val {
            best = a;
            best_val = v;
        }
    }
    Ok(best)
}

/// Whether the benchmark gate opens at `(h, x)`: the exact comparison the
/// gated policy itself performs.
pub(crate) fn benchmark_gate_open(
    mdp: &LayeredMdp,
    h: usize,
    x: usize,
    gates: &[DVector<f64>],
    gamma: f64,
) -> bool {
    max_feature_gap(mdp, h, x, gates) >= gamma
}

/// `max_{a, a', i} (phi(x,a) - phi(x,a'))^T gates[i]`; -inf when no pair exists.
fn max_feature_gap(mdp: &LayeredMdp, h: usize, x: usize, gates: &[DVector<f64>]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for a in 0..mdp.num_actions() {
        for a2 in 0..mdp.num_actions() {
            if a == a2 {
                continue;
            }
            let diff = mdp.feature(h, x, a) - mdp.feature(h, x, a2);
            for g in gates {
                best = best.max(diff.dot(g));
            }
        }
    }
    best
}

/// The preconditioned feature gap `varphi(x; W)`: `W (phi(x, a_x) -
/// phi(x, a_x'))` for the ordered pair maximizing the norm, ties broken
/// lexicographically on `(a, a')`.
pub fn varphi(mdp: &LayeredMdp, h: usize, x: usize, w: &DMatrix<f64>) -> DVector<f64> {
    let mut best = DVector::zeros(w.nrows());
    let mut best_norm = -1.0f64;
    for a in 0..mdp.num_actions() {
        for a2 in 0..mdp.num_actions() {
            let diff = mdp.feature(h, x, a) - mdp.feature(h, x, a2);
            let v = w * diff;
            let n = v.norm();
            if n > best_norm {
                best_norm = n;
                best = v;
            }
        }
    }
    best
}

/// Benchmark-class gate width `d~ = 4 d log log d + 16`, guarded so the double
/// logarithm stays defined for d <= 2 and floored at 16.
pub fn d_tilde(d: usize) -> usize {
    let inner = (d.max(3) as f64).ln().ln();
    let raw = (4.0 * d as f64 * inner).ceil() as usize + 16;
    raw.max(16)
}
