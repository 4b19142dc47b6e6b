//! Cost-sensitive classification over the benchmark policy class.
//!
//! The oracle answers `argmin_{pi in Pi_bench} sum_i c_i 1{pi(x_i) = a_i}`.
//! A benchmark policy is a gate over `g` parameter vectors and a threshold
//! `gamma > 0` choosing between two linear-argmax policies, so its labeling
//! of the instance states is fully determined by the signs of finitely many
//! linear functionals of `(theta_{1:g}, ~theta_{1:2}, gamma)`.
//!
//! Enumerating one flat sign arrangement over all those variables is
//! hopeless beyond toy sizes, but the arrangement is a product: the argmax
//! blocks touch only their own parameter vector, and the gate blocks touch
//! `(theta_i, gamma)` with the threshold shared. Since every constraint is
//! homogeneous in `(theta_i, gamma)` jointly, a feasible gate pattern for one
//! block is feasible at *any* positive threshold, so the blocks decouple:
//! achievable gate patterns are exactly unions of at most `g` single-vector
//! patterns at `gamma = 1`. The backend therefore enumerates
//!   * the argmax labelings (one cell family in R^d, shared by both inner
//!     policies), and
//!   * the single-vector gate patterns (one cell family in R^{d+1} seeded
//!     with `gamma > 0`), closed under up-to-`g`-fold unions,
//! and minimizes the separable objective over gate pattern x inner labelings.

pub mod cells;
pub mod lp;

use std::collections::HashMap;

use nalgebra::DVector;

use crate::csc::cells::{bfs_sign_regions, bfs_sign_regions_seeded, DEFAULT_CELL_CAP};
use crate::csc::lp::{Constraint, DEFAULT_STRICT_TOL};
use crate::error::{Error, Result};
use crate::expectation::PathSet;
use crate::mdp::LayeredMdp;
use crate::policy::Policy;

#[derive(Clone, Debug)]
pub struct CscItem {
    pub cost: f64,
    pub state: usize,
    pub action: usize,
}

/// A weighted classification instance over states of one layer.
#[derive(Clone, Debug)]
pub struct CscInstance {
    pub layer: usize,
    pub items: Vec<CscItem>,
}

impl CscInstance {
    pub fn validate(&self, mdp: &LayeredMdp) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::EmptyCscInstance);
        }
        for it in &self.items {
            if !it.cost.is_finite() {
                return Err(Error::InvalidParam(format!(
                    "non-finite cost {}",
                    it.cost
                )));
            }
            if it.state >= mdp.layer_size(self.layer) || it.action >= mdp.num_actions() {
                return Err(Error::Contract(format!(
                    "item ({}, {}) outside layer {}",
                    it.state, it.action, self.layer
                )));
            }
        }
        Ok(())
    }

    /// `sum_i c_i 1{pi(x_i) = a_i}` for an explicit policy.
    pub fn objective(&self, mdp: &LayeredMdp, policy: &Policy) -> Result<f64> {
        let mut total = 0.0;
        for it in &self.items {
            let probs = policy.action_probs(mdp, self.layer, it.state)?;
            total += it.cost * probs[it.action];
        }
        Ok(total)
    }
}

#[derive(Clone, Debug)]
pub enum OracleBackend {
    /// Sign-region enumeration; `gate_vectors` defaults to the feature
    /// dimension.
    Cells { gate_vectors: Option<usize> },
    /// Exhaustive scan over a supplied finite policy set (cross-check use).
    BruteForce(Vec<Policy>),
}

#[derive(Clone, Debug)]
pub struct CscSolution {
    pub policy: Policy,
    pub objective: f64,
    /// Number of candidate labelings the backend scanned.
    pub candidates: usize,
}

/// Candidate labeling structure for one (layer, state set, gate count). The
/// structure depends only on the geometry, never on the costs, so oracles
/// cache it across calls.
///
/// Labelings and gate patterns are evaluated from the stored (already
/// rescaled) parameters through the exact same comparisons the returned
/// policy performs, so the bookkeeping objective and the policy's behavior
/// cannot drift apart on boundary cells.
#[derive(Clone, Debug)]
struct CandidateSet {
    states: Vec<usize>,
    /// Distinct argmax labelings with a representative parameter each.
    base: Vec<(Vec<usize>, DVector<f64>)>,
    /// Achievable gate patterns (bit j set = state `states[j]` gated) with
    /// the scaled witness vectors and threshold the policy will carry.
    gates: Vec<(u64, Vec<DVector<f64>>, f64)>,
}

impl CandidateSet {
    fn build(mdp: &LayeredMdp, layer: usize, states: &[usize], g: usize) -> Result<CandidateSet> {
        let m = states.len();
        if m > 63 {
            return Err(Error::TooManyStates(m));
        }
        let d = mdp.feature_dim();
        let a_count = mdp.num_actions();
        let h_ball = mdp.horizon() as f64;
        // Ordered pair difference vectors per state.
        let mut diffs: Vec<DVector<f64>> = Vec::new();
        for &x in states {
            for a in 0..a_count {
                for a2 in 0..a_count {
                    if a != a2 {
                        diffs.push(mdp.feature(layer, x, a) - mdp.feature(layer, x, a2));
                    }
                }
            }
        }

        let act_labeling = |theta: &DVector<f64>| -> Result<Vec<usize>> {
            states
                .iter()
                .map(|&x| crate::policy::linear_argmax_action(mdp, layer, x, theta))
                .collect()
        };

        let base = if a_count == 1 {
            vec![(vec![0usize; m], DVector::zeros(d))]
        } else {
            let cell_set = bfs_sign_regions(&diffs, DEFAULT_CELL_CAP, DEFAULT_STRICT_TOL)?;
            let mut seen: std::collections::HashSet<Vec<usize>> = std::collections::HashSet::new();
            let mut base = Vec::new();
            for cell in &cell_set.cells {
                let theta = shrink_into_ball(&cell.representative, h_ball);
                let labeling = act_labeling(&theta)?;
                if seen.insert(labeling.clone()) {
                    base.push((labeling, theta));
                }
            }
            base
        };

        // Single-vector gate patterns: cells of the lifted functionals
        // (diff, -1) over (theta, gamma) in R^{d+1}, restricted to gamma > 0.
        // Joint homogeneity in (theta, gamma) means a pattern feasible at one
        // positive threshold is feasible at every one, so thresholds across
        // gate vectors can be unified at gamma = 1; with the threshold shared,
        // multi-vector patterns are exactly unions of single-vector ones.
        let mut singles: Vec<DVector<f64>> = vec![DVector::zeros(d)];
        if a_count > 1 {
            let lifted: Vec<DVector<f64>> = diffs
                .iter()
                .map(|v| {
                    let mut l = DVector::zeros(d + 1);
                    l.rows_mut(0, d).copy_from(v);
                    l[d] = -1.0;
                    l
                })
                .collect();
            let mut gamma_axis = DVector::zeros(d + 1);
            gamma_axis[d] = 1.0;
            let seed = [Constraint::strict(gamma_axis)];
            let cell_set =
                bfs_sign_regions_seeded(&seed, &lifted, DEFAULT_CELL_CAP, DEFAULT_STRICT_TOL)?;
            let mut seen: std::collections::HashSet<u64> = std::collections::HashSet::new();
            for cell in &cell_set.cells {
                let gamma = cell.representative[d];
                let theta = cell.representative.rows(0, d).into_owned() / gamma;
                let mask = gate_mask(mdp, layer, states, std::slice::from_ref(&theta), 1.0);
                if seen.insert(mask) {
                    singles.push(theta);
                }
            }
        }
        let single_masks: Vec<u64> = singles
            .iter()
            .map(|t| gate_mask(mdp, layer, states, std::slice::from_ref(t), 1.0))
            .collect();

        // Close under unions of at most g single-vector patterns, tracking
        // which singles witness each pattern.
        let mut patterns: Vec<Vec<usize>> = Vec::new(); // witness indices
        let mut seen: HashMap<u64, usize> = HashMap::new();
        for (si, &mask) in single_masks.iter().enumerate() {
            if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(mask) {
                e.insert(patterns.len());
                patterns.push(if mask == 0 { Vec::new() } else { vec![si] });
            }
        }
        let mut frontier: Vec<(u64, usize)> = seen.iter().map(|(&m, &i)| (m, i)).collect();
        frontier.sort_unstable();
        for _ in 1..g.max(1) {
            let mut next = Vec::new();
            for &(mask, pi) in &frontier {
                for (si, &smask) in single_masks.iter().enumerate() {
                    let union = mask | smask;
                    if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(union) {
                        let mut w = patterns[pi].clone();
                        if smask != 0 {
                            w.push(si);
                        }
                        e.insert(patterns.len());
                        next.push((union, patterns.len()));
                        patterns.push(w);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }

        // Materialize each pattern with the scaled parameters the policy will
        // carry, and recompute the mask through the policy's own gate test.
        let mut gates: Vec<(u64, Vec<DVector<f64>>, f64)> = Vec::new();
        let mut final_seen: std::collections::HashSet<u64> = std::collections::HashSet::new();
        for witness in &patterns {
            let vecs: Vec<DVector<f64>> = witness.iter().map(|&si| singles[si].clone()).collect();
            let max_norm = vecs.iter().map(|w| w.norm()).fold(0.0, f64::max);
            let scale = if max_norm > h_ball {
                h_ball / max_norm
            } else {
                1.0
            };
            let scaled: Vec<DVector<f64>> = vecs.iter().map(|w| w * scale).collect();
            let gamma = scale;
            let mask = gate_mask(mdp, layer, states, &scaled, gamma);
            if final_seen.insert(mask) {
                gates.push((mask, scaled, gamma));
            }
        }

        Ok(CandidateSet {
            states: states.to_vec(),
            base,
            gates,
        })
    }

    /// Distinct full labelings (gate pattern combined with the two inner
    /// labelings) realized by the candidate set.
    fn distinct_labelings(&self) -> usize {
        let mut seen: std::collections::HashSet<Vec<usize>> = std::collections::HashSet::new();
        for (mask, _, _) in &self.gates {
            for (on, _) in &self.base {
                for (off, _) in &self.base {
                    let combined: Vec<usize> = (0..self.states.len())
                        .map(|j| {
                            if mask & (1u64 << j) != 0 {
                                on[j]
                            } else {
                                off[j]
                            }
                        })
                        .collect();
                    seen.insert(combined);
                }
            }
        }
        seen.len()
    }
}

fn shrink_into_ball(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = v.norm();
    if n > radius {
        v * (radius / n)
    } else {
        v.clone()
    }
}

fn gate_mask(
    mdp: &LayeredMdp,
    layer: usize,
    states: &[usize],
    gates: &[DVector<f64>],
    gamma: f64,
) -> u64 {
    let mut mask = 0u64;
    for (j, &x) in states.iter().enumerate() {
        if crate::policy::benchmark_gate_open(mdp, layer, x, gates, gamma) {
            mask |= 1u64 << j;
        }
    }
    mask
}

/// The CSC oracle with a per-geometry cache of candidate structures.
pub struct CscOracle {
    backend: OracleBackend,
    cache: HashMap<(usize, Vec<usize>, usize), CandidateSet>,
    pub calls: usize,
}

impl CscOracle {
    pub fn new(backend: OracleBackend) -> Self {
        CscOracle {
            backend,
            cache: HashMap::new(),
            calls: 0,
        }
    }

    pub fn cells(gate_vectors: Option<usize>) -> Self {
        CscOracle::new(OracleBackend::Cells { gate_vectors })
    }

    /// `argmin_{pi in Pi_bench} sum_i c_i 1{pi(x_i) = a_i}`.
    pub fn argmin(&mut self, mdp: &LayeredMdp, instance: &CscInstance) -> Result<CscSolution> {
        instance.validate(mdp)?;
        self.calls += 1;
        match &self.backend {
            OracleBackend::BruteForce(policies) => {
                let mut best: Option<(f64, &Policy)> = None;
                for pi in policies {
                    let obj = instance.objective(mdp, pi)?;
                    if best.map_or(true, |(b, _)| obj < b) {
                        best = Some((obj, pi));
                    }
                }
                let (objective, policy) = best.ok_or(Error::EmptyCscInstance)?;
                Ok(CscSolution {
                    policy: policy.clone(),
                    objective,
                    candidates: policies.len(),
                })
            }
            OracleBackend::Cells { gate_vectors } => {
                let g = gate_vectors.unwrap_or(mdp.feature_dim()).max(1);
                let mut states: Vec<usize> = instance.items.iter().map(|it| it.state).collect();
                states.sort_unstable();
                states.dedup();
                let key = (instance.layer, states.clone(), g);
                if !self.cache.contains_key(&key) {
                    let cs = CandidateSet::build(mdp, instance.layer, &states, g)?;
                    self.cache.insert(key.clone(), cs);
                }
                let cs = &self.cache[&key];
                solve_with_candidates(mdp, instance, cs)
            }
        }
    }

    /// Every candidate policy the cell backend scans for a state set: one
    /// benchmark policy per (gate pattern, inner labeling, inner labeling)
    /// triple. Exposed so tests can brute-force the same candidate set.
    pub fn candidate_policies(
        &mut self,
        mdp: &LayeredMdp,
        layer: usize,
        states: &[usize],
        gate_vectors: Option<usize>,
    ) -> Result<Vec<Policy>> {
        let g = gate_vectors.unwrap_or(mdp.feature_dim()).max(1);
        let mut sorted = states.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let key = (layer, sorted.clone(), g);
        if !self.cache.contains_key(&key) {
            let cs = CandidateSet::build(mdp, layer, &sorted, g)?;
            self.cache.insert(key.clone(), cs);
        }
        let cs = &self.cache[&key];
        let mut out = Vec::with_capacity(cs.gates.len() * cs.base.len() * cs.base.len());
        for gi in 0..cs.gates.len() {
            for on in 0..cs.base.len() {
                for off in 0..cs.base.len() {
                    out.push(build_policy(mdp, cs, gi, on, off)?);
                }
            }
        }
        Ok(out)
    }

    /// Number of distinct labelings the cell backend would scan for a state
    /// set (exposed for the growth-function checks).
    pub fn labeling_count(
        &mut self,
        mdp: &LayeredMdp,
        layer: usize,
        states: &[usize],
        gate_vectors: Option<usize>,
    ) -> Result<usize> {
        let g = gate_vectors.unwrap_or(mdp.feature_dim()).max(1);
        let mut sorted = states.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let key = (layer, sorted.clone(), g);
        if !self.cache.contains_key(&key) {
            let cs = CandidateSet::build(mdp, layer, &sorted, g)?;
            self.cache.insert(key.clone(), cs);
        }
        Ok(self.cache[&key].distinct_labelings())
    }
}

fn solve_with_candidates(
    mdp: &LayeredMdp,
    instance: &CscInstance,
    cs: &CandidateSet,
) -> Result<CscSolution> {
    let m = cs.states.len();
    let a_count = mdp.num_actions();
    let index_of: HashMap<usize, usize> = cs
        .states
        .iter()
        .enumerate()
        .map(|(j, &x)| (x, j))
        .collect();
    // Aggregate costs per (state, action).
    let mut cost = vec![vec![0.0f64; a_count]; m];
    for it in &instance.items {
        cost[index_of[&it.state]][it.action] += it.cost;
    }
    // Cost of each base labeling restricted to a state.
    let per_label: Vec<Vec<f64>> = cs
        .base
        .iter()
        .map(|(lab, _)| (0..m).map(|j| cost[j][lab[j]]).collect())
        .collect();

    let mut best: Option<(f64, usize, usize, usize)> = None; // (obj, gate, on, off)
    for (gi, (mask, _, _)) in cs.gates.iter().enumerate() {
        let mut best_on = (f64::INFINITY, 0usize);
        let mut best_off = (f64::INFINITY, 0usize);
        for (li, pl) in per_label.iter().enumerate() {
            let mut on = 0.0;
            let mut off = 0.0;
            for (j, &c) in pl.iter().enumerate() {
                if mask & (1u64 << j) != 0 {
                    on += c;
                } else {
                    off += c;
                }
            }
            if on < best_on.0 {
                best_on = (on, li);
            }
            if off < best_off.0 {
                best_off = (off, li);
            }
        }
        let obj = best_on.0 + best_off.0;
        if best.map_or(true, |(b, _, _, _)| obj < b) {
            best = Some((obj, gi, best_on.1, best_off.1));
        }
    }
    let (objective, gi, on_i, off_i) = best.ok_or(Error::EmptyCscInstance)?;
    let policy = build_policy(mdp, cs, gi, on_i, off_i)?;
    Ok(CscSolution {
        policy,
        objective,
        candidates: cs.gates.len() * cs.base.len() * cs.base.len(),
    })
}

fn build_policy(
    _mdp: &LayeredMdp,
    cs: &CandidateSet,
    gate_idx: usize,
    on_idx: usize,
    off_idx: usize,
) -> Result<Policy> {
    let (_, gates, gamma) = &cs.gates[gate_idx];
    Policy::gated_benchmark(
        gates.clone(),
        *gamma,
        Policy::linear_argmax(cs.base[on_idx].1.clone()),
        Policy::linear_argmax(cs.base[off_idx].1.clone()),
    )
}

/// `ln` of the benchmark growth bound `(81 n A^2 / d)^{(d+1)^2}`.
pub fn growth_bound_ln(n: usize, d: usize, a: usize) -> f64 {
    let k = ((d + 1) * (d + 1)) as f64;
    k * (81.0 * n as f64 * (a * a) as f64 / d as f64).ln()
}

pub fn growth_bound(n: usize, d: usize, a: usize) -> f64 {
    growth_bound_ln(n, d, a).exp()
}

/// Build the signed CSC instance for one `(pi, v)` pair and bonus layer, per
/// trajectory: cost `-s * A * w * 1{phi(x_{h-1}, a_{h-1})^T v >= 0} *
/// (b_l(x_l) - phi(x_h, a_h)^T theta_bo)` labeled by `(x_h, a_h)`. The sign
/// is folded in so that the oracle's argmin realizes `argmax s * Delta`; the
/// maximizing |Delta| is the better of the two signed instances. Costs of
/// trajectories sharing a label are summed into one item, in first-seen
/// order.
#[allow(clippy::too_many_arguments)]
pub fn delta_to_csc(
    mdp: &LayeredMdp,
    paths: &PathSet,
    h: usize,
    l: usize,
    v: &DVector<f64>,
    theta_bo: &DVector<f64>,
    bonus: &dyn Fn(usize) -> f64,
    sign: f64,
) -> CscInstance {
    let a_count = mdp.num_actions() as f64;
    let mut items: Vec<CscItem> = Vec::new();
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    for (w, t) in &paths.paths {
        let ind = if h == 1 {
            true // fictitious layer-0 state has zero features
        } else {
            mdp.feature(h - 1, t.state(h - 1), t.action(h - 1)).dot(v) >= 0.0
        };
        let cost = if ind {
            -sign
                * a_count
                * w
                * (bonus(t.state(l)) - mdp.feature(h, t.state(h), t.action(h)).dot(theta_bo))
        } else {
            0.0
        };
        let key = (t.state(h), t.action(h));
        match index.get(&key) {
            Some(&i) => items[i].cost += cost,
            None => {
                index.insert(key, items.len());
                items.push(CscItem {
                    cost,
                    state: key.0,
                    action: key.1,
                });
            }
        }
    }
    CscInstance { layer: h, items }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn random_instance(
        mdp: &LayeredMdp,
        layer: usize,
        n: usize,
        rng: &mut impl Rng,
    ) -> CscInstance {
        let items = (0..n)
            .map(|_| CscItem {
                cost: rng.random_range(-1.0..1.0),
                state: rng.random_range(0..mdp.layer_size(layer)),
                action: rng.random_range(0..mdp.num_actions()),
            })
            .collect();
        CscInstance { layer, items }
    }

    fn random_benchmark_policy(mdp: &LayeredMdp, g: usize, rng: &mut impl Rng) -> Policy {
        let d = mdp.feature_dim();
        let h = mdp.horizon() as f64;
        fn vec_in_ball(d: usize, r: f64, rng: &mut impl Rng) -> DVector<f64> {
            let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0f64));
            let n = v.norm().max(1e-9);
            &v / n * rng.random_range(0.0..r)
        }
        let gates = (0..g).map(|_| vec_in_ball(d, h, rng)).collect();
        let gamma = rng.random_range(1e-6..2.0 * h);
        Policy::gated_benchmark(
            gates,
            gamma,
            Policy::linear_argmax(vec_in_ball(d, h, rng)),
            Policy::linear_argmax(vec_in_ball(d, h, rng)),
        )
        .unwrap()
    }

    #[test]
    fn zero_costs_return_zero_objective() {
        let mdp = fixtures::x1(); // d = 2 keeps the enumeration small
        let instance = CscInstance {
            layer: 1,
            items: vec![
                CscItem {
                    cost: 0.0,
                    state: 0,
                    action: 0,
                },
                CscItem {
                    cost: 0.0,
                    state: 1,
                    action: 1,
                },
            ],
        };
        let mut oracle = CscOracle::cells(None);
        let sol = oracle.argmin(&mdp, &instance).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert!(sol.candidates > 0);
    }

    #[test]
    fn empty_instance_is_rejected() {
        let mdp = fixtures::x1();
        let mut oracle = CscOracle::cells(None);
        let inst = CscInstance {
            layer: 1,
            items: vec![],
        };
        assert!(matches!(
            oracle.argmin(&mdp, &inst),
            Err(Error::EmptyCscInstance)
        ));
    }

    /// d = 1 sanity case: two states, costs favoring action 1 on both; the
    /// sign of the single parameter decides everything and brute force over
    /// scaled {-1, +1} matches.
    #[test]
    fn one_dimensional_sign_case() {
        use nalgebra::dvector;
        let mdp = LayeredMdp::new(
            1,
            vec![2],
            2,
            1,
            vec![0.5, 0.5],
            vec![],
            vec![vec![vec![0.1, 0.2], vec![0.3, 0.4]]],
            vec![vec![
                vec![dvector![0.5], dvector![1.0]],
                vec![dvector![0.4], dvector![0.9]],
            ]],
        )
        .unwrap();
        // Reward action 1 on both states (negative cost = desirable).
        let instance = CscInstance {
            layer: 1,
            items: vec![
                CscItem {
                    cost: -1.0,
                    state: 0,
                    action: 1,
                },
                CscItem {
                    cost: -1.0,
                    state: 1,
                    action: 1,
                },
            ],
        };
        let mut oracle = CscOracle::cells(None);
        let sol = oracle.argmin(&mdp, &instance).unwrap();
        assert_abs_diff_eq!(sol.objective, -2.0, epsilon = 1e-12);
        // Brute force over the two sign policies.
        let mut brute = CscOracle::new(OracleBackend::BruteForce(vec![
            Policy::linear_argmax(dvector![1.0]),
            Policy::linear_argmax(dvector![-1.0]),
        ]));
        let b = brute.argmin(&mdp, &instance).unwrap();
        assert_abs_diff_eq!(sol.objective, b.objective, epsilon = 1e-12);
    }

    #[test]
    fn cell_backend_dominates_random_benchmark_policies() {
        let mdp = fixtures::x1(); // d = 2, A = 2
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let mut oracle = CscOracle::cells(None);
        for round in 0..5 {
            let instance = random_instance(&mdp, 2, 8, &mut rng);
            let sol = oracle.argmin(&mdp, &instance).unwrap();
            // The reported objective must match acting the returned policy.
            let acted = instance.objective(&mdp, &sol.policy).unwrap();
            assert_abs_diff_eq!(acted, sol.objective, epsilon = 1e-9);
            for _ in 0..10_000 {
                let pi = random_benchmark_policy(&mdp, mdp.feature_dim(), &mut rng);
                let obj = instance.objective(&mdp, &pi).unwrap();
                assert!(
                    sol.objective <= obj + 1e-9,
                    "round {round}: oracle {} beaten by random {}",
                    sol.objective,
                    obj
                );
            }
        }
    }

    #[test]
    fn gate_patterns_cover_multi_vector_unions() {
        // On X1's layer 1 the two states have orthogonal feature geometries,
        // so gating both states can require two gate vectors.
        let mdp = fixtures::x1();
        let mut oracle = CscOracle::cells(Some(2));
        let n = oracle.labeling_count(&mdp, 1, &[0, 1], Some(2)).unwrap();
        let n1 = oracle.labeling_count(&mdp, 1, &[0, 1], Some(1)).unwrap();
        assert!(n >= n1);
    }

    #[test]
    fn labeling_count_respects_growth_bound() {
        let mdp = fixtures::x1();
        let mut oracle = CscOracle::cells(None);
        let count = oracle.labeling_count(&mdp, 2, &[0, 1], None).unwrap();
        let bound = growth_bound(2, mdp.feature_dim(), mdp.num_actions());
        assert!((count as f64) <= bound, "{count} > {bound}");
    }

    #[test]
    fn growth_bound_plug_in_values() {
        // n = d, A = 1 gives 81^{(d+1)^2}.
        for d in 1..=3usize {
            let got = growth_bound(d, d, 1);
            let expected = 81f64.powi(((d + 1) * (d + 1)) as i32);
            assert_abs_diff_eq!(got, expected, epsilon = expected * 1e-9);
        }
        // Monotone in n.
        assert!(growth_bound(5, 2, 2) < growth_bound(6, 2, 2));
    }

    #[test]
    fn delta_to_csc_formula_term_by_term() {
        use crate::mdp::Trajectory;
        use nalgebra::dvector;
        let mdp = fixtures::x1();
        // Two hand-built weighted trajectories.
        let t1 = Trajectory {
            steps: vec![(0, 0, 0.5), (1, 1, 0.3)],
        };
        let t2 = Trajectory {
            steps: vec![(1, 1, 0.5), (0, 0, 0.0)],
        };
        let paths = PathSet {
            paths: vec![(0.25, t1), (0.75, t2)],
        };
        let theta_bo = dvector![0.2, -0.1];
        let v = dvector![1.0, 0.0];
        let bonus = |x: usize| if x == 0 { 0.4 } else { 0.1 };
        let inst = delta_to_csc(&mdp, &paths, 2, 2, &v, &theta_bo, &bonus, 1.0);
        assert_eq!(inst.items.len(), 2);
        // Trajectory 1: phi(x_1, a_1) = e1, e1 . v = 1 >= 0 -> weight A * 0.25.
        // Cost = -1 * 2 * 0.25 * (b(1) - phi(2,1,1) . theta) with phi(2,1,1) = e2.
        let expected1 = -2.0 * 0.25 * (0.1 - (-0.1));
        assert_abs_diff_eq!(inst.items[0].cost, expected1, epsilon = 1e-12);
        assert_eq!((inst.items[0].state, inst.items[0].action), (1, 1));
        // Trajectory 2: phi(x_1, a_1) = phi(1, 1, 1) = (0.8, -0.6), dot v = 0.8 >= 0.
        // phi(2, 0, 0) = e1; cost = -2 * 0.75 * (0.4 - 0.2).
        let expected2 = -2.0 * 0.75 * (0.4 - 0.2);
        assert_abs_diff_eq!(inst.items[1].cost, expected2, epsilon = 1e-12);

        // v = 0 keeps the indicator open on every trajectory.
        let inst0 = delta_to_csc(&mdp, &paths, 2, 2, &dvector![0.0, 0.0], &theta_bo, &bonus, 1.0);
        assert!(inst0.items.iter().all(|it| it.cost != 0.0));
        // The signed pair flips costs.
        let inst_neg =
            delta_to_csc(&mdp, &paths, 2, 2, &v, &theta_bo, &bonus, -1.0);
        for (a, b) in inst.items.iter().zip(&inst_neg.items) {
            assert_abs_diff_eq!(a.cost, -b.cost, epsilon = 1e-12);
        }
    }
}
