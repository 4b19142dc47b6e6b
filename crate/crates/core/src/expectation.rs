//! Exact-expectation engine: enumerate trajectory prefixes with their exact
//! probabilities instead of sampling. This is what turns the asymptotic
//! algorithm statements into deterministic computations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{sample_trajectory, LayeredMdp, Trajectory};
use crate::policy::Policy;

/// Default cap on the number of enumerated paths.
pub const DEFAULT_PATH_CAP: f64 = 1e7;

/// A weighted set of trajectories. Exact mode stores every positive-probability
/// path with its probability; sampled mode stores n draws with weight 1/n.
/// All estimators in the algorithms are folds over this representation, which
/// keeps one code path for both expectation backends.
#[derive(Clone, Debug)]
pub struct PathSet {
    pub paths: Vec<(f64, Trajectory)>,
}

impl PathSet {
    /// Weighted mean of a trajectory functional.
    pub fn mean(&self, f: impl Fn(&Trajectory) -> f64) -> f64 {
        self.paths.iter().map(|(w, t)| w * f(t)).sum()
    }

    pub fn total_weight(&self) -> f64 {
        self.paths.iter().map(|(w, _)| w).sum()
    }
}

/// Enumerate every full-horizon path with positive probability under `policy`.
pub fn exact_paths(mdp: &LayeredMdp, policy: &Policy, cap: f64) -> Result<PathSet> {
    exact_paths_from(mdp, policy, None, cap)
}

/// Exact paths conditioned on `x_h = x, a_h = a`: enumeration starts at layer
/// `h` in state `x` with the first action forced to `a`; earlier layers are
/// absent from the returned trajectories (steps are indexed from layer `h`).
pub fn exact_paths_conditional(
    mdp: &LayeredMdp,
    policy: &Policy,
    h: usize,
    x: usize,
    a: usize,
    cap: f64,
) -> Result<PathSet> {
    exact_paths_from(mdp, policy, Some((h, x, a)), cap)
}

fn exact_paths_from(
    mdp: &LayeredMdp,
    policy: &Policy,
    start: Option<(usize, usize, usize)>,
    cap: f64,
) -> Result<PathSet> {
    let start_layer = start.map_or(1, |(h, _, _)| h);
    let mut projected = 1.0f64;
    for h in start_layer..=mdp.horizon() {
        projected *= mdp.layer_size(h) as f64 * mdp.num_actions() as f64;
    }
    if projected > cap {
        return Err(Error::PathCapExceeded {
            paths: projected,
            cap,
        });
    }
    let mut out = Vec::new();
    let mut steps: Vec<(usize, usize, f64)> = Vec::with_capacity(mdp.horizon());
    match start {
        None => {
            for (x, &p) in mdp.init_dist().iter().enumerate() {
                if p > 0.0 {
                    extend_paths(mdp, policy, 1, x, p, &mut steps, &mut out)?;
                }
            }
        }
        Some((h, x, a)) => {
            let r = mdp.reward(h, x, a);
            steps.push((x, a, r));
            if h == mdp.horizon() {
                out.push((1.0, Trajectory { steps: steps.clone() }));
            } else {
                for (x2, &p) in mdp.transition(h, x, a).iter().enumerate() {
                    if p > 0.0 {
                        extend_paths(mdp, policy, h + 1, x2, p, &mut steps, &mut out)?;
                    }
                }
            }
        }
    }
    Ok(PathSet { paths: out })
}

fn extend_paths(
    mdp: &LayeredMdp,
    policy: &Policy,
    h: usize,
    x: usize,
    weight: f64,
    steps: &mut Vec<(usize, usize, f64)>,
    out: &mut Vec<(f64, Trajectory)>,
) -> Result<()> {
    let probs = policy.action_probs(mdp, h, x)?;
    for (a, &pa) in probs.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        let r = mdp.reward(h, x, a);
        steps.push((x, a, r));
        let w = weight * pa;
        if h == mdp.horizon() {
            out.push((w, Trajectory { steps: steps.clone() }));
        } else {
            for (x2, &pt) in mdp.transition(h, x, a).iter().enumerate() {
                if pt > 0.0 {
                    extend_paths(mdp, policy, h + 1, x2, w * pt, steps, out)?;
                }
            }
        }
        steps.pop();
    }
    Ok(())
}

/// Draw `n` trajectories and wrap them with weight 1/n each.
pub fn sampled_paths(
    mdp: &LayeredMdp,
    policy: &Policy,
    n: usize,
    rng: &mut impl Rng,
) -> Result<PathSet> {
    let w = 1.0 / n as f64;
    let mut paths = Vec::with_capacity(n);
    for _ in 0..n {
        paths.push((w, sample_trajectory(mdp, policy, rng)?));
    }
    Ok(PathSet { paths })
}

/// `E^pi[f]` for a functional of the trajectory prefix up to `depth`, computed
/// by exact forward enumeration (no sampling).
pub fn exact_functional_expectation(
    mdp: &LayeredMdp,
    policy: &Policy,
    depth: usize,
    cap: f64,
    f: impl Fn(&[(usize, usize, f64)]) -> f64,
) -> Result<f64> {
    if depth < 1 || depth > mdp.horizon() {
        return Err(Error::InvalidParam(format!(
            "functional depth {depth} outside 1..={}",
            mdp.horizon()
        )));
    }
    let mut projected = 1.0f64;
    for h in 1..=depth {
        projected *= mdp.layer_size(h) as f64 * mdp.num_actions() as f64;
    }
    if projected > cap {
        return Err(Error::PathCapExceeded {
            paths: projected,
            cap,
        });
    }
    let mut total = 0.0;
    let mut steps: Vec<(usize, usize, f64)> = Vec::with_capacity(depth);
    for (x, &p) in mdp.init_dist().iter().enumerate() {
        if p > 0.0 {
            accumulate(mdp, policy, 1, x, p, depth, &mut steps, &f, &mut total)?;
        }
    }
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn accumulate(
    mdp: &LayeredMdp,
    policy: &Policy,
    h: usize,
    x: usize,
    weight: f64,
    depth: usize,
    steps: &mut Vec<(usize, usize, f64)>,
    f: &impl Fn(&[(usize, usize, f64)]) -> f64,
    total: &mut f64,
) -> Result<()> {
    let probs = policy.action_probs(mdp, h, x)?;
    for (a, &pa) in probs.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        let w = weight * pa;
        steps.push((x, a, mdp.reward(h, x, a)));
        if h == depth {
            *total += w * f(steps);
        } else {
            for (x2, &pt) in mdp.transition(h, x, a).iter().enumerate() {
                if pt > 0.0 {
                    accumulate(mdp, policy, h + 1, x2, w * pt, depth, steps, f, total)?;
                }
            }
        }
        steps.pop();
    }
    Ok(())
}

/// Conditional expectation `E^pi[f | x_h = x, a_h = a]` of a functional of the
/// steps from layer `h` to `depth`.
#[allow(clippy::too_many_arguments)]
pub fn exact_conditional_expectation(
    mdp: &LayeredMdp,
    policy: &Policy,
    h: usize,
    x: usize,
    a: usize,
    depth: usize,
    cap: f64,
    f: impl Fn(&[(usize, usize, f64)]) -> f64,
) -> Result<f64> {
    let paths = exact_paths_conditional(mdp, policy, h, x, a, cap)?;
    Ok(paths
        .paths
        .iter()
        .map(|(w, t)| w * f(&t.steps[..depth + 1 - h]))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::policy_value;
    use crate::fixtures;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn constant_functional_integrates_to_one() {
        let mdp = fixtures::t1();
        for depth in 1..=mdp.horizon() {
            let v = exact_functional_expectation(&mdp, &Policy::Uniform, depth, 1e7, |_| 1.0)
                .unwrap();
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn reward_sum_matches_policy_value() {
        for mdp in [fixtures::t1(), fixtures::c3(), fixtures::l1()] {
            let pi = Policy::Uniform;
            let via_dp = policy_value(&mdp, &pi).unwrap();
            let via_paths =
                exact_functional_expectation(&mdp, &pi, mdp.horizon(), 1e7, |steps| {
                    steps.iter().map(|s| s.2).sum()
                })
                .unwrap();
            assert_abs_diff_eq!(via_dp, via_paths, epsilon = 1e-12);
        }
    }

    #[test]
    fn indicator_functional_matches_monte_carlo() {
        let mdp = fixtures::t1();
        let pi = Policy::Uniform;
        // P[x_2 = 0 and a_2 = 1].
        let exact = exact_functional_expectation(&mdp, &pi, 2, 1e7, |steps| {
            if steps[1].0 == 0 && steps[1].1 == 1 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let n = 100_000usize;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut hits = 0usize;
        for _ in 0..n {
            let t = crate::mdp::sample_trajectory(&mdp, &pi, &mut rng).unwrap();
            if t.state(2) == 0 && t.action(2) == 1 {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        let sigma = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((freq - exact).abs() <= 3.0 * sigma.max(1e-12));
    }

    #[test]
    fn path_cap_is_enforced() {
        let mdp = fixtures::t1();
        assert!(matches!(
            exact_paths(&mdp, &Policy::Uniform, 2.0),
            Err(crate::error::Error::PathCapExceeded { .. })
        ));
    }

    #[test]
    fn exact_path_weights_sum_to_one() {
        for mdp in [fixtures::t1(), fixtures::c3(), fixtures::l1()] {
            let paths = exact_paths(&mdp, &Policy::Uniform, 1e7).unwrap();
            assert_abs_diff_eq!(paths.total_weight(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn conditional_expectation_matches_q_values() {
        let mdp = fixtures::l1();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let pi = fixtures::random_tabular_policy(&mdp, &mut rng);
        let table = crate::dp::q_values_dp(&mdp, &pi).unwrap();
        for h in 1..=mdp.horizon() {
            for x in 0..mdp.layer_size(h) {
                for a in 0..mdp.num_actions() {
                    let q = exact_conditional_expectation(
                        &mdp,
                        &pi,
                        h,
                        x,
                        a,
                        mdp.horizon(),
                        1e7,
                        |steps| steps.iter().map(|s| s.2).sum(),
                    )
                    .unwrap();
                    assert_abs_diff_eq!(q, table.q(h, x, a), epsilon = 1e-12);
                }
            }
        }
    }
}
