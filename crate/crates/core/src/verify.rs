//! One-command verification: every structural property the analysis rests on,
//! evaluated against a concrete MDP with explicit tolerances.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::csc::cells::{bfs_sign_regions, CellSet, DEFAULT_CELL_CAP};
use crate::csc::lp::DEFAULT_STRICT_TOL;
use crate::csc::{CscInstance, CscItem, CscOracle};
use crate::dp;
use crate::error::Result;
use crate::expectation::{exact_paths_conditional, DEFAULT_PATH_CAP};
use crate::fixtures;
use crate::linalg::least_squares_min_norm;
use crate::mdp::LayeredMdp;
use crate::params::Params;
use crate::policy::{d_tilde, varphi, Policy};
use crate::precond::Preconditioner;
use crate::psdp;
use crate::realizability::{
    self, design_for_theta, enumerate_theta_all, ApproxDesign, ThetaSet, DEFAULT_POLICY_CAP,
    REALIZABLE_TOL,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub id: String,
    pub status: Status,
    pub details: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema: String,
    pub checks: Vec<Check>,
    pub all_passed: bool,
}

impl VerifyReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Skipped => "SKIP",
            };
            s.push_str(&format!("{tag} {} ({})\n", c.id, c.details));
        }
        s.push_str(if self.all_passed {
            "all checks passed\n"
        } else {
            "FAILURES present\n"
        });
        s
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random draws for the identity checks.
    pub draws: usize,
    /// Iterations of the probe run backing the preconditioner and potential
    /// checks.
    pub probe_iters: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            draws: 30,
            probe_iters: 12,
        }
    }
}

struct Ctx {
    checks: Vec<Check>,
}

impl Ctx {
    fn push(&mut self, id: &str, passed: bool, details: String) {
        self.checks.push(Check {
            id: id.into(),
            status: if passed { Status::Pass } else { Status::Fail },
            details,
        });
    }

    fn skip(&mut self, id: &str, reason: &str) {
        self.checks.push(Check {
            id: id.into(),
            status: Status::Skipped,
            details: reason.into(),
        });
    }
}

pub fn is_one_hot(mdp: &LayeredMdp) -> bool {
    for h in 1..=mdp.horizon() {
        for x in 0..mdp.layer_size(h) {
            for a in 0..mdp.num_actions() {
                let phi = mdp.feature(h, x, a);
                let ones = phi.iter().filter(|&&v| v == 1.0).count();
                let zeros = phi.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != phi.len() {
                    return false;
                }
            }
        }
    }
    true
}

/// Max violation of the performance-difference identity over random
/// deterministic policy pairs; all quantities via DP.
pub fn performance_difference_violation(
    mdp: &LayeredMdp,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let pi_star = fixtures::random_tabular_policy(mdp, &mut rng);
        let pi = fixtures::random_tabular_policy(mdp, &mut rng);
        let lhs = dp::policy_value(mdp, &pi_star)? - dp::policy_value(mdp, &pi)?;
        let q = dp::q_values_dp(mdp, &pi)?;
        let occ = dp::state_occupancy(mdp, &pi_star)?;
        let mut rhs = 0.0;
        for t in 1..=mdp.horizon() {
            for x in 0..mdp.layer_size(t) {
                let p = occ[t - 1][x];
                if p == 0.0 {
                    continue;
                }
                let a_star = match pi_star.act(mdp, t, x)? {
                    crate::policy::ActionSelection::Action(a) => a,
                    crate::policy::ActionSelection::Uniform => unreachable!(),
                };
                let a_pi = match pi.act(mdp, t, x)? {
                    crate::policy::ActionSelection::Action(a) => a,
                    crate::policy::ActionSelection::Uniform => unreachable!(),
                };
                rhs += p * (q.q(t, x, a_star) - q.q(t, x, a_pi));
            }
        }
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Max violation of the skip-step value decomposition over random subset and
/// policy draws, with both sides computed by exact expectation.
pub fn skip_step_violation(mdp: &LayeredMdp, draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let horizon = mdp.horizon();
    let mut worst = 0.0f64;
    for _ in 0..draws {
        // Random per-layer kept sets, random policies, random step rewards.
        let kept: Vec<Vec<bool>> = (1..=horizon)
            .map(|h| (0..mdp.layer_size(h)).map(|_| rng.random_bool(0.5)).collect())
            .collect();
        let pi_hat = fixtures::random_tabular_policy(mdp, &mut rng);
        let pi_alt = fixtures::random_tabular_policy(mdp, &mut rng);
        let r_tilde: Vec<Vec<Vec<f64>>> = (1..=horizon)
            .map(|h| {
                (0..mdp.layer_size(h))
                    .map(|_| {
                        (0..mdp.num_actions())
                            .map(|_| rng.random_range(0.0..1.0))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        // The switched policy plays pi_hat inside the kept sets.
        let mixed_actions: Vec<Vec<usize>> = (1..=horizon)
            .map(|h| {
                (0..mdp.layer_size(h))
                    .map(|x| {
                        let src = if kept[h - 1][x] { &pi_hat } else { &pi_alt };
                        match src.act(mdp, h, x).unwrap() {
                            crate::policy::ActionSelection::Action(a) => a,
                            crate::policy::ActionSelection::Uniform => 0,
                        }
                    })
                    .collect()
            })
            .collect();
        let pi_mixed = Policy::Tabular {
            actions: mixed_actions.clone(),
        };
        // V_h(x) = E^mixed[sum r-tilde | x_h = x, a_h = mixed(x)].
        let (q_mixed, _) =
            dp::q_tables_for_rewards(mdp, &pi_mixed, |h, x, a| r_tilde[h - 1][x][a])?;
        let v_of = |h: usize, x: usize| q_mixed[h - 1][x][mixed_actions[h - 1][x]];

        for h in 1..=horizon {
            for x in 0..mdp.layer_size(h) {
                let lhs = v_of(h, x);
                let forced = mixed_actions[h - 1][x];
                let paths = exact_paths_conditional(mdp, &pi_hat, h, x, forced, DEFAULT_PATH_CAP)?;
                let mut rhs = 0.0;
                for (w, t) in &paths.paths {
                    // First term: the first layer outside the kept set takes
                    // its V value; second term: kept-prefix step rewards.
                    let mut prefix_in = true;
                    for l in h..=horizon {
                        let (xs, a_s, _) = t.steps[l - h];
                        let inside = kept[l - 1][xs];
                        if !inside && prefix_in {
                            rhs += w * v_of(l, xs);
                        }
                        if prefix_in && inside {
                            rhs += w * r_tilde[l - 1][xs][a_s];
                        }
                        if !inside {
                            prefix_in = false;
                        }
                    }
                }
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    Ok(worst)
}

/// Conditional-expectation realizability of admissible functions: fit the
/// map `(x, a) -> E[f(x_target) | x_l = x, a_l = a]` on the layer-l features
/// and report the worst residual and parameter-norm ratio against the stated
/// ball.
pub fn admissible_realizability_check(
    mdp: &LayeredMdp,
    sets: &[ThetaSet],
    designs: &[ApproxDesign],
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dt = d_tilde(mdp.feature_dim()) as f64;
    let h_f = mdp.horizon() as f64;
    let mut worst_resid = 0.0f64;
    let mut worst_norm_ratio = 0.0f64;
    for _ in 0..draws {
        let target = rng.random_range(2..=mdp.horizon());
        let gamma = rng.random_range(0.005..0.05);
        let l_bound = rng.random_range(0.5..2.0);
        let alpha = gamma / l_bound;
        // Gated random function: admissible with alpha = gamma / L.
        let f: Vec<f64> = (0..mdp.layer_size(target))
            .map(|x| {
                let rgd =
                    realizability::design_range(mdp, &sets[target - 1], &designs[target - 1], x);
                if rgd >= gamma {
                    rng.random_range(-l_bound..l_bound)
                } else {
                    0.0
                }
            })
            .collect();
        let pi = fixtures::random_tabular_policy(mdp, &mut rng);
        let (q_f, _) = dp::q_tables_for_rewards(mdp, &pi, |h, x, _| {
            if h == target {
                f[x]
            } else {
                0.0
            }
        })?;
        for l in 1..target {
            let rows = mdp.layer_size(l) * mdp.num_actions();
            let mut x_mat = DMatrix::zeros(rows, mdp.feature_dim());
            let mut y = DVector::zeros(rows);
            let mut r = 0;
            for x in 0..mdp.layer_size(l) {
                for a in 0..mdp.num_actions() {
                    x_mat.row_mut(r).copy_from(&mdp.feature(l, x, a).transpose());
                    y[r] = q_f[l - 1][x][a];
                    r += 1;
                }
            }
            let (theta, resid) = least_squares_min_norm(&x_mat, &y)?;
            worst_resid = worst_resid.max(resid);
            worst_norm_ratio = worst_norm_ratio.max(theta.norm() / (4.0 * dt * h_f / alpha));
        }
    }
    Ok((worst_resid, worst_norm_ratio))
}

/// Same for the skip-product conditional expectation, which routes around
/// low-design-range intermediate states.
pub fn skip_product_realizability_check(
    mdp: &LayeredMdp,
    sets: &[ThetaSet],
    designs: &[ApproxDesign],
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dt = d_tilde(mdp.feature_dim()) as f64;
    let h_f = mdp.horizon() as f64;
    let mut worst_resid = 0.0f64;
    let mut worst_norm_ratio = 0.0f64;
    let rgd_tables: Vec<Vec<f64>> = (1..=mdp.horizon())
        .map(|h| {
            (0..mdp.layer_size(h))
                .map(|x| realizability::design_range(mdp, &sets[h - 1], &designs[h - 1], x))
                .collect()
        })
        .collect();
    for _ in 0..draws {
        let fit = rng.random_range(1..mdp.horizon());
        let target = rng.random_range(fit + 1..=mdp.horizon());
        let gamma = rng.random_range(0.005..0.05);
        let l_bound = rng.random_range(0.5..2.0);
        let f: Vec<f64> = (0..mdp.layer_size(target))
            .map(|_| rng.random_range(-l_bound..l_bound))
            .collect();
        let pi = fixtures::random_tabular_policy(mdp, &mut rng);
        let rows = mdp.layer_size(fit) * mdp.num_actions();
        let mut x_mat = DMatrix::zeros(rows, mdp.feature_dim());
        let mut y = DVector::zeros(rows);
        let mut r = 0;
        for x in 0..mdp.layer_size(fit) {
            for a in 0..mdp.num_actions() {
                x_mat.row_mut(r).copy_from(&mdp.feature(fit, x, a).transpose());
                let paths = exact_paths_conditional(mdp, &pi, fit, x, a, DEFAULT_PATH_CAP)?;
                let mut val = 0.0;
                for (w, t) in &paths.paths {
                    let x_t = t.steps[target - fit].0;
                    if rgd_tables[target - 1][x_t] < gamma {
                        continue;
                    }
                    let mut skipped = true;
                    for k in fit + 1..target {
                        if rgd_tables[k - 1][t.steps[k - fit].0] >= gamma {
                            skipped = false;
                            break;
                        }
                    }
                    if skipped {
                        val += w * f[x_t];
                    }
                }
                y[r] = val;
                r += 1;
            }
        }
        let (theta, resid) = least_squares_min_norm(&x_mat, &y)?;
        worst_resid = worst_resid.max(resid);
        worst_norm_ratio = worst_norm_ratio.max(theta.norm() / (4.0 * dt * h_f * h_f * l_bound / gamma));
    }
    Ok((worst_resid, worst_norm_ratio))
}

/// Run every structural check against one MDP.
pub fn verify_suite(mdp: &LayeredMdp, opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut ctx = Ctx { checks: Vec::new() };
    let d = mdp.feature_dim();
    let tol = 1e-8;

    // Realizability first; almost everything downstream needs Theta.
    let sets = enumerate_theta_all(mdp, REALIZABLE_TOL, DEFAULT_POLICY_CAP)?;
    let worst_residual = sets.iter().map(|s| s.residual).fold(0.0, f64::max);
    let max_norm = sets.iter().map(|s| s.max_theta_norm).fold(0.0, f64::max);
    let realizable = sets.iter().all(|s| s.realizable)
        && max_norm <= mdp.horizon() as f64 + 1e-9;
    ctx.push(
        "realizability.residual",
        realizable,
        format!("max residual {worst_residual:.3e}, max theta norm {max_norm:.3}"),
    );

    let dependent = [
        "lemma2_1.range_sandwich",
        "def2_2.design_bound",
        "lemma2_4.gated_admissible",
        "lemma2_2.admissible_realizability",
        "lemma2_5.skip_product_linear",
        "def2_5.precond_validity",
        "lemma2_6.theta_ellipsoid",
        "lemma2_7.design_range_proxy",
        "lemma2_8.extend_budget",
        "psdp.elliptical_potential",
        "psdp.design_domination",
        "psdp.state_invariants",
    ];
    if !realizable {
        for id in dependent {
            ctx.skip(id, "skipped: realizability failed");
        }
    } else {
        let designs: Vec<ApproxDesign> = sets
            .iter()
            .map(design_for_theta)
            .collect::<Result<_>>()?;

        // Range sandwich.
        let mut sandwich_excess = 0.0f64;
        let sqrt2d = (2.0 * d as f64).sqrt();
        for set in &sets {
            for x in 0..mdp.layer_size(set.layer) {
                let rg = realizability::range(mdp, set, x);
                let rgd = realizability::design_range(mdp, set, &designs[set.layer - 1], x);
                sandwich_excess = sandwich_excess.max(rgd - rg);
                sandwich_excess = sandwich_excess.max(rg - sqrt2d * rgd);
            }
        }
        ctx.push(
            "lemma2_1.range_sandwich",
            sandwich_excess <= tol,
            format!("max excess {sandwich_excess:.3e} (tol {tol:.0e})"),
        );

        // Design bound and support size.
        let mut sup = 0.0f64;
        let mut max_support = 0usize;
        for des in &designs {
            sup = sup.max(des.sup_norm2);
            max_support = max_support.max(des.support.len());
        }
        let dt = d_tilde(d);
        ctx.push(
            "def2_2.design_bound",
            sup <= 2.0 * d as f64 + 1e-6 && max_support <= dt,
            format!("sup norm^2 {sup:.4} <= 2d = {}, support {max_support} <= {dt}", 2 * d),
        );

        // Gated admissibility.
        let mut rng = ChaCha12Rng::seed_from_u64(opts.seed ^ 0xad);
        let mut gated_ok = true;
        for set in &sets {
            let n = mdp.layer_size(set.layer);
            let gamma = 0.01;
            let l_bound = 2.0;
            let profile = realizability::range_profile(
                mdp,
                set,
                &designs[set.layer - 1],
                gamma,
                gamma / l_bound,
            );
            for _ in 0..opts.draws {
                let f: Vec<f64> = (0..n)
                    .map(|x| {
                        if profile.rg_design[x] >= gamma {
                            rng.random_range(-l_bound..l_bound)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                gated_ok &= realizability::check_admissible(&f, gamma / l_bound, &profile);
            }
        }
        ctx.push(
            "lemma2_4.gated_admissible",
            gated_ok,
            format!("{} random gated functions per layer", opts.draws),
        );

        // Linear representation of admissible conditional expectations.
        let resid_tol = if is_one_hot(mdp) { 1e-9 } else { 1e-6 };
        if mdp.horizon() >= 2 {
            let (resid, norm_ratio) =
                admissible_realizability_check(mdp, &sets, &designs, opts.draws, opts.seed ^ 1)?;
            ctx.push(
                "lemma2_2.admissible_realizability",
                resid <= resid_tol && norm_ratio <= 1.0 + 1e-9,
                format!("max residual {resid:.3e} (tol {resid_tol:.0e}), ball ratio {norm_ratio:.3}"),
            );
            let (resid, norm_ratio) =
                skip_product_realizability_check(mdp, &sets, &designs, opts.draws, opts.seed ^ 2)?;
            ctx.push(
                "lemma2_5.skip_product_linear",
                resid <= resid_tol && norm_ratio <= 1.0 + 1e-9,
                format!("max residual {resid:.3e} (tol {resid_tol:.0e}), ball ratio {norm_ratio:.3}"),
            );
        } else {
            ctx.skip("lemma2_2.admissible_realizability", "horizon 1: no earlier layer");
            ctx.skip("lemma2_5.skip_product_linear", "horizon 1: no earlier layer");
        }

        // Probe run: preconditioner validity, budgets, potentials, audits.
        let mut params = Params::desk();
        params.t_iters = opts.probe_iters;
        params.audit = true;
        let mut oracle = CscOracle::cells(None);
        match psdp::run(mdp, &params, &mut oracle, opts.seed ^ 3) {
            Err(e) => {
                for id in &dependent[5..] {
                    ctx.skip(id, &format!("probe run failed: {e}"));
                }
            }
            Ok((_, metrics)) => {
                // Rebuild each layer's preconditioner witness by witness and
                // validate every intermediate state.
                let mut all_valid = true;
                let mut ellipsoid_margin = f64::INFINITY;
                let mut proxy_excess = 0.0f64;
                for (h, ws) in metrics.summary.precond_witnesses.iter().enumerate() {
                    let layer = h + 1;
                    let mut p =
                        Preconditioner::initial(layer, mdp.horizon(), d, params.nu)?;
                    let mut states = vec![p.clone()];
                    for w in ws {
                        p = p.extend(&DVector::from_vec(w.clone()))?;
                        states.push(p.clone());
                    }
                    for state in &states {
                        let report = state.validate(&sets[layer - 1]);
                        all_valid &= report.valid;
                        for cond in &report.conditions {
                            if cond.name == "theta_ellipsoid" {
                                ellipsoid_margin = ellipsoid_margin.min(cond.margin);
                            }
                        }
                        // Design-range proxy at every state of the layer.
                        let d_nu = state.d_nu().sqrt();
                        for x in 0..mdp.layer_size(layer) {
                            let rgd = realizability::design_range(
                                mdp,
                                &sets[layer - 1],
                                &designs[layer - 1],
                                x,
                            );
                            let proxy =
                                d_nu * varphi(mdp, layer, x, state.w().matrix()).norm();
                            proxy_excess = proxy_excess.max(rgd - proxy);
                        }
                    }
                }
                ctx.push(
                    "def2_5.precond_validity",
                    all_valid,
                    "every preconditioner state produced by the probe run validates".into(),
                );
                ctx.push(
                    "lemma2_6.theta_ellipsoid",
                    ellipsoid_margin >= -tol,
                    format!("min margin {ellipsoid_margin:.3}"),
                );
                ctx.push(
                    "lemma2_7.design_range_proxy",
                    proxy_excess <= tol,
                    format!("max excess {proxy_excess:.3e}"),
                );
                let budget = crate::precond::extend_budget(d, mdp.horizon(), params.nu);
                let budget_ok = metrics
                    .summary
                    .extends_per_layer
                    .iter()
                    .all(|&c| (c as f64) <= budget);
                ctx.push(
                    "lemma2_8.extend_budget",
                    budget_ok,
                    format!("extends per layer {:?}", metrics.summary.extends_per_layer),
                );
                let mut potential_ok = true;
                let mut detail = String::new();
                for rec in &metrics.summary.elliptical {
                    potential_ok &= rec.potential <= rec.bound;
                    detail.push_str(&format!(
                        "layer {}: {:.3} <= {:.3}; ",
                        rec.layer, rec.potential, rec.bound
                    ));
                }
                ctx.push("psdp.elliptical_potential", potential_ok, detail);
                let mut dom_margin = f64::INFINITY;
                for it in &metrics.iterations {
                    for layer in &it.layers {
                        if let Some(m) = layer.domination_margin {
                            dom_margin = dom_margin.min(m);
                        }
                    }
                }
                ctx.push(
                    "psdp.design_domination",
                    dom_margin >= -1e-9,
                    format!("min margin {dom_margin:.4}"),
                );
                // The run itself enforces pair-set growth and rank-one design
                // updates; reaching this point means they held.
                ctx.push(
                    "psdp.state_invariants",
                    true,
                    "pair growth and rank-one design updates enforced in-run".into(),
                );
            }
        }
    }

    // Identity checks need no realizability.
    let pd = performance_difference_violation(mdp, opts.draws, opts.seed ^ 4)?;
    ctx.push(
        "lemma_m6.performance_difference",
        pd <= 1e-9,
        format!("max violation {pd:.3e} over {} draws", opts.draws),
    );
    let ss = skip_step_violation(mdp, opts.draws, opts.seed ^ 5)?;
    ctx.push(
        "lemma_m7.skip_step",
        ss <= 1e-9,
        format!("max violation {ss:.3e} over {} draws", opts.draws),
    );

    // Tower property of the DP tables.
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed ^ 6);
    let mut tower = 0.0f64;
    for _ in 0..5 {
        let pi = fixtures::random_tabular_policy(mdp, &mut rng);
        let table = dp::q_values_dp(mdp, &pi)?;
        for h in 1..mdp.horizon() {
            for x in 0..mdp.layer_size(h) {
                for a in 0..mdp.num_actions() {
                    let mut expected = mdp.reward(h, x, a);
                    for (x2, &p) in mdp.transition(h, x, a).iter().enumerate() {
                        expected += p * table.v(h + 1, x2);
                    }
                    tower = tower.max((table.q(h, x, a) - expected).abs());
                }
            }
        }
    }
    ctx.push(
        "dp.tower_property",
        tower <= 1e-12,
        format!("max violation {tower:.3e}"),
    );

    // Cell enumeration soundness/completeness on small random families.
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed ^ 7);
    let mut cells_ok = true;
    for _ in 0..10 {
        let k = rng.random_range(2..=4usize);
        let n = rng.random_range(2..=6usize);
        let vectors: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0f64)))
            .collect();
        let cells = bfs_sign_regions(&vectors, DEFAULT_CELL_CAP, DEFAULT_STRICT_TOL)?;
        for cell in &cells.cells {
            cells_ok &= CellSet::signs_of_representative(&vectors, &cell.representative, 1e-12)
                == cell.signs;
        }
        for _ in 0..2_000 {
            let theta = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0f64));
            cells_ok &= cells.contains_signs(&CellSet::signs_of(&vectors, &theta));
        }
    }
    ctx.push(
        "csc.cell_soundness_completeness",
        cells_ok,
        "10 random halfspace families, 2000 sampled tuples each".into(),
    );

    // Backend coherence: the reported argmin objective equals the acted
    // objective of the returned policy on random instances.
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed ^ 8);
    let mut oracle = CscOracle::cells(None);
    let mut coherent = true;
    for _ in 0..5 {
        let layer = rng.random_range(1..=mdp.horizon());
        let items: Vec<CscItem> = (0..6)
            .map(|_| CscItem {
                cost: rng.random_range(-1.0..1.0),
                state: rng.random_range(0..mdp.layer_size(layer)),
                action: rng.random_range(0..mdp.num_actions()),
            })
            .collect();
        let instance = CscInstance { layer, items };
        let sol = oracle.argmin(mdp, &instance)?;
        let acted = instance.objective(mdp, &sol.policy)?;
        coherent &= (acted - sol.objective).abs() <= 1e-9;
    }
    ctx.push(
        "csc.backend_agreement",
        coherent,
        "oracle objective equals acted objective on random instances".into(),
    );

    // Determinism of sampled runs.
    let mut params = Params::desk();
    params.t_iters = 2;
    params.mode = crate::params::Mode::Sampled;
    params.n_traj = 64.0;
    let run_twice = || -> Result<String> {
        let mut oracle = CscOracle::cells(None);
        let (_, m) = psdp::run(mdp, &params, &mut oracle, opts.seed ^ 9)?;
        m.to_jsonl()
    };
    match (run_twice(), run_twice()) {
        (Ok(a), Ok(b)) => ctx.push(
            "determinism.bit_exact",
            a == b,
            "two sampled runs with one seed produce identical logs".into(),
        ),
        (Err(e), _) | (_, Err(e)) => {
            ctx.skip("determinism.bit_exact", &format!("run failed: {e}"))
        }
    }

    let all_passed = ctx.checks.iter().all(|c| c.status != Status::Fail);
    Ok(VerifyReport {
        schema: "opsdp.verify.v1".into(),
        checks: ctx.checks,
        all_passed,
    })
}
