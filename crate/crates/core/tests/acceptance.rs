//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//! The end-to-end runs are shared across criteria through a lazily
//! initialized state.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use opsdp_core::csc::cells::{bfs_sign_regions, cell_count_bound_ln, DEFAULT_CELL_CAP};
use opsdp_core::csc::lp::DEFAULT_STRICT_TOL;
use opsdp_core::csc::{CscInstance, CscItem, CscOracle};
use opsdp_core::mdp::LayeredMdp;
use opsdp_core::metrics::RunMetrics;
use opsdp_core::params::{Mode, Params};
use opsdp_core::policy::Policy;
use opsdp_core::precond::Preconditioner;
use opsdp_core::realizability::{enumerate_theta_all, DEFAULT_POLICY_CAP, REALIZABLE_TOL};
use opsdp_core::verify::{
    performance_difference_violation, skip_step_violation, verify_suite, Status, VerifyOptions,
};
use opsdp_core::{dp, fixtures, psdp};

const EXACT_SECONDS_LIMIT: f64 = 60.0;
const SAMPLED_SEEDS: u64 = 20;
const SAMPLED_MIN_PASSES: usize = 18;

struct SharedRuns {
    /// (fixture, exact metrics, wall seconds).
    exact: Vec<(&'static str, RunMetrics, f64)>,
    /// (fixture, per-seed suboptimality target met, elliptical ok, calls ok).
    sampled: Vec<(&'static str, Vec<bool>, bool, bool)>,
}

fn shared() -> &'static SharedRuns {
    static STATE: OnceLock<SharedRuns> = OnceLock::new();
    STATE.get_or_init(|| {
        let mut exact = Vec::new();
        let mut sampled = Vec::new();
        for (name, mdp) in realizable_fixtures() {
            let params = Params::desk(); // T = 200, exact mode
            let mut oracle = CscOracle::cells(None);
            let start = Instant::now();
            let (_, metrics) = psdp::run(&mdp, &params, &mut oracle, 1).expect("exact run");
            exact.push((name, metrics, start.elapsed().as_secs_f64()));

            let mut sp = Params::desk();
            sp.mode = Mode::Sampled;
            sp.t_iters = 3;
            sp.n_traj = 2e4;
            let (_, j_star) = dp::optimal_policy(&mdp).expect("dp oracle");
            let threshold = 0.1 * mdp.horizon() as f64;
            let mut ok = Vec::new();
            let mut elliptical_ok = true;
            let mut calls_ok = true;
            for seed in 0..SAMPLED_SEEDS {
                let mut oracle = CscOracle::cells(None);
                let (_, m) = psdp::run(&mdp, &sp, &mut oracle, seed).expect("sampled run");
                ok.push(j_star - m.summary.j_returned <= threshold);
                elliptical_ok &= m
                    .summary
                    .elliptical
                    .iter()
                    .all(|rec| rec.potential <= rec.bound);
                calls_ok &= m.summary.csc_calls <= m.summary.csc_call_budget;
            }
            sampled.push((name, ok, elliptical_ok, calls_ok));
        }
        SharedRuns { exact, sampled }
    })
}

fn realizable_fixtures() -> Vec<(&'static str, LayeredMdp)> {
    vec![
        ("T1", fixtures::t1()),
        ("C3", fixtures::c3()),
        ("L1", fixtures::l1()),
    ]
}

#[test]
fn criterion_1_end_to_end_learning() {
    let state = shared();
    let mut pass = true;
    let mut detail = String::new();
    for (name, metrics, secs) in &state.exact {
        let h = metrics.header.horizon as f64;
        let sub = metrics.summary.suboptimality.expect("dp oracle available");
        let ok = sub <= 0.05 * h && *secs <= EXACT_SECONDS_LIMIT;
        pass &= ok;
        detail.push_str(&format!("{name}: exact sub {sub:.4} in {secs:.1}s; "));
    }
    for (name, ok, _, _) in &state.sampled {
        let passes = ok.iter().filter(|&&b| b).count();
        pass &= passes >= SAMPLED_MIN_PASSES;
        detail.push_str(&format!("{name}: sampled {passes}/{SAMPLED_SEEDS} seeds; "));
    }
    println!(
        "criterion 1 {}: end-to-end learning ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{detail}");
}

#[test]
fn criterion_2_structural_lemma_suite() {
    let mut pass = true;
    let mut detail = String::new();
    for (name, mdp) in realizable_fixtures() {
        let report = verify_suite(&mdp, &VerifyOptions::default()).expect("suite runs");
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| c.status == Status::Fail)
            .map(|c| c.id.as_str())
            .collect();
        pass &= report.all_passed;
        detail.push_str(&format!(
            "{name}: {} checks, failed: {failed:?}; ",
            report.checks.len()
        ));
    }
    // Every preconditioner produced by the criterion-1 runs validates.
    let state = shared();
    for ((name, mdp), (_, metrics, _)) in realizable_fixtures().iter().zip(&state.exact) {
        let sets = enumerate_theta_all(mdp, REALIZABLE_TOL, DEFAULT_POLICY_CAP).unwrap();
        for (h, ws) in metrics.summary.precond_witnesses.iter().enumerate() {
            let layer = h + 1;
            let mut p = Preconditioner::initial(
                layer,
                mdp.horizon(),
                mdp.feature_dim(),
                metrics.header.params.nu,
            )
            .unwrap();
            let mut valid = p.validate(&sets[layer - 1]).valid;
            for w in ws {
                p = p.extend(&DVector::from_vec(w.clone())).unwrap();
                valid &= p.validate(&sets[layer - 1]).valid;
            }
            pass &= valid;
            if !valid {
                detail.push_str(&format!("{name}: run preconditioner at layer {layer} invalid; "));
            }
        }
    }
    println!(
        "criterion 2 {}: structural lemma suite ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{detail}");
}

#[test]
fn criterion_3_exact_identities() {
    let mut pass = true;
    let mut detail = String::new();
    for (name, mdp) in realizable_fixtures() {
        let pd = performance_difference_violation(&mdp, 100, 31).unwrap();
        let ss = skip_step_violation(&mdp, 100, 37).unwrap();
        pass &= pd <= 1e-9 && ss <= 1e-9;
        detail.push_str(&format!("{name}: pd {pd:.2e}, skip {ss:.2e}; "));
    }
    println!(
        "criterion 3 {}: exact identities over 100 draws ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{detail}");
}

#[test]
fn criterion_4_elliptical_potential() {
    let state = shared();
    let mut pass = true;
    let mut detail = String::new();
    for (name, metrics, _) in &state.exact {
        for rec in &metrics.summary.elliptical {
            let ok = rec.potential <= rec.bound;
            pass &= ok;
            detail.push_str(&format!(
                "{name} layer {}: {:.2} <= {:.2}; ",
                rec.layer, rec.potential, rec.bound
            ));
        }
    }
    for (name, _, elliptical_ok, _) in &state.sampled {
        pass &= elliptical_ok;
        detail.push_str(&format!("{name}: sampled runs {elliptical_ok}; "));
    }
    println!(
        "criterion 4 {}: elliptical potential ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{detail}");
}

#[test]
fn criterion_5_cell_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(55);
    let mut pass = true;
    let mut families = 0usize;
    for _ in 0..50 {
        let k = rng.random_range(1..=4usize);
        let n = rng.random_range(k.max(1)..=8usize);
        let vectors: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0f64)))
            .collect();
        let cells = bfs_sign_regions(&vectors, DEFAULT_CELL_CAP, DEFAULT_STRICT_TOL).unwrap();
        families += 1;
        // Soundness.
        for cell in &cells.cells {
            let realized: Vec<bool> = vectors
                .iter()
                .map(|v| v.dot(&cell.representative) >= -1e-12)
                .collect();
            pass &= realized == cell.signs;
        }
        // Completeness against sampled sign tuples, zero misses.
        let masks: std::collections::HashSet<u32> = cells
            .cells
            .iter()
            .map(|c| {
                c.signs
                    .iter()
                    .enumerate()
                    .fold(0u32, |m, (i, &s)| if s { m | (1 << i) } else { m })
            })
            .collect();
        let raw: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().cloned().collect()).collect();
        let mut theta = vec![0.0f64; k];
        let mut state: u64 = rng.random();
        let mut next_unit = move || {
            state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = state;
            z ^= z >> 30;
            z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z ^= z >> 27;
            z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100_000 {
            for t in theta.iter_mut() {
                *t = 2.0 * next_unit() - 1.0;
            }
            let mut mask = 0u32;
            for (i, v) in raw.iter().enumerate() {
                let mut dot = 0.0;
                for (a, b) in v.iter().zip(&theta) {
                    dot += a * b;
                }
                if dot >= 0.0 {
                    mask |= 1 << i;
                }
            }
            pass &= masks.contains(&mask);
        }
        // Count bound.
        pass &= (cells.cells.len() as f64).ln() <= cell_count_bound_ln(n, k) + 1e-12;
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs <= 10.0;
    println!(
        "criterion 5 {}: cell enumeration on {families} families in {secs:.2}s",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "elapsed {secs:.2}s");
}

fn random_flat_mdp(states: usize, actions: usize, d: usize, rng: &mut impl Rng) -> LayeredMdp {
    let features = vec![(0..states)
        .map(|_| {
            (0..actions)
                .map(|_| {
                    let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0f64));
                    let norm = v.norm().max(1e-9);
                    &v / norm * rng.random_range(0.2..1.0)
                })
                .collect()
        })
        .collect()];
    let rewards = vec![vec![vec![0.5; actions]; states]];
    let mut init = vec![1.0 / states as f64; states];
    let partial: f64 = init[..states - 1].iter().sum();
    init[states - 1] = 1.0 - partial;
    LayeredMdp::new(1, vec![states], actions, d, init, vec![], rewards, features).unwrap()
}

fn ball_vector(d: usize, r: f64, rng: &mut impl Rng) -> DVector<f64> {
    let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0f64));
    let n = v.norm().max(1e-9);
    &v / n * rng.random_range(0.0..r)
}

fn random_benchmark_policy(d: usize, h: f64, g: usize, rng: &mut impl Rng) -> Policy {
    let gates: Vec<DVector<f64>> = (0..g).map(|_| ball_vector(d, h, rng)).collect();
    let gamma = rng.random_range(1e-6..2.0 * h);
    let on = Policy::linear_argmax(ball_vector(d, h, rng));
    let off = Policy::linear_argmax(ball_vector(d, h, rng));
    Policy::gated_benchmark(gates, gamma, on, off).unwrap()
}

#[test]
fn criterion_6_csc_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(66);
    let mut pass = true;
    let mut beaten = 0usize;
    let mut mismatch = 0usize;
    for _ in 0..30 {
        let states = rng.random_range(2..=10usize);
        let actions = rng.random_range(2..=3usize);
        let mdp = random_flat_mdp(states, actions, 2, &mut rng);
        let n = rng.random_range(2..=10usize);
        let items: Vec<CscItem> = (0..n)
            .map(|_| CscItem {
                cost: rng.random_range(-1.0..1.0),
                state: rng.random_range(0..states),
                action: rng.random_range(0..actions),
            })
            .collect();
        let instance = CscInstance { layer: 1, items };
        let mut oracle = CscOracle::cells(None);
        let sol = oracle.argmin(&mdp, &instance).unwrap();
        let sol_acted = instance.objective(&mdp, &sol.policy).unwrap();

        // Exhaustive scan over the same candidate set, evaluated by acting
        // each policy.
        let instance_states: Vec<usize> = instance.items.iter().map(|it| it.state).collect();
        let candidates = oracle
            .candidate_policies(&mdp, 1, &instance_states, None)
            .unwrap();
        let exhaustive = candidates
            .iter()
            .map(|p| instance.objective(&mdp, p).unwrap())
            .fold(f64::INFINITY, f64::min);
        if sol_acted != exhaustive {
            mismatch += 1;
        }

        // Dominates random benchmark policies.
        for _ in 0..10_000 {
            let p = random_benchmark_policy(2, mdp.horizon() as f64, 2, &mut rng);
            let obj = instance.objective(&mdp, &p).unwrap();
            if sol_acted > obj + 1e-12 {
                beaten += 1;
            }
        }
    }
    pass &= beaten == 0 && mismatch == 0;
    println!(
        "criterion 6 {}: csc oracle (beaten {beaten}, exhaustive mismatches {mismatch})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn criterion_7_statistical_contracts() {
    // Policy-evaluation deviation bound.
    let mdp = fixtures::t1();
    let policy = Policy::Uniform;
    let j = dp::policy_value(&mdp, &policy).unwrap();
    let n = 100usize;
    let delta = 0.05f64;
    let bound = mdp.horizon() as f64 * (2.0 * (1.0 / delta).ln() / n as f64).sqrt();
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let mut covered = 0usize;
    let trials = 200usize;
    for _ in 0..trials {
        let j_hat = psdp::evaluate(&mdp, &policy, n, &mut rng).unwrap();
        if (j_hat - j).abs() <= bound {
            covered += 1;
        }
    }
    let coverage = covered as f64 / trials as f64;
    let coverage_ok = coverage >= 0.93;

    // Sampled estimators converge at the Monte-Carlo rate: quadrupling the
    // trajectory count halves the value-fit error, within factor 1.5.
    let exact_theta = fit_theta(&mdp, Mode::Exact, 0.0, 0);
    let reps = 24u64;
    let mut err_small = 0.0;
    let mut err_big = 0.0;
    for seed in 0..reps {
        err_small += (fit_theta(&mdp, Mode::Sampled, 500.0, seed) - &exact_theta).norm();
        err_big += (fit_theta(&mdp, Mode::Sampled, 2000.0, seed + 1000) - &exact_theta).norm();
    }
    let ratio = err_small / err_big;
    let rate_ok = (2.0 / 1.5..=2.0 * 1.5).contains(&ratio);

    let pass = coverage_ok && rate_ok;
    println!(
        "criterion 7 {}: statistical contracts (coverage {coverage:.3} >= 0.93, error ratio {ratio:.2} in [1.33, 3])",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "coverage {coverage}, ratio {ratio}");
}

fn fit_theta(mdp: &LayeredMdp, mode: Mode, n_traj: f64, seed: u64) -> DVector<f64> {
    let mut params = Params::desk();
    params.mode = mode;
    if n_traj > 0.0 {
        params.n_traj = n_traj;
    }
    let d = mdp.feature_dim();
    let psi = vec![
        (Arc::new(Policy::Uniform) as Arc<Policy>, DVector::zeros(d)),
        (
            Arc::new(Policy::Tabular {
                actions: vec![vec![1, 0], vec![0, 1]],
            }) as Arc<Policy>,
            DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        ),
    ];
    let mut pi_hat: Vec<Option<Arc<Policy>>> = vec![None; mdp.horizon() + 1];
    pi_hat[2] = Some(Arc::new(Policy::linear_argmax(DVector::zeros(d))));
    let u_mats: Vec<nalgebra::DMatrix<f64>> = (0..=mdp.horizon())
        .map(|_| nalgebra::DMatrix::zeros(d, d))
        .collect();
    let preconds: Vec<Preconditioner> = (0..=mdp.horizon())
        .map(|h| Preconditioner::initial(h, mdp.horizon(), d, params.nu).unwrap())
        .collect();
    let mut oracle = CscOracle::cells(None);
    let out = psdp::fit_opt_value(
        &psdp::FitInputs {
            mdp,
            params: &params,
            h: 1,
            psi_prev: &psi,
            pi_hat: &pi_hat,
            u_mats: &u_mats,
            preconds: &preconds,
            seed,
            iteration: 1,
        },
        &mut oracle,
    )
    .unwrap();
    out.theta_hat
}

#[test]
fn criterion_8_accounting_and_reproducibility() {
    let state = shared();
    let mut pass = true;
    let mut detail = String::new();
    for (name, metrics, _) in &state.exact {
        let ok = metrics.summary.csc_calls <= metrics.summary.csc_call_budget;
        pass &= ok;
        detail.push_str(&format!(
            "{name}: {} calls <= {}; ",
            metrics.summary.csc_calls, metrics.summary.csc_call_budget
        ));
    }
    for (name, _, _, calls_ok) in &state.sampled {
        pass &= calls_ok;
        detail.push_str(&format!("{name}: sampled budget {calls_ok}; "));
    }
    // Bit-exact reproduction in both modes.
    let mdp = fixtures::t1();
    let mut exact_params = Params::desk();
    exact_params.t_iters = 5;
    let mut sp = exact_params.clone();
    sp.mode = Mode::Sampled;
    sp.n_traj = 500.0;
    for (label, params) in [("exact", exact_params), ("sampled", sp)] {
        let run = |seed: u64| {
            let mut oracle = CscOracle::cells(None);
            let (_, m) = psdp::run(&mdp, &params, &mut oracle, seed).unwrap();
            m.to_jsonl().unwrap()
        };
        let same = run(9) == run(9);
        pass &= same;
        detail.push_str(&format!("{label} reproducible {same}; "));
    }
    println!(
        "criterion 8 {}: accounting and reproducibility ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{detail}");
}
