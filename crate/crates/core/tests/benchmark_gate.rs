//! The benchmark gate built from the design-support parameters is exactly
//! the design-range-gated mixture.

use nalgebra::DVector;
use opsdp_core::policy::{ActionSelection, Policy};
use opsdp_core::realizability::{
    design_for_theta, design_range, enumerate_theta_all, DEFAULT_POLICY_CAP, REALIZABLE_TOL,
};
use opsdp_core::fixtures;

#[test]
fn gate_from_design_support_matches_design_range() {
    for (name, mdp) in [("T1", fixtures::t1()), ("L1", fixtures::l1())] {
        let sets = enumerate_theta_all(&mdp, REALIZABLE_TOL, DEFAULT_POLICY_CAP).unwrap();
        for set in &sets {
            let h = set.layer;
            let design = design_for_theta(set).unwrap();
            let gates: Vec<DVector<f64>> = design
                .support
                .iter()
                .map(|&(i, _)| set.thetas[i].clone())
                .collect();
            for &gamma in &[1e-4, 0.01, 0.05] {
                let d = mdp.feature_dim();
                let on = Policy::linear_argmax(DVector::from_element(d, 1e-3));
                let off = Policy::linear_argmax(-DVector::from_element(d, 1e-3));
                let pi = Policy::gated_benchmark(gates.clone(), gamma, on.clone(), off.clone())
                    .unwrap();
                for x in 0..mdp.layer_size(h) {
                    let expected_branch = design_range(&mdp, set, &design, x) >= gamma;
                    let got = pi.act(&mdp, h, x).unwrap();
                    let want = if expected_branch {
                        on.act(&mdp, h, x).unwrap()
                    } else {
                        off.act(&mdp, h, x).unwrap()
                    };
                    assert_eq!(
                        got, want,
                        "{name} layer {h} state {x} gamma {gamma}: gate disagrees with design range"
                    );
                    let _ = matches!(got, ActionSelection::Action(_));
                }
            }
        }
    }
}
