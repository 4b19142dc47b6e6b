use opsdp_core::fixtures;
use opsdp_core::verify::{verify_suite, VerifyOptions};

#[test]
fn suite_passes_on_realizable_fixtures() {
    for (name, mdp) in [
        ("T1", fixtures::t1()),
        ("C3", fixtures::c3()),
        ("L1", fixtures::l1()),
    ] {
        let report = verify_suite(&mdp, &VerifyOptions::default()).unwrap();
        print!("== {name}\n{}", report.render());
        assert!(report.all_passed, "{name} failed:\n{}", report.render());
    }
}
