use cfn_core::gradcheck::{default_cases, run_case, run_suite, CorruptedSigmoid, TOLERANCE};

#[test]
fn every_operator_matches_central_differences() {
    let reports = run_suite(&default_cases(), 10).unwrap();
    for r in &reports {
        println!("{:<18} max rel err {:.3e} (seed {})  {:.2}s", r.name, r.max_rel_error, r.worst_seed, r.seconds);
    }
    for r in &reports {
        assert!(r.max_rel_error < TOLERANCE, "{} failed: {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn required_operators_are_covered() {
    let names: Vec<&str> = default_cases().iter().map(|c| c.name()).collect();
    for op in [
        "confidence_head",
        "compute_grid",
        "grid_sample",
        "grid_unpool",
        "attention_mask",
        "calibrate",
        "scale_shift",
        "fuse",
        "detection_loss",
    ] {
        assert!(names.contains(&op), "{op} missing");
    }
}

#[test]
fn corrupted_backward_fails_by_name() {
    let r = run_case(&CorruptedSigmoid, 10).unwrap();
    assert_eq!(r.name, "corrupted_sigmoid");
    assert!(!r.passed());
}
