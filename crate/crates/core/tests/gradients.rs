#[path = "support/gradcheck.rs"]
mod gradcheck;

fn assert_covers_every_learnable_tensor(report: &gradcheck::Report) {
    let model = feddis_core::model::DualBranchModel::init(gradcheck::desk_config(), 0, 1).unwrap();
    let expected: Vec<&str> = model
        .params()
        .names()
        .filter(|n| !n.starts_with("prototype.") && *n != "personal.bank")
        .collect();
    let mut got: Vec<&str> = report.tensors.iter().map(String::as_str).collect();
    got.sort_unstable();
    assert_eq!(got, expected);
}

#[test]
fn objective_gradients_match_finite_differences() {
    let report = gradcheck::check(18, None);
    println!("{} scalars, max relative error {:e} at {}", report.scalars, report.max_rel_error, report.worst);
    println!("CLUB estimate at the checked point: {}", report.mi);
    assert!(report.mi > 0.0, "decoupling term inactive at the checked point");
    assert_covers_every_learnable_tensor(&report);
    assert!(report.max_rel_error < 1e-4, "{}", report.worst);
}

#[test]
fn proximal_objective_gradients_match_finite_differences() {
    let report = gradcheck::check(23, Some(0.5));
    println!("{} scalars, max relative error {:e} at {}", report.scalars, report.max_rel_error, report.worst);
    assert!(report.mi > 0.0, "decoupling term inactive at the checked point");
    assert!(report.max_rel_error < 1e-4, "{}", report.worst);
}

