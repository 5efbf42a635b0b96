use std::time::Instant;

use hvpr::gradsuite::{
    broken_gradient_fixture, registry, run_gradcheck, suite_options, SuiteShapes,
};

#[test]
fn every_registered_op_passes() {
    let start = Instant::now();
    let reports = run_gradcheck(11, &SuiteShapes::default(), &suite_options()).unwrap();
    assert_eq!(reports.len(), registry().len());
    for r in &reports {
        eprintln!(
            "{:<26} rel {:.2e} abs {:.2e}",
            r.op_name, r.max_rel_error, r.max_abs_error
        );
    }
    let failed: Vec<_> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| &r.op_name)
        .collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
    eprintln!("suite took {:?}", start.elapsed());
}

#[test]
fn broken_gradient_is_caught() {
    let r = broken_gradient_fixture(&suite_options()).unwrap();
    assert!(!r.passed);
    assert!(r.max_rel_error > 0.4, "{r:?}");
}
