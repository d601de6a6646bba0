use dualbranch::harness::gradsuite::{run_gradcheck, target_names, Scope, MIN_TRIALS};
use dualbranch::tensor::inject_sigmoid_fault;

#[test]
fn clean_build_passes_every_target() {
    let report = run_gradcheck(&Scope::ALL, MIN_TRIALS, 0).unwrap();
    print!("{}", report.to_table());
    let failures: Vec<_> = report.failures().map(|r| r.target.clone()).collect();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn report_has_one_row_per_target() {
    let report = run_gradcheck(&[Scope::Losses], 1, 3).unwrap();
    let names: Vec<_> = report.rows.iter().map(|r| r.target.as_str()).collect();
    assert_eq!(names, target_names(Scope::Losses));
    assert_eq!(names, ["focal", "supcon", "f_center", "fsc_total"]);
    assert!(report.rows.iter().all(|r| r.trials == 1));
}

#[test]
fn corrupted_sigmoid_derivative_is_caught() {
    inject_sigmoid_fault(true);
    let report = run_gradcheck(&[Scope::Ops], 3, 0);
    inject_sigmoid_fault(false);
    let report = report.unwrap();
    let failed: Vec<_> = report.failures().map(|r| r.target.as_str()).collect();
    assert!(failed.contains(&"sigmoid"), "{failed:?}");
    assert!(!report.passed());
}
