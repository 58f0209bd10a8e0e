use skattn::gradsuite::{run_suite, suite_ops};

#[test]
fn every_op_passes_on_five_random_shapes() {
    let entries = run_suite(11, 5).unwrap();
    assert_eq!(entries.len(), 5 * suite_ops().len());
    let failed: Vec<_> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| format!("{} {} max_rel={:e}", e.op, e.shape, e.report.max_rel_err()))
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
