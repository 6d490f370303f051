mod common;

#[test]
fn oracle_suite_passes() {
    let out = common::oracle_suite();
    for o in &out {
        assert!(o.passed, "{}: {}", o.name, o.detail);
    }
}
