mod common;

#[test]
fn moved_keys_vanish_from_secondary_before_any_merge() {
    let o = common::criterion_6();
    assert!(o.passed, "{}", o.detail);
}
