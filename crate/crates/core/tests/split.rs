mod common;

#[test]
fn split_properties_over_200_seeds() {
    let o = common::criterion_5();
    assert!(o.passed, "{}", o.detail);
}

#[test]
fn single_seed_is_reproducible() {
    assert_eq!(common::split_case(7), common::split_case(7));
}
