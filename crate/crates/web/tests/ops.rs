use xder_web::{implant, partition_view, train};

#[test]
fn implant_caps_the_future_past_max() {
    // entry from task 0, current task 1, two classes per task
    let v = implant(&[4.0, 0.0, 9.0, 9.0], &[0.0, 0.0, 8.0, 4.0], 0, 0, 1, 2, 0.5).unwrap();
    assert_eq!(v.logits, [4.0, 0.0, 2.0, 1.0]);
    assert!(v.updated);
    assert_eq!(v.cap, 2.0);
    assert!(implant(&[1.0], &[1.0, 2.0], 0, 0, 1, 1, 0.5).is_err());
}

#[test]
fn partition_without_future_past() {
    let v = partition_view(0, 3, 2, 0).unwrap();
    assert_eq!(v.roles, ["present", "present", "future", "future", "future", "future"]);
    assert!(partition_view(3, 3, 2, 0).is_err());
}

#[test]
fn short_run_fills_the_lower_triangle() {
    let v = train("er", 3, 1, 0).unwrap();
    assert_eq!(v.matrix.len(), 3);
    assert!(v.matrix[0].iter().all(Option::is_some));
    assert!(v.matrix[2][0].is_none());
    assert!((0.0..=1.0).contains(&v.faa));
    assert!(train("nope", 3, 1, 0).is_err());
    assert!(train("er", 9, 1, 0).is_err());
}
