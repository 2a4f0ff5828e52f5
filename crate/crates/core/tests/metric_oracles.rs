//! Metric values checked against closed forms computed by hand.

use guidesim::metrics::{ade_fde, js_distance, median_bandwidth, mmd};

#[test]
fn js_distance_closed_forms() {
    assert_eq!(js_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    assert_eq!(js_distance(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    // P = (1/2, 1/2), Q = (1, 0), M = (3/4, 1/4)
    let kl_pm = 0.5 * (0.5f64 / 0.75).log2() + 0.5 * (0.5f64 / 0.25).log2();
    let kl_qm = (1.0f64 / 0.75).log2();
    let expected = (0.5 * (kl_pm + kl_qm)).sqrt();
    assert!((js_distance(&[0.5, 0.5], &[1.0, 0.0]) - expected).abs() < 1e-12);
    assert!((expected - 0.557_93).abs() < 1e-5);
}

#[test]
fn mmd_closed_form() {
    let (x, y) = ([0.0, 1.0], [2.0, 3.0]);
    // pooled distances 1,1,1,2,2,3: median 1.5
    assert_eq!(median_bandwidth(&x, &y), Some(1.5));
    let k = |d: f64| (-d * d / (2.0 * 1.5 * 1.5)).exp();
    let expected = 2.0 * k(1.0) - (k(1.0) + 2.0 * k(2.0) + k(3.0)) / 2.0;
    assert!((mmd(&x, &y).unwrap() - expected).abs() < 1e-12);
    assert_eq!(mmd(&x, &x).unwrap(), 0.0);
    assert!(mmd(&[1.0], &x).is_err());
}

#[test]
fn ade_fde_hand_values() {
    let gt = vec![vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]];
    let sim = vec![vec![[0.0, 0.0], [1.0, 3.0], [2.0, 6.0]]];
    assert_eq!(ade_fde(&sim, &gt).unwrap(), (3.0, 6.0));
    assert_eq!(ade_fde(&gt, &gt).unwrap(), (0.0, 0.0));
}
