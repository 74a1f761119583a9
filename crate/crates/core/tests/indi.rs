mod common;

use common::{rate_loop, tail_rms, torque_bias as bias};
use slung::indi::inner_log_csv;
use slung::Vec3;

#[test]
fn constant_torque_is_rejected_at_steady_state() {
    let errs = rate_loop(bias(0.05), true, |_| Vec3::zeros(), 4.0, None);
    let last = errs.last().unwrap().norm();
    assert!(last < 0.02, "INDI steady-state rate error {last}");
    // The model-based loop without the incremental term keeps an offset of
    // about bias / (J K).
    let errs = rate_loop(bias(0.05), false, |_| Vec3::zeros(), 4.0, None);
    assert!(errs.last().unwrap().norm() > 0.1);
}

#[test]
fn tracking_error_does_not_scale_with_bias() {
    let reference = |t: f64| Vec3::new(0.5 * (2.0 * std::f64::consts::PI * 0.5 * t).sin(), 0.3 * (2.0 * std::f64::consts::PI * 0.3 * t).cos(), 0.0);
    let e1 = tail_rms(&rate_loop(bias(0.05), true, reference, 8.0, None), 4.0);
    let e2 = tail_rms(&rate_loop(bias(0.10), true, reference, 8.0, None), 4.0);
    let e0 = tail_rms(&rate_loop(Vec3::zeros(), true, reference, 8.0, None), 4.0);
    assert!((e2 - e1).abs() < 0.1 * e1, "bias 0.05: {e1}, bias 0.10: {e2}");
    assert!((e1 - e0).abs() < 0.1 * e0, "no bias: {e0}, bias 0.05: {e1}");
}

#[test]
fn inner_log_has_one_row_per_update() {
    let mut log = Vec::new();
    rate_loop(bias(0.05), true, |_| Vec3::new(0.2, 0.0, 0.0), 0.5, Some(&mut log));
    let csv = inner_log_csv(&log);
    assert_eq!(csv.lines().count(), 501);
    assert!(csv.starts_with("stamp,wr_x"));
    assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 15);
}
