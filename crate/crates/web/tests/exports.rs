use errdiag_web::{chain_run, diagnose_series, optimize_run, CHAIN_COLS, DIAGNOSE_COLS, OPTIMIZE_COLS};

#[test]
fn noise_closes_the_gate_more_than_a_flat_curve() {
    let noisy: Vec<f64> = (0..300).map(|t| 1.0 + if t % 2 == 0 { 0.3 } else { -0.3 }).collect();
    let out = diagnose_series(&noisy, 2.0, 2.0).unwrap();
    let gate = out[out.len() - 1];
    assert!(gate < 1.0 && gate > 0.0);
    assert_eq!(out.len(), 300 * DIAGNOSE_COLS);
}

#[test]
fn bad_input_is_an_error_not_a_panic() {
    assert!(diagnose_series(&[1.0, f64::NAN], 2.0, 2.0).is_err());
    assert!(optimize_run(0, 10, -1.0, 0.0, 0, 0).is_err());
}

#[test]
fn runs_repeat_exactly() {
    assert_eq!(optimize_run(2, 200, 0.3, 0.1, 4, 9).unwrap(), optimize_run(2, 200, 0.3, 0.1, 4, 9).unwrap());
    let a = chain_run(50, 0.5, 20, 3).unwrap();
    assert_eq!(a, chain_run(50, 0.5, 20, 3).unwrap());
    assert_eq!(a.len(), 50 * CHAIN_COLS);
    assert_eq!(optimize_run(1, 5, 0.1, 0.0, 0, 0).unwrap().len(), 5 * OPTIMIZE_COLS);
}
