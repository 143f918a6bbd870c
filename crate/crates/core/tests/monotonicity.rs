use mfg_lab::model::{lq_coefficients, validate_lq, LqCoefficients, LqModel, ScalarLq};
use mfg_lab::monotonicity::{certify, drift_monotonicity_gap, terminal_monotonicity_gap, CertifyOptions, GapKind};
use mfg_lab::stochastic::TimeGrid;

fn reference() -> ScalarLq {
    ScalarLq {
        a: 0.2,
        b: 1.0,
        c: 0.1,
        d: 0.1,
        c0: 0.1,
        d0: 0.1,
        q: 1.0,
        qbar: 1.0,
        p: 1.0,
        pbar: 0.5,
        c1: 1.0,
        c2: 0.5,
        q_terminal: 1.0,
        qbar_terminal: 1.0,
        ..Default::default()
    }
}

fn grid() -> TimeGrid {
    TimeGrid::new(1.0, 100).unwrap()
}

#[test]
fn reference_game_is_certified() {
    let lq = LqCoefficients::from(reference());
    let report = validate_lq(&lq, &grid());
    assert!(report.passed);
    assert_eq!(report.lambda, 2.0);
    let c = lq_coefficients(&lq, &grid()).unwrap();
    let r = certify(&c, &grid(), &CertifyOptions::new(10_000, 1)).unwrap();
    assert!(r.passed());
    assert!(r.min_drift_margin >= report.lambda - 1e-9, "{}", r.min_drift_margin);
    assert!(r.estimated_cg >= report.lambda - 1e-9, "{}", r.estimated_cg);
    assert_eq!(r, certify(&c, &grid(), &CertifyOptions::new(10_000, 1)).unwrap());
    assert!((r.drift_extreme.replay(&c).unwrap() + r.min_drift_margin).abs() <= 1e-12);
    assert!((r.terminal_extreme.replay(&c).unwrap() - r.min_terminal_margin).abs() <= 1e-12);
}

#[test]
fn indefinite_costs_yield_a_witness() {
    let lq = LqCoefficients::from(ScalarLq {
        q: -1.0,
        qbar: 0.0,
        q_terminal: -1.0,
        qbar_terminal: 0.0,
        ..reference()
    });
    assert!(!validate_lq(&lq, &grid()).passed);
    let c = LqModel::new_unchecked(&lq).unwrap();
    let r = certify(&c, &grid(), &CertifyOptions::new(10_000, 1)).unwrap();
    let w = r.witness.expect("a violating cloud");
    let gap = w.replay(&c).unwrap();
    match w.kind {
        GapKind::Drift => assert!(gap > 0.0),
        GapKind::Terminal => assert!(gap < 0.0),
    }
    assert!((gap - w.gap).abs() <= 1e-12);
}

#[test]
fn terminal_gap_is_exact_for_any_cloud() {
    let c = LqModel::new_unchecked(&reference().into()).unwrap();
    let a = [0.3, -1.2, 4.0, 0.0];
    let b = [1.0, 2.0, -3.0, 0.5];
    assert!((terminal_monotonicity_gap(&c, &a, &b).unwrap() - 2.0).abs() <= 1e-12);
    assert_eq!(terminal_monotonicity_gap(&c, &a, &a).unwrap(), 0.0);
}

#[test]
fn equal_control_weights_keep_the_adjoint_part_non_positive() {
    let c = LqModel::new_unchecked(
        &ScalarLq {
            c2: 1.0,
            ..reference()
        }
        .into(),
    )
    .unwrap();
    let t = mfg_lab::model::Node::new(0, 0.0);
    // Two-atom clouds differing only in the adjoints.
    for i in 0..50 {
        let s = i as f64 * 0.37;
        let cloud = [0.5, s.sin(), 0.2 * s.cos(), 0.1, -0.5, s.cos(), 0.3, -0.2];
        let other = [0.5, 0.0, 0.0, 0.0, -0.5, 0.1 * s, 0.0, 0.0];
        let gap = drift_monotonicity_gap(&c, t, &cloud, &other).unwrap();
        assert!(gap <= 1e-12, "{gap}");
    }
}

#[test]
fn zero_trials_rejected() {
    let c = LqModel::new_unchecked(&reference().into()).unwrap();
    assert!(certify(&c, &grid(), &CertifyOptions::new(0, 1)).is_err());
}
