use mfg_lab::hamiltonian::{foc_residual, ThetaLayout};
use mfg_lab::measures::conditional_law;
use mfg_lab::mkv::{
    continuation_solve, extract_mfe, foc_residual_max, h2_norm_diff, martingale_residuals, picard_solve, picard_solve_delta,
    terminal_residual, Basis, InitialGuess, MkvConfig,
};
use mfg_lab::model::{lq_coefficients, LqCoefficients, LqModel, Node, ScalarLq};
use mfg_lab::stochastic::{sample_worlds, InitialLaw, NoiseBundle, TimeGrid};
use mfg_lab::Error;

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

fn unchecked(s: ScalarLq) -> LqModel {
    LqModel::new_unchecked(&LqCoefficients::from(s)).unwrap()
}

fn gaussian() -> InitialLaw {
    InitialLaw::Gaussian {
        mean: vec![0.5],
        cov: vec![1.0],
    }
}

fn setup(steps: usize, worlds: usize, particles: usize, mu0: &InitialLaw) -> (MkvConfig, Vec<NoiseBundle>) {
    let grid = TimeGrid::new(1.0, steps).unwrap();
    let bundles = sample_worlds(grid, worlds, particles, 1, mu0, 42, 0).unwrap();
    let mut cfg = MkvConfig::new(grid, worlds, particles);
    cfg.damping = 0.7;
    (cfg, bundles)
}

#[test]
fn identity_terminal_with_zero_coefficients() {
    let c = unchecked(ScalarLq {
        q: 0.0,
        c1: 0.0,
        q_terminal: 1.0,
        ..Default::default()
    });
    let (mut cfg, bundles) = setup(10, 4, 8, &gaussian());
    cfg.damping = 1.0;
    let sol = picard_solve(&c, &cfg, &bundles).unwrap();
    // One productive sweep; the second only confirms the fixed point.
    assert!(sol.residual_history.len() <= 2, "{:?}", sol.residual_history);
    assert_eq!(*sol.residual_history.last().unwrap(), 0.0);
    let th = &sol.path.theta;
    for w in 0..4 {
        for p in 0..8 {
            let x0 = bundles[w].initial(p)[0];
            for k in 0..=10 {
                assert_eq!(th.x(k, w, p)[0], x0);
                // Y comes out of a regression, exact up to rounding.
                assert!((th.y(k, w, p)[0] - x0).abs() <= 1e-12);
                assert!(th.z(k, w, p)[0].abs() <= 1e-12);
                assert!(th.z0(k, w, p)[0].abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn zero_driver_and_terminal_give_zero_adjoints() {
    let c = unchecked(ScalarLq {
        a: 0.3,
        c: 0.2,
        c0: 0.2,
        q: 0.0,
        q_terminal: 0.0,
        ..Default::default()
    });
    let (cfg, bundles) = setup(10, 4, 16, &gaussian());
    let sol = picard_solve(&c, &cfg, &bundles).unwrap();
    let th = &sol.path.theta;
    for k in 0..=10 {
        for w in 0..4 {
            for p in 0..16 {
                assert_eq!(th.y(k, w, p)[0], 0.0);
                assert_eq!(th.z(k, w, p)[0], 0.0);
                assert_eq!(th.z0(k, w, p)[0], 0.0);
            }
        }
    }
}

#[test]
fn uncontrolled_deterministic_dynamics_follow_euler() {
    let a = 0.8;
    let c = unchecked(ScalarLq {
        a,
        c1: 0.0,
        ..Default::default()
    });
    let (cfg, bundles) = setup(50, 2, 4, &InitialLaw::Point(vec![1.5]));
    let sol = picard_solve(&c, &cfg, &bundles).unwrap();
    let grid = cfg.grid;
    let th = &sol.path.theta;
    let mut x = 1.5;
    for k in 0..=grid.steps() {
        assert!((th.x(k, 1, 3)[0] - x).abs() <= 1e-14 * x.abs());
        x *= 1.0 + a * grid.dt();
    }
    let exact = 1.5 * (a * grid.horizon()).exp();
    let rel = (th.x(grid.steps(), 0, 0)[0] - exact).abs() / exact;
    assert!(rel <= 2.0 * a * a * grid.horizon() * grid.dt(), "{rel}");
    assert!(sol.path.alpha.iter().all(|&v| v == 0.0));
}

#[test]
fn noiseless_game_has_no_martingale_part() {
    let c = lq_coefficients(
        &ScalarLq {
            c: 0.0,
            d: 0.0,
            c0: 0.0,
            d0: 0.0,
            ..reference()
        }
        .into(),
        &TimeGrid::new(1.0, 20).unwrap(),
    )
    .unwrap();
    let (cfg, bundles) = setup(20, 4, 16, &gaussian());
    let sol = picard_solve(&c, &cfg, &bundles).unwrap();
    let th = &sol.path.theta;
    for k in 0..20 {
        for w in 0..4 {
            for p in 0..16 {
                assert!(th.z(k, w, p)[0].abs() <= 1e-10);
                assert!(th.z0(k, w, p)[0].abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn reference_game_contracts_and_is_consistent() {
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let c = lq_coefficients(&reference().into(), &grid).unwrap();
    let (cfg, bundles) = setup(20, 16, 32, &gaussian());
    let sol = picard_solve(&c, &cfg, &bundles).unwrap();
    let h = &sol.residual_history;
    assert!(*h.last().unwrap() <= cfg.picard_tol);
    for i in 2..h.len() {
        assert!(h[i] < h[i - 1], "residuals not decreasing at {i}: {h:?}");
    }
    assert_eq!(terminal_residual(&c, &sol.path).unwrap(), 0.0);
    assert!(foc_residual_max(&c, &sol.path).unwrap() <= 1e-10);
    let bound = 5.0 / (cfg.particles as f64).sqrt();
    let mart = martingale_residuals(&sol.path, &bundles).unwrap();
    assert!(mart.iter().all(|&r| r <= bound), "{:?}", mart.iter().cloned().fold(0.0, f64::max));
}

#[test]
fn extracted_flow_is_the_conditional_law() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let c = lq_coefficients(&reference().into(), &grid).unwrap();
    let (cfg, bundles) = setup(10, 4, 16, &gaussian());
    let sol = picard_solve(&c, &cfg, &bundles).unwrap();
    let zero = [0.0];
    for w in 0..4 {
        let (controls, flow) = extract_mfe(&sol, w).unwrap();
        assert_eq!(flow.states.len(), 11);
        assert_eq!(flow.controls.len(), 10);
        for k in 0..10 {
            assert_eq!(flow.states[k].points(), sol.path.theta.world_states(k, w));
            assert_eq!(flow.controls[k].points(), sol.path.world_controls(k, w));
            let law = conditional_law(&sol.path.theta, w, k).unwrap();
            let layout = ThetaLayout::from(c.params().dims);
            for p in 0..16 {
                assert_eq!(controls[p * 10 + k], sol.path.alpha(k, w, p)[0]);
                let th = law.atom(p);
                let r = foc_residual(&c, Node::new(k, grid.time(k)), th, &flow.states[k], &zero, &[controls[p * 10 + k]]);
                assert!(r <= 1e-10);
                assert_eq!(th.len(), layout.theta_len());
            }
        }
    }
    assert!(extract_mfe(&sol, 4).is_err());
}

#[test]
fn conditional_law_ignores_particle_order() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let c = lq_coefficients(&reference().into(), &grid).unwrap();
    let (cfg, bundles) = setup(10, 4, 16, &gaussian());
    let order: Vec<usize> = (0..16).rev().collect();
    let permuted: Vec<NoiseBundle> = bundles.iter().map(|b| b.permute_paths(&order).unwrap()).collect();
    let a = picard_solve(&c, &cfg, &bundles).unwrap();
    let b = picard_solve(&c, &cfg, &permuted).unwrap();
    for w in 0..4 {
        for k in [0, 5, 10] {
            let mut xa = a.path.theta.world_states(k, w).to_vec();
            let mut xb = b.path.theta.world_states(k, w).to_vec();
            xa.sort_by(f64::total_cmp);
            xb.sort_by(f64::total_cmp);
            for (u, v) in xa.iter().zip(&xb) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn no_control_weight_means_no_control() {
    let c = unchecked(ScalarLq {
        c1: 0.0,
        ..reference()
    });
    let (cfg, bundles) = setup(10, 4, 8, &gaussian());
    let sol = picard_solve(&c, &cfg, &bundles).unwrap();
    assert!(sol.path.alpha.iter().all(|&v| v == 0.0));
    let (_, flow) = extract_mfe(&sol, 0).unwrap();
    assert!(flow.controls.iter().all(|nu| nu.second_moment() == 0.0));
}

#[test]
fn decoupled_system_solves_from_zero() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let c = lq_coefficients(&reference().into(), &grid).unwrap();
    let (cfg, bundles) = setup(10, 4, 16, &gaussian());
    let sol = picard_solve_delta(&c, &cfg, &bundles, &InitialGuess::Zero, 0.0).unwrap();
    assert!(sol.residual_history.len() <= cfg.max_picard);
    assert_eq!(sol.delta, 0.0);
}

#[test]
fn continuation_reaches_the_picard_solution() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let c = lq_coefficients(&reference().into(), &grid).unwrap();
    let (cfg, bundles) = setup(10, 4, 16, &gaussian());
    let direct = picard_solve(&c, &cfg, &bundles).unwrap();
    let cont = continuation_solve(&c, &cfg, &bundles).unwrap();
    assert_eq!(cont.delta, 1.0);
    assert_eq!(cont.continuation_trace.last(), Some(&(1.0, true)));
    assert!(h2_norm_diff(&direct, &cont).unwrap() <= 10.0 * cfg.picard_tol);
}

#[test]
fn continuation_reports_its_trace_on_failure() {
    // Strongly concave costs: the interpolated systems stop contracting
    // close to δ = 1.
    let c = unchecked(ScalarLq {
        a: 1.0,
        b: 1.0,
        q: -30.0,
        q_terminal: -30.0,
        ..Default::default()
    });
    let (mut cfg, bundles) = setup(10, 2, 8, &gaussian());
    cfg.max_picard = 30;
    cfg.continuation.min_step = 1e-4;
    match continuation_solve(&c, &cfg, &bundles) {
        Err(Error::Continuation { min_step, attempted }) => {
            assert_eq!(min_step, 1e-4);
            assert!(attempted.len() > 2);
            assert!(attempted.windows(2).any(|w| w[1] < 1.0));
        }
        other => panic!("expected a continuation failure, got {other:?}"),
    }
    cfg.continuation.enabled = false;
    assert!(matches!(continuation_solve(&c, &cfg, &bundles), Err(Error::Config(_))));
}

#[test]
fn quadratic_basis_agrees_on_a_linear_game() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let c = lq_coefficients(&reference().into(), &grid).unwrap();
    let (cfg, bundles) = setup(10, 16, 64, &gaussian());
    let affine = picard_solve(&c, &cfg, &bundles).unwrap();
    let quad = picard_solve(
        &c,
        &MkvConfig {
            basis: Basis::Quadratic,
            ..cfg
        },
        &bundles,
    )
    .unwrap();
    // The extra terms only fit sampling noise.
    let gap = h2_norm_diff(&affine, &quad).unwrap();
    assert!(gap < 0.05, "{gap}");
}

#[test]
fn invalid_configs_are_rejected() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let c = lq_coefficients(&reference().into(), &grid).unwrap();
    let (cfg, bundles) = setup(10, 4, 8, &gaussian());
    for bad in [
        MkvConfig { damping: 0.0, ..cfg },
        MkvConfig { damping: 1.5, ..cfg },
        MkvConfig { picard_tol: 0.0, ..cfg },
        MkvConfig { worlds: 3, ..cfg },
        MkvConfig { particles: 9, ..cfg },
    ] {
        assert!(matches!(picard_solve(&c, &bad, &bundles), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn non_convergence_carries_history() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let c = lq_coefficients(&reference().into(), &grid).unwrap();
    let (mut cfg, bundles) = setup(10, 4, 8, &gaussian());
    cfg.max_picard = 2;
    match picard_solve(&c, &cfg, &bundles) {
        Err(Error::NonConvergence { iterations, history, .. }) => {
            assert_eq!(iterations, 2);
            assert_eq!(history.len(), 2);
        }
        other => panic!("{other:?}"),
    }
}
