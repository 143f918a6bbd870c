use mfg_lab::hamiltonian::ThetaLayout;
use mfg_lab::measures::{conditional_law, pushforward_phi, second_moment, wasserstein2_1d, EmpiricalMeasure};
use mfg_lab::mkv::{picard_solve, MkvConfig};
use mfg_lab::model::{CoefficientSet, Dims, LqCoefficients, LqModel, Node, ScalarLq};
use mfg_lab::stochastic::{sample_worlds, InitialLaw, TimeGrid};
use proptest::prelude::*;

fn lq(s: ScalarLq) -> LqModel {
    LqModel::new_unchecked(&LqCoefficients::from(s)).unwrap()
}

fn lambda<'a>(c: &'a LqModel) -> impl FnMut(&[f64], &EmpiricalMeasure, &mut [f64]) -> mfg_lab::Result<()> + 'a {
    move |theta, mu, out| c.minimize_hamiltonian(Node::new(0, 0.0), theta, mu, &[0.0], out)
}

#[test]
fn pushforward_examples() {
    let layout = ThetaLayout::from(Dims::scalar());
    let c = lq(ScalarLq {
        b: 1.0,
        p: 1.0,
        c1: 1.0,
        ..Default::default()
    });
    let xi = EmpiricalMeasure::new(4, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    let phi = pushforward_phi(&xi, layout, lambda(&c)).unwrap();
    assert_eq!(phi.points(), &[0.0, -1.0]);

    let off = lq(ScalarLq {
        b: 1.0,
        p: 1.0,
        c1: 0.0,
        ..Default::default()
    });
    let pts: Vec<f64> = (0..40).map(|i| (i as f64 * 0.91).cos()).collect();
    let xi = EmpiricalMeasure::new(4, pts).unwrap();
    let phi = pushforward_phi(&xi, layout, lambda(&off)).unwrap();
    assert_eq!(phi.len(), xi.len());
    assert_eq!(phi.marginal(&[0]).unwrap(), xi.marginal(&[0]).unwrap());
    assert_eq!(second_moment(&phi.marginal(&[1]).unwrap()), 0.0);
    assert!(pushforward_phi(&phi, layout, lambda(&off)).is_err());
}

#[test]
fn conditional_law_examples() {
    let grid = TimeGrid::new(1.0, 5).unwrap();
    let c = lq(ScalarLq {
        a: 0.3,
        b: 1.0,
        p: 1.0,
        q: 1.0,
        c1: 1.0,
        q_terminal: 1.0,
        ..Default::default()
    });
    // No volatility and a point mass: every particle follows one path.
    let b = sample_worlds(grid, 2, 3, 1, &InitialLaw::Point(vec![0.7]), 1, 0).unwrap();
    let mut cfg = MkvConfig::new(grid, 2, 3);
    cfg.damping = 0.7;
    let sol = picard_solve(&c, &cfg, &b).unwrap();
    for k in 0..=5 {
        let law = conditional_law(&sol.path.theta, 1, k).unwrap();
        assert_eq!(law.len(), 3);
        assert_eq!(law.atom(0), law.atom(1));
        assert_eq!(law.atom(0), law.atom(2));
    }
    assert!(conditional_law(&sol.path.theta, 2, 0).is_err());
    assert!(conditional_law(&sol.path.theta, 0, 6).is_err());

    let one = sample_worlds(grid, 1, 1, 1, &InitialLaw::Point(vec![0.7]), 1, 0).unwrap();
    let sol = picard_solve(&c, &MkvConfig { worlds: 1, particles: 1, ..cfg }, &one).unwrap();
    let law = conditional_law(&sol.path.theta, 0, 2).unwrap();
    let mut theta = vec![0.0; 4];
    sol.path.theta.theta_into(0, 0, 2, &mut theta);
    assert_eq!(law.points(), theta.as_slice());
}

#[test]
fn marginal_never_increases_the_second_moment() {
    let xi = EmpiricalMeasure::new(2, vec![1.0, 9.0, 2.0, 8.0]).unwrap();
    let m = xi.marginal(&[0]).unwrap();
    assert_eq!(m.points(), &[1.0, 2.0]);
    assert!(second_moment(&m) <= second_moment(&xi));
    assert_eq!(xi.marginal(&[0, 1]).unwrap(), xi);
    assert!(xi.marginal(&[2]).is_err());
}

fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..20).prop_flat_map(|m| {
        let v = || prop::collection::vec(-10.0f64..10.0, m);
        (v(), v(), v())
    })
}

proptest! {
    #[test]
    fn w2_is_a_metric((a, b, c) in triple()) {
        let (a, b, c) = (
            EmpiricalMeasure::from_scalars(&a).unwrap(),
            EmpiricalMeasure::from_scalars(&b).unwrap(),
            EmpiricalMeasure::from_scalars(&c).unwrap(),
        );
        let ab = wasserstein2_1d(&a, &b).unwrap();
        prop_assert_eq!(ab, wasserstein2_1d(&b, &a).unwrap());
        prop_assert_eq!(wasserstein2_1d(&a, &a).unwrap(), 0.0);
        let ac = wasserstein2_1d(&a, &c).unwrap();
        let cb = wasserstein2_1d(&c, &b).unwrap();
        prop_assert!(ab <= ac + cb + 1e-12);
    }

    #[test]
    fn w2_ignores_atom_order(mut xs in prop::collection::vec(-10.0f64..10.0, 1..30)) {
        let a = EmpiricalMeasure::from_scalars(&xs).unwrap();
        xs.reverse();
        let b = EmpiricalMeasure::from_scalars(&xs).unwrap();
        prop_assert_eq!(wasserstein2_1d(&a, &b).unwrap(), 0.0);
    }
}
