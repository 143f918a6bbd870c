//! Finite-difference audit of a coefficient set's closed-form derivatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CoefficientSet, Node};
use crate::hamiltonian::{eval_h, ThetaLayout};
use crate::measures::EmpiricalMeasure;

/// Central-difference step on unit-scaled inputs.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance, `|analytic − numeric| ≤ tol · max(|numeric|, 1)`.
pub const FD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeCheck {
    /// Scalar entries compared.
    pub entries: usize,
    /// Largest `|analytic − numeric| / max(|numeric|, 1)`.
    pub worst: f64,
    /// `name[i,j]` of every entry above [`FD_TOL`].
    pub failures: Vec<String>,
}

impl DerivativeCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn compare(&mut self, analytic: f64, numeric: f64, what: impl FnOnce() -> String) {
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        self.entries += 1;
        self.worst = self.worst.max(err);
        if err > FD_TOL || !err.is_finite() {
            self.failures.push(what());
        }
    }

    /// Row-major `width x cols` Jacobian against central differences in `v`.
    fn jacobian(&mut self, jac: &[f64], width: usize, v: &[f64], what: &str, mut f: impl FnMut(&[f64], &mut [f64])) {
        let cols = v.len();
        let mut p = v.to_vec();
        let (mut hi, mut lo) = (vec![0.0; width], vec![0.0; width]);
        for j in 0..cols {
            p[j] = v[j] + FD_STEP;
            f(&p, &mut hi);
            p[j] = v[j] - FD_STEP;
            f(&p, &mut lo);
            p[j] = v[j];
            for i in 0..width {
                let num = (hi[i] - lo[i]) / (2.0 * FD_STEP);
                self.compare(jac[i * cols + j], num, || format!("{what}[{i},{j}]"));
            }
        }
    }

    fn gradient(&mut self, grad: &[f64], v: &[f64], what: &str, mut f: impl FnMut(&[f64]) -> f64) {
        self.jacobian(grad, 1, v, what, |p, o| o[0] = f(p));
    }
}

fn uniform(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn with_atom(mu: &EmpiricalMeasure, atom: usize, v: &[f64]) -> EmpiricalMeasure {
    let mut pts = mu.points().to_vec();
    pts[atom * mu.dim()..(atom + 1) * mu.dim()].copy_from_slice(v);
    EmpiricalMeasure::new(mu.dim(), pts).expect("finite atoms")
}

/// Compares every derivative evaluator of `c` with central differences of
/// the matching evaluator at `points` random inputs drawn from `[−1, 1]`.
///
/// Measure derivatives are checked through atom moves: shifting atom `u` of
/// an `M`-atom law changes a functional by `(1/M) ∂_μ(·)(u)` to first order.
/// The Hamiltonian gradients in `x` and `a` are included.
pub fn check_derivatives<C: CoefficientSet + ?Sized>(c: &C, t: Node, points: usize, seed: u64) -> DerivativeCheck {
    let dims = c.dims();
    let (n, l, nd) = (dims.n, dims.l, dims.nd());
    let layout = ThetaLayout::from(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DerivativeCheck {
        entries: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    let mut jac = vec![0.0; nd * n.max(l)];
    let mut g = vec![0.0; n.max(l)];
    for _ in 0..points {
        let x = uniform(&mut rng, n);
        let a = uniform(&mut rng, l);
        let m_mu = rng.random_range(2..8);
        let m_nu = rng.random_range(2..8);
        let mu = EmpiricalMeasure::new(n, uniform(&mut rng, n * m_mu)).expect("finite atoms");
        let nu = EmpiricalMeasure::new(l, uniform(&mut rng, l * m_nu)).expect("finite atoms");
        let theta = uniform(&mut rng, layout.theta_len());

        c.drift_dx(t, &x, &a, &mu, &nu, &mut jac[..n * n]);
        out.jacobian(&jac[..n * n], n, &x, "drift_dx", |p, o| c.drift(t, p, &a, &mu, &nu, o));
        c.drift_da(t, &x, &a, &mu, &mut jac[..n * l]);
        out.jacobian(&jac[..n * l], n, &a, "drift_da", |p, o| c.drift(t, &x, p, &mu, &nu, o));
        c.vol_dx(t, &x, &a, &mu, &nu, &mut jac[..nd * n]);
        out.jacobian(&jac[..nd * n], nd, &x, "vol_dx", |p, o| c.vol(t, p, &a, &mu, &nu, o));
        c.vol_da(t, &x, &a, &mu, &mut jac[..nd * l]);
        out.jacobian(&jac[..nd * l], nd, &a, "vol_da", |p, o| c.vol(t, &x, p, &mu, &nu, o));
        c.common_vol_dx(t, &x, &a, &mu, &nu, &mut jac[..nd * n]);
        out.jacobian(&jac[..nd * n], nd, &x, "common_vol_dx", |p, o| c.common_vol(t, p, &a, &mu, &nu, o));
        c.common_vol_da(t, &x, &a, &mu, &mut jac[..nd * l]);
        out.jacobian(&jac[..nd * l], nd, &a, "common_vol_da", |p, o| c.common_vol(t, &x, p, &mu, &nu, o));
        c.cost_dx(t, &x, &a, &mu, &nu, &mut g[..n]);
        out.gradient(&g[..n], &x, "cost_dx", |p| c.running_cost(t, p, &a, &mu, &nu));
        c.cost_da(t, &x, &a, &mu, &mut g[..l]);
        out.gradient(&g[..l], &a, "cost_da", |p| c.running_cost(t, &x, p, &mu, &nu));
        c.terminal_dx(&x, &mu, &mut g[..n]);
        out.gradient(&g[..n], &x, "terminal_dx", |p| c.terminal_cost(p, &mu));

        let j = rng.random_range(0..m_mu);
        let u = mu.atom(j).to_vec();
        let inv = 1.0 / m_mu as f64;
        let scale = |v: &mut [f64], s: f64| v.iter_mut().for_each(|e| *e *= s);
        c.drift_dmu(t, &x, &a, &mu, &nu, &u, &mut jac[..n * n]);
        scale(&mut jac[..n * n], inv);
        out.jacobian(&jac[..n * n], n, &u, "drift_dmu", |p, o| c.drift(t, &x, &a, &with_atom(&mu, j, p), &nu, o));
        c.vol_dmu(t, &x, &a, &mu, &nu, &u, &mut jac[..nd * n]);
        scale(&mut jac[..nd * n], inv);
        out.jacobian(&jac[..nd * n], nd, &u, "vol_dmu", |p, o| c.vol(t, &x, &a, &with_atom(&mu, j, p), &nu, o));
        c.common_vol_dmu(t, &x, &a, &mu, &nu, &u, &mut jac[..nd * n]);
        scale(&mut jac[..nd * n], inv);
        out.jacobian(&jac[..nd * n], nd, &u, "common_vol_dmu", |p, o| {
            c.common_vol(t, &x, &a, &with_atom(&mu, j, p), &nu, o)
        });
        c.cost_dmu(t, &x, &a, &mu, &nu, &u, &mut g[..n]);
        scale(&mut g[..n], inv);
        out.gradient(&g[..n], &u, "cost_dmu", |p| c.running_cost(t, &x, &a, &with_atom(&mu, j, p), &nu));
        c.terminal_dmu(&x, &mu, &u, &mut g[..n]);
        scale(&mut g[..n], inv);
        out.gradient(&g[..n], &u, "terminal_dmu", |p| c.terminal_cost(&x, &with_atom(&mu, j, p)));

        let k = rng.random_range(0..m_nu);
        let w = nu.atom(k).to_vec();
        let inv = 1.0 / m_nu as f64;
        c.drift_dnu(t, &x, &mu, &nu, &w, &mut jac[..n * l]);
        scale(&mut jac[..n * l], inv);
        out.jacobian(&jac[..n * l], n, &w, "drift_dnu", |p, o| c.drift(t, &x, &a, &mu, &with_atom(&nu, k, p), o));
        c.vol_dnu(t, &x, &mu, &nu, &w, &mut jac[..nd * l]);
        scale(&mut jac[..nd * l], inv);
        out.jacobian(&jac[..nd * l], nd, &w, "vol_dnu", |p, o| c.vol(t, &x, &a, &mu, &with_atom(&nu, k, p), o));
        c.common_vol_dnu(t, &x, &mu, &nu, &w, &mut jac[..nd * l]);
        scale(&mut jac[..nd * l], inv);
        out.jacobian(&jac[..nd * l], nd, &w, "common_vol_dnu", |p, o| {
            c.common_vol(t, &x, &a, &mu, &with_atom(&nu, k, p), o)
        });
        c.cost_dnu(t, &x, &mu, &nu, &w, &mut g[..l]);
        scale(&mut g[..l], inv);
        out.gradient(&g[..l], &w, "cost_dnu", |p| c.running_cost(t, &x, &a, &mu, &with_atom(&nu, k, p)));

        let mut gx = vec![0.0; layout.theta_len()];
        c.hamiltonian_dx(t, &theta, &a, &mu, &nu, &mut gx[..n]);
        // Only the state block of θ is perturbed.
        let xs = theta[..n].to_vec();
        out.gradient(&gx[..n], &xs, "hamiltonian_dx", |p| {
            let mut th = theta.clone();
            th[..n].copy_from_slice(p);
            eval_h(c, t, &th, &a, &mu, &nu)
        });
        c.hamiltonian_da(t, &theta, &a, &mu, &mut g[..l]);
        out.gradient(&g[..l], &a, "hamiltonian_da", |p| eval_h(c, t, &theta, p, &mu, &nu));
    }
    out
}
