//! Coefficient sets of the game: dynamics `(b, σ, σ⁰)`, costs `(f, g)` and
//! every derivative the adjoint systems need.
//!
//! Coefficients are separable: the joint law `ξ` of state and control only
//! enters through its state marginal `μ` and its control marginal `ν`, and
//! the `ν`-dependence does not interact with the player's own control. The
//! `*_da` evaluators therefore take no `ν` argument, and the `*_dnu`
//! evaluators take no own-control argument.

mod check;
mod cost;
mod lq;

pub use check::{check_derivatives, DerivativeCheck, FD_STEP, FD_TOL};
pub use cost::{eval_cost, MeasureFlow};
pub use lq::{lq_coefficients, validate_lq, LqCoefficients, LqModel, ScalarLq, Schedule, ValidationReport, Violation};

use crate::measures::EmpiricalMeasure;

/// State dimension `n`, control dimension `ℓ`, noise dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub l: usize,
    pub d: usize,
}

impl Dims {
    pub fn scalar() -> Self {
        Self { n: 1, l: 1, d: 1 }
    }

    /// Entries of a volatility matrix (`n x d`).
    pub fn nd(&self) -> usize {
        self.n * self.d
    }
}

/// Grid node at which time-dependent coefficients are read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub k: usize,
    pub t: f64,
}

impl Node {
    pub fn new(k: usize, t: f64) -> Self {
        Self { k, t }
    }
}

/// Evaluators of a separable coefficient set.
///
/// Matrix outputs are row-major. Volatilities are `n x d` matrices flattened
/// to length `n·d`; their Jacobians have `n·d` rows. Measure derivatives are
/// evaluated at an atom `u` (state) or `a` (control) of the respective law.
pub trait CoefficientSet: Send + Sync {
    fn dims(&self) -> Dims;

    /// Strong-convexity modulus of the Hamiltonian in the control.
    fn gamma(&self) -> f64;

    fn drift(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, out: &mut [f64]);
    fn vol(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, out: &mut [f64]);
    fn common_vol(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, out: &mut [f64]);
    fn running_cost(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64;
    fn terminal_cost(&self, x: &[f64], mu: &EmpiricalMeasure) -> f64;

    /// `∂b/∂x`, `n x n`.
    fn drift_dx(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, out: &mut [f64]);
    /// `∂b/∂a`, `n x ℓ`.
    fn drift_da(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    /// `∂σ/∂x`, `n·d x n`.
    fn vol_dx(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, out: &mut [f64]);
    /// `∂σ/∂a`, `n·d x ℓ`.
    fn vol_da(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    fn common_vol_dx(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, out: &mut [f64]);
    fn common_vol_da(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    /// `∂f/∂x`, length `n`.
    fn cost_dx(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, out: &mut [f64]);
    /// `∂f/∂a`, length `ℓ`.
    fn cost_da(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    /// `∂g/∂x`, length `n`.
    fn terminal_dx(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);

    /// `∂_μ b(x, a, ξ)(u)`, `n x n`.
    #[allow(clippy::too_many_arguments)]
    fn drift_dmu(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, u: &[f64], out: &mut [f64]);
    #[allow(clippy::too_many_arguments)]
    fn vol_dmu(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, u: &[f64], out: &mut [f64]);
    #[allow(clippy::too_many_arguments)]
    fn common_vol_dmu(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, u: &[f64], out: &mut [f64]);
    /// `∂_μ f(x, a, ξ)(u)`, length `n`.
    #[allow(clippy::too_many_arguments)]
    fn cost_dmu(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, u: &[f64], out: &mut [f64]);
    /// `∂_μ g(x, μ)(u)`, length `n`.
    fn terminal_dmu(&self, x: &[f64], mu: &EmpiricalMeasure, u: &[f64], out: &mut [f64]);

    /// `∂_ν b^{(2)}(x, ξ)(a)`, `n x ℓ`.
    fn drift_dnu(&self, t: Node, x: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, a: &[f64], out: &mut [f64]);
    fn vol_dnu(&self, t: Node, x: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, a: &[f64], out: &mut [f64]);
    fn common_vol_dnu(&self, t: Node, x: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, a: &[f64], out: &mut [f64]);
    /// `∂_ν f^{(2)}(x, ξ)(a)`, length `ℓ`.
    fn cost_dnu(&self, t: Node, x: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, a: &[f64], out: &mut [f64]);

    /// Whether `b`, `σ` or `σ⁰` depend on the state law. When false the
    /// `∂_μ` sums of the dynamics are skipped.
    fn dynamics_depend_on_state_law(&self) -> bool {
        true
    }

    /// Whether `∂_ν b`, `∂_ν σ` and `∂_ν σ⁰` ignore the state argument. When
    /// true the N-player control correction sums adjoints before a single
    /// derivative evaluation per player.
    fn control_law_derivatives_state_free(&self) -> bool {
        false
    }

    /// `∂_x H = ∂_x f + (∂_x b)ᵀ y + (∂_x σ)ᵀ z + (∂_x σ⁰)ᵀ z⁰`.
    #[allow(clippy::too_many_arguments)]
    fn hamiltonian_dx(
        &self,
        t: Node,
        theta: &[f64],
        a: &[f64],
        mu: &EmpiricalMeasure,
        nu: &EmpiricalMeasure,
        out: &mut [f64],
    ) {
        generic_hamiltonian_dx(self, t, theta, a, mu, nu, out)
    }

    /// `∂_a H` (the `ν`-free part), length `ℓ`.
    fn hamiltonian_da(&self, t: Node, theta: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        generic_hamiltonian_da(self, t, theta, a, mu, out)
    }

    /// Minimiser of `a ↦ H(θ, a, μ) + a·ζ`.
    fn minimize_hamiltonian(
        &self,
        t: Node,
        theta: &[f64],
        mu: &EmpiricalMeasure,
        zeta: &[f64],
        out: &mut [f64],
    ) -> crate::Result<()> {
        crate::hamiltonian::newton_minimize(self, t, theta, mu, zeta, out).map(|_| ())
    }
}

fn theta_parts(dims: Dims, theta: &[f64]) -> (&[f64], &[f64], &[f64], &[f64]) {
    let n = dims.n;
    let nd = dims.nd();
    (
        &theta[..n],
        &theta[n..2 * n],
        &theta[2 * n..2 * n + nd],
        &theta[2 * n + nd..2 * n + 2 * nd],
    )
}

fn row_major_t_vec_add(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let vr = v[r];
        if vr == 0.0 {
            continue;
        }
        for c in 0..cols {
            out[c] += m[r * cols + c] * vr;
        }
    }
}

/// Jacobian-based `∂_x H`, usable by any coefficient set.
pub fn generic_hamiltonian_dx<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    theta: &[f64],
    a: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    out: &mut [f64],
) {
    let dims = c.dims();
    let (n, nd) = (dims.n, dims.nd());
    let (x, y, z, z0) = theta_parts(dims, theta);
    c.cost_dx(t, x, a, mu, nu, out);
    let mut jac = vec![0.0; nd * n];
    c.drift_dx(t, x, a, mu, nu, &mut jac[..n * n]);
    row_major_t_vec_add(&jac[..n * n], n, n, y, out);
    c.vol_dx(t, x, a, mu, nu, &mut jac);
    row_major_t_vec_add(&jac, nd, n, z, out);
    c.common_vol_dx(t, x, a, mu, nu, &mut jac);
    row_major_t_vec_add(&jac, nd, n, z0, out);
}

/// Jacobian-based `∂_a H`, usable by any coefficient set.
pub fn generic_hamiltonian_da<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    theta: &[f64],
    a: &[f64],
    mu: &EmpiricalMeasure,
    out: &mut [f64],
) {
    let dims = c.dims();
    let (n, l, nd) = (dims.n, dims.l, dims.nd());
    let (x, y, z, z0) = theta_parts(dims, theta);
    c.cost_da(t, x, a, mu, out);
    let mut jac = vec![0.0; nd.max(n) * l];
    c.drift_da(t, x, a, mu, &mut jac[..n * l]);
    row_major_t_vec_add(&jac[..n * l], n, l, y, out);
    c.vol_da(t, x, a, mu, &mut jac[..nd * l]);
    row_major_t_vec_add(&jac[..nd * l], nd, l, z, out);
    c.common_vol_da(t, x, a, mu, &mut jac[..nd * l]);
    row_major_t_vec_add(&jac[..nd * l], nd, l, z0, out);
}

/// Evaluates `b` against a joint law `ξ` on `(x, a)`-space by splitting it
/// into its marginals.
pub fn drift_joint<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    x: &[f64],
    a: &[f64],
    xi: &EmpiricalMeasure,
    out: &mut [f64],
) -> crate::Result<()> {
    let (mu, nu) = split_joint(c.dims(), xi)?;
    c.drift(t, x, a, &mu, &nu, out);
    Ok(())
}

/// Evaluates `f` against a joint law `ξ` on `(x, a)`-space.
pub fn running_cost_joint<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    x: &[f64],
    a: &[f64],
    xi: &EmpiricalMeasure,
) -> crate::Result<f64> {
    let (mu, nu) = split_joint(c.dims(), xi)?;
    Ok(c.running_cost(t, x, a, &mu, &nu))
}

/// State and control marginals of a joint law on `(x, a)`-space.
pub fn split_joint(dims: Dims, xi: &EmpiricalMeasure) -> crate::Result<(EmpiricalMeasure, EmpiricalMeasure)> {
    if xi.dim() != dims.n + dims.l {
        return Err(crate::Error::Config(format!(
            "joint law has dimension {} but n + ℓ = {}",
            xi.dim(),
            dims.n + dims.l
        )));
    }
    Ok((xi.block(0, dims.n)?, xi.block(dims.n, dims.l)?))
}
