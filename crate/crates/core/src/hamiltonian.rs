//! Hamiltonian `H = f + b·y + σ·z + σ⁰·z⁰`, its minimiser `Λ` and the
//! reduced coefficients `(B, Σ, Σ⁰, F, G)` of the Hamiltonian system.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_sq, solve_square};
use crate::measures::EmpiricalMeasure;
use crate::model::{CoefficientSet, Dims, Node};

/// Offsets of the packed tuple `θ = [x (n), y (n), z (n·d), z⁰ (n·d)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThetaLayout {
    pub n: usize,
    pub l: usize,
    pub d: usize,
}

impl ThetaLayout {
    pub fn theta_len(&self) -> usize {
        2 * self.n + 2 * self.n * self.d
    }

    pub fn y_range(&self) -> std::ops::Range<usize> {
        self.n..2 * self.n
    }

    pub fn z_range(&self) -> std::ops::Range<usize> {
        2 * self.n..2 * self.n + self.n * self.d
    }

    pub fn z0_range(&self) -> std::ops::Range<usize> {
        2 * self.n + self.n * self.d..self.theta_len()
    }

    /// Length of the adjoint block `(y, z, z⁰)`.
    pub fn adjoint_len(&self) -> usize {
        self.theta_len() - self.n
    }
}

impl From<Dims> for ThetaLayout {
    fn from(d: Dims) -> Self {
        Self { n: d.n, l: d.l, d: d.d }
    }
}

/// Unpacked `θ`. `z` and `z0` are `n x d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub z0: Vec<f64>,
}

impl Theta {
    pub fn zeros(layout: ThetaLayout) -> Self {
        let nd = layout.n * layout.d;
        Self {
            x: vec![0.0; layout.n],
            y: vec![0.0; layout.n],
            z: vec![0.0; nd],
            z0: vec![0.0; nd],
        }
    }

    pub fn from_slice(layout: ThetaLayout, packed: &[f64]) -> Self {
        Self {
            x: packed[..layout.n].to_vec(),
            y: packed[layout.y_range()].to_vec(),
            z: packed[layout.z_range()].to_vec(),
            z0: packed[layout.z0_range()].to_vec(),
        }
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.x.len() + 2 * self.z.len());
        v.extend_from_slice(&self.x);
        v.extend_from_slice(&self.y);
        v.extend_from_slice(&self.z);
        v.extend_from_slice(&self.z0);
        v
    }
}

/// `(B, Σ, Σ⁰, F)` at one θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedEval {
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub f: Vec<f64>,
}

impl ReducedEval {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            b: vec![0.0; dims.n],
            sigma: vec![0.0; dims.nd()],
            sigma0: vec![0.0; dims.nd()],
            f: vec![0.0; dims.n],
        }
    }
}

/// `H(t, θ, a, μ, ν)`.
pub fn eval_h<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    theta: &[f64],
    a: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> f64 {
    let dims = c.dims();
    let layout = ThetaLayout::from(dims);
    let x = &theta[..dims.n];
    let mut b = vec![0.0; dims.n];
    let mut s = vec![0.0; dims.nd()];
    c.drift(t, x, a, mu, nu, &mut b);
    let mut h = c.running_cost(t, x, a, mu, nu) + dot(&b, &theta[layout.y_range()]);
    c.vol(t, x, a, mu, nu, &mut s);
    h += dot(&s, &theta[layout.z_range()]);
    c.common_vol(t, x, a, mu, nu, &mut s);
    h + dot(&s, &theta[layout.z0_range()])
}

/// `Λ(t, θ, μ, ζ)`: the minimiser of `a ↦ H + a·ζ`.
pub fn minimize_h<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    theta: &[f64],
    mu: &EmpiricalMeasure,
    zeta: &[f64],
    out: &mut [f64],
) -> Result<()> {
    c.minimize_hamiltonian(t, theta, mu, zeta, out)
}

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;
const FD_STEP: f64 = 1e-6;

/// Damped Newton on `a ↦ H(θ, a, μ) + a·ζ`, started at `0`, with Armijo
/// backtracking (factor ½) and a central-difference Hessian of `∂_a H`.
/// Returns the iteration count.
pub fn newton_minimize<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    theta: &[f64],
    mu: &EmpiricalMeasure,
    zeta: &[f64],
    out: &mut [f64],
) -> Result<usize> {
    let l = c.dims().l;
    // Only the ν-free part of H depends on `a`; any ν gives the same minimiser.
    let nu = EmpiricalMeasure::new(l, vec![0.0; l])?;
    let objective = |a: &[f64]| eval_h(c, t, theta, a, mu, &nu) + dot(a, zeta);
    let gradient = |a: &[f64], g: &mut [f64]| {
        c.hamiltonian_da(t, theta, a, mu, g);
        for (gi, z) in g.iter_mut().zip(zeta) {
            *gi += z;
        }
    };
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut g = vec![0.0; l];
    let mut gp = vec![0.0; l];
    let mut gm = vec![0.0; l];
    let mut probe = vec![0.0; l];
    let mut trial = vec![0.0; l];
    gradient(out, &mut g);
    let mut residual = norm_sq(&g).sqrt();
    for iter in 0..NEWTON_MAX_ITER {
        if residual <= NEWTON_TOL {
            return Ok(iter);
        }
        let mut hess = DMatrix::zeros(l, l);
        for j in 0..l {
            probe.copy_from_slice(out);
            probe[j] += FD_STEP;
            gradient(&probe, &mut gp);
            probe[j] -= 2.0 * FD_STEP;
            gradient(&probe, &mut gm);
            for i in 0..l {
                hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * FD_STEP);
            }
        }
        hess = (&hess + hess.transpose()) * 0.5;
        let step = match solve_square(&hess, &g) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => g.clone(),
        };
        let slope = -dot(&g, &step);
        let (dir, slope): (Vec<f64>, f64) = if slope < 0.0 {
            (step.iter().map(|v| -v).collect(), slope)
        } else {
            (g.iter().map(|v| -v).collect(), -norm_sq(&g))
        };
        let f0 = objective(out);
        let mut s = 1.0;
        loop {
            for ((tr, o), dv) in trial.iter_mut().zip(out.iter()).zip(&dir) {
                *tr = o + s * dv;
            }
            if objective(&trial) <= f0 + 1e-4 * s * slope || s < 1e-12 {
                break;
            }
            s *= 0.5;
        }
        out.copy_from_slice(&trial);
        gradient(out, &mut g);
        residual = norm_sq(&g).sqrt();
    }
    if residual <= NEWTON_TOL {
        return Ok(NEWTON_MAX_ITER);
    }
    Err(Error::Minimizer {
        iterations: NEWTON_MAX_ITER,
        residual,
    })
}

/// `|∂_a H(t, θ, a, μ) + ζ|`.
pub fn foc_residual<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    theta: &[f64],
    mu: &EmpiricalMeasure,
    zeta: &[f64],
    a: &[f64],
) -> f64 {
    let mut g = vec![0.0; c.dims().l];
    c.hamiltonian_da(t, theta, a, mu, &mut g);
    g.iter().zip(zeta).map(|(gi, z)| (gi + z) * (gi + z)).sum::<f64>().sqrt()
}

/// `G(x, μ) = ∂_x g(x, μ)`.
pub fn terminal_g<C: CoefficientSet + ?Sized>(c: &C, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
    c.terminal_dx(x, mu, out)
}

/// Reduced coefficients at `θ` for given state and control laws; `a` must be
/// the control at `θ`.
#[allow(clippy::too_many_arguments)]
pub fn reduced_with_laws<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    theta: &[f64],
    a: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    out: &mut ReducedEval,
) {
    let x = &theta[..c.dims().n];
    c.drift(t, x, a, mu, nu, &mut out.b);
    c.vol(t, x, a, mu, nu, &mut out.sigma);
    c.common_vol(t, x, a, mu, nu, &mut out.sigma0);
    c.hamiltonian_dx(t, theta, a, mu, nu, &mut out.f);
}

/// `(B, Σ, Σ⁰, F)(θ, ξ)` for a law `ξ` over θ-space: the control is
/// `Λ(θ, μ, 0)` and the coefficients see the pushforward `φ(ξ)`.
pub fn reduced_coefficients<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    theta: &[f64],
    xi: &EmpiricalMeasure,
) -> Result<ReducedEval> {
    let dims = c.dims();
    let layout = ThetaLayout::from(dims);
    if theta.len() != layout.theta_len() {
        return Err(Error::Config(format!(
            "θ has length {} but the layout expects {}",
            theta.len(),
            layout.theta_len()
        )));
    }
    let zero = vec![0.0; dims.l];
    let pushed = crate::measures::pushforward_phi(xi, layout, |th, mu, a| c.minimize_hamiltonian(t, th, mu, &zero, a))?;
    let mu = pushed.block(0, dims.n)?;
    let nu = pushed.block(dims.n, dims.l)?;
    let mut a = vec![0.0; dims.l];
    c.minimize_hamiltonian(t, theta, &mu, &zero, &mut a)?;
    let mut out = ReducedEval::zeros(dims);
    reduced_with_laws(c, t, theta, &a, &mu, &nu, &mut out);
    Ok(out)
}
