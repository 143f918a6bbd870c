//! Open-loop Nash equilibria of the N-player game.
//!
//! Player `i` carries adjoints `Y^{i,j}` for every state `X^j`, integrated
//! against `dW^j` (`Z^{i,j,j}`) and `dW⁰` (`Z^{0,i,j}`):
//!
//! ```text
//! dY^{i,j} = −∂_{x_j} H^{N,i} dt + Z^{i,j,j} dW^j + Z^{0,i,j} dW⁰
//! Y^{i,j}_T = δ_{ij} ∂_x g(X^i, μ^N) + (1/N) ∂_μ g(X^i, μ^N)(X^j)
//! ```
//!
//! Controls solve `αⁱ = Λ(Θ^{N,i}, μ^N, ζⁱ)` where `ζⁱ` gathers the
//! `∂_ν`-terms of player `i`'s first-order condition. Since `ζ` depends on
//! the control law it is found by an inner fixed point at every
//! (repetition, step).
//!
//! The time stepping mirrors [`crate::mkv`]: `Ŷ_k = E[Y_{k+1} | ℱ_k]` enters
//! the controls and drivers, `Y_k = Ŷ_k + ∂_{x_j} H^{N,i} dt`. Conditional
//! expectations are regressions over independent repetitions of the whole
//! game. The backward sweep is streamed, so only `Y_{k+1}` of the full
//! tensor is held in memory; the stored path keeps the slices that enter the
//! players' own controls.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hamiltonian::{foc_residual, ThetaLayout};
use crate::linalg::{flat_t_vec_add, Coefficients, LeastSquares};
use crate::measures::EmpiricalMeasure;
use crate::mkv::{h2_distance, StepFit, ThetaPath, Trajectory, DIVERGENCE_BOUND};
use crate::model::{CoefficientSet, Node};
use crate::stochastic::{NoiseBundle, TimeGrid};

/// Largest supported player count.
pub const MAX_PLAYERS: usize = 32;
/// Largest supported repetition count.
pub const MAX_REPETITIONS: usize = 512;

/// Relative tolerance of the inner `α ↔ ζ` fixed point.
pub const INNER_TOL: f64 = 1e-14;
pub const INNER_MAX_ITER: usize = 200;

/// Regression basis of the N-player decoupling field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeBasis {
    /// Pooled over players by exchangeability: `Y^{i,i}` on
    /// `(1, xⁱ, mean of the others)` and `Y^{i,j}` on
    /// `(1, xⁱ, xʲ, mean of the rest)`.
    #[default]
    Exchangeable,
    /// One regression per `(i, j)` on `(1, X¹, …, X^N)`.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeConfig {
    pub grid: TimeGrid,
    pub players: usize,
    pub repetitions: usize,
    pub damping: f64,
    pub picard_tol: f64,
    pub max_picard: usize,
    pub basis: NeBasis,
    /// Required bound on [`ne_residual`] after convergence.
    pub foc_tol: f64,
}

impl NeConfig {
    pub fn new(grid: TimeGrid, players: usize, repetitions: usize) -> Self {
        Self {
            grid,
            players,
            repetitions,
            damping: 0.7,
            picard_tol: 1e-6,
            max_picard: 200,
            basis: NeBasis::Exchangeable,
            foc_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.players == 0 || self.players > MAX_PLAYERS {
            errs.push(format!("players must lie in 1..={MAX_PLAYERS} (got {})", self.players));
        }
        if self.repetitions == 0 || self.repetitions > MAX_REPETITIONS {
            errs.push(format!(
                "repetitions must lie in 1..={MAX_REPETITIONS} (got {})",
                self.repetitions
            ));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            errs.push(format!("damping must lie in (0, 1] (got {})", self.damping));
        }
        if !(self.picard_tol > 0.0) {
            errs.push("picard_tol must be > 0".to_string());
        }
        if self.max_picard == 0 {
            errs.push("max_picard must be ≥ 1".to_string());
        }
        if !(self.foc_tol > 0.0) {
            errs.push("foc_tol must be > 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Feature vectors of the regression classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Features {
    basis: NeBasis,
    n: usize,
    players: usize,
}

impl Features {
    fn classes(&self) -> usize {
        match self.basis {
            NeBasis::Exchangeable => (self.players > 1) as usize + 1,
            NeBasis::Full => self.players * self.players,
        }
    }

    fn class(&self, i: usize, j: usize) -> usize {
        match self.basis {
            NeBasis::Exchangeable => (i != j) as usize,
            NeBasis::Full => i * self.players + j,
        }
    }

    fn len(&self, class: usize) -> usize {
        let (n, np) = (self.n, self.players);
        match self.basis {
            NeBasis::Exchangeable if class == 0 => 1 + n + if np > 1 { n } else { 0 },
            NeBasis::Exchangeable => 1 + 2 * n + if np > 2 { n } else { 0 },
            NeBasis::Full => 1 + np * n,
        }
    }

    fn max_len(&self) -> usize {
        (0..self.classes()).map(|c| self.len(c)).max().unwrap_or(1)
    }

    /// Writes the features of pair `(i, j)`; `sum` is the sum of all states.
    /// Returns the class and the feature count.
    fn eval(&self, xs: &[f64], sum: &[f64], i: usize, j: usize, out: &mut [f64]) -> (usize, usize) {
        let (n, np) = (self.n, self.players);
        let class = self.class(i, j);
        let len = self.len(class);
        out[0] = 1.0;
        match self.basis {
            NeBasis::Full => out[1..len].copy_from_slice(xs),
            NeBasis::Exchangeable => {
                let xi = &xs[i * n..(i + 1) * n];
                out[1..1 + n].copy_from_slice(xi);
                if i == j {
                    if np > 1 {
                        let inv = 1.0 / (np - 1) as f64;
                        for a in 0..n {
                            out[1 + n + a] = (sum[a] - xi[a]) * inv;
                        }
                    }
                } else {
                    let xj = &xs[j * n..(j + 1) * n];
                    out[1 + n..1 + 2 * n].copy_from_slice(xj);
                    if np > 2 {
                        let inv = 1.0 / (np - 2) as f64;
                        for a in 0..n {
                            out[1 + 2 * n + a] = (sum[a] - xi[a] - xj[a]) * inv;
                        }
                    }
                }
            }
        }
        (class, len)
    }
}

fn state_sum(xs: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for atom in xs.chunks_exact(n) {
        for (a, v) in s.iter_mut().zip(atom) {
            *a += v;
        }
    }
    s
}

/// Regression fits of the N-player adjoints: `fits[k][class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeField {
    features: Features,
    pub layout: ThetaLayout,
    pub steps: Vec<Vec<StepFit>>,
}

impl NeField {
    pub fn zero(basis: NeBasis, layout: ThetaLayout, players: usize, steps: usize) -> Self {
        let features = Features {
            basis,
            n: layout.n,
            players,
        };
        let nd = layout.n * layout.d;
        let fits = (0..features.classes())
            .map(|c| StepFit {
                y: Coefficients::zeros(features.len(c), layout.n),
                z: Coefficients::zeros(features.len(c), 2 * nd),
            })
            .collect::<Vec<_>>();
        Self {
            features,
            layout,
            steps: vec![fits; steps],
        }
    }

    pub fn players(&self) -> usize {
        self.features.players
    }

    pub fn basis(&self) -> NeBasis {
        self.features.basis
    }

    /// `(Ŷ^{i,j}, Z^{i,j,j}, Z^{0,i,j})` for every pair at step `k`, written
    /// pair-major into `out` (`N x N x (n + 2·n·d)`).
    pub fn eval_all(&self, k: usize, xs: &[f64], out: &mut [f64]) {
        eval_fits(&self.features, self.layout, &self.steps[k], xs, out)
    }

    /// Number of fits that needed the ridge fallback.
    pub fn ridge_fallbacks(&self) -> usize {
        self.steps
            .iter()
            .flatten()
            .map(|s| s.y.ridge as usize + s.z.ridge as usize)
            .sum()
    }
}

fn eval_fits(features: &Features, layout: ThetaLayout, fits: &[StepFit], xs: &[f64], out: &mut [f64]) {
    let (n, np) = (layout.n, features.players);
    let al = layout.adjoint_len();
    let sum = state_sum(xs, n);
    let mut phi = vec![0.0; features.max_len()];
    for i in 0..np {
        for j in 0..np {
            let (class, len) = features.eval(xs, &sum, i, j, &mut phi);
            let o = &mut out[(i * np + j) * al..(i * np + j + 1) * al];
            fits[class].y.predict(&phi[..len], &mut o[..n]);
            fits[class].z.predict(&phi[..len], &mut o[n..]);
        }
    }
}

/// Pooled least squares for every class at one step. `target(r, i, j, out)`
/// writes the regression target of pair `(i, j)` in repetition `r`.
fn fit_classes<F>(features: &Features, reps: usize, xk: &[f64], targets: usize, target: F) -> Vec<Coefficients>
where
    F: Fn(usize, usize, usize, &mut [f64]) + Sync,
{
    let (n, np) = (features.n, features.players);
    let rep_states = |r: usize| &xk[r * np * n..(r + 1) * np * n];
    match features.basis {
        NeBasis::Exchangeable => {
            let partial: Vec<Vec<LeastSquares>> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let xs = rep_states(r);
                    let sum = state_sum(xs, n);
                    let mut ls: Vec<LeastSquares> =
                        (0..features.classes()).map(|c| LeastSquares::new(features.len(c), targets)).collect();
                    let mut phi = vec![0.0; features.max_len()];
                    let mut y = vec![0.0; targets];
                    for i in 0..np {
                        for j in 0..np {
                            let (class, len) = features.eval(xs, &sum, i, j, &mut phi);
                            target(r, i, j, &mut y);
                            ls[class].add(&phi[..len], &y);
                        }
                    }
                    ls
                })
                .collect();
            let mut total: Vec<LeastSquares> =
                (0..features.classes()).map(|c| LeastSquares::new(features.len(c), targets)).collect();
            for part in &partial {
                for (t, p) in total.iter_mut().zip(part) {
                    t.merge(p);
                }
            }
            total.iter().map(LeastSquares::solve).collect()
        }
        NeBasis::Full => (0..features.classes())
            .into_par_iter()
            .map(|class| {
                let (i, j) = (class / np, class % np);
                let mut ls = LeastSquares::new(features.len(class), targets);
                let mut phi = vec![0.0; features.len(class)];
                let mut y = vec![0.0; targets];
                for r in 0..reps {
                    let xs = rep_states(r);
                    features.eval(xs, &[], i, j, &mut phi);
                    target(r, i, j, &mut y);
                    ls.add(&phi, &y);
                }
                ls.solve()
            })
            .collect(),
    }
}

/// Packs `Θ^{N,i} = (xⁱ, Ŷ^{i,i}, Z^{i,i,i}, Z^{0,i,i})`.
fn pack_theta(n: usize, np: usize, al: usize, xs: &[f64], adj: &[f64], i: usize, out: &mut [f64]) {
    out[..n].copy_from_slice(&xs[i * n..(i + 1) * n]);
    out[n..].copy_from_slice(&adj[(i * np + i) * al..(i * np + i + 1) * al]);
}

#[allow(clippy::too_many_arguments)]
fn zeta_with_laws<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    xs: &[f64],
    adj: &[f64],
    alpha: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    out: &mut [f64],
) {
    let dims = c.dims();
    let (n, l, nd) = (dims.n, dims.l, dims.nd());
    let al = n + 2 * nd;
    let np = xs.len() / n;
    let inv_n = 1.0 / np as f64;
    let state_free = c.control_law_derivatives_state_free();
    let mut jb = vec![0.0; n * l];
    let mut js = vec![0.0; nd * l];
    let mut js0 = vec![0.0; nd * l];
    let mut acc = vec![0.0; l];
    let mut sum = vec![0.0; al];
    for i in 0..np {
        let xi = &xs[i * n..(i + 1) * n];
        let ai = &alpha[i * l..(i + 1) * l];
        c.cost_dnu(t, xi, mu, nu, ai, &mut acc);
        let row = &adj[i * np * al..(i + 1) * np * al];
        if state_free {
            sum.iter_mut().for_each(|s| *s = 0.0);
            for a in row.chunks_exact(al) {
                for (s, v) in sum.iter_mut().zip(a) {
                    *s += v;
                }
            }
            c.drift_dnu(t, xi, mu, nu, ai, &mut jb);
            c.vol_dnu(t, xi, mu, nu, ai, &mut js);
            c.common_vol_dnu(t, xi, mu, nu, ai, &mut js0);
            flat_t_vec_add(&jb, n, l, &sum[..n], 1.0, &mut acc);
            flat_t_vec_add(&js, nd, l, &sum[n..n + nd], 1.0, &mut acc);
            flat_t_vec_add(&js0, nd, l, &sum[n + nd..], 1.0, &mut acc);
        } else {
            for (j, a) in row.chunks_exact(al).enumerate() {
                let xj = &xs[j * n..(j + 1) * n];
                c.drift_dnu(t, xj, mu, nu, ai, &mut jb);
                c.vol_dnu(t, xj, mu, nu, ai, &mut js);
                c.common_vol_dnu(t, xj, mu, nu, ai, &mut js0);
                flat_t_vec_add(&jb, n, l, &a[..n], 1.0, &mut acc);
                flat_t_vec_add(&js, nd, l, &a[n..n + nd], 1.0, &mut acc);
                flat_t_vec_add(&js0, nd, l, &a[n + nd..], 1.0, &mut acc);
            }
        }
        for (o, v) in out[i * l..(i + 1) * l].iter_mut().zip(&acc) {
            *o = inv_n * v;
        }
    }
}

/// Control-interaction field of one repetition at one step:
///
/// ```text
/// ζⁱ = (1/N) ∂_ν f(xⁱ, ·)(αⁱ) + (1/N) Σ_j [ ∂_ν b(xʲ, ·)(αⁱ)ᵀ Y^{i,j}
///       + ∂_ν σ(xʲ, ·)(αⁱ)ᵀ Z^{i,j,j} + ∂_ν σ⁰(xʲ, ·)(αⁱ)ᵀ Z^{0,i,j} ]
/// ```
///
/// with every derivative at the empirical laws of `states` (`N x n`) and
/// `controls` (`N x ℓ`). `adjoints` is pair-major, `N x N x (n + 2·n·d)`.
/// Returns `N x ℓ`.
pub fn zeta_eval<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    states: &[f64],
    adjoints: &[f64],
    controls: &[f64],
) -> Result<Vec<f64>> {
    let dims = c.dims();
    let (n, l) = (dims.n, dims.l);
    let al = ThetaLayout::from(dims).adjoint_len();
    if states.is_empty() || states.len() % n != 0 {
        return Err(Error::Config("states must be a non-empty N x n array".into()));
    }
    let np = states.len() / n;
    if controls.len() != np * l || adjoints.len() != np * np * al {
        return Err(Error::Config("controls or adjoints do not match the player count".into()));
    }
    let mu = EmpiricalMeasure::new(n, states.to_vec())?;
    let nu = EmpiricalMeasure::new(l, controls.to_vec())?;
    let mut out = vec![0.0; np * l];
    zeta_with_laws(c, t, states, adjoints, controls, &mu, &nu, &mut out);
    Ok(out)
}

/// Controls and `ζ` of one repetition: iterates `α ← Λ(Θ, μ^N, ζ(α))` from
/// `ζ = 0` until successive controls agree to [`INNER_TOL`]. The returned
/// `ζ` is the one that produced the returned `α`.
fn rep_controls<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    xs: &[f64],
    adj: &[f64],
    mu: &EmpiricalMeasure,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dims = c.dims();
    let (n, l) = (dims.n, dims.l);
    let layout = ThetaLayout::from(dims);
    let al = layout.adjoint_len();
    let np = xs.len() / n;
    let mut theta = vec![0.0; layout.theta_len()];
    let mut alpha = vec![0.0; np * l];
    let mut next = vec![0.0; np * l];
    let mut zeta = vec![0.0; np * l];
    for i in 0..np {
        pack_theta(n, np, al, xs, adj, i, &mut theta);
        c.minimize_hamiltonian(t, &theta, mu, &zeta[i * l..(i + 1) * l], &mut alpha[i * l..(i + 1) * l])?;
    }
    let mut diff = f64::INFINITY;
    for _ in 0..INNER_MAX_ITER {
        let nu = EmpiricalMeasure::new(l, alpha.clone())?;
        zeta_with_laws(c, t, xs, adj, &alpha, mu, &nu, &mut zeta);
        for i in 0..np {
            pack_theta(n, np, al, xs, adj, i, &mut theta);
            c.minimize_hamiltonian(t, &theta, mu, &zeta[i * l..(i + 1) * l], &mut next[i * l..(i + 1) * l])?;
        }
        diff = next.iter().zip(&alpha).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = 1.0 + next.iter().map(|a| a.abs()).fold(0.0, f64::max);
        std::mem::swap(&mut alpha, &mut next);
        if diff <= INNER_TOL * scale {
            return Ok((alpha, zeta));
        }
        if !diff.is_finite() {
            break;
        }
    }
    Err(Error::Minimizer {
        iterations: INNER_MAX_ITER,
        residual: diff,
    })
}

/// `∂_{x_j} H^{N,i}` for every pair of one repetition, pair-major.
#[allow(clippy::too_many_arguments)]
fn rep_drivers<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    xs: &[f64],
    adj: &[f64],
    alpha: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    out: &mut [f64],
) {
    let dims = c.dims();
    let (n, l, nd) = (dims.n, dims.l, dims.nd());
    let al = n + 2 * nd;
    let np = xs.len() / n;
    let inv_n = 1.0 / np as f64;
    let x = |j: usize| &xs[j * n..(j + 1) * n];
    let a = |j: usize| &alpha[j * l..(j + 1) * l];

    let mut bx = vec![0.0; np * n * n];
    let mut sx = vec![0.0; np * nd * n];
    let mut s0x = vec![0.0; np * nd * n];
    for j in 0..np {
        c.drift_dx(t, x(j), a(j), mu, nu, &mut bx[j * n * n..(j + 1) * n * n]);
        c.vol_dx(t, x(j), a(j), mu, nu, &mut sx[j * nd * n..(j + 1) * nd * n]);
        c.common_vol_dx(t, x(j), a(j), mu, nu, &mut s0x[j * nd * n..(j + 1) * nd * n]);
    }
    let law_dynamics = c.dynamics_depend_on_state_law();
    // ∂_μ b(x^k)(x^j) and friends, indexed (k, j).
    let (mut bm, mut sm, mut s0m) = (Vec::new(), Vec::new(), Vec::new());
    if law_dynamics {
        bm = vec![0.0; np * np * n * n];
        sm = vec![0.0; np * np * nd * n];
        s0m = vec![0.0; np * np * nd * n];
        for k in 0..np {
            for j in 0..np {
                let q = k * np + j;
                c.drift_dmu(t, x(k), a(k), mu, nu, x(j), &mut bm[q * n * n..(q + 1) * n * n]);
                c.vol_dmu(t, x(k), a(k), mu, nu, x(j), &mut sm[q * nd * n..(q + 1) * nd * n]);
                c.common_vol_dmu(t, x(k), a(k), mu, nu, x(j), &mut s0m[q * nd * n..(q + 1) * nd * n]);
            }
        }
    }
    let mut fx = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for i in 0..np {
        c.cost_dx(t, x(i), a(i), mu, nu, &mut fx);
        for j in 0..np {
            let o = &mut out[(i * np + j) * n..(i * np + j + 1) * n];
            if i == j {
                o.copy_from_slice(&fx);
            } else {
                o.iter_mut().for_each(|v| *v = 0.0);
            }
            c.cost_dmu(t, x(i), a(i), mu, nu, x(j), &mut fm);
            for (v, m) in o.iter_mut().zip(&fm) {
                *v += inv_n * m;
            }
            let adj_ij = &adj[(i * np + j) * al..(i * np + j + 1) * al];
            flat_t_vec_add(&bx[j * n * n..(j + 1) * n * n], n, n, &adj_ij[..n], 1.0, o);
            flat_t_vec_add(&sx[j * nd * n..(j + 1) * nd * n], nd, n, &adj_ij[n..n + nd], 1.0, o);
            flat_t_vec_add(&s0x[j * nd * n..(j + 1) * nd * n], nd, n, &adj_ij[n + nd..], 1.0, o);
            if law_dynamics {
                for k in 0..np {
                    let q = k * np + j;
                    let adj_ik = &adj[(i * np + k) * al..(i * np + k + 1) * al];
                    flat_t_vec_add(&bm[q * n * n..(q + 1) * n * n], n, n, &adj_ik[..n], inv_n, o);
                    flat_t_vec_add(&sm[q * nd * n..(q + 1) * nd * n], nd, n, &adj_ik[n..n + nd], inv_n, o);
                    flat_t_vec_add(&s0m[q * nd * n..(q + 1) * nd * n], nd, n, &adj_ik[n + nd..], inv_n, o);
                }
            }
        }
    }
}

/// `Y^{i,j}_K` for every pair of one repetition.
fn rep_terminal<C: CoefficientSet + ?Sized>(c: &C, xs: &[f64], out: &mut [f64]) -> Result<()> {
    let n = c.dims().n;
    let np = xs.len() / n;
    let inv_n = 1.0 / np as f64;
    let mu = EmpiricalMeasure::new(n, xs.to_vec())?;
    let mut g = vec![0.0; n];
    let mut gm = vec![0.0; n];
    for i in 0..np {
        let xi = &xs[i * n..(i + 1) * n];
        c.terminal_dx(xi, &mu, &mut g);
        for j in 0..np {
            c.terminal_dmu(xi, &mu, &xs[j * n..(j + 1) * n], &mut gm);
            let o = &mut out[(i * np + j) * n..(i * np + j + 1) * n];
            for a in 0..n {
                o[a] = if i == j { g[a] } else { 0.0 } + inv_n * gm[a];
            }
        }
    }
    Ok(())
}

fn check_finite(values: &[f64], step: usize, what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
        None => Ok(()),
        Some(i) => Err(Error::Divergence {
            step,
            detail: format!("{what} entry {i} is {}", values[i]),
        }),
    }
}

/// Solved N-player paths. `path.theta` has one world per repetition and one
/// particle per player and stores `Θ^{N,i} = (Xⁱ, Y^{i,i}, Z^{i,i,i},
/// Z^{0,i,i})` with `Ŷ^{i,i}` alongside; `path.drivers` holds
/// `∂_{x_i} H^{N,i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTensor {
    pub path: Trajectory,
    /// `K x R x N x ℓ`.
    pub zeta: Vec<f64>,
    /// The full tensor `Y^{i,j}_0`, `R x N x N x n`.
    pub y0_full: Vec<f64>,
    /// `max |Y^{i,j}_k|` over `i ≠ j` and every step and repetition.
    pub offdiag_sup: f64,
}

impl AdjointTensor {
    pub fn players(&self) -> usize {
        self.path.theta.particles()
    }

    pub fn repetitions(&self) -> usize {
        self.path.theta.worlds()
    }

    pub fn zeta(&self, k: usize, r: usize, i: usize) -> &[f64] {
        let l = self.path.theta.layout().l;
        let q = self.path.theta.node(k, r, i) * l;
        &self.zeta[q..q + l]
    }

    /// `(1/N) Ê[Σ_k Σᵢ |ζⁱ_k|² dt]`.
    pub fn zeta_energy(&self) -> f64 {
        let th = &self.path.theta;
        let dt = th.grid().dt();
        let total: f64 = self.zeta.iter().map(|z| z * z).sum();
        total * dt / (self.players() * self.repetitions()) as f64
    }

    /// `Y^{i,j}_0` of repetition `r`.
    pub fn y0(&self, r: usize, i: usize, j: usize) -> &[f64] {
        let n = self.path.theta.layout().n;
        let np = self.players();
        let q = ((r * np + i) * np + j) * n;
        &self.y0_full[q..q + n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeSolution {
    pub tensor: AdjointTensor,
    pub field: NeField,
    pub residual_history: Vec<f64>,
    pub foc_residual_max: f64,
}

fn check_bundles<C: CoefficientSet + ?Sized>(c: &C, cfg: &NeConfig, bundles: &[NoiseBundle]) -> Result<()> {
    cfg.validate()?;
    let dims = c.dims();
    if bundles.len() != cfg.repetitions {
        return Err(Error::Config(format!(
            "expected {} repetitions, got {} noise worlds",
            cfg.repetitions,
            bundles.len()
        )));
    }
    for b in bundles {
        if b.paths() < cfg.players {
            return Err(Error::Config(format!(
                "noise world has {} paths but {} players are required",
                b.paths(),
                cfg.players
            )));
        }
        if *b.grid() != cfg.grid {
            return Err(Error::Config("noise grid differs from the solver grid".into()));
        }
        if b.noise_dim() != dims.d || b.state_dim() != dims.n {
            return Err(Error::Config("noise dimensions do not match the model".into()));
        }
    }
    Ok(())
}

/// Forward Euler sweep of all players with adjoints read off `field`.
/// Returns the states, `(K+1) x R x N x n`.
pub fn ne_forward<C: CoefficientSet + ?Sized>(
    c: &C,
    cfg: &NeConfig,
    bundles: &[NoiseBundle],
    field: &NeField,
) -> Result<Vec<f64>> {
    let dims = c.dims();
    let (n, l, d, nd) = (dims.n, dims.l, dims.d, dims.nd());
    let al = ThetaLayout::from(dims).adjoint_len();
    let (reps, np) = (cfg.repetitions, cfg.players);
    let steps = cfg.grid.steps();
    let dt = cfg.grid.dt();
    if field.players() != np || field.steps.len() != steps {
        return Err(Error::Config("decoupling field does not match the game".into()));
    }
    let per_rep: Vec<Vec<f64>> = bundles
        .par_iter()
        .map(|bundle| -> Result<Vec<f64>> {
            let mut x = vec![0.0; (steps + 1) * np * n];
            for i in 0..np {
                x[i * n..(i + 1) * n].copy_from_slice(bundle.initial(i));
            }
            let mut adj = vec![0.0; np * np * al];
            let mut b = vec![0.0; n];
            let mut s = vec![0.0; nd];
            let mut s0 = vec![0.0; nd];
            for k in 0..steps {
                let t = Node::new(k, cfg.grid.time(k));
                let (done, rest) = x.split_at_mut((k + 1) * np * n);
                let xs = &done[k * np * n..];
                field.eval_all(k, xs, &mut adj);
                let mu = EmpiricalMeasure::new(n, xs.to_vec())?;
                let (alpha, _) = rep_controls(c, t, xs, &adj, &mu)?;
                let nu = EmpiricalMeasure::new(l, alpha.clone())?;
                let dw0 = bundle.common(k);
                for i in 0..np {
                    let (xi, ai) = (&xs[i * n..(i + 1) * n], &alpha[i * l..(i + 1) * l]);
                    c.drift(t, xi, ai, &mu, &nu, &mut b);
                    c.vol(t, xi, ai, &mu, &nu, &mut s);
                    c.common_vol(t, xi, ai, &mu, &nu, &mut s0);
                    let dw = bundle.idio(i, k);
                    for a in 0..n {
                        let mut v = xi[a] + b[a] * dt;
                        for q in 0..d {
                            v += s[a * d + q] * dw[q] + s0[a * d + q] * dw0[q];
                        }
                        rest[i * n + a] = v;
                    }
                }
                check_finite(&rest[..np * n], k + 1, "state")?;
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;
    let mut x = vec![0.0; (steps + 1) * reps * np * n];
    let slab = np * n;
    for (r, xr) in per_rep.iter().enumerate() {
        for k in 0..=steps {
            let dst = (k * reps + r) * slab;
            x[dst..dst + slab].copy_from_slice(&xr[k * slab..(k + 1) * slab]);
        }
    }
    Ok(x)
}

/// Output of one backward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct NeSweep {
    pub tensor: AdjointTensor,
    pub field: NeField,
}

struct RepStep {
    adj: Vec<f64>,
    alpha: Vec<f64>,
    zeta: Vec<f64>,
    y: Vec<f64>,
    drivers: Vec<f64>,
}

/// Regression-based backward sweep along fixed state paths, streaming the
/// full adjoint tensor one step at a time.
pub fn ne_backward<C: CoefficientSet + ?Sized>(
    c: &C,
    cfg: &NeConfig,
    bundles: &[NoiseBundle],
    x: &[f64],
) -> Result<NeSweep> {
    let dims = c.dims();
    let layout = ThetaLayout::from(dims);
    let (n, l, d, nd) = (dims.n, dims.l, dims.d, dims.nd());
    let al = layout.adjoint_len();
    let (reps, np) = (cfg.repetitions, cfg.players);
    let steps = cfg.grid.steps();
    let dt = cfg.grid.dt();
    let slab = np * n;
    if x.len() != (steps + 1) * reps * slab {
        return Err(Error::Config("state paths do not match the game".into()));
    }
    let features = Features {
        basis: cfg.basis,
        n,
        players: np,
    };
    let pair = np * np * n;

    let mut theta = ThetaPath::empty(cfg.grid, layout, reps, np);
    theta.x.copy_from_slice(x);
    let mut alpha = vec![0.0; steps * reps * np * l];
    let mut zeta = vec![0.0; steps * reps * np * l];
    let mut drivers = vec![0.0; steps * reps * np * n];
    let mut fits = Vec::with_capacity(steps);
    let mut offdiag: f64 = 0.0;
    let offdiag_of = |y: &[f64]| -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..np {
            for j in (0..np).filter(|&j| j != i) {
                for v in &y[(i * np + j) * n..(i * np + j + 1) * n] {
                    m = m.max(v.abs());
                }
            }
        }
        m
    };

    let xk_of = |k: usize| &x[k * reps * slab..(k + 1) * reps * slab];
    let mut y_next = vec![0.0; reps * pair];
    y_next
        .par_chunks_mut(pair)
        .enumerate()
        .try_for_each(|(r, out)| rep_terminal(c, &xk_of(steps)[r * slab..(r + 1) * slab], out))?;
    for r in 0..reps {
        offdiag = offdiag.max(offdiag_of(&y_next[r * pair..(r + 1) * pair]));
        for i in 0..np {
            let q = theta.node(steps, r, i) * n;
            let src = &y_next[r * pair + (i * np + i) * n..r * pair + (i * np + i + 1) * n];
            theta.y[q..q + n].copy_from_slice(src);
            theta.y_hat[q..q + n].copy_from_slice(src);
        }
    }

    for k in (0..steps).rev() {
        let t = Node::new(k, cfg.grid.time(k));
        let xk = xk_of(k);
        let y_at = |r: usize, i: usize, j: usize| {
            let q = r * pair + (i * np + j) * n;
            &y_next[q..q + n]
        };
        let fit_y = fit_classes(&features, reps, xk, n, |r, i, j, out| out.copy_from_slice(y_at(r, i, j)));

        // Ŷ at every pair, then the centred Z targets.
        let mut y_hat = vec![0.0; reps * pair];
        y_hat.par_chunks_mut(pair).enumerate().for_each(|(r, out)| {
            let xs = &xk[r * slab..(r + 1) * slab];
            let sum = state_sum(xs, n);
            let mut phi = vec![0.0; features.max_len()];
            for i in 0..np {
                for j in 0..np {
                    let (class, len) = features.eval(xs, &sum, i, j, &mut phi);
                    fit_y[class].predict(&phi[..len], &mut out[(i * np + j) * n..(i * np + j + 1) * n]);
                }
            }
        });
        let fit_z = fit_classes(&features, reps, xk, 2 * nd, |r, i, j, out| {
            let q = r * pair + (i * np + j) * n;
            let dw = bundles[r].idio(j, k);
            let dw0 = bundles[r].common(k);
            for a in 0..n {
                let res = (y_next[q + a] - y_hat[q + a]) / dt;
                for b in 0..d {
                    out[a * d + b] = res * dw[b];
                    out[nd + a * d + b] = res * dw0[b];
                }
            }
        });
        let step_fits: Vec<StepFit> = fit_y.into_iter().zip(fit_z).map(|(y, z)| StepFit { y, z }).collect();

        let per_rep: Vec<RepStep> = (0..reps)
            .into_par_iter()
            .map(|r| -> Result<RepStep> {
                let xs = &xk[r * slab..(r + 1) * slab];
                let mut adj = vec![0.0; np * np * al];
                eval_fits(&features, layout, &step_fits, xs, &mut adj);
                let mu = EmpiricalMeasure::new(n, xs.to_vec())?;
                let (alpha, zeta) = rep_controls(c, t, xs, &adj, &mu)?;
                let nu = EmpiricalMeasure::new(l, alpha.clone())?;
                let mut f = vec![0.0; pair];
                rep_drivers(c, t, xs, &adj, &alpha, &mu, &nu, &mut f);
                let mut y = vec![0.0; pair];
                for q in 0..np * np {
                    for a in 0..n {
                        y[q * n + a] = adj[q * al + a] + f[q * n + a] * dt;
                    }
                }
                let mut drivers = vec![0.0; np * n];
                for i in 0..np {
                    drivers[i * n..(i + 1) * n].copy_from_slice(&f[(i * np + i) * n..(i * np + i + 1) * n]);
                }
                Ok(RepStep {
                    adj,
                    alpha,
                    zeta,
                    y,
                    drivers,
                })
            })
            .collect::<Result<_>>()?;

        for (r, rs) in per_rep.iter().enumerate() {
            offdiag = offdiag.max(offdiag_of(&rs.y));
            y_next[r * pair..(r + 1) * pair].copy_from_slice(&rs.y);
            for i in 0..np {
                let node = theta.node(k, r, i);
                let a = &rs.adj[(i * np + i) * al..(i * np + i + 1) * al];
                theta.y_hat[node * n..(node + 1) * n].copy_from_slice(&a[..n]);
                theta.z[node * nd..(node + 1) * nd].copy_from_slice(&a[n..n + nd]);
                theta.z0[node * nd..(node + 1) * nd].copy_from_slice(&a[n + nd..]);
                theta.y[node * n..(node + 1) * n].copy_from_slice(&rs.y[(i * np + i) * n..(i * np + i + 1) * n]);
                alpha[node * l..(node + 1) * l].copy_from_slice(&rs.alpha[i * l..(i + 1) * l]);
                zeta[node * l..(node + 1) * l].copy_from_slice(&rs.zeta[i * l..(i + 1) * l]);
                drivers[node * n..(node + 1) * n].copy_from_slice(&rs.drivers[i * n..(i + 1) * n]);
            }
        }
        check_finite(&y_next, k, "adjoint")?;
        fits.push(step_fits);
    }
    fits.reverse();
    Ok(NeSweep {
        tensor: AdjointTensor {
            path: Trajectory { theta, alpha, drivers },
            zeta,
            y0_full: y_next,
            offdiag_sup: offdiag,
        },
        field: NeField {
            features,
            layout,
            steps: fits,
        },
    })
}

/// Damped Picard iteration on the N-player system from the zero field, one
/// noise world per repetition (the first `N` paths of each are used).
///
/// The residual is the discrete `H²` distance between successive
/// `Θ^{N,i}` paths. Uniqueness of the equilibrium is not known in general;
/// the solver follows the branch reached from zero adjoints.
pub fn ne_picard_solve<C: CoefficientSet + ?Sized>(c: &C, cfg: &NeConfig, bundles: &[NoiseBundle]) -> Result<NeSolution> {
    check_bundles(c, cfg, bundles)?;
    let layout = ThetaLayout::from(c.dims());
    let zero = NeField::zero(cfg.basis, layout, cfg.players, cfg.grid.steps());
    let mut x = ne_forward(c, cfg, bundles, &zero)?;
    let mut current = ne_backward(c, cfg, bundles, &x)?;
    let rho = cfg.damping;
    let mut history = Vec::new();
    for _ in 0..cfg.max_picard {
        let forward = ne_forward(c, cfg, bundles, &current.field)?;
        for (xo, xf) in x.iter_mut().zip(&forward) {
            *xo = (1.0 - rho) * *xo + rho * xf;
        }
        let next = ne_backward(c, cfg, bundles, &x)?;
        let res = h2_distance(&cfg.grid, &current.tensor.path.theta, &next.tensor.path.theta);
        history.push(res);
        current = next;
        if !res.is_finite() {
            return Err(Error::Divergence {
                step: cfg.grid.steps(),
                detail: "non-finite Picard residual".into(),
            });
        }
        if res <= cfg.picard_tol {
            let mut sol = NeSolution {
                tensor: current.tensor,
                field: current.field,
                residual_history: history,
                foc_residual_max: 0.0,
            };
            sol.foc_residual_max = ne_residual(&sol, c)?;
            if sol.foc_residual_max > cfg.foc_tol {
                return Err(Error::Minimizer {
                    iterations: INNER_MAX_ITER,
                    residual: sol.foc_residual_max,
                });
            }
            return Ok(sol);
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_picard,
        tol: cfg.picard_tol,
        last: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// `max |∂_a H(Θ^{N,i}, αⁱ, μ^N) + ζⁱ|` over every repetition, player and step.
pub fn ne_residual<C: CoefficientSet + ?Sized>(sol: &NeSolution, c: &C) -> Result<f64> {
    let tensor = &sol.tensor;
    let theta = &tensor.path.theta;
    let layout = theta.layout();
    let mut buf = vec![0.0; layout.theta_len()];
    let mut worst: f64 = 0.0;
    for k in 0..theta.grid().steps() {
        let t = Node::new(k, theta.grid().time(k));
        for r in 0..theta.worlds() {
            let mu = EmpiricalMeasure::new(layout.n, theta.world_states(k, r).to_vec())?;
            for i in 0..theta.particles() {
                theta.theta_into(r, i, k, &mut buf);
                worst = worst.max(foc_residual(c, t, &buf, &mu, tensor.zeta(k, r, i), tensor.path.alpha(k, r, i)));
            }
        }
    }
    Ok(worst)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LqCoefficients, LqModel, ScalarLq};

    fn lq(s: ScalarLq) -> LqModel {
        LqModel::new_unchecked(&LqCoefficients::from(s)).unwrap()
    }

    fn interacting() -> ScalarLq {
        ScalarLq {
            b: 1.0,
            d: 0.3,
            d0: 0.2,
            p: 1.0,
            pbar: 0.5,
            c1: 1.0,
            c2: 0.7,
            ..Default::default()
        }
    }

    const T: Node = Node { k: 0, t: 0.0 };

    #[test]
    fn no_control_law_terms_give_zero_zeta() {
        let c = lq(ScalarLq {
            c2: 0.0,
            pbar: 0.0,
            ..interacting()
        });
        let adj: Vec<f64> = (0..27).map(|i| (i as f64 * 0.37).sin()).collect();
        let z = zeta_eval(&c, T, &[0.1, -0.4, 2.0], &adj, &[0.5, 1.0, -2.0]).unwrap();
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn single_player_cost_term() {
        let c = lq(ScalarLq {
            p: 1.0,
            pbar: 1.0,
            c1: 1.0,
            ..Default::default()
        });
        let z = zeta_eval(&c, T, &[0.3], &[0.0, 0.0, 0.0], &[2.0]).unwrap();
        assert_eq!(z, vec![2.0]);
    }

    #[test]
    fn adjoint_part_is_linear() {
        let c = lq(interacting());
        let xs = [0.1, -0.4, 2.0];
        let a = [0.5, 1.0, -2.0];
        let adj: Vec<f64> = (0..27).map(|i| (i as f64 * 0.37).sin()).collect();
        let f_part = zeta_eval(&c, T, &xs, &[0.0; 27], &a).unwrap();
        let one = zeta_eval(&c, T, &xs, &adj, &a).unwrap();
        let scaled: Vec<f64> = adj.iter().map(|v| 2.5 * v).collect();
        let two = zeta_eval(&c, T, &xs, &scaled, &a).unwrap();
        for i in 0..3 {
            let expect = f_part[i] + 2.5 * (one[i] - f_part[i]);
            assert!((two[i] - expect).abs() <= 1e-14, "{i}");
        }
    }

    #[test]
    fn shapes_are_checked() {
        let c = lq(interacting());
        assert!(zeta_eval(&c, T, &[], &[], &[]).is_err());
        assert!(zeta_eval(&c, T, &[0.0, 1.0], &[0.0; 12], &[0.0]).is_err());
        assert!(zeta_eval(&c, T, &[0.0, 1.0], &[0.0; 6], &[0.0, 1.0]).is_err());
    }
}
