//! Particle solver for the conditional McKean–Vlasov FBSDE
//!
//! ```text
//! dX = B(Θ, L¹(Θ)) dt + Σ(Θ, L¹(Θ)) dW + Σ⁰(Θ, L¹(Θ)) dW⁰
//! dY = −F(Θ, L¹(Θ)) dt + Z dW + Z⁰ dW⁰,      Y_T = G(X_T, L¹(X_T))
//! ```
//!
//! Each world is one common-noise path carrying `M` particles whose
//! empirical law stands in for `L¹`. Conditional expectations are least
//! squares regressions pooled over all worlds; the world mean is a
//! regressor, which is how the fit sees the common noise.
//!
//! Time stepping: at step `k` the adjoint entering `Θ_k` is
//! `Ŷ_k = E[Y_{k+1} | ℱ_k]`, the control is `α_k = Λ(Θ_k, μ_k, 0)` and the
//! BSDE value is `Y_k = Ŷ_k + F(Θ_k, ξ_k) dt`. This is the maximum
//! principle of the Euler-discretised control problem.

mod regression;
mod system;

pub use regression::{Basis, DecouplingField, FeatureMap, StepFit};
pub use system::{backward_regress, forward_step, simulate_world, BackwardSweep};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hamiltonian::{foc_residual, terminal_g, ThetaLayout};
use crate::measures::EmpiricalMeasure;
use crate::model::{CoefficientSet, MeasureFlow, Node};
use crate::stochastic::{stream_rng, NoiseBundle, StreamRole, TimeGrid};

/// States above this norm abort a sweep.
pub const DIVERGENCE_BOUND: f64 = 1e8;

/// Continuation in the interpolation parameter `δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationConfig {
    pub enabled: bool,
    pub initial_step: f64,
    pub min_step: f64,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            initial_step: 0.25,
            min_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MkvConfig {
    pub grid: TimeGrid,
    pub worlds: usize,
    pub particles: usize,
    /// Picard damping `ρ ∈ (0, 1]`.
    pub damping: f64,
    pub picard_tol: f64,
    pub max_picard: usize,
    pub continuation: ContinuationConfig,
    pub basis: Basis,
}

impl MkvConfig {
    pub fn new(grid: TimeGrid, worlds: usize, particles: usize) -> Self {
        Self {
            grid,
            worlds,
            particles,
            damping: 0.5,
            picard_tol: 1e-6,
            max_picard: 200,
            continuation: ContinuationConfig::default(),
            basis: Basis::Affine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.worlds == 0 {
            errs.push("worlds must be ≥ 1".to_string());
        }
        if self.particles == 0 {
            errs.push("particles must be ≥ 1".to_string());
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
        let c = &self.continuation;
        if c.enabled && !(c.initial_step > 0.0 && c.initial_step <= 1.0 && c.min_step > 0.0 && c.min_step <= c.initial_step) {
            errs.push("continuation steps must satisfy 0 < min_step ≤ initial_step ≤ 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// `Θ = (X, Y, Z, Z⁰)` on every (step, world, particle), stored step-major.
/// Alongside the BSDE value `Y` it keeps the adjoint `Ŷ` that enters the
/// control; at the terminal step `Ŷ_K = Y_K` and `Z_K = Z⁰_K = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaPath {
    grid: TimeGrid,
    layout: ThetaLayout,
    worlds: usize,
    particles: usize,
    pub(crate) x: Vec<f64>,
    pub(crate) y: Vec<f64>,
    pub(crate) y_hat: Vec<f64>,
    pub(crate) z: Vec<f64>,
    pub(crate) z0: Vec<f64>,
}

impl ThetaPath {
    pub(crate) fn empty(grid: TimeGrid, layout: ThetaLayout, worlds: usize, particles: usize) -> Self {
        let nodes = (grid.steps() + 1) * worlds * particles;
        let nd = layout.n * layout.d;
        Self {
            grid,
            layout,
            worlds,
            particles,
            x: vec![0.0; nodes * layout.n],
            y: vec![0.0; nodes * layout.n],
            y_hat: vec![0.0; nodes * layout.n],
            z: vec![0.0; nodes * nd],
            z0: vec![0.0; nodes * nd],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn layout(&self) -> ThetaLayout {
        self.layout
    }
    pub fn worlds(&self) -> usize {
        self.worlds
    }
    pub fn particles(&self) -> usize {
        self.particles
    }

    #[inline]
    pub(crate) fn node(&self, k: usize, w: usize, p: usize) -> usize {
        (k * self.worlds + w) * self.particles + p
    }

    pub fn x(&self, k: usize, w: usize, p: usize) -> &[f64] {
        let n = self.layout.n;
        let i = self.node(k, w, p) * n;
        &self.x[i..i + n]
    }

    /// BSDE value `Y_k`.
    pub fn y(&self, k: usize, w: usize, p: usize) -> &[f64] {
        let n = self.layout.n;
        let i = self.node(k, w, p) * n;
        &self.y[i..i + n]
    }

    /// Adjoint `Ŷ_k` entering the control at step `k`.
    pub fn y_hat(&self, k: usize, w: usize, p: usize) -> &[f64] {
        let n = self.layout.n;
        let i = self.node(k, w, p) * n;
        &self.y_hat[i..i + n]
    }

    pub fn z(&self, k: usize, w: usize, p: usize) -> &[f64] {
        let nd = self.layout.n * self.layout.d;
        let i = self.node(k, w, p) * nd;
        &self.z[i..i + nd]
    }

    pub fn z0(&self, k: usize, w: usize, p: usize) -> &[f64] {
        let nd = self.layout.n * self.layout.d;
        let i = self.node(k, w, p) * nd;
        &self.z0[i..i + nd]
    }

    /// States of all particles of world `w` at step `k`, `M x n`.
    pub fn world_states(&self, k: usize, w: usize) -> &[f64] {
        let n = self.layout.n;
        let i = self.node(k, w, 0) * n;
        &self.x[i..i + self.particles * n]
    }

    /// Whole state array, `(K+1) x W x M x n`.
    pub fn states(&self) -> &[f64] {
        &self.x
    }

    /// Packs `(X_k, Ŷ_k, Z_k, Z⁰_k)` of one particle.
    pub fn theta_into(&self, w: usize, p: usize, k: usize, out: &mut [f64]) {
        let n = self.layout.n;
        let nd = n * self.layout.d;
        out[..n].copy_from_slice(self.x(k, w, p));
        out[n..2 * n].copy_from_slice(self.y_hat(k, w, p));
        out[2 * n..2 * n + nd].copy_from_slice(self.z(k, w, p));
        out[2 * n + nd..].copy_from_slice(self.z0(k, w, p));
    }
}

/// A solved (or field-propagated) particle system.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub theta: ThetaPath,
    /// `K x W x M x ℓ`.
    pub alpha: Vec<f64>,
    /// Drivers `F_k` used in `Y_k = Ŷ_k + F_k dt`, `K x W x M x n`.
    pub drivers: Vec<f64>,
}

impl Trajectory {
    pub fn alpha(&self, k: usize, w: usize, p: usize) -> &[f64] {
        let l = self.theta.layout.l;
        let i = self.theta.node(k, w, p) * l;
        &self.alpha[i..i + l]
    }

    pub fn driver(&self, k: usize, w: usize, p: usize) -> &[f64] {
        let n = self.theta.layout.n;
        let i = self.theta.node(k, w, p) * n;
        &self.drivers[i..i + n]
    }

    /// Controls of world `w` at step `k`, `M x ℓ`.
    pub fn world_controls(&self, k: usize, w: usize) -> &[f64] {
        let l = self.theta.layout.l;
        let i = self.theta.node(k, w, 0) * l;
        &self.alpha[i..i + self.theta.particles * l]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfeSolution {
    pub path: Trajectory,
    pub field: DecouplingField,
    /// `H²` distance between successive iterates, one entry per sweep.
    pub residual_history: Vec<f64>,
    /// Interpolation parameter of the solved system (`1` for the target).
    pub delta: f64,
    /// `(δ, success)` for every continuation step attempted.
    pub continuation_trace: Vec<(f64, bool)>,
}

/// Starting point of a Picard run.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialGuess {
    /// Adjoints identically zero; states from the forward sweep they induce.
    Zero,
    /// Standard normal states after step 0, drawn from the given seed.
    Random(u64),
    /// Explicit state paths, `(K+1) x W x M x n`.
    Paths(Vec<f64>),
}

fn check_bundles<C: CoefficientSet + ?Sized>(c: &C, cfg: &MkvConfig, bundles: &[NoiseBundle]) -> Result<()> {
    cfg.validate()?;
    let dims = c.dims();
    if bundles.len() != cfg.worlds {
        return Err(Error::Config(format!(
            "expected {} noise worlds, got {}",
            cfg.worlds,
            bundles.len()
        )));
    }
    for b in bundles {
        if b.paths() < cfg.particles {
            return Err(Error::Config(format!(
                "noise world has {} paths but {} particles are required",
                b.paths(),
                cfg.particles
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

pub(crate) fn h2_distance(grid: &TimeGrid, a: &ThetaPath, b: &ThetaPath) -> f64 {
    let steps = grid.steps();
    let pop = a.worlds * a.particles;
    let n = a.layout.n;
    let nd = n * a.layout.d;
    let sq = |u: &[f64], v: &[f64], width: usize| -> f64 {
        u[..steps * pop * width]
            .iter()
            .zip(&v[..steps * pop * width])
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
    };
    let total = sq(&a.x, &b.x, n) + sq(&a.y, &b.y, n) + sq(&a.z, &b.z, nd) + sq(&a.z0, &b.z0, nd);
    (total * grid.dt() / pop as f64).sqrt()
}

/// Discrete `H²` norm of the difference of two solutions,
/// `((1/(WM)) Σ_w Σ_p Σ_k |ΔΘ|² dt)^{1/2}`.
pub fn h2_norm_diff(a: &MfeSolution, b: &MfeSolution) -> Result<f64> {
    let (ta, tb) = (&a.path.theta, &b.path.theta);
    if ta.grid != tb.grid || ta.worlds != tb.worlds || ta.particles != tb.particles || ta.layout != tb.layout {
        return Err(Error::Config("solutions live on different populations".into()));
    }
    Ok(h2_distance(&ta.grid, ta, tb))
}

fn initial_paths<C: CoefficientSet + ?Sized>(
    c: &C,
    cfg: &MkvConfig,
    bundles: &[NoiseBundle],
    guess: &InitialGuess,
    delta: f64,
) -> Result<Vec<f64>> {
    let n = c.dims().n;
    let steps = cfg.grid.steps();
    let pop = cfg.worlds * cfg.particles;
    match guess {
        InitialGuess::Zero => {
            let map = FeatureMap::for_population(n, cfg.basis, cfg.worlds, cfg.particles);
            let field = DecouplingField::zero(map, c.dims().into(), steps);
            forward_step(c, cfg, bundles, &field, delta)
        }
        InitialGuess::Random(seed) => {
            let mut x = vec![0.0; (steps + 1) * pop * n];
            for (w, b) in bundles.iter().enumerate() {
                for p in 0..cfg.particles {
                    let i = (w * cfg.particles + p) * n;
                    x[i..i + n].copy_from_slice(b.initial(p));
                }
            }
            let mut rng = stream_rng(*seed, StreamRole::Auxiliary, 0, 0);
            for v in &mut x[pop * n..] {
                *v = rng.sample(StandardNormal);
            }
            Ok(x)
        }
        InitialGuess::Paths(x) => {
            if x.len() != (steps + 1) * pop * n {
                return Err(Error::Config("initial guess has the wrong shape".into()));
            }
            Ok(x.clone())
        }
    }
}

/// Damped Picard iteration on the system interpolated at `δ` (see
/// [`continuation_solve`]); `δ = 1` is the target system.
///
/// For `δ < 1` the state noise `−(1−δ)Z` feeds the regressed `Z` back into
/// the paths, which roughly doubles the gain of the iteration near `δ = 0`.
/// The damping is therefore scaled to `ρ / (2 − δ)`.
pub fn picard_solve_delta<C: CoefficientSet + ?Sized>(
    c: &C,
    cfg: &MkvConfig,
    bundles: &[NoiseBundle],
    guess: &InitialGuess,
    delta: f64,
) -> Result<MfeSolution> {
    check_bundles(c, cfg, bundles)?;
    let rho = cfg.damping / (2.0 - delta);
    let mut x = initial_paths(c, cfg, bundles, guess, delta)?;
    let mut current = backward_regress(c, cfg, bundles, &x, delta)?;
    let mut history = Vec::new();
    for _ in 0..cfg.max_picard {
        let forward = forward_step(c, cfg, bundles, &current.field, delta)?;
        for (xo, xf) in x.iter_mut().zip(&forward) {
            *xo = (1.0 - rho) * *xo + rho * xf;
        }
        let next = backward_regress(c, cfg, bundles, &x, delta)?;
        let res = h2_distance(&cfg.grid, &current.path.theta, &next.path.theta);
        history.push(res);
        current = next;
        if !res.is_finite() {
            return Err(Error::Divergence {
                step: cfg.grid.steps(),
                detail: "non-finite Picard residual".into(),
            });
        }
        if res <= cfg.picard_tol {
            return Ok(MfeSolution {
                path: current.path,
                field: current.field,
                residual_history: history,
                delta,
                continuation_trace: Vec::new(),
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_picard,
        tol: cfg.picard_tol,
        last: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// [`picard_solve_delta`] on the target system from the given guess.
pub fn picard_solve_from<C: CoefficientSet + ?Sized>(
    c: &C,
    cfg: &MkvConfig,
    bundles: &[NoiseBundle],
    guess: &InitialGuess,
) -> Result<MfeSolution> {
    picard_solve_delta(c, cfg, bundles, guess, 1.0)
}

/// Damped Picard iteration from the zero guess.
pub fn picard_solve<C: CoefficientSet + ?Sized>(c: &C, cfg: &MkvConfig, bundles: &[NoiseBundle]) -> Result<MfeSolution> {
    picard_solve_from(c, cfg, bundles, &InitialGuess::Zero)
}

/// Method of continuation: solves the interpolated systems
///
/// ```text
/// B^δ = δB − (1−δ)y,  Σ^δ = δΣ − (1−δ)z,  Σ⁰^δ = δΣ⁰ − (1−δ)z⁰,
/// F^δ = δF + (1−δ)x,  G^δ = δG + (1−δ)x
/// ```
///
/// for `δ` from 0 to 1, warm-starting each solve from the previous one and
/// halving the step after a failure.
pub fn continuation_solve<C: CoefficientSet + ?Sized>(c: &C, cfg: &MkvConfig, bundles: &[NoiseBundle]) -> Result<MfeSolution> {
    if !cfg.continuation.enabled {
        return Err(Error::Config("continuation is disabled in the solver configuration".into()));
    }
    check_bundles(c, cfg, bundles)?;
    let mut trace = Vec::new();
    let attempted = |trace: &Vec<(f64, bool)>| trace.iter().map(|t| t.0).collect::<Vec<_>>();
    let mut sol = match picard_solve_delta(c, cfg, bundles, &InitialGuess::Zero, 0.0) {
        Ok(s) => s,
        Err(_) => {
            return Err(Error::Continuation {
                min_step: cfg.continuation.min_step,
                attempted: vec![0.0],
            })
        }
    };
    trace.push((0.0, true));
    let mut delta = 0.0;
    let mut eta = cfg.continuation.initial_step;
    while delta < 1.0 {
        let next = (delta + eta).min(1.0);
        let guess = InitialGuess::Paths(sol.path.theta.x.clone());
        match picard_solve_delta(c, cfg, bundles, &guess, next) {
            Ok(s) => {
                trace.push((next, true));
                sol = s;
                delta = next;
            }
            Err(_) => {
                trace.push((next, false));
                eta *= 0.5;
                if eta < cfg.continuation.min_step {
                    return Err(Error::Continuation {
                        min_step: cfg.continuation.min_step,
                        attempted: attempted(&trace),
                    });
                }
            }
        }
    }
    sol.continuation_trace = trace;
    Ok(sol)
}

/// Control paths (`M x K x ℓ`, particle-major) and measure flow of one world.
/// The flow is rebuilt from the stored states and controls, so it is the
/// conditional empirical law of `(X_k, α_k)` by construction.
pub fn extract_mfe(sol: &MfeSolution, world: usize) -> Result<(Vec<f64>, MeasureFlow)> {
    let theta = &sol.path.theta;
    if world >= theta.worlds {
        return Err(Error::Index {
            what: "extract_mfe world",
            index: world,
            limit: theta.worlds,
        });
    }
    let steps = theta.grid.steps();
    let (n, l) = (theta.layout.n, theta.layout.l);
    let m = theta.particles;
    let mut controls = vec![0.0; m * steps * l];
    let mut states = Vec::with_capacity(steps + 1);
    let mut laws = Vec::with_capacity(steps);
    for k in 0..=steps {
        states.push(EmpiricalMeasure::new(n, theta.world_states(k, world).to_vec())?);
        if k < steps {
            let a = sol.path.world_controls(k, world);
            for p in 0..m {
                controls[(p * steps + k) * l..(p * steps + k + 1) * l].copy_from_slice(&a[p * l..(p + 1) * l]);
            }
            laws.push(EmpiricalMeasure::new(l, a.to_vec())?);
        }
    }
    Ok((controls, MeasureFlow { states, controls: laws }))
}

/// Largest first-order-condition residual `|∂_a H(Θ, α, μ)|` over the
/// whole solution.
pub fn foc_residual_max<C: CoefficientSet + ?Sized>(c: &C, path: &Trajectory) -> Result<f64> {
    let theta = &path.theta;
    let layout = theta.layout;
    let zero = vec![0.0; layout.l];
    let mut buf = vec![0.0; layout.theta_len()];
    let mut worst: f64 = 0.0;
    for k in 0..theta.grid.steps() {
        let t = Node::new(k, theta.grid.time(k));
        for w in 0..theta.worlds {
            let mu = EmpiricalMeasure::new(layout.n, theta.world_states(k, w).to_vec())?;
            for p in 0..theta.particles {
                theta.theta_into(w, p, k, &mut buf);
                worst = worst.max(foc_residual(c, t, &buf, &mu, &zero, path.alpha(k, w, p)));
            }
        }
    }
    Ok(worst)
}

/// `max |Y_K − G(X_K, L¹(X_K))|` over all particles.
pub fn terminal_residual<C: CoefficientSet + ?Sized>(c: &C, path: &Trajectory) -> Result<f64> {
    let theta = &path.theta;
    let n = theta.layout.n;
    let k = theta.grid.steps();
    let mut g = vec![0.0; n];
    let mut worst: f64 = 0.0;
    for w in 0..theta.worlds {
        let mu = EmpiricalMeasure::new(n, theta.world_states(k, w).to_vec())?;
        for p in 0..theta.particles {
            terminal_g(c, theta.x(k, w, p), &mu, &mut g);
            for (gi, yi) in g.iter().zip(theta.y(k, w, p)) {
                worst = worst.max((gi - yi).abs());
            }
        }
    }
    Ok(worst)
}

/// Per world and step, the norm of the particle mean of
/// `Y_{k+1} − Y_k + F_k dt − Z_k ΔW_k − Z⁰_k ΔW⁰_k`. Returned as a
/// `W x K` row-major array.
pub fn martingale_residuals(path: &Trajectory, bundles: &[NoiseBundle]) -> Result<Vec<f64>> {
    let theta = &path.theta;
    if bundles.len() != theta.worlds {
        return Err(Error::Config("one noise world per solver world is required".into()));
    }
    let steps = theta.grid.steps();
    let dt = theta.grid.dt();
    let (n, d) = (theta.layout.n, theta.layout.d);
    let mut out = vec![0.0; theta.worlds * steps];
    let mut acc = vec![0.0; n];
    for (w, b) in bundles.iter().enumerate() {
        for k in 0..steps {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let dw0 = b.common(k);
            for p in 0..theta.particles {
                let dw = b.idio(p, k);
                let (y1, y0, f) = (theta.y(k + 1, w, p), theta.y(k, w, p), path.driver(k, w, p));
                let (z, z0) = (theta.z(k, w, p), theta.z0(k, w, p));
                for i in 0..n {
                    let mut r = y1[i] - y0[i] + f[i] * dt;
                    for j in 0..d {
                        r -= z[i * d + j] * dw[j] + z0[i * d + j] * dw0[j];
                    }
                    acc[i] += r;
                }
            }
            let m = theta.particles as f64;
            out[w * steps + k] = acc.iter().map(|a| (a / m) * (a / m)).sum::<f64>().sqrt();
        }
    }
    Ok(out)
}
