//! Conditionally i.i.d. copies of the mean-field limit driven by the
//! players' own noise.
//!
//! A large auxiliary cloud is propagated through the fitted MKV decoupling
//! field on one common-noise path. Its first `N` particles consume exactly
//! the idiosyncratic streams and initial states of the `N` players, so the
//! copies and the game are coupled path by path.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hamiltonian::{reduced_with_laws, ReducedEval, ThetaLayout};
use crate::linalg::flat_t_vec_add;
use crate::measures::EmpiricalMeasure;
use crate::mkv::{simulate_world, DecouplingField, ThetaPath, Trajectory};
use crate::model::{CoefficientSet, Node};
use crate::stochastic::{sample_world, InitialLaw, NoiseBundle, TimeGrid};

/// Means of the squared error terms over players and repetitions. The
/// running terms are time integrated (left Riemann sum).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    pub eb: f64,
    pub esigma: f64,
    pub esigma0: f64,
    pub ef: f64,
    pub eg: f64,
}

impl Diagnostics {
    fn add(&mut self, o: &Diagnostics) {
        self.eb += o.eb;
        self.esigma += o.esigma;
        self.esigma0 += o.esigma0;
        self.ef += o.ef;
        self.eg += o.eg;
    }

    fn scale(&mut self, s: f64) {
        self.eb *= s;
        self.esigma *= s;
        self.esigma0 *= s;
        self.ef *= s;
        self.eg *= s;
    }
}

/// Copies for every repetition plus the error-term diagnostics of each
/// requested player count.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledCopies {
    /// One world per repetition, one particle per player.
    pub path: Trajectory,
    pub m_aux: usize,
    /// `(N, diagnostics)` in the order requested.
    pub diagnostics: Vec<(usize, Diagnostics)>,
}

impl CoupledCopies {
    pub fn diagnostics_for(&self, players: usize) -> Option<Diagnostics> {
        self.diagnostics.iter().find(|(n, _)| *n == players).map(|(_, d)| *d)
    }
}

/// World `w` of `tr`, first `players` particles.
fn select(tr: &Trajectory, w: usize, players: usize) -> Trajectory {
    let th = &tr.theta;
    let layout = th.layout();
    let (n, l, nd) = (layout.n, layout.l, layout.n * layout.d);
    let steps = th.grid().steps();
    let mut out = ThetaPath::empty(*th.grid(), layout, 1, players);
    let mut alpha = vec![0.0; steps * players * l];
    let mut drivers = vec![0.0; steps * players * n];
    for k in 0..=steps {
        for p in 0..players {
            let (src, dst) = (th.node(k, w, p), k * players + p);
            out.x[dst * n..(dst + 1) * n].copy_from_slice(&th.x[src * n..(src + 1) * n]);
            out.y[dst * n..(dst + 1) * n].copy_from_slice(&th.y[src * n..(src + 1) * n]);
            out.y_hat[dst * n..(dst + 1) * n].copy_from_slice(&th.y_hat[src * n..(src + 1) * n]);
            out.z[dst * nd..(dst + 1) * nd].copy_from_slice(&th.z[src * nd..(src + 1) * nd]);
            out.z0[dst * nd..(dst + 1) * nd].copy_from_slice(&th.z0[src * nd..(src + 1) * nd]);
            if k < steps {
                alpha[dst * l..(dst + 1) * l].copy_from_slice(&tr.alpha[src * l..(src + 1) * l]);
                drivers[dst * n..(dst + 1) * n].copy_from_slice(&tr.drivers[src * n..(src + 1) * n]);
            }
        }
    }
    Trajectory {
        theta: out,
        alpha,
        drivers,
    }
}

/// Stacks single-world trajectories of equal shape into one multi-world
/// trajectory.
fn stack_worlds<'a>(parts: impl ExactSizeIterator<Item = &'a Trajectory> + Clone) -> Result<Trajectory> {
    let worlds = parts.len();
    let first = parts.clone().next().ok_or(Error::Empty("no trajectories to stack"))?;
    let th0 = &first.theta;
    let layout = th0.layout();
    let (n, l, nd) = (layout.n, layout.l, layout.n * layout.d);
    let m = th0.particles();
    let grid = *th0.grid();
    let steps = grid.steps();
    let mut out = ThetaPath::empty(grid, layout, worlds, m);
    let mut alpha = vec![0.0; steps * worlds * m * l];
    let mut drivers = vec![0.0; steps * worlds * m * n];
    for (w, part) in parts.enumerate() {
        let th = &part.theta;
        if th.worlds() != 1 || th.particles() != m || *th.grid() != grid || th.layout() != layout {
            return Err(Error::Config("trajectories to stack differ in shape".into()));
        }
        for k in 0..=steps {
            let dst = out.node(k, w, 0);
            let src = k * m;
            out.x[dst * n..(dst + m) * n].copy_from_slice(&th.x[src * n..(src + m) * n]);
            out.y[dst * n..(dst + m) * n].copy_from_slice(&th.y[src * n..(src + m) * n]);
            out.y_hat[dst * n..(dst + m) * n].copy_from_slice(&th.y_hat[src * n..(src + m) * n]);
            out.z[dst * nd..(dst + m) * nd].copy_from_slice(&th.z[src * nd..(src + m) * nd]);
            out.z0[dst * nd..(dst + m) * nd].copy_from_slice(&th.z0[src * nd..(src + m) * nd]);
            if k < steps {
                alpha[dst * l..(dst + m) * l].copy_from_slice(&part.alpha[src * l..(src + m) * l]);
                drivers[dst * n..(dst + m) * n].copy_from_slice(&part.drivers[src * n..(src + m) * n]);
            }
        }
    }
    Ok(Trajectory {
        theta: out,
        alpha,
        drivers,
    })
}

/// Copies of one world: propagates all paths of `bundle` as the auxiliary
/// cloud and returns its first `players` particles.
pub fn build_coupled_copies<C: CoefficientSet + ?Sized>(
    c: &C,
    field: &DecouplingField,
    bundle: &NoiseBundle,
    players: usize,
) -> Result<Trajectory> {
    if players == 0 || players > bundle.paths() {
        return Err(Error::Config(format!(
            "{players} copies need at least as many noise paths (world has {})",
            bundle.paths()
        )));
    }
    let cloud = simulate_world(c, field, bundle, bundle.paths())?;
    Ok(select(&cloud, 0, players))
}

/// `∂_μ H(θ, a, μ, ν)(u)`.
#[allow(clippy::too_many_arguments)]
fn hamiltonian_dmu<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    theta: &[f64],
    a: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    u: &[f64],
    out: &mut [f64],
) {
    let dims = c.dims();
    let (n, nd) = (dims.n, dims.nd());
    let x = &theta[..n];
    c.cost_dmu(t, x, a, mu, nu, u, out);
    if !c.dynamics_depend_on_state_law() {
        return;
    }
    let mut jb = vec![0.0; n * n];
    let mut js = vec![0.0; nd * n];
    c.drift_dmu(t, x, a, mu, nu, u, &mut jb);
    flat_t_vec_add(&jb, n, n, &theta[n..2 * n], 1.0, out);
    c.vol_dmu(t, x, a, mu, nu, u, &mut js);
    flat_t_vec_add(&js, nd, n, &theta[2 * n..2 * n + nd], 1.0, out);
    c.common_vol_dmu(t, x, a, mu, nu, u, &mut js);
    flat_t_vec_add(&js, nd, n, &theta[2 * n + nd..2 * n + 2 * nd], 1.0, out);
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Sums over `i < players` of the squared error terms of one world, with
/// the cloud's empirical laws standing in for the conditional law.
fn world_diagnostics<C: CoefficientSet + ?Sized>(c: &C, cloud: &Trajectory, players: &[usize]) -> Result<Vec<Diagnostics>> {
    let th = &cloud.theta;
    let dims = c.dims();
    let layout = ThetaLayout::from(dims);
    let (n, l) = (dims.n, dims.l);
    let grid = *th.grid();
    let steps = grid.steps();
    let dt = grid.dt();
    let zero = vec![0.0; l];
    let mut out = vec![Diagnostics::default(); players.len()];
    let mut theta = vec![0.0; layout.theta_len()];
    let (mut red_n, mut red_1) = (ReducedEval::zeros(dims), ReducedEval::zeros(dims));
    let mut dmu = vec![0.0; n];
    for k in 0..steps {
        let t = Node::new(k, grid.time(k));
        let mu = EmpiricalMeasure::new(n, th.world_states(k, 0).to_vec())?;
        let nu = EmpiricalMeasure::new(l, cloud.world_controls(k, 0).to_vec())?;
        for (slot, &np) in players.iter().enumerate() {
            let mu_n = EmpiricalMeasure::new(n, th.world_states(k, 0)[..np * n].to_vec())?;
            let mut a_n = vec![0.0; np * l];
            for j in 0..np {
                th.theta_into(0, j, k, &mut theta);
                c.minimize_hamiltonian(t, &theta, &mu_n, &zero, &mut a_n[j * l..(j + 1) * l])?;
            }
            let nu_n = EmpiricalMeasure::new(l, a_n.clone())?;
            let nu_copies = EmpiricalMeasure::new(l, cloud.world_controls(k, 0)[..np * l].to_vec())?;
            let d = &mut out[slot];
            for i in 0..np {
                th.theta_into(0, i, k, &mut theta);
                reduced_with_laws(c, t, &theta, &a_n[i * l..(i + 1) * l], &mu_n, &nu_n, &mut red_n);
                reduced_with_laws(c, t, &theta, cloud.alpha(k, 0, i), &mu, &nu, &mut red_1);
                d.eb += sq_diff(&red_n.b, &red_1.b) * dt;
                d.esigma += sq_diff(&red_n.sigma, &red_1.sigma) * dt;
                d.esigma0 += sq_diff(&red_n.sigma0, &red_1.sigma0) * dt;
                hamiltonian_dmu(c, t, &theta, cloud.alpha(k, 0, i), &mu_n, &nu_copies, &theta[..n], &mut dmu);
                let inv = 1.0 / np as f64;
                let ef: f64 = (0..n)
                    .map(|q| {
                        let e = red_n.f[q] - red_1.f[q] + inv * dmu[q];
                        e * e
                    })
                    .sum();
                d.ef += ef * dt;
            }
        }
    }
    let mu = EmpiricalMeasure::new(n, th.world_states(steps, 0).to_vec())?;
    let (mut g_n, mut g_1) = (vec![0.0; n], vec![0.0; n]);
    for (slot, &np) in players.iter().enumerate() {
        let mu_n = EmpiricalMeasure::new(n, th.world_states(steps, 0)[..np * n].to_vec())?;
        let inv = 1.0 / np as f64;
        for i in 0..np {
            let x = th.x(steps, 0, i);
            c.terminal_dx(x, &mu_n, &mut g_n);
            c.terminal_dx(x, &mu, &mut g_1);
            c.terminal_dmu(x, &mu_n, x, &mut dmu);
            out[slot].eg += (0..n)
                .map(|q| {
                    let e = g_n[q] - g_1[q] + inv * dmu[q];
                    e * e
                })
                .sum::<f64>();
        }
    }
    Ok(out)
}

/// Where the copies draw their noise from.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    pub grid: TimeGrid,
    pub mu0: InitialLaw,
    pub seed: u64,
    /// Repetition `r` uses noise world `r`.
    pub repetitions: usize,
    /// Auxiliary cloud size per world.
    pub m_aux: usize,
    /// Copies recorded per world.
    pub players: usize,
    /// Player counts whose diagnostics are evaluated, each `≤ players`.
    pub diagnostics_for: Vec<usize>,
}

/// Copies for every repetition. Worlds run in parallel; each world's cloud
/// is sampled, propagated and dropped before the next, so memory stays at
/// a few clouds.
pub fn couple_repetitions<C: CoefficientSet + ?Sized>(
    c: &C,
    field: &DecouplingField,
    plan: &CouplingPlan,
) -> Result<CoupledCopies> {
    if plan.repetitions == 0 {
        return Err(Error::Config("at least one repetition is required".into()));
    }
    if plan.players == 0 || plan.players > plan.m_aux {
        return Err(Error::Config(format!(
            "players ({}) must lie in 1..=m_aux ({})",
            plan.players, plan.m_aux
        )));
    }
    if let Some(&bad) = plan.diagnostics_for.iter().find(|&&n| n == 0 || n > plan.players) {
        return Err(Error::Config(format!("diagnostics requested for {bad} players")));
    }
    let d = c.dims().d;
    let parts: Vec<(Trajectory, Vec<Diagnostics>)> = (0..plan.repetitions)
        .into_par_iter()
        .map(|r| -> Result<(Trajectory, Vec<Diagnostics>)> {
            let bundle = sample_world(plan.grid, plan.m_aux, d, &plan.mu0, plan.seed, r as u64)?;
            let cloud = simulate_world(c, field, &bundle, plan.m_aux)?;
            let diag = world_diagnostics(c, &cloud, &plan.diagnostics_for)?;
            Ok((select(&cloud, 0, plan.players), diag))
        })
        .collect::<Result<_>>()?;
    let mut diagnostics: Vec<(usize, Diagnostics)> =
        plan.diagnostics_for.iter().map(|&n| (n, Diagnostics::default())).collect();
    for (_, diag) in &parts {
        for ((_, total), d) in diagnostics.iter_mut().zip(diag) {
            total.add(d);
        }
    }
    for (np, total) in &mut diagnostics {
        total.scale(1.0 / (*np * plan.repetitions) as f64);
    }
    let path = stack_worlds(parts.iter().map(|(t, _)| t))?;
    Ok(CoupledCopies {
        path,
        m_aux: plan.m_aux,
        diagnostics,
    })
}
