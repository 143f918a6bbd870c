use crate::error::{Error, Result};
use crate::mkv::{picard_solve, MkvConfig};
use crate::model::CoefficientSet;
use crate::nplayer::{ne_picard_solve, NeConfig};
use crate::stochastic::{sample_worlds, InitialLaw};

use super::coupling::{couple_repetitions, CouplingPlan};
use super::gaps::{gap_metrics, GapReport};
use super::rate::{rate_fit, GapSeries, RateFit};

/// First noise world of the MKV training population. Repetitions use
/// worlds `0..R`, so training never sees the evaluation noise.
pub const TRAINING_WORLD_OFFSET: u64 = 1 << 28;

/// The convergence experiment: train the mean-field decoupling field on
/// independent worlds, build coupled copies on the evaluation worlds and
/// solve the N-player game on the same worlds for every `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    /// Training population and Picard settings of the mean-field solve.
    pub mkv: MkvConfig,
    /// N-player settings; `players` is overwritten for each entry of
    /// [`ConvergenceConfig::players`].
    pub ne: NeConfig,
    pub players: Vec<usize>,
    pub m_aux: usize,
    pub mu0: InitialLaw,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub reports: Vec<GapReport>,
    pub state_fit: RateFit,
    pub control_fit: RateFit,
    pub mkv_iterations: usize,
    pub ne_iterations: Vec<usize>,
    /// `(1/N) Ê[Σ_k Σᵢ |ζⁱ_k|² dt]` per `N`.
    pub zeta_energy: Vec<f64>,
    pub ne_foc_residual: Vec<f64>,
}

pub fn run_convergence<C: CoefficientSet + ?Sized>(c: &C, cfg: &ConvergenceConfig) -> Result<ConvergenceReport> {
    let grid = cfg.mkv.grid;
    if cfg.ne.grid != grid {
        return Err(Error::Config("mean-field and N-player grids differ".into()));
    }
    let n_max = cfg.players.iter().copied().max().ok_or(Error::Empty("player list"))?;
    let d = c.dims().d;
    let train = sample_worlds(
        grid,
        cfg.mkv.worlds,
        cfg.mkv.particles,
        d,
        &cfg.mu0,
        cfg.seed,
        TRAINING_WORLD_OFFSET,
    )?;
    let mfe = picard_solve(c, &cfg.mkv, &train)?;
    drop(train);
    let plan = CouplingPlan {
        grid,
        mu0: cfg.mu0.clone(),
        seed: cfg.seed,
        repetitions: cfg.ne.repetitions,
        m_aux: cfg.m_aux,
        players: n_max,
        diagnostics_for: cfg.players.clone(),
    };
    let copies = couple_repetitions(c, &mfe.field, &plan)?;
    let bundles = sample_worlds(grid, cfg.ne.repetitions, n_max, d, &cfg.mu0, cfg.seed, 0)?;
    let mut reports = Vec::new();
    let mut ne_iterations = Vec::new();
    let mut zeta_energy = Vec::new();
    let mut ne_foc_residual = Vec::new();
    for &np in &cfg.players {
        let ne_cfg = NeConfig { players: np, ..cfg.ne };
        let ne = ne_picard_solve(c, &ne_cfg, &bundles)?;
        reports.push(gap_metrics(&copies, &ne)?);
        ne_iterations.push(ne.residual_history.len());
        zeta_energy.push(ne.tensor.zeta_energy());
        ne_foc_residual.push(ne.foc_residual_max);
    }
    Ok(ConvergenceReport {
        state_fit: rate_fit(&reports, GapSeries::State)?,
        control_fit: rate_fit(&reports, GapSeries::Control)?,
        reports,
        mkv_iterations: mfe.residual_history.len(),
        ne_iterations,
        zeta_energy,
        ne_foc_residual,
    })
}
