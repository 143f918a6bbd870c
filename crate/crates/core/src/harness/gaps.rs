use crate::error::{Error, Result};
use crate::mkv::Trajectory;
use crate::nplayer::NeSolution;

use super::coupling::{CoupledCopies, Diagnostics};

/// Distance between the mean-field copies and the N-player equilibrium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub players: usize,
    /// `(1/N) Σᵢ Ê[max_k |Xⁱ_k − X^{N,i}_k|²]`.
    pub state_gap: f64,
    /// `(1/N) Σᵢ Ê[Σ_k |αⁱ_k − α^{N,i}_k|² dt]`.
    pub control_gap: f64,
    pub diagnostics: Diagnostics,
}

/// State and control gaps between the first `players` particles of two
/// trajectories on the same grid and worlds. Expectations are averages over
/// worlds.
pub fn path_gaps(a: &Trajectory, b: &Trajectory, players: usize) -> Result<(f64, f64)> {
    let (ta, tb) = (&a.theta, &b.theta);
    if ta.grid() != tb.grid() {
        return Err(Error::Config("gap inputs live on different grids".into()));
    }
    if ta.worlds() != tb.worlds() {
        return Err(Error::Config(format!(
            "gap inputs have {} and {} repetitions",
            ta.worlds(),
            tb.worlds()
        )));
    }
    if ta.layout() != tb.layout() {
        return Err(Error::Config("gap inputs have different dimensions".into()));
    }
    if players == 0 || players > ta.particles() || players > tb.particles() {
        return Err(Error::Config(format!("cannot compare {players} players")));
    }
    let grid = ta.grid();
    let (steps, dt) = (grid.steps(), grid.dt());
    let (mut state, mut control) = (0.0, 0.0);
    let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    for w in 0..ta.worlds() {
        for i in 0..players {
            state += (0..=steps).map(|k| sq(ta.x(k, w, i), tb.x(k, w, i))).fold(0.0, f64::max);
            control += (0..steps).map(|k| sq(a.alpha(k, w, i), b.alpha(k, w, i)) * dt).sum::<f64>();
        }
    }
    let norm = (ta.worlds() * players) as f64;
    Ok((state / norm, control / norm))
}

/// Gaps of an N-player solve against copies built on the same noise worlds.
pub fn gap_metrics(copies: &CoupledCopies, ne: &NeSolution) -> Result<GapReport> {
    let players = ne.tensor.players();
    let diagnostics = copies
        .diagnostics_for(players)
        .ok_or_else(|| Error::Config(format!("copies carry no diagnostics for N = {players}")))?;
    let (state_gap, control_gap) = path_gaps(&copies.path, &ne.tensor.path, players)?;
    Ok(GapReport {
        players,
        state_gap,
        control_gap,
        diagnostics,
    })
}
