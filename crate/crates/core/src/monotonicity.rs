//! Randomised falsification of the monotonicity conditions
//!
//! ```text
//! E[−ΔX·ΔF + ΔY·ΔB + ΔZ·ΔΣ + ΔZ⁰·ΔΣ⁰] ≤ −C_H E|ΔX|²,     E[ΔX·ΔG] ≥ C_G E|ΔX|²
//! ```
//!
//! on paired empirical clouds. A passing run means no violation was found;
//! only the LQ structural check is a proof.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hamiltonian::{reduced_with_laws, ReducedEval, ThetaLayout};
use crate::linalg::dot;
use crate::measures::EmpiricalMeasure;
use crate::model::{CoefficientSet, Node};
use crate::stochastic::{stream_rng, StreamRole, TimeGrid};

const CERTIFY_WORLD: u64 = (1 << 30) - 1;

/// Reduced coefficients of every atom of a θ-cloud, evaluated against the
/// cloud's own empirical law.
fn reduced_cloud<C: CoefficientSet + ?Sized>(c: &C, t: Node, cloud: &[f64]) -> Result<Vec<ReducedEval>> {
    let dims = c.dims();
    let layout = ThetaLayout::from(dims);
    let len = layout.theta_len();
    let xi = EmpiricalMeasure::new(len, cloud.to_vec())?;
    let mu = xi.block(0, dims.n)?;
    let zero = vec![0.0; dims.l];
    let mut controls = vec![0.0; xi.len() * dims.l];
    for (th, a) in cloud.chunks_exact(len).zip(controls.chunks_exact_mut(dims.l)) {
        c.minimize_hamiltonian(t, th, &mu, &zero, a)?;
    }
    let nu = EmpiricalMeasure::new(dims.l, controls.clone())?;
    let mut out = Vec::with_capacity(xi.len());
    for (th, a) in cloud.chunks_exact(len).zip(controls.chunks_exact(dims.l)) {
        let mut r = ReducedEval::zeros(dims);
        reduced_with_laws(c, t, th, a, &mu, &nu, &mut r);
        out.push(r);
    }
    Ok(out)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        num.signum() * f64::INFINITY
    }
}

fn check_pair(layout: ThetaLayout, a: &[f64], b: &[f64], width: usize) -> Result<()> {
    if a.len() != b.len() || a.is_empty() || a.len() % width != 0 {
        return Err(Error::Config(format!(
            "paired clouds need equal, nonzero atom counts of width {width}"
        )));
    }
    let _ = layout;
    Ok(())
}

/// `E[−ΔX·ΔF + ΔY·ΔB + ΔZ·ΔΣ + ΔZ⁰·ΔΣ⁰] / E|ΔX|²` for two θ-clouds paired
/// atom by atom. `0/0` is reported as `0` and `c/0` as `±∞`.
pub fn drift_monotonicity_gap<C: CoefficientSet + ?Sized>(c: &C, t: Node, cloud: &[f64], other: &[f64]) -> Result<f64> {
    let layout = ThetaLayout::from(c.dims());
    let len = layout.theta_len();
    check_pair(layout, cloud, other, len)?;
    let ra = reduced_cloud(c, t, cloud)?;
    let rb = reduced_cloud(c, t, other)?;
    let n = layout.n;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut d = vec![0.0; len];
    let mut dr = vec![0.0; n.max(n * layout.d)];
    for ((ta, tb), (ea, eb)) in cloud.chunks_exact(len).zip(other.chunks_exact(len)).zip(ra.iter().zip(&rb)) {
        for ((o, x), y) in d.iter_mut().zip(ta).zip(tb) {
            *o = x - y;
        }
        let dx = &d[..n];
        den += dot(dx, dx);
        let diff = |u: &[f64], v: &[f64], out: &mut Vec<f64>| {
            out.clear();
            out.extend(u.iter().zip(v).map(|(p, q)| p - q));
        };
        diff(&ea.f, &eb.f, &mut dr);
        num -= dot(dx, &dr);
        diff(&ea.b, &eb.b, &mut dr);
        num += dot(&d[layout.y_range()], &dr);
        diff(&ea.sigma, &eb.sigma, &mut dr);
        num += dot(&d[layout.z_range()], &dr);
        diff(&ea.sigma0, &eb.sigma0, &mut dr);
        num += dot(&d[layout.z0_range()], &dr);
    }
    let m = ra.len() as f64;
    Ok(ratio(num / m, den / m))
}

/// `E[ΔX·ΔG] / E|ΔX|²` for two state clouds paired atom by atom.
pub fn terminal_monotonicity_gap<C: CoefficientSet + ?Sized>(c: &C, cloud: &[f64], other: &[f64]) -> Result<f64> {
    let dims = c.dims();
    let n = dims.n;
    check_pair(ThetaLayout::from(dims), cloud, other, n)?;
    let mu = EmpiricalMeasure::new(n, cloud.to_vec())?;
    let mu2 = EmpiricalMeasure::new(n, other.to_vec())?;
    let mut ga = vec![0.0; n];
    let mut gb = vec![0.0; n];
    let mut num = 0.0;
    let mut den = 0.0;
    for (xa, xb) in cloud.chunks_exact(n).zip(other.chunks_exact(n)) {
        c.terminal_dx(xa, &mu, &mut ga);
        c.terminal_dx(xb, &mu2, &mut gb);
        for i in 0..n {
            let dx = xa[i] - xb[i];
            num += dx * (ga[i] - gb[i]);
            den += dx * dx;
        }
    }
    Ok(ratio(num, den))
}

/// Which inequality a witness refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapKind {
    Drift,
    Terminal,
}

/// A pair of clouds together with the gap they produce.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub kind: GapKind,
    pub trial: usize,
    pub node: Node,
    /// Row-major θ-atoms (drift) or state atoms (terminal).
    pub cloud: Vec<f64>,
    pub other: Vec<f64>,
    pub gap: f64,
}

impl Witness {
    /// Re-evaluates the stored clouds.
    pub fn replay<C: CoefficientSet + ?Sized>(&self, c: &C) -> Result<f64> {
        match self.kind {
            GapKind::Drift => drift_monotonicity_gap(c, self.node, &self.cloud, &self.other),
            GapKind::Terminal => terminal_monotonicity_gap(c, &self.cloud, &self.other),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub trials: usize,
    /// Smallest `−drift gap` seen; equals `estimated_ch`.
    pub min_drift_margin: f64,
    /// Smallest terminal gap seen; equals `estimated_cg`.
    pub min_terminal_margin: f64,
    pub estimated_ch: f64,
    pub estimated_cg: f64,
    /// Largest drift gap and smallest terminal gap with their clouds.
    pub drift_extreme: Witness,
    pub terminal_extreme: Witness,
    /// The failing extreme, if either estimate is not positive.
    pub witness: Option<Witness>,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.witness.is_none()
    }
}

/// Sampling knobs for [`certify`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyOptions {
    pub trials: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    pub seed: u64,
}

impl CertifyOptions {
    pub fn new(trials: usize, seed: u64) -> Self {
        Self {
            trials,
            min_atoms: 2,
            max_atoms: 64,
            min_scale: 0.1,
            max_scale: 10.0,
            seed,
        }
    }
}

/// Samples `trials` pairs of Gaussian clouds (random atom count, scale and
/// grid node) and records the extreme drift and terminal gaps.
pub fn certify<C: CoefficientSet + ?Sized>(c: &C, grid: &TimeGrid, opts: &CertifyOptions) -> Result<MonotonicityReport> {
    if opts.trials == 0 {
        return Err(Error::Config("monotonicity.trials must be ≥ 1".into()));
    }
    if opts.min_atoms == 0 || opts.max_atoms < opts.min_atoms {
        return Err(Error::Config("monotonicity atom range is empty".into()));
    }
    if !(opts.min_scale > 0.0 && opts.max_scale >= opts.min_scale) {
        return Err(Error::Config("monotonicity scale range is invalid".into()));
    }
    let dims = c.dims();
    let layout = ThetaLayout::from(dims);
    let len = layout.theta_len();
    let results: Vec<Result<(Witness, Witness)>> = (0..opts.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream_rng(opts.seed, StreamRole::Auxiliary, CERTIFY_WORLD, trial as u64);
            let atoms = rng.random_range(opts.min_atoms..=opts.max_atoms);
            let scale = rng.random_range(opts.min_scale..=opts.max_scale);
            let k = rng.random_range(0..grid.steps());
            let node = Node::new(k, grid.time(k));
            let mut draw = |count: usize| -> Vec<f64> {
                (0..count)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            let cloud = draw(atoms * len);
            let other = draw(atoms * len);
            let drift = drift_monotonicity_gap(c, node, &cloud, &other)?;
            let xa: Vec<f64> = cloud.chunks_exact(len).flat_map(|th| th[..dims.n].to_vec()).collect();
            let xb: Vec<f64> = other.chunks_exact(len).flat_map(|th| th[..dims.n].to_vec()).collect();
            let terminal = terminal_monotonicity_gap(c, &xa, &xb)?;
            let end = Node::new(grid.steps(), grid.horizon());
            Ok((
                Witness {
                    kind: GapKind::Drift,
                    trial,
                    node,
                    cloud,
                    other,
                    gap: drift,
                },
                Witness {
                    kind: GapKind::Terminal,
                    trial,
                    node: end,
                    cloud: xa,
                    other: xb,
                    gap: terminal,
                },
            ))
        })
        .collect();
    let mut drift_extreme: Option<Witness> = None;
    let mut terminal_extreme: Option<Witness> = None;
    for r in results {
        let (d, t) = r?;
        if drift_extreme.as_ref().is_none_or(|w| d.gap > w.gap) {
            drift_extreme = Some(d);
        }
        if terminal_extreme.as_ref().is_none_or(|w| t.gap < w.gap) {
            terminal_extreme = Some(t);
        }
    }
    let drift_extreme = drift_extreme.expect("at least one trial");
    let terminal_extreme = terminal_extreme.expect("at least one trial");
    let estimated_ch = -drift_extreme.gap;
    let estimated_cg = terminal_extreme.gap;
    let witness = if !(estimated_ch > 0.0) {
        Some(drift_extreme.clone())
    } else if !(estimated_cg > 0.0) {
        Some(terminal_extreme.clone())
    } else {
        None
    };
    Ok(MonotonicityReport {
        trials: opts.trials,
        min_drift_margin: estimated_ch,
        min_terminal_margin: estimated_cg,
        estimated_ch,
        estimated_cg,
        drift_extreme,
        terminal_extreme,
        witness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LqCoefficients, LqModel, ScalarLq};

    fn lq(s: ScalarLq) -> LqModel {
        LqModel::new_unchecked(&LqCoefficients::from(s)).unwrap()
    }

    #[test]
    fn identical_clouds_have_zero_gap() {
        let m = lq(ScalarLq {
            qbar: 1.0,
            ..Default::default()
        });
        let cloud = [0.3, 1.0, -0.2, 0.5, 1.1, -0.4, 0.0, 2.0];
        assert_eq!(drift_monotonicity_gap(&m, Node::new(0, 0.0), &cloud, &cloud).unwrap(), 0.0);
        assert_eq!(terminal_monotonicity_gap(&m, &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn state_only_perturbation_gives_minus_q_plus_qbar() {
        let m = lq(ScalarLq {
            a: 0.3,
            b: 1.0,
            q: 1.0,
            qbar: 1.0,
            ..Default::default()
        });
        let cloud = [0.5, 0.0, 0.0, 0.0, -1.5, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0];
        let zero = [0.0; 12];
        let g = drift_monotonicity_gap(&m, Node::new(0, 0.0), &cloud, &zero).unwrap();
        assert!((g + 2.0).abs() < 1e-14);
    }

    #[test]
    fn terminal_gap_is_exact_for_lq() {
        let m = lq(ScalarLq {
            q_terminal: 1.0,
            qbar_terminal: 1.0,
            ..Default::default()
        });
        let g = terminal_monotonicity_gap(&m, &[0.3, -2.0, 5.0], &[1.0, 0.0, -1.0]).unwrap();
        assert!((g - 2.0).abs() < 1e-14);
        let bad = lq(ScalarLq {
            q_terminal: -1.0,
            ..Default::default()
        });
        assert!(terminal_monotonicity_gap(&bad, &[0.3, -2.0], &[1.0, 0.0]).unwrap() < 0.0);
    }

    #[test]
    fn degenerate_denominator() {
        let m = lq(ScalarLq {
            b: 1.0,
            ..Default::default()
        });
        let a = [1.0, 2.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0, 0.0];
        let g = drift_monotonicity_gap(&m, Node::new(0, 0.0), &a, &b).unwrap();
        assert_eq!(g, f64::NEG_INFINITY);
    }

    #[test]
    fn zero_trials_rejected() {
        let m = lq(ScalarLq::default());
        let grid = TimeGrid::new(1.0, 4).unwrap();
        assert!(certify(&m, &grid, &CertifyOptions::new(0, 1)).is_err());
    }
}
