use rayon::prelude::*;

use super::regression::{DecouplingField, FeatureMap, StepFit};
use super::{MkvConfig, ThetaPath, Trajectory, DIVERGENCE_BOUND};
use crate::error::{Error, Result};
use crate::hamiltonian::{reduced_with_laws, ReducedEval, ThetaLayout};
use crate::linalg::LeastSquares;
use crate::measures::EmpiricalMeasure;
use crate::model::{CoefficientSet, Dims, Node};
use crate::stochastic::{NoiseBundle, TimeGrid};

/// Output of one backward sweep: the full trajectory on the given states and
/// the regression fits that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSweep {
    pub path: Trajectory,
    pub field: DecouplingField,
}

/// Controls and blended reduced coefficients of one world at one step.
struct WorldEval {
    alpha: Vec<f64>,
    b: Vec<f64>,
    sigma: Vec<f64>,
    sigma0: Vec<f64>,
    f: Vec<f64>,
}

fn mean_of(points: &[f64], n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n];
    for atom in points.chunks_exact(n) {
        for (s, v) in m.iter_mut().zip(atom) {
            *s += v;
        }
    }
    let count = (points.len() / n) as f64;
    m.iter_mut().for_each(|s| *s /= count);
    m
}

/// `adj` holds `(Ŷ, Z, Z⁰)` per particle (`M x (n + 2·n·d)`).
fn world_eval<C: CoefficientSet + ?Sized>(
    c: &C,
    t: Node,
    xk: &[f64],
    adj: &[f64],
    delta: f64,
) -> Result<WorldEval> {
    let dims = c.dims();
    let layout = ThetaLayout::from(dims);
    let (n, l, nd) = (dims.n, dims.l, dims.nd());
    let al = layout.adjoint_len();
    let m = xk.len() / n;
    let mu = EmpiricalMeasure::new(n, xk.to_vec())?;
    let zero = vec![0.0; l];
    let mut theta = vec![0.0; layout.theta_len()];
    let mut alpha = vec![0.0; m * l];
    for p in 0..m {
        theta[..n].copy_from_slice(&xk[p * n..(p + 1) * n]);
        theta[n..].copy_from_slice(&adj[p * al..(p + 1) * al]);
        c.minimize_hamiltonian(t, &theta, &mu, &zero, &mut alpha[p * l..(p + 1) * l])?;
    }
    let nu = EmpiricalMeasure::new(l, alpha.clone())?;
    let mut out = WorldEval {
        alpha,
        b: vec![0.0; m * n],
        sigma: vec![0.0; m * nd],
        sigma0: vec![0.0; m * nd],
        f: vec![0.0; m * n],
    };
    let mut red = ReducedEval::zeros(dims);
    for p in 0..m {
        theta[..n].copy_from_slice(&xk[p * n..(p + 1) * n]);
        theta[n..].copy_from_slice(&adj[p * al..(p + 1) * al]);
        reduced_with_laws(c, t, &theta, &out.alpha[p * l..(p + 1) * l], &mu, &nu, &mut red);
        let (x, y) = (&theta[..n], &theta[n..2 * n]);
        let (z, z0) = (&theta[2 * n..2 * n + nd], &theta[2 * n + nd..]);
        let blend = |dst: &mut [f64], v: &[f64], s: &[f64], sign: f64| {
            for ((o, a), b) in dst.iter_mut().zip(v).zip(s) {
                *o = if delta == 1.0 { *a } else { delta * a + sign * (1.0 - delta) * b };
            }
        };
        blend(&mut out.b[p * n..(p + 1) * n], &red.b, y, -1.0);
        blend(&mut out.sigma[p * nd..(p + 1) * nd], &red.sigma, z, -1.0);
        blend(&mut out.sigma0[p * nd..(p + 1) * nd], &red.sigma0, z0, -1.0);
        blend(&mut out.f[p * n..(p + 1) * n], &red.f, x, 1.0);
    }
    Ok(out)
}

/// `G^δ(x, μ)` for every particle of a world.
fn world_terminal<C: CoefficientSet + ?Sized>(c: &C, xk: &[f64], delta: f64) -> Result<Vec<f64>> {
    let n = c.dims().n;
    let mu = EmpiricalMeasure::new(n, xk.to_vec())?;
    let mut out = vec![0.0; xk.len()];
    for (x, g) in xk.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        c.terminal_dx(x, &mu, g);
        if delta != 1.0 {
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = delta * *gi + (1.0 - delta) * xi;
            }
        }
    }
    Ok(out)
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

/// Euler step of one world: `X_{k+1} = X_k + B dt + Σ ΔW + Σ⁰ ΔW⁰`.
#[allow(clippy::too_many_arguments)]
fn euler_world(dims: Dims, grid: &TimeGrid, k: usize, xk: &[f64], ev: &WorldEval, bundle: &NoiseBundle, out: &mut [f64]) {
    let (n, d) = (dims.n, dims.d);
    let dt = grid.dt();
    let dw0 = bundle.common(k);
    for p in 0..xk.len() / n {
        let dw = bundle.idio(p, k);
        for i in 0..n {
            let mut v = xk[p * n + i] + ev.b[p * n + i] * dt;
            for j in 0..d {
                v += ev.sigma[(p * n + i) * d + j] * dw[j] + ev.sigma0[(p * n + i) * d + j] * dw0[j];
            }
            out[p * n + i] = v;
        }
    }
}

fn initial_states(bundle: &NoiseBundle, particles: usize, out: &mut [f64]) {
    let n = bundle.state_dim();
    for p in 0..particles {
        out[p * n..(p + 1) * n].copy_from_slice(bundle.initial(p));
    }
}

/// Forward Euler sweep with adjoints read off `field` at the current states.
/// Returns the states, `(K+1) x W x M x n`.
pub fn forward_step<C: CoefficientSet + ?Sized>(
    c: &C,
    cfg: &MkvConfig,
    bundles: &[NoiseBundle],
    field: &DecouplingField,
    delta: f64,
) -> Result<Vec<f64>> {
    let dims = c.dims();
    let n = dims.n;
    let al = ThetaLayout::from(dims).adjoint_len();
    let (w_count, m) = (cfg.worlds, cfg.particles);
    let slab = w_count * m * n;
    let steps = cfg.grid.steps();
    let mut x = vec![0.0; (steps + 1) * slab];
    for (w, b) in bundles.iter().enumerate() {
        initial_states(b, m, &mut x[w * m * n..(w + 1) * m * n]);
    }
    for k in 0..steps {
        let t = Node::new(k, cfg.grid.time(k));
        let (done, rest) = x.split_at_mut((k + 1) * slab);
        let xk = &done[k * slab..];
        let next = &mut rest[..slab];
        next.par_chunks_mut(m * n)
            .zip(xk.par_chunks(m * n))
            .zip(bundles.par_iter())
            .try_for_each(|((out, xw), bundle)| -> Result<()> {
                let mean = mean_of(xw, n);
                let mut phi = vec![0.0; field.map.len()];
                let mut adj = vec![0.0; m * al];
                for p in 0..m {
                    field.eval(k, &xw[p * n..(p + 1) * n], &mean, &mut phi, &mut adj[p * al..(p + 1) * al]);
                }
                let ev = world_eval(c, t, xw, &adj, delta)?;
                euler_world(dims, &cfg.grid, k, xw, &ev, bundle, out);
                Ok(())
            })?;
        check_finite(next, k + 1, "state")?;
    }
    Ok(x)
}

/// Regression-based backward sweep along fixed state paths.
///
/// `Ŷ_k` regresses `Y_{k+1}`; `Z_k` and `Z⁰_k` regress
/// `(Y_{k+1} − Ŷ_k) ΔWᵀ / dt` and `(Y_{k+1} − Ŷ_k) ΔW⁰ᵀ / dt`, all on the same
/// basis of `(x, world mean)` pooled over every particle of every world.
pub fn backward_regress<C: CoefficientSet + ?Sized>(
    c: &C,
    cfg: &MkvConfig,
    bundles: &[NoiseBundle],
    x: &[f64],
    delta: f64,
) -> Result<BackwardSweep> {
    let dims = c.dims();
    let layout = ThetaLayout::from(dims);
    let (n, l, d, nd) = (dims.n, dims.l, dims.d, dims.nd());
    let al = layout.adjoint_len();
    let (w_count, m) = (cfg.worlds, cfg.particles);
    let steps = cfg.grid.steps();
    let dt = cfg.grid.dt();
    let pop = w_count * m;
    let map = FeatureMap::for_population(n, cfg.basis, w_count, m);
    let p_len = map.len();
    if x.len() != (steps + 1) * pop * n {
        return Err(Error::Config("state paths do not match the solver population".into()));
    }

    let mut theta = ThetaPath::empty(cfg.grid, layout, w_count, m);
    theta.x.copy_from_slice(x);
    let mut alpha = vec![0.0; steps * pop * l];
    let mut drivers = vec![0.0; steps * pop * n];
    let mut fits = Vec::with_capacity(steps);

    let terminal: Vec<Vec<f64>> = (0..w_count)
        .into_par_iter()
        .map(|w| world_terminal(c, &x[(steps * pop + w * m) * n..(steps * pop + (w + 1) * m) * n], delta))
        .collect::<Result<_>>()?;
    for (w, g) in terminal.iter().enumerate() {
        let i = (steps * pop + w * m) * n;
        theta.y[i..i + m * n].copy_from_slice(g);
        theta.y_hat[i..i + m * n].copy_from_slice(g);
    }

    for k in (0..steps).rev() {
        let t = Node::new(k, cfg.grid.time(k));
        let xk = &x[k * pop * n..(k + 1) * pop * n];
        let y_next = &theta.y[(k + 1) * pop * n..(k + 2) * pop * n];
        let means: Vec<Vec<f64>> = xk.chunks(m * n).map(|xw| mean_of(xw, n)).collect();

        let partial: Vec<LeastSquares> = (0..w_count)
            .into_par_iter()
            .map(|w| {
                let mut ls = LeastSquares::new(p_len, n);
                let mut phi = vec![0.0; p_len];
                for p in 0..m {
                    let i = (w * m + p) * n;
                    map.eval(&xk[i..i + n], &means[w], &mut phi);
                    ls.add(&phi, &y_next[i..i + n]);
                }
                ls
            })
            .collect();
        let mut ls = LeastSquares::new(p_len, n);
        partial.iter().for_each(|p| ls.merge(p));
        let fit_y = ls.solve();

        let partial: Vec<LeastSquares> = (0..w_count)
            .into_par_iter()
            .map(|w| {
                let mut ls = LeastSquares::new(p_len, 2 * nd);
                let mut phi = vec![0.0; p_len];
                let mut yh = vec![0.0; n];
                let mut target = vec![0.0; 2 * nd];
                let dw0 = bundles[w].common(k);
                for p in 0..m {
                    let i = (w * m + p) * n;
                    map.eval(&xk[i..i + n], &means[w], &mut phi);
                    fit_y.predict(&phi, &mut yh);
                    let dw = bundles[w].idio(p, k);
                    for a in 0..n {
                        let r = (y_next[i + a] - yh[a]) / dt;
                        for j in 0..d {
                            target[a * d + j] = r * dw[j];
                            target[nd + a * d + j] = r * dw0[j];
                        }
                    }
                    ls.add(&phi, &target);
                }
                ls
            })
            .collect();
        let mut ls = LeastSquares::new(p_len, 2 * nd);
        partial.iter().for_each(|p| ls.merge(p));
        let fit = StepFit {
            y: fit_y,
            z: ls.solve(),
        };

        let field_k = DecouplingField {
            map,
            layout,
            steps: vec![fit],
        };
        let per_world: Vec<(Vec<f64>, WorldEval)> = (0..w_count)
            .into_par_iter()
            .map(|w| -> Result<(Vec<f64>, WorldEval)> {
                let xw = &xk[w * m * n..(w + 1) * m * n];
                let mut phi = vec![0.0; p_len];
                let mut adj = vec![0.0; m * al];
                for p in 0..m {
                    field_k.eval(0, &xw[p * n..(p + 1) * n], &means[w], &mut phi, &mut adj[p * al..(p + 1) * al]);
                }
                let ev = world_eval(c, t, xw, &adj, delta)?;
                Ok((adj, ev))
            })
            .collect::<Result<_>>()?;
        for (w, (adj, ev)) in per_world.iter().enumerate() {
            for p in 0..m {
                let node = k * pop + w * m + p;
                let a = &adj[p * al..(p + 1) * al];
                theta.y_hat[node * n..(node + 1) * n].copy_from_slice(&a[..n]);
                theta.z[node * nd..(node + 1) * nd].copy_from_slice(&a[n..n + nd]);
                theta.z0[node * nd..(node + 1) * nd].copy_from_slice(&a[n + nd..]);
                for i in 0..n {
                    theta.y[node * n + i] = a[i] + ev.f[p * n + i] * dt;
                }
                let row = (w * m + p) + k * pop;
                alpha[row * l..(row + 1) * l].copy_from_slice(&ev.alpha[p * l..(p + 1) * l]);
                drivers[row * n..(row + 1) * n].copy_from_slice(&ev.f[p * n..(p + 1) * n]);
            }
        }
        check_finite(&theta.y[k * pop * n..(k + 1) * pop * n], k, "adjoint")?;
        fits.push(field_k.steps.into_iter().next().expect("one fit"));
    }
    fits.reverse();
    Ok(BackwardSweep {
        path: Trajectory { theta, alpha, drivers },
        field: DecouplingField {
            map,
            layout,
            steps: fits,
        },
    })
}

/// Propagates the first `particles` paths of one noise world through a
/// fitted decoupling field, recording the full trajectory. `Y_k = Ŷ_k +
/// F_k dt` and `Y_K = G(X_K, μ_K)` are evaluated on this cloud's own
/// empirical laws.
pub fn simulate_world<C: CoefficientSet + ?Sized>(
    c: &C,
    field: &DecouplingField,
    bundle: &NoiseBundle,
    particles: usize,
) -> Result<Trajectory> {
    let dims = c.dims();
    let layout = ThetaLayout::from(dims);
    let (n, l, nd) = (dims.n, dims.l, dims.nd());
    let al = layout.adjoint_len();
    let grid = *bundle.grid();
    let steps = grid.steps();
    let dt = grid.dt();
    if particles == 0 || particles > bundle.paths() {
        return Err(Error::Config(format!(
            "cannot propagate {particles} particles on a world with {} paths",
            bundle.paths()
        )));
    }
    if field.steps.len() != steps || field.layout != layout {
        return Err(Error::Config("decoupling field does not match the grid or model".into()));
    }
    let m = particles;
    let mut theta = ThetaPath::empty(grid, layout, 1, m);
    let mut alpha = vec![0.0; steps * m * l];
    let mut drivers = vec![0.0; steps * m * n];
    initial_states(bundle, m, &mut theta.x[..m * n]);
    let mut phi = vec![0.0; field.map.len()];
    let mut adj = vec![0.0; m * al];
    for k in 0..steps {
        let t = Node::new(k, grid.time(k));
        let (done, rest) = theta.x.split_at_mut((k + 1) * m * n);
        let xk = &done[k * m * n..];
        let mean = mean_of(xk, n);
        for p in 0..m {
            field.eval(k, &xk[p * n..(p + 1) * n], &mean, &mut phi, &mut adj[p * al..(p + 1) * al]);
        }
        let ev = world_eval(c, t, xk, &adj, 1.0)?;
        euler_world(dims, &grid, k, xk, &ev, bundle, &mut rest[..m * n]);
        check_finite(&rest[..m * n], k + 1, "state")?;
        for p in 0..m {
            let node = k * m + p;
            let a = &adj[p * al..(p + 1) * al];
            theta.y_hat[node * n..(node + 1) * n].copy_from_slice(&a[..n]);
            theta.z[node * nd..(node + 1) * nd].copy_from_slice(&a[n..n + nd]);
            theta.z0[node * nd..(node + 1) * nd].copy_from_slice(&a[n + nd..]);
            for i in 0..n {
                theta.y[node * n + i] = a[i] + ev.f[p * n + i] * dt;
            }
        }
        alpha[k * m * l..(k + 1) * m * l].copy_from_slice(&ev.alpha);
        drivers[k * m * n..(k + 1) * m * n].copy_from_slice(&ev.f);
    }
    let g = world_terminal(c, &theta.x[steps * m * n..], 1.0)?;
    theta.y[steps * m * n..].copy_from_slice(&g);
    theta.y_hat[steps * m * n..].copy_from_slice(&g);
    Ok(Trajectory { theta, alpha, drivers })
}
