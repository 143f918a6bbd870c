use super::{CoefficientSet, Node};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::stochastic::TimeGrid;

/// State and control laws at each node; `controls[K]` is never read.
#[derive(Debug, Clone)]
pub struct MeasureFlow {
    pub states: Vec<EmpiricalMeasure>,
    pub controls: Vec<EmpiricalMeasure>,
}

/// Left-endpoint Riemann sum of `f` plus terminal `g`, averaged over
/// particles.
///
/// `x` holds `M x (K+1) x n` states and `a` holds `M x K x ℓ` controls.
pub fn eval_cost<C: CoefficientSet + ?Sized>(
    coeffs: &C,
    grid: &TimeGrid,
    x: &[f64],
    a: &[f64],
    flow: &MeasureFlow,
) -> Result<f64> {
    let dims = coeffs.dims();
    let steps = grid.steps();
    let (n, l) = (dims.n, dims.l);
    if x.is_empty() || x.len() % ((steps + 1) * n) != 0 {
        return Err(Error::Config("state paths do not match the grid".into()));
    }
    let m = x.len() / ((steps + 1) * n);
    if a.len() != m * steps * l {
        return Err(Error::Config("control paths do not match the grid".into()));
    }
    if flow.states.len() != steps + 1 || flow.controls.len() < steps {
        return Err(Error::Config("measure flow does not match the grid".into()));
    }
    let dt = grid.dt();
    let mut total = 0.0;
    for p in 0..m {
        let xs = &x[p * (steps + 1) * n..(p + 1) * (steps + 1) * n];
        let al = &a[p * steps * l..(p + 1) * steps * l];
        let mut running = 0.0;
        for k in 0..steps {
            running += coeffs.running_cost(
                Node::new(k, grid.time(k)),
                &xs[k * n..(k + 1) * n],
                &al[k * l..(k + 1) * l],
                &flow.states[k],
                &flow.controls[k],
            );
        }
        total += running * dt + coeffs.terminal_cost(&xs[steps * n..], &flow.states[steps]);
    }
    Ok(total / m as f64)
}
