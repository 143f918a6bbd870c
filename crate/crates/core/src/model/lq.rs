//! Linear-quadratic game with control-law interaction:
//!
//! ```text
//! b  = A x + B (c₁ a − c₂ ν̄)        σ = C x + D (c₁ a − c₂ ν̄)        σ⁰ = C⁰ x + D⁰ (c₁ a − c₂ ν̄)
//! f  = ½ (xᵀQx + aᵀPa + (x − S μ̄)ᵀ Q̄ (x − S μ̄) + ν̄ᵀ P̄ ν̄)
//! g  = ½ (xᵀQ_T x + (x − S_T μ̄)ᵀ Q̄_T (x − S_T μ̄))
//! ```
//!
//! where `μ̄`, `ν̄` are the means of the state and control laws. `C`, `C⁰`
//! have `n·d` rows so that `C x` reshapes to an `n x d` volatility; with
//! `d = 1` they are ordinary `n x n` matrices.

use nalgebra::DMatrix;

use super::{CoefficientSet, Dims, Node};
use crate::error::{Error, Result};
use crate::linalg::{mat_t_vec_add, mat_vec_add, max_eigenvalue, min_eigenvalue, Buf};
use crate::measures::EmpiricalMeasure;
use crate::stochastic::TimeGrid;

/// Piecewise-constant matrix-valued function of time.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Constant(DMatrix<f64>),
    /// One matrix per grid node; nodes past the end reuse the last entry.
    PerNode(Vec<DMatrix<f64>>),
}

impl Schedule {
    pub fn scalar(v: f64) -> Self {
        Schedule::Constant(DMatrix::from_element(1, 1, v))
    }

    #[inline]
    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        match self {
            Schedule::Constant(m) => m,
            Schedule::PerNode(v) => &v[k.min(v.len() - 1)],
        }
    }

    fn shape(&self) -> Option<(usize, usize)> {
        match self {
            Schedule::Constant(m) => Some(m.shape()),
            Schedule::PerNode(v) => {
                let first = v.first()?.shape();
                v.iter().all(|m| m.shape() == first).then_some(first)
            }
        }
    }

    fn matrices(&self) -> Vec<&DMatrix<f64>> {
        match self {
            Schedule::Constant(m) => vec![m],
            Schedule::PerNode(v) => v.iter().collect(),
        }
    }

    fn map(&self, mut f: impl FnMut(&DMatrix<f64>) -> DMatrix<f64>) -> Schedule {
        match self {
            Schedule::Constant(m) => Schedule::Constant(f(m)),
            Schedule::PerNode(v) => Schedule::PerNode(v.iter().map(&mut f).collect()),
        }
    }
}

/// Parameters of the LQ game.
#[derive(Debug, Clone, PartialEq)]
pub struct LqCoefficients {
    pub dims: Dims,
    pub a: Schedule,
    pub b: Schedule,
    pub c: Schedule,
    pub d: Schedule,
    pub c0: Schedule,
    pub d0: Schedule,
    pub q: Schedule,
    pub qbar: Schedule,
    pub s: Schedule,
    pub p: Schedule,
    pub pbar: Schedule,
    pub c1: f64,
    pub c2: f64,
    pub q_terminal: DMatrix<f64>,
    pub qbar_terminal: DMatrix<f64>,
    pub s_terminal: DMatrix<f64>,
}

/// Scalar parameters for the `n = ℓ = d = 1` case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarLq {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub c0: f64,
    pub d0: f64,
    pub q: f64,
    pub qbar: f64,
    pub s: f64,
    pub p: f64,
    pub pbar: f64,
    pub c1: f64,
    pub c2: f64,
    pub q_terminal: f64,
    pub qbar_terminal: f64,
    pub s_terminal: f64,
}

impl Default for ScalarLq {
    fn default() -> Self {
        Self {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
            c0: 0.0,
            d0: 0.0,
            q: 1.0,
            qbar: 0.0,
            s: 0.0,
            p: 1.0,
            pbar: 0.0,
            c1: 1.0,
            c2: 0.0,
            q_terminal: 1.0,
            qbar_terminal: 0.0,
            s_terminal: 0.0,
        }
    }
}

impl From<ScalarLq> for LqCoefficients {
    fn from(s: ScalarLq) -> Self {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        LqCoefficients {
            dims: Dims::scalar(),
            a: Schedule::scalar(s.a),
            b: Schedule::scalar(s.b),
            c: Schedule::scalar(s.c),
            d: Schedule::scalar(s.d),
            c0: Schedule::scalar(s.c0),
            d0: Schedule::scalar(s.d0),
            q: Schedule::scalar(s.q),
            qbar: Schedule::scalar(s.qbar),
            s: Schedule::scalar(s.s),
            p: Schedule::scalar(s.p),
            pbar: Schedule::scalar(s.pbar),
            c1: s.c1,
            c2: s.c2,
            q_terminal: m(s.q_terminal),
            qbar_terminal: m(s.qbar_terminal),
            s_terminal: m(s.s_terminal),
        }
    }
}

impl LqCoefficients {
    /// True for the deterministic, interaction-free sub-case solved by the
    /// Riccati oracle.
    pub fn is_deterministic_single_agent(&self) -> bool {
        let zero = |s: &Schedule| s.matrices().iter().all(|m| m.iter().all(|&v| v == 0.0));
        zero(&self.c)
            && zero(&self.d)
            && zero(&self.c0)
            && zero(&self.d0)
            && zero(&self.qbar)
            && zero(&self.s)
            && zero(&self.pbar)
            && self.c2 == 0.0
            && self.qbar_terminal.iter().all(|&v| v == 0.0)
            && self.s_terminal.iter().all(|&v| v == 0.0)
    }

    /// Every terminal-cost matrix multiplied by `factor`.
    pub fn scale_terminal(&self, factor: f64) -> LqCoefficients {
        LqCoefficients {
            q_terminal: &self.q_terminal * factor,
            qbar_terminal: &self.qbar_terminal * factor,
            ..self.clone()
        }
    }

    /// Every cost matrix (running and terminal) multiplied by `factor`.
    pub fn scale_costs(&self, factor: f64) -> LqCoefficients {
        LqCoefficients {
            q: self.q.map(|m| m * factor),
            qbar: self.qbar.map(|m| m * factor),
            p: self.p.map(|m| m * factor),
            pbar: self.pbar.map(|m| m * factor),
            q_terminal: &self.q_terminal * factor,
            qbar_terminal: &self.qbar_terminal * factor,
            ..self.clone()
        }
    }

    fn shape_checks(&self) -> Vec<String> {
        let Dims { n, l, d } = self.dims;
        let expect: [(&str, &Schedule, (usize, usize)); 11] = [
            ("A", &self.a, (n, n)),
            ("B", &self.b, (n, l)),
            ("C", &self.c, (n * d, n)),
            ("D", &self.d, (n * d, l)),
            ("C0", &self.c0, (n * d, n)),
            ("D0", &self.d0, (n * d, l)),
            ("Q", &self.q, (n, n)),
            ("Qbar", &self.qbar, (n, n)),
            ("S", &self.s, (n, n)),
            ("P", &self.p, (l, l)),
            ("Pbar", &self.pbar, (l, l)),
        ];
        let mut errs = Vec::new();
        for (name, sched, shape) in expect {
            match sched.shape() {
                Some(s) if s == shape => {}
                Some(s) => errs.push(format!("{name} has shape {s:?}, expected {shape:?}")),
                None => errs.push(format!("{name} has an empty or ragged schedule")),
            }
        }
        for (name, m) in [("QT", &self.q_terminal), ("QbarT", &self.qbar_terminal), ("ST", &self.s_terminal)] {
            if m.shape() != (n, n) {
                errs.push(format!("{name} has shape {:?}, expected {:?}", m.shape(), (n, n)));
            }
        }
        errs
    }
}

/// One failed condition at one grid node (`K` denotes the terminal node).
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub condition: String,
    pub node: usize,
}

/// Outcome of [`validate_lq`]. `passed` holds exactly when `violations` is
/// empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub passed: bool,
    /// Largest `λ` with `Q + Q̄ ⪰ λI` at every node, terminal included.
    pub lambda: f64,
    pub violations: Vec<Violation>,
}

const PSD_TOL: f64 = 1e-12;
/// Entries above this magnitude count as unbounded.
const BOUND: f64 = 1e12;

/// Checks the structural conditions under which the LQ coefficients are
/// monotone: `P ≻ 0`, `Q ≻ 0`, `Q̄S ⪯ 0`, `Q + Q̄ ⪰ λI` with `λ > 0`,
/// bounded entries, and `c₁ = 0` or `c₂/c₁ ≤ 1`.
pub fn validate_lq(lq: &LqCoefficients, grid: &TimeGrid) -> ValidationReport {
    let mut violations = Vec::new();
    for msg in lq.shape_checks() {
        violations.push(Violation {
            condition: format!("shape: {msg}"),
            node: 0,
        });
    }
    if !violations.is_empty() {
        return ValidationReport {
            passed: false,
            lambda: f64::NAN,
            violations,
        };
    }
    let steps = grid.steps();
    let mut push = |cond: &str, node: usize| {
        violations.push(Violation {
            condition: cond.to_string(),
            node,
        })
    };
    let mut lambda = f64::INFINITY;
    let bounded = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite() && v.abs() <= BOUND);
    let symmetric = |m: &DMatrix<f64>| (m - m.transpose()).abs().max() <= 1e-12 * (1.0 + m.abs().max());

    for k in 0..=steps {
        let terminal = k == steps;
        let (q, qbar, s) = if terminal {
            (&lq.q_terminal, &lq.qbar_terminal, &lq.s_terminal)
        } else {
            (lq.q.at(k), lq.qbar.at(k), lq.s.at(k))
        };
        let p = lq.p.at(k);
        let all = [
            lq.a.at(k),
            lq.b.at(k),
            lq.c.at(k),
            lq.d.at(k),
            lq.c0.at(k),
            lq.d0.at(k),
            q,
            qbar,
            s,
            p,
            lq.pbar.at(k),
        ];
        if !all.iter().all(|m| bounded(m)) {
            push("bounded", k);
            continue;
        }
        if ![q, qbar, p, lq.pbar.at(k)].iter().all(|m| symmetric(m)) {
            push("symmetric", k);
        }
        if min_eigenvalue(p) <= PSD_TOL {
            push("P>0", k);
        }
        if min_eigenvalue(q) <= PSD_TOL {
            push("Q>0", k);
        }
        if max_eigenvalue(&(qbar * s)) > PSD_TOL {
            push("QbarS<=0", k);
        }
        lambda = lambda.min(min_eigenvalue(&(q + qbar)));
    }
    if lambda <= PSD_TOL {
        push("Q+Qbar>=lambda*I", steps);
    }
    if lq.c1 != 0.0 && lq.c2 / lq.c1 > 1.0 {
        push("c2/c1<=1", 0);
    }
    if !(lq.c1.is_finite() && lq.c2.is_finite()) {
        push("bounded", 0);
    }
    ValidationReport {
        passed: violations.is_empty(),
        lambda,
        violations,
    }
}

/// [`CoefficientSet`] backed by [`LqCoefficients`], with closed-form
/// derivatives and minimiser.
#[derive(Debug, Clone)]
pub struct LqModel {
    lq: LqCoefficients,
    p_inv: Schedule,
    gamma: f64,
    validated: bool,
}

/// Builds the LQ coefficient set after checking [`validate_lq`].
pub fn lq_coefficients(lq: &LqCoefficients, grid: &TimeGrid) -> Result<LqModel> {
    let report = validate_lq(lq, grid);
    if !report.passed {
        let list: Vec<String> = report
            .violations
            .iter()
            .map(|v| format!("{} at node {}", v.condition, v.node))
            .collect();
        return Err(Error::Config(format!("LQ coefficients failed validation: {}", list.join("; "))));
    }
    let mut m = LqModel::new_unchecked(lq)?;
    m.validated = true;
    Ok(m)
}

impl LqModel {
    /// Builds the model without the monotonicity checks. Only shapes and the
    /// invertibility of `P` are required. Used to study deliberately broken
    /// configurations.
    pub fn new_unchecked(lq: &LqCoefficients) -> Result<Self> {
        let shape_errs = lq.shape_checks();
        if !shape_errs.is_empty() {
            return Err(Error::Config(shape_errs.join("; ")));
        }
        let mut inv_err = false;
        let p_inv = lq.p.map(|p| {
            p.clone().try_inverse().unwrap_or_else(|| {
                inv_err = true;
                DMatrix::zeros(p.nrows(), p.ncols())
            })
        });
        if inv_err {
            return Err(Error::Config("P must be invertible".into()));
        }
        let gamma = lq
            .p
            .matrices()
            .iter()
            .map(|p| min_eigenvalue(p))
            .fold(f64::INFINITY, f64::min);
        Ok(Self {
            lq: lq.clone(),
            p_inv,
            gamma,
            validated: false,
        })
    }

    pub fn params(&self) -> &LqCoefficients {
        &self.lq
    }

    pub fn is_validated(&self) -> bool {
        self.validated
    }

    /// `c₁ a − c₂ ν̄`.
    #[inline]
    fn effective_control(&self, a: &[f64], nu: &EmpiricalMeasure, out: &mut [f64]) {
        let nb = nu.mean();
        for ((o, &ai), &ni) in out.iter_mut().zip(a).zip(nb) {
            *o = self.lq.c1 * ai - self.lq.c2 * ni;
        }
    }

    /// `x − S μ̄` with the running or terminal `S`.
    #[inline]
    fn centred(s: &DMatrix<f64>, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.copy_from_slice(x);
        mat_vec_add(s, mu.mean(), -1.0, out);
    }

    /// `Bᵀ y + Dᵀ z + D⁰ᵀ z⁰` for a θ-tuple.
    #[inline]
    pub fn adjoint_combination(&self, k: usize, theta: &[f64], out: &mut [f64]) {
        let n = self.lq.dims.n;
        let nd = self.lq.dims.nd();
        out.iter_mut().for_each(|o| *o = 0.0);
        mat_t_vec_add(self.lq.b.at(k), &theta[n..2 * n], 1.0, out);
        mat_t_vec_add(self.lq.d.at(k), &theta[2 * n..2 * n + nd], 1.0, out);
        mat_t_vec_add(self.lq.d0.at(k), &theta[2 * n + nd..2 * n + 2 * nd], 1.0, out);
    }

    fn quad(m: &DMatrix<f64>, v: &[f64]) -> f64 {
        let mut tmp = Buf::zeros(m.nrows());
        mat_vec_add(m, v, 1.0, &mut tmp);
        crate::linalg::dot(v, &tmp)
    }

    fn write_matrix(m: &DMatrix<f64>, scale: f64, out: &mut [f64]) {
        let cols = m.ncols();
        for r in 0..m.nrows() {
            for c in 0..cols {
                out[r * cols + c] = scale * m[(r, c)];
            }
        }
    }
}

impl CoefficientSet for LqModel {
    fn dims(&self) -> Dims {
        self.lq.dims
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn drift(&self, t: Node, x: &[f64], a: &[f64], _mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, out: &mut [f64]) {
        let mut u = Buf::zeros(self.lq.dims.l);
        self.effective_control(a, nu, &mut u);
        out.iter_mut().for_each(|o| *o = 0.0);
        mat_vec_add(self.lq.a.at(t.k), x, 1.0, out);
        mat_vec_add(self.lq.b.at(t.k), &u, 1.0, out);
    }

    fn vol(&self, t: Node, x: &[f64], a: &[f64], _mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, out: &mut [f64]) {
        let mut u = Buf::zeros(self.lq.dims.l);
        self.effective_control(a, nu, &mut u);
        out.iter_mut().for_each(|o| *o = 0.0);
        mat_vec_add(self.lq.c.at(t.k), x, 1.0, out);
        mat_vec_add(self.lq.d.at(t.k), &u, 1.0, out);
    }

    fn common_vol(&self, t: Node, x: &[f64], a: &[f64], _mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, out: &mut [f64]) {
        let mut u = Buf::zeros(self.lq.dims.l);
        self.effective_control(a, nu, &mut u);
        out.iter_mut().for_each(|o| *o = 0.0);
        mat_vec_add(self.lq.c0.at(t.k), x, 1.0, out);
        mat_vec_add(self.lq.d0.at(t.k), &u, 1.0, out);
    }

    fn running_cost(&self, t: Node, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
        let k = t.k;
        let mut e = Buf::zeros(self.lq.dims.n);
        Self::centred(self.lq.s.at(k), x, mu, &mut e);
        0.5 * (Self::quad(self.lq.q.at(k), x)
            + Self::quad(self.lq.p.at(k), a)
            + Self::quad(self.lq.qbar.at(k), &e)
            + Self::quad(self.lq.pbar.at(k), nu.mean()))
    }

    fn terminal_cost(&self, x: &[f64], mu: &EmpiricalMeasure) -> f64 {
        let mut e = Buf::zeros(self.lq.dims.n);
        Self::centred(&self.lq.s_terminal, x, mu, &mut e);
        0.5 * (Self::quad(&self.lq.q_terminal, x) + Self::quad(&self.lq.qbar_terminal, &e))
    }

    fn drift_dx(&self, t: Node, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _nu: &EmpiricalMeasure, out: &mut [f64]) {
        Self::write_matrix(self.lq.a.at(t.k), 1.0, out);
    }

    fn drift_da(&self, t: Node, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        Self::write_matrix(self.lq.b.at(t.k), self.lq.c1, out);
    }

    fn vol_dx(&self, t: Node, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _nu: &EmpiricalMeasure, out: &mut [f64]) {
        Self::write_matrix(self.lq.c.at(t.k), 1.0, out);
    }

    fn vol_da(&self, t: Node, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        Self::write_matrix(self.lq.d.at(t.k), self.lq.c1, out);
    }

    fn common_vol_dx(&self, t: Node, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _nu: &EmpiricalMeasure, out: &mut [f64]) {
        Self::write_matrix(self.lq.c0.at(t.k), 1.0, out);
    }

    fn common_vol_da(&self, t: Node, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        Self::write_matrix(self.lq.d0.at(t.k), self.lq.c1, out);
    }

    fn cost_dx(&self, t: Node, x: &[f64], _a: &[f64], mu: &EmpiricalMeasure, _nu: &EmpiricalMeasure, out: &mut [f64]) {
        let k = t.k;
        let mut e = Buf::zeros(self.lq.dims.n);
        Self::centred(self.lq.s.at(k), x, mu, &mut e);
        out.iter_mut().for_each(|o| *o = 0.0);
        mat_vec_add(self.lq.q.at(k), x, 1.0, out);
        mat_vec_add(self.lq.qbar.at(k), &e, 1.0, out);
    }

    fn cost_da(&self, t: Node, _x: &[f64], a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        mat_vec_add(self.lq.p.at(t.k), a, 1.0, out);
    }

    fn terminal_dx(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let mut e = Buf::zeros(self.lq.dims.n);
        Self::centred(&self.lq.s_terminal, x, mu, &mut e);
        out.iter_mut().for_each(|o| *o = 0.0);
        mat_vec_add(&self.lq.q_terminal, x, 1.0, out);
        mat_vec_add(&self.lq.qbar_terminal, &e, 1.0, out);
    }

    fn drift_dmu(&self, _t: Node, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _nu: &EmpiricalMeasure, _u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn vol_dmu(&self, _t: Node, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _nu: &EmpiricalMeasure, _u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn common_vol_dmu(&self, _t: Node, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _nu: &EmpiricalMeasure, _u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn cost_dmu(&self, t: Node, x: &[f64], _a: &[f64], mu: &EmpiricalMeasure, _nu: &EmpiricalMeasure, _u: &[f64], out: &mut [f64]) {
        // −Sᵀ Q̄ (x − S μ̄), the same at every atom.
        let k = t.k;
        let n = self.lq.dims.n;
        let mut e = Buf::zeros(n);
        Self::centred(self.lq.s.at(k), x, mu, &mut e);
        let mut qe = Buf::zeros(n);
        mat_vec_add(self.lq.qbar.at(k), &e, 1.0, &mut qe);
        out.iter_mut().for_each(|o| *o = 0.0);
        mat_t_vec_add(self.lq.s.at(k), &qe, -1.0, out);
    }

    fn terminal_dmu(&self, x: &[f64], mu: &EmpiricalMeasure, _u: &[f64], out: &mut [f64]) {
        let n = self.lq.dims.n;
        let mut e = Buf::zeros(n);
        Self::centred(&self.lq.s_terminal, x, mu, &mut e);
        let mut qe = Buf::zeros(n);
        mat_vec_add(&self.lq.qbar_terminal, &e, 1.0, &mut qe);
        out.iter_mut().for_each(|o| *o = 0.0);
        mat_t_vec_add(&self.lq.s_terminal, &qe, -1.0, out);
    }

    fn drift_dnu(&self, t: Node, _x: &[f64], _mu: &EmpiricalMeasure, _nu: &EmpiricalMeasure, _a: &[f64], out: &mut [f64]) {
        Self::write_matrix(self.lq.b.at(t.k), -self.lq.c2, out);
    }

    fn vol_dnu(&self, t: Node, _x: &[f64], _mu: &EmpiricalMeasure, _nu: &EmpiricalMeasure, _a: &[f64], out: &mut [f64]) {
        Self::write_matrix(self.lq.d.at(t.k), -self.lq.c2, out);
    }

    fn common_vol_dnu(&self, t: Node, _x: &[f64], _mu: &EmpiricalMeasure, _nu: &EmpiricalMeasure, _a: &[f64], out: &mut [f64]) {
        Self::write_matrix(self.lq.d0.at(t.k), -self.lq.c2, out);
    }

    fn cost_dnu(&self, t: Node, _x: &[f64], _mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, _a: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        mat_vec_add(self.lq.pbar.at(t.k), nu.mean(), 1.0, out);
    }

    fn dynamics_depend_on_state_law(&self) -> bool {
        false
    }

    fn control_law_derivatives_state_free(&self) -> bool {
        true
    }

    fn hamiltonian_dx(&self, t: Node, theta: &[f64], a: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, out: &mut [f64]) {
        let k = t.k;
        let n = self.lq.dims.n;
        let nd = self.lq.dims.nd();
        self.cost_dx(t, &theta[..n], a, mu, nu, out);
        mat_t_vec_add(self.lq.a.at(k), &theta[n..2 * n], 1.0, out);
        mat_t_vec_add(self.lq.c.at(k), &theta[2 * n..2 * n + nd], 1.0, out);
        mat_t_vec_add(self.lq.c0.at(k), &theta[2 * n + nd..2 * n + 2 * nd], 1.0, out);
    }

    fn hamiltonian_da(&self, t: Node, theta: &[f64], a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        let l = self.lq.dims.l;
        let mut comb = Buf::zeros(l);
        self.adjoint_combination(t.k, theta, &mut comb);
        out.iter_mut().for_each(|o| *o = 0.0);
        mat_vec_add(self.lq.p.at(t.k), a, 1.0, out);
        for (o, c) in out.iter_mut().zip(comb.iter()) {
            *o += self.lq.c1 * c;
        }
    }

    /// `a = −P⁻¹ (c₁ (Bᵀy + Dᵀz + D⁰ᵀz⁰) + ζ)`.
    fn minimize_hamiltonian(&self, t: Node, theta: &[f64], _mu: &EmpiricalMeasure, zeta: &[f64], out: &mut [f64]) -> Result<()> {
        let l = self.lq.dims.l;
        let mut rhs = Buf::zeros(l);
        self.adjoint_combination(t.k, theta, &mut rhs);
        for (r, z) in rhs.iter_mut().zip(zeta) {
            *r = self.lq.c1 * *r + z;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        mat_vec_add(self.p_inv.at(t.k), &rhs, -1.0, out);
        Ok(())
    }
}
