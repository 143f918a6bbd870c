//! Run configuration: a TOML file with a mandatory `[model]` section and
//! defaulted `grid`, `monte_carlo`, `solver`, `experiment`, `monotonicity`
//! and `output` sections.
//!
//! Parsing never stops at the first problem. Unknown keys, missing sections
//! and out-of-range values are all collected into one [`ConfigErrors`].

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use mfg_lab::harness::ConvergenceConfig;
use mfg_lab::mkv::{Basis, ContinuationConfig, MkvConfig};
use mfg_lab::model::{Dims, LqCoefficients, Schedule};
use mfg_lab::monotonicity::CertifyOptions;
use mfg_lab::nplayer::{NeBasis, NeConfig, MAX_PLAYERS, MAX_REPETITIONS};
use mfg_lab::stochastic::{InitialLaw, TimeGrid};

/// Every violation found in a configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl ConfigErrors {
    pub fn contains(&self, needle: &str) -> bool {
        self.0.iter().any(|e| e.contains(needle))
    }
}

/// A scalar (read as `s·I` for square shapes) or explicit rows.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum MatrixValue {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixValue {
    fn to_matrix(&self, name: &str, shape: (usize, usize), errs: &mut Vec<String>) -> DMatrix<f64> {
        let (r, c) = shape;
        match self {
            MatrixValue::Scalar(s) if r == c => DMatrix::identity(r, c) * *s,
            MatrixValue::Scalar(s) if r * c == 1 => DMatrix::from_element(1, 1, *s),
            MatrixValue::Scalar(_) => {
                errs.push(format!("model.{name}: a scalar only fits a square shape, expected {r}x{c} rows"));
                DMatrix::zeros(r, c)
            }
            MatrixValue::Rows(rows) => {
                if rows.len() != r || rows.iter().any(|row| row.len() != c) {
                    errs.push(format!("model.{name} must be a {r}x{c} array of rows"));
                    return DMatrix::zeros(r, c);
                }
                DMatrix::from_fn(r, c, |i, j| rows[i][j])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Lq,
    /// Reserved for user-supplied coefficient sets; rejected by the CLI.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitialSection {
    Point { x0: Vec<f64> },
    Gaussian { mean: Vec<f64>, cov: MatrixValue },
}

/// LQ parameters. Cost and dynamics matrices default to zero except
/// `Q = P = I`; the terminal weights default to their running counterparts.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ModelSection {
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default = "one")]
    pub state_dim: usize,
    #[serde(default = "one")]
    pub control_dim: usize,
    #[serde(default = "one")]
    pub noise_dim: usize,
    pub a: Option<MatrixValue>,
    pub b: Option<MatrixValue>,
    pub c: Option<MatrixValue>,
    pub d: Option<MatrixValue>,
    pub c0: Option<MatrixValue>,
    pub d0: Option<MatrixValue>,
    pub q: Option<MatrixValue>,
    pub qbar: Option<MatrixValue>,
    pub s: Option<MatrixValue>,
    pub p: Option<MatrixValue>,
    pub pbar: Option<MatrixValue>,
    #[serde(default = "one_f")]
    pub c1: f64,
    #[serde(default)]
    pub c2: f64,
    pub q_terminal: Option<MatrixValue>,
    pub qbar_terminal: Option<MatrixValue>,
    pub s_terminal: Option<MatrixValue>,
    pub initial: Option<InitialSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default)]
pub struct GridSection {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "K")]
    pub steps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { horizon: 1.0, steps: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default)]
pub struct MonteCarloSection {
    /// Worlds of the mean-field solve.
    pub worlds: usize,
    /// Particles per world of the mean-field solve.
    pub particles: usize,
    /// Common-noise repetitions of the N-player solve.
    pub repetitions: usize,
    /// Auxiliary particles per repetition for the coupled copies.
    pub m_aux: usize,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            worlds: 128,
            particles: 128,
            repetitions: 256,
            m_aux: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Picard,
    Continuation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BasisOrder {
    #[default]
    Affine,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlayerBasis {
    #[default]
    Exchangeable,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default)]
pub struct ContinuationSection {
    pub enabled: bool,
    pub initial_step: f64,
    pub min_step: f64,
}

impl Default for ContinuationSection {
    fn default() -> Self {
        let c = ContinuationConfig::default();
        Self {
            enabled: c.enabled,
            initial_step: c.initial_step,
            min_step: c.min_step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default)]
pub struct SolverSection {
    pub method: Method,
    pub damping: f64,
    pub picard_tol: f64,
    pub max_picard: usize,
    pub foc_tol: f64,
    pub basis: BasisOrder,
    pub player_basis: PlayerBasis,
    pub continuation: ContinuationSection,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            method: Method::Picard,
            damping: 0.5,
            picard_tol: 1e-6,
            max_picard: 200,
            foc_tol: 1e-6,
            basis: BasisOrder::Affine,
            player_basis: PlayerBasis::Exchangeable,
            continuation: ContinuationSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    pub players: Vec<usize>,
    pub seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            players: vec![4, 8, 16, 32],
            seed: 20240611,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default)]
pub struct MonotonicitySection {
    pub trials: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for MonotonicitySection {
    fn default() -> Self {
        let o = CertifyOptions::new(10_000, 0);
        Self {
            trials: o.trials,
            min_atoms: o.min_atoms,
            max_atoms: o.max_atoms,
            min_scale: o.min_scale,
            max_scale: o.max_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            formats: vec!["csv".to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct RawConfig {
    model: Option<ModelSection>,
    #[serde(default)]
    grid: GridSection,
    #[serde(default)]
    monte_carlo: MonteCarloSection,
    #[serde(default)]
    solver: SolverSection,
    #[serde(default)]
    experiment: ExperimentSection,
    #[serde(default)]
    monotonicity: MonotonicitySection,
    #[serde(default)]
    output: OutputSection,
}

/// A validated configuration together with the derived solver inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    pub monte_carlo: MonteCarloSection,
    pub solver: SolverSection,
    pub experiment: ExperimentSection,
    pub monotonicity: MonotonicitySection,
    pub output: OutputSection,
    /// LQ coefficients assembled from `model`.
    pub lq: LqCoefficients,
    pub initial: InitialLaw,
    pub time_grid: TimeGrid,
}

/// Allowed keys per section; `None` marks a leaf.
struct Key(&'static str, Option<&'static [Key]>);

const MODEL_INITIAL: &[Key] = &[Key("kind", None), Key("x0", None), Key("mean", None), Key("cov", None)];
const MODEL: &[Key] = &[
    Key("kind", None),
    Key("state_dim", None),
    Key("control_dim", None),
    Key("noise_dim", None),
    Key("a", None),
    Key("b", None),
    Key("c", None),
    Key("d", None),
    Key("c0", None),
    Key("d0", None),
    Key("q", None),
    Key("qbar", None),
    Key("s", None),
    Key("p", None),
    Key("pbar", None),
    Key("c1", None),
    Key("c2", None),
    Key("q_terminal", None),
    Key("qbar_terminal", None),
    Key("s_terminal", None),
    Key("initial", Some(MODEL_INITIAL)),
];
const CONTINUATION: &[Key] = &[Key("enabled", None), Key("initial_step", None), Key("min_step", None)];
const SCHEMA: &[Key] = &[
    Key("model", Some(MODEL)),
    Key("grid", Some(&[Key("T", None), Key("K", None)])),
    Key(
        "monte_carlo",
        Some(&[Key("worlds", None), Key("particles", None), Key("repetitions", None), Key("m_aux", None)]),
    ),
    Key(
        "solver",
        Some(&[
            Key("method", None),
            Key("damping", None),
            Key("picard_tol", None),
            Key("max_picard", None),
            Key("foc_tol", None),
            Key("basis", None),
            Key("player_basis", None),
            Key("continuation", Some(CONTINUATION)),
        ]),
    ),
    Key("experiment", Some(&[Key("players", None), Key("seed", None)])),
    Key(
        "monotonicity",
        Some(&[
            Key("trials", None),
            Key("min_atoms", None),
            Key("max_atoms", None),
            Key("min_scale", None),
            Key("max_scale", None),
        ]),
    ),
    Key("output", Some(&[Key("dir", None), Key("formats", None)])),
];

fn unknown_keys(table: &toml::Table, prefix: &str, schema: &[Key], errs: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match schema.iter().find(|s| s.0 == k) {
            None => errs.push(format!("unknown key \"{path}\"")),
            Some(Key(_, Some(children))) => {
                if let toml::Value::Table(t) = v {
                    unknown_keys(t, &path, children, errs);
                }
            }
            Some(_) => {}
        }
    }
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigErrors> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigErrors(vec![format!("cannot read {}: {e}", path.display())]))?;
    parse_config_str(&text)
}

/// Same as [`parse_config`] for in-memory text.
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigErrors> {
    let table: toml::Table = toml::from_str(text).map_err(|e| ConfigErrors(vec![e.to_string().trim_end().to_string()]))?;
    let mut errs = Vec::new();
    unknown_keys(&table, "", SCHEMA, &mut errs);
    let parsed = RawConfig::deserialize(table);
    let raw = match parsed {
        Ok(raw) => raw,
        Err(e) => {
            errs.push(e.to_string().trim_end().to_string());
            return Err(ConfigErrors(errs));
        }
    };
    let Some(model) = raw.model.clone() else {
        errs.push("missing [model] section".to_string());
        validate_sections(&raw, &mut errs);
        return Err(ConfigErrors(errs));
    };
    validate_sections(&raw, &mut errs);
    let (lq, initial) = build_model(&model, &mut errs);
    let time_grid = TimeGrid::new(raw.grid.horizon, raw.grid.steps.max(1));
    if !errs.is_empty() {
        return Err(ConfigErrors(errs));
    }
    let time_grid = time_grid.map_err(|e| ConfigErrors(vec![e.to_string()]))?;
    Ok(RunConfig {
        model,
        grid: raw.grid,
        monte_carlo: raw.monte_carlo,
        solver: raw.solver,
        experiment: raw.experiment,
        monotonicity: raw.monotonicity,
        output: raw.output,
        lq,
        initial,
        time_grid,
    })
}

fn positive(errs: &mut Vec<String>, key: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        errs.push(format!("{key} must be a finite number > 0 (got {v})"));
    }
}

fn at_least_one(errs: &mut Vec<String>, key: &str, v: usize) {
    if v == 0 {
        errs.push(format!("{key} must be ≥ 1"));
    }
}

fn validate_sections(raw: &RawConfig, errs: &mut Vec<String>) {
    positive(errs, "grid.T", raw.grid.horizon);
    at_least_one(errs, "grid.K", raw.grid.steps);

    let mc = &raw.monte_carlo;
    at_least_one(errs, "monte_carlo.worlds", mc.worlds);
    at_least_one(errs, "monte_carlo.particles", mc.particles);
    at_least_one(errs, "monte_carlo.m_aux", mc.m_aux);
    if mc.repetitions == 0 || mc.repetitions > MAX_REPETITIONS {
        errs.push(format!("monte_carlo.repetitions must lie in 1..={MAX_REPETITIONS}"));
    }

    let s = &raw.solver;
    if !(s.damping > 0.0 && s.damping <= 1.0) {
        errs.push(format!("solver.damping must lie in (0, 1] (got {})", s.damping));
    }
    positive(errs, "solver.picard_tol", s.picard_tol);
    positive(errs, "solver.foc_tol", s.foc_tol);
    at_least_one(errs, "solver.max_picard", s.max_picard);
    let c = &s.continuation;
    if !(c.initial_step > 0.0 && c.initial_step <= 1.0) {
        errs.push("solver.continuation.initial_step must lie in (0, 1]".to_string());
    }
    if !(c.min_step > 0.0 && c.min_step <= c.initial_step) {
        errs.push("solver.continuation.min_step must lie in (0, initial_step]".to_string());
    }
    if s.method == Method::Continuation && !c.enabled {
        errs.push("solver.method = \"continuation\" needs solver.continuation.enabled = true".to_string());
    }

    let e = &raw.experiment;
    if e.players.is_empty() {
        errs.push("experiment.players must not be empty".to_string());
    }
    for &np in &e.players {
        if np == 0 || np > MAX_PLAYERS {
            errs.push(format!("experiment.players entries must lie in 1..={MAX_PLAYERS} (got {np})"));
        }
    }

    let m = &raw.monotonicity;
    at_least_one(errs, "monotonicity.trials", m.trials);
    if m.min_atoms == 0 || m.max_atoms < m.min_atoms {
        errs.push("monotonicity.min_atoms must be ≥ 1 and ≤ monotonicity.max_atoms".to_string());
    }
    if !(m.min_scale > 0.0 && m.max_scale >= m.min_scale && m.max_scale.is_finite()) {
        errs.push("monotonicity.min_scale must be > 0 and ≤ monotonicity.max_scale".to_string());
    }

    if raw.output.formats.is_empty() {
        errs.push("output.formats must not be empty".to_string());
    }
    for f in &raw.output.formats {
        if f != "csv" {
            errs.push(format!("output.formats: unsupported format \"{f}\" (only \"csv\")"));
        }
    }
}

fn build_model(m: &ModelSection, errs: &mut Vec<String>) -> (LqCoefficients, InitialLaw) {
    if m.kind == ModelKind::Custom {
        errs.push("model.kind = \"custom\" has no coefficient evaluators in the command-line driver; use the library".to_string());
    }
    at_least_one(errs, "model.state_dim", m.state_dim);
    at_least_one(errs, "model.control_dim", m.control_dim);
    at_least_one(errs, "model.noise_dim", m.noise_dim);
    let dims = Dims {
        n: m.state_dim.max(1),
        l: m.control_dim.max(1),
        d: m.noise_dim.max(1),
    };
    let Dims { n, l, d } = dims;
    let mut mat = |name: &str, v: &Option<MatrixValue>, shape: (usize, usize), default: f64| match v {
        Some(v) => v.to_matrix(name, shape, errs),
        None if shape.0 == shape.1 => DMatrix::identity(shape.0, shape.1) * default,
        None => DMatrix::zeros(shape.0, shape.1),
    };
    let q = mat("q", &m.q, (n, n), 1.0);
    let qbar = mat("qbar", &m.qbar, (n, n), 0.0);
    let s = mat("s", &m.s, (n, n), 0.0);
    let q_terminal = match &m.q_terminal {
        Some(v) => mat("q_terminal", &Some(v.clone()), (n, n), 0.0),
        None => q.clone(),
    };
    let qbar_terminal = match &m.qbar_terminal {
        Some(v) => mat("qbar_terminal", &Some(v.clone()), (n, n), 0.0),
        None => qbar.clone(),
    };
    let s_terminal = match &m.s_terminal {
        Some(v) => mat("s_terminal", &Some(v.clone()), (n, n), 0.0),
        None => s.clone(),
    };
    let lq = LqCoefficients {
        dims,
        a: Schedule::Constant(mat("a", &m.a, (n, n), 0.0)),
        b: Schedule::Constant(mat("b", &m.b, (n, l), 0.0)),
        c: Schedule::Constant(mat("c", &m.c, (n * d, n), 0.0)),
        d: Schedule::Constant(mat("d", &m.d, (n * d, l), 0.0)),
        c0: Schedule::Constant(mat("c0", &m.c0, (n * d, n), 0.0)),
        d0: Schedule::Constant(mat("d0", &m.d0, (n * d, l), 0.0)),
        q: Schedule::Constant(q),
        qbar: Schedule::Constant(qbar),
        s: Schedule::Constant(s),
        p: Schedule::Constant(mat("p", &m.p, (l, l), 1.0)),
        pbar: Schedule::Constant(mat("pbar", &m.pbar, (l, l), 0.0)),
        c1: m.c1,
        c2: m.c2,
        q_terminal,
        qbar_terminal,
        s_terminal,
    };
    if !m.c1.is_finite() || !m.c2.is_finite() {
        errs.push("model.c1 and model.c2 must be finite".to_string());
    }
    let initial = match &m.initial {
        None => InitialLaw::Gaussian {
            mean: vec![0.0; n],
            cov: DMatrix::<f64>::identity(n, n).as_slice().to_vec(),
        },
        Some(InitialSection::Point { x0 }) => InitialLaw::Point(x0.clone()),
        Some(InitialSection::Gaussian { mean, cov }) => {
            let cov = cov.to_matrix("initial.cov", (n, n), errs);
            InitialLaw::Gaussian {
                mean: mean.clone(),
                cov: cov.transpose().as_slice().to_vec(),
            }
        }
    };
    if initial.dim() != n {
        errs.push(format!("model.initial has dimension {}, expected {n}", initial.dim()));
    } else if let Err(e) = initial.validate() {
        errs.push(format!("model.initial: {e}"));
    }
    (lq, initial)
}

impl RunConfig {
    pub fn mkv_config(&self) -> MkvConfig {
        let s = &self.solver;
        let mut cfg = MkvConfig::new(self.time_grid, self.monte_carlo.worlds, self.monte_carlo.particles);
        cfg.damping = s.damping;
        cfg.picard_tol = s.picard_tol;
        cfg.max_picard = s.max_picard;
        cfg.basis = match s.basis {
            BasisOrder::Affine => Basis::Affine,
            BasisOrder::Quadratic => Basis::Quadratic,
        };
        cfg.continuation = ContinuationConfig {
            enabled: s.continuation.enabled,
            initial_step: s.continuation.initial_step,
            min_step: s.continuation.min_step,
        };
        cfg
    }

    pub fn ne_config(&self, players: usize) -> NeConfig {
        let s = &self.solver;
        let mut cfg = NeConfig::new(self.time_grid, players, self.monte_carlo.repetitions);
        cfg.damping = s.damping;
        cfg.picard_tol = s.picard_tol;
        cfg.max_picard = s.max_picard;
        cfg.foc_tol = s.foc_tol;
        cfg.basis = match s.player_basis {
            PlayerBasis::Exchangeable => NeBasis::Exchangeable,
            PlayerBasis::Full => NeBasis::Full,
        };
        cfg
    }

    /// Settings of the `convergence` experiment.
    pub fn convergence_config(&self, seed: u64) -> ConvergenceConfig {
        ConvergenceConfig {
            mkv: self.mkv_config(),
            ne: self.ne_config(1),
            players: self.experiment.players.clone(),
            m_aux: self.monte_carlo.m_aux,
            mu0: self.initial.clone(),
            seed,
        }
    }

    pub fn certify_options(&self, seed: u64) -> CertifyOptions {
        let m = &self.monotonicity;
        CertifyOptions {
            trials: m.trials,
            min_atoms: m.min_atoms,
            max_atoms: m.max_atoms,
            min_scale: m.min_scale,
            max_scale: m.max_scale,
            seed,
        }
    }

    /// Mean of the initial law, the starting point of the Riccati value.
    pub fn initial_mean(&self) -> &[f64] {
        match &self.initial {
            InitialLaw::Point(x) => x,
            InitialLaw::Gaussian { mean, .. } => mean,
        }
    }
}
