//! Subcommand execution and artifact writing.
//!
//! Every artifact starts with `#` comment lines recording the subcommand,
//! the seed and the SHA-256 of the configuration text. CSV bodies have a
//! fixed column order and use `.` as decimal separator.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use mfg_lab::harness::{riccati_oracle, run_convergence, RateFit};
use mfg_lab::mkv::{continuation_solve, foc_residual_max, picard_solve, terminal_residual, MfeSolution};
use mfg_lab::hamiltonian::ThetaLayout;
use mfg_lab::model::{lq_coefficients, validate_lq, CoefficientSet, Dims, LqModel};
use mfg_lab::monotonicity::{certify, GapKind, Witness};
use mfg_lab::nplayer::ne_picard_solve;
use mfg_lab::stochastic::sample_worlds;
use mfg_lab::Error;

use crate::config::{parse_config_str, ConfigErrors, Method, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    CheckMonotonicity,
    SolveMfg,
    SolveNplayer,
    Convergence,
    OracleRiccati,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::CheckMonotonicity => "check-monotonicity",
            Subcommand::SolveMfg => "solve-mfg",
            Subcommand::SolveNplayer => "solve-nplayer",
            Subcommand::Convergence => "convergence",
            Subcommand::OracleRiccati => "oracle-riccati",
        }
    }
}

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum RunError {
    /// Unreadable or invalid configuration: exit 1.
    Config(String),
    /// A solver failed or an artifact could not be written: exit 2.
    Solver(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Solver(_) => 2,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "configuration error:\n{m}"),
            RunError::Solver(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ConfigErrors> for RunError {
    fn from(e: ConfigErrors) -> Self {
        RunError::Config(e.to_string())
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Unsupported(_) => RunError::Config(e.to_string()),
            e => RunError::Solver(e.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Solver(format!("i/o: {e}"))
    }
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        RunError::Solver(format!("csv: {e}"))
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: usize,
}

/// What a finished run produced. `exit_code` is 2 when the run completed
/// but found a violation (a monotonicity witness).
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: &'a str,
    threads: usize,
    wall_time_seconds: f64,
    exit_code: i32,
    artifacts: Vec<String>,
    results: BTreeMap<String, String>,
    config: &'a str,
}

struct Writer {
    dir: PathBuf,
    header: String,
    artifacts: Vec<PathBuf>,
    results: BTreeMap<String, String>,
}

impl Writer {
    fn csv(&mut self, name: &str, extra: &[String], columns: &[&str], rows: &[Vec<String>]) -> Result<(), RunError> {
        let path = self.dir.join(name);
        let mut file = BufWriter::new(File::create(&path)?);
        file.write_all(self.header.as_bytes())?;
        for line in extra {
            writeln!(file, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(file);
        w.write_record(columns)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        self.artifacts.push(path);
        Ok(())
    }

    fn result(&mut self, key: &str, value: impl ToString) {
        self.results.insert(key.to_string(), value.to_string());
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Parses `config_path`, applies the overrides and runs `cmd`.
pub fn run_from_path(cmd: Subcommand, config_path: &Path, ov: &Overrides) -> Result<Outcome, RunError> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| RunError::Config(format!("cannot read {}: {e}", config_path.display())))?;
    run_subcommand(cmd, &text, ov)
}

/// Runs one subcommand on configuration text and writes its artifacts plus
/// `manifest.toml` into the output directory.
pub fn run_subcommand(cmd: Subcommand, config_text: &str, ov: &Overrides) -> Result<Outcome, RunError> {
    let cfg = parse_config_str(config_text)?;
    let seed = ov.seed.unwrap_or(cfg.experiment.seed);
    let dir = ov.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&dir)?;
    let sha = hex::encode(Sha256::digest(config_text.as_bytes()));
    let header = format!("# subcommand: {}\n# seed: {seed}\n# config_sha256: {sha}\n", cmd.name());
    let mut w = Writer {
        dir: dir.clone(),
        header: header.clone(),
        artifacts: Vec::new(),
        results: BTreeMap::new(),
    };
    let start = Instant::now();
    let exit_code = match cmd {
        Subcommand::CheckMonotonicity => check_monotonicity(&cfg, seed, &mut w)?,
        Subcommand::SolveMfg => solve_mfg(&cfg, seed, &mut w)?,
        Subcommand::SolveNplayer => solve_nplayer(&cfg, seed, &mut w)?,
        Subcommand::Convergence => convergence(&cfg, seed, &mut w)?,
        Subcommand::OracleRiccati => oracle_riccati(&cfg, &mut w)?,
    };
    let manifest = Manifest {
        subcommand: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_sha256: &sha,
        threads: if ov.threads == 0 { rayon::current_num_threads() } else { ov.threads },
        wall_time_seconds: start.elapsed().as_secs_f64(),
        exit_code,
        artifacts: w.artifacts.iter().map(|p| p.display().to_string()).collect(),
        results: w.results.clone(),
        config: config_text,
    };
    let body = toml::to_string(&manifest).map_err(|e| RunError::Solver(format!("manifest: {e}")))?;
    let path = dir.join("manifest.toml");
    std::fs::write(&path, format!("{header}{body}"))?;
    w.artifacts.push(path);
    Ok(Outcome {
        exit_code,
        artifacts: w.artifacts,
        out_dir: dir,
    })
}

fn check_monotonicity(cfg: &RunConfig, seed: u64, w: &mut Writer) -> Result<i32, RunError> {
    let validation = validate_lq(&cfg.lq, &cfg.time_grid);
    let model = LqModel::new_unchecked(&cfg.lq)?;
    let report = certify(&model, &cfg.time_grid, &cfg.certify_options(seed))?;
    let passed = validation.passed && report.passed();
    println!("trials: {}", report.trials);
    println!("min_drift_margin: {:e}", report.min_drift_margin);
    println!("min_terminal_margin: {:e}", report.min_terminal_margin);
    println!("estimated_CH: {:e}", report.estimated_ch);
    println!("estimated_CG: {:e}", report.estimated_cg);
    println!("lambda: {:e}", validation.lambda);
    let mut grouped: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for v in &validation.violations {
        grouped.entry(v.condition.as_str()).or_default().push(v.node);
    }
    for (condition, nodes) in &grouped {
        println!("violation: {condition} at {} node(s), first {}", nodes.len(), nodes[0]);
    }
    let columns = [
        "trials",
        "min_drift_margin",
        "min_terminal_margin",
        "estimated_CH",
        "estimated_CG",
        "lambda",
        "structural_violations",
        "passed",
    ];
    let row = vec![
        report.trials.to_string(),
        num(report.min_drift_margin),
        num(report.min_terminal_margin),
        num(report.estimated_ch),
        num(report.estimated_cg),
        num(validation.lambda),
        validation.violations.len().to_string(),
        passed.to_string(),
    ];
    println!("{}", columns.iter().zip(&row).map(|(c, v)| format!("{c}={v}")).collect::<Vec<_>>().join(" "));
    w.csv("monotonicity.csv", &[], &columns, &[row])?;
    w.result("passed", passed);
    w.result("estimated_CH", num(report.estimated_ch));
    w.result("estimated_CG", num(report.estimated_cg));
    if let Some(witness) = &report.witness {
        write_witness(w, witness, model.dims())?;
    }
    Ok(if passed { 0 } else { 2 })
}

fn write_witness(w: &mut Writer, witness: &Witness, dims: Dims) -> Result<(), RunError> {
    // Drift atoms are packed θ = (x, y, z, z⁰), terminal atoms are states.
    let width = match witness.kind {
        GapKind::Drift => ThetaLayout::from(dims).theta_len(),
        GapKind::Terminal => dims.n,
    };
    let atoms = witness.cloud.len() / width;
    let mut columns = vec!["side".to_string(), "atom".to_string()];
    columns.extend((0..width).map(|c| format!("v{c}")));
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut rows = Vec::with_capacity(2 * atoms);
    for (side, data) in [("cloud", &witness.cloud), ("other", &witness.other)] {
        for a in 0..atoms {
            let mut row = vec![side.to_string(), a.to_string()];
            row.extend(data[a * width..(a + 1) * width].iter().map(|&v| num(v)));
            rows.push(row);
        }
    }
    let kind = match witness.kind {
        GapKind::Drift => "drift",
        GapKind::Terminal => "terminal",
    };
    let extra = [
        format!("kind: {kind}"),
        format!("trial: {}", witness.trial),
        format!("node: {} (t = {})", witness.node.k, witness.node.t),
        format!("gap: {:e}", witness.gap),
    ];
    w.csv("witness.csv", &extra, &cols, &rows)
}

fn solve_mfg(cfg: &RunConfig, seed: u64, w: &mut Writer) -> Result<i32, RunError> {
    let model = lq_coefficients(&cfg.lq, &cfg.time_grid)?;
    let mkv = cfg.mkv_config();
    let d = cfg.lq.dims.d;
    let bundles = sample_worlds(cfg.time_grid, mkv.worlds, mkv.particles, d, &cfg.initial, seed, 0)?;
    let sol = match cfg.solver.method {
        Method::Picard => picard_solve(&model, &mkv, &bundles)?,
        Method::Continuation => continuation_solve(&model, &mkv, &bundles)?,
    };
    let rows: Vec<Vec<String>> = sol
        .residual_history
        .iter()
        .enumerate()
        .map(|(i, r)| vec![(i + 1).to_string(), num(*r)])
        .collect();
    w.csv("mfg_residuals.csv", &[], &["iteration", "residual"], &rows)?;
    w.csv(
        "mfg_summary.csv",
        &["first state and control coordinate, pooled over worlds and particles".to_string()],
        &["step", "t", "mean_X", "var_X", "mean_Y", "mean_alpha", "var_alpha"],
        &moment_rows(&sol),
    )?;
    w.result("iterations", sol.residual_history.len());
    w.result("foc_residual_max", num(foc_residual_max(&model, &sol.path)?));
    w.result("terminal_residual", num(terminal_residual(&model, &sol.path)?));
    Ok(0)
}

fn mean_var(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut count = 0.0;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for v in values {
        count += 1.0;
        let delta = v - mean;
        mean += delta / count;
        m2 += delta * (v - mean);
    }
    (mean, if count > 0.0 { m2 / count } else { 0.0 })
}

fn moment_rows(sol: &MfeSolution) -> Vec<Vec<String>> {
    let theta = &sol.path.theta;
    let grid = theta.grid();
    let (worlds, particles) = (theta.worlds(), theta.particles());
    let nodes = move || (0..worlds).flat_map(move |wi| (0..particles).map(move |p| (wi, p)));
    (0..=grid.steps())
        .map(|k| {
            let (mx, vx) = mean_var(nodes().map(|(wi, p)| theta.x(k, wi, p)[0]));
            let (my, _) = mean_var(nodes().map(|(wi, p)| theta.y(k, wi, p)[0]));
            let (ma, va) = if k < grid.steps() {
                let (m, v) = mean_var(nodes().map(|(wi, p)| sol.path.alpha(k, wi, p)[0]));
                (num(m), num(v))
            } else {
                (String::new(), String::new())
            };
            vec![k.to_string(), num(grid.time(k)), num(mx), num(vx), num(my), ma, va]
        })
        .collect()
}

fn solve_nplayer(cfg: &RunConfig, seed: u64, w: &mut Writer) -> Result<i32, RunError> {
    let model = lq_coefficients(&cfg.lq, &cfg.time_grid)?;
    let n_max = cfg.experiment.players.iter().copied().max().unwrap_or(1);
    let bundles = sample_worlds(
        cfg.time_grid,
        cfg.monte_carlo.repetitions,
        n_max,
        cfg.lq.dims.d,
        &cfg.initial,
        seed,
        0,
    )?;
    let mut residuals = Vec::new();
    let mut summary = Vec::new();
    for &np in &cfg.experiment.players {
        let sol = ne_picard_solve(&model, &cfg.ne_config(np), &bundles)?;
        for (i, r) in sol.residual_history.iter().enumerate() {
            residuals.push(vec![np.to_string(), (i + 1).to_string(), num(*r)]);
        }
        summary.push(vec![
            np.to_string(),
            sol.residual_history.len().to_string(),
            num(sol.foc_residual_max),
            num(sol.tensor.zeta_energy()),
            num(sol.tensor.offdiag_sup),
        ]);
    }
    w.csv("nplayer_residuals.csv", &[], &["N", "iteration", "residual"], &residuals)?;
    w.csv(
        "nplayer_summary.csv",
        &[],
        &["N", "iterations", "foc_residual_max", "zeta_energy", "offdiag_sup"],
        &summary,
    )?;
    Ok(0)
}

fn fit_row(name: &str, fit: &RateFit) -> Vec<String> {
    vec![name.to_string(), num(fit.slope), num(fit.intercept), num(fit.r2)]
}

fn convergence(cfg: &RunConfig, seed: u64, w: &mut Writer) -> Result<i32, RunError> {
    let model = lq_coefficients(&cfg.lq, &cfg.time_grid)?;
    let report = run_convergence(&model, &cfg.convergence_config(seed))?;
    let rows: Vec<Vec<String>> = report
        .reports
        .iter()
        .map(|r| {
            let d = &r.diagnostics;
            vec![
                r.players.to_string(),
                num(r.state_gap),
                num(r.control_gap),
                num(d.eb),
                num(d.esigma),
                num(d.esigma0),
                num(d.ef),
                num(d.eg),
            ]
        })
        .collect();
    w.csv(
        "rates.csv",
        &[],
        &["N", "state_gap", "control_gap", "EB", "ESigma", "ESigma0", "EF", "EG"],
        &rows,
    )?;
    w.csv(
        "rate_fit.csv",
        &[],
        &["gap", "slope", "intercept", "r2"],
        &[fit_row("state", &report.state_fit), fit_row("control", &report.control_fit)],
    )?;
    let solver_rows: Vec<Vec<String>> = report
        .reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                r.players.to_string(),
                report.ne_iterations[i].to_string(),
                num(report.ne_foc_residual[i]),
                num(report.zeta_energy[i]),
            ]
        })
        .collect();
    w.csv(
        "convergence_solver.csv",
        &[format!("mean-field picard iterations: {}", report.mkv_iterations)],
        &["N", "ne_iterations", "foc_residual_max", "zeta_energy"],
        &solver_rows,
    )?;
    w.result("state_slope", num(report.state_fit.slope));
    w.result("state_r2", num(report.state_fit.r2));
    w.result("control_slope", num(report.control_fit.slope));
    w.result("control_r2", num(report.control_fit.r2));
    println!(
        "state gap slope {:.3} (r2 {:.3}), control gap slope {:.3} (r2 {:.3})",
        report.state_fit.slope, report.state_fit.r2, report.control_fit.slope, report.control_fit.r2
    );
    Ok(0)
}

fn oracle_riccati(cfg: &RunConfig, w: &mut Writer) -> Result<i32, RunError> {
    let sol = riccati_oracle(&cfg.lq, &cfg.time_grid)?;
    let grid = &cfg.time_grid;
    let (n, l) = (cfg.lq.dims.n, cfg.lq.dims.l);
    let mut columns = vec!["step".to_string(), "t".to_string()];
    columns.extend((0..n).flat_map(|i| (0..n).map(move |j| format!("K_{i}_{j}"))));
    columns.extend((0..l).flat_map(|i| (0..n).map(move |j| format!("gain_{i}_{j}"))));
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..=grid.steps())
        .map(|k| {
            let mut row = vec![k.to_string(), num(grid.time(k))];
            let km = &sol.k[k];
            row.extend((0..n).flat_map(|i| (0..n).map(move |j| num(km[(i, j)]))));
            match sol.gain.get(k) {
                Some(g) => row.extend((0..l).flat_map(|i| (0..n).map(move |j| num(g[(i, j)])))),
                None => row.extend(std::iter::repeat_n(String::new(), l * n)),
            }
            row
        })
        .collect();
    w.csv("riccati.csv", &[], &cols, &rows)?;
    let value = sol.value(cfg.initial_mean());
    println!("K0 = {}", sol.k[0]);
    println!("value = {value}");
    w.result("value", num(value));
    w.result("K0", format!("{:?}", sol.k[0].as_slice()));
    Ok(0)
}
