//! Acceptance run: one `PASS` or `FAIL` line per criterion, nonzero exit if
//! any criterion fails. The convergence criterion solves the full reference
//! experiment and takes several minutes.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mfg_lab::harness::{build_coupled_copies, couple_repetitions, ks_two_sample, riccati_oracle, run_convergence, CouplingPlan};
use mfg_lab::mkv::{
    continuation_solve, foc_residual_max, h2_norm_diff, martingale_residuals, picard_solve, picard_solve_from, InitialGuess,
    MfeSolution, MkvConfig,
};
use mfg_lab::model::{
    check_derivatives, lq_coefficients, validate_lq, Dims, LqCoefficients, LqModel, Node, Schedule,
};
use mfg_lab::monotonicity::{certify, CertifyOptions};
use mfg_lab::nplayer::{ne_picard_solve, ne_residual};
use mfg_lab::stochastic::{sample_world, sample_worlds, NoiseBundle};
use mfg_lab_cli::{parse_config, RunConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn config(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    parse_config(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Reference game solved once on a moderate population; shared by the
/// uniqueness, coupling and hygiene checks.
struct Shared {
    cfg: RunConfig,
    model: LqModel,
    mkv: MkvConfig,
    bundles: Vec<NoiseBundle>,
    sol: MfeSolution,
    ne_foc: Vec<(String, f64)>,
}

fn shared() -> Result<Shared, String> {
    let cfg = config("reference.toml");
    let model = lq_coefficients(&cfg.lq, &cfg.time_grid).map_err(err)?;
    let mut mkv = cfg.mkv_config();
    mkv.worlds = 32;
    mkv.particles = 64;
    let bundles = sample_worlds(cfg.time_grid, mkv.worlds, mkv.particles, 1, &cfg.initial, cfg.experiment.seed, 0)
        .map_err(err)?;
    let sol = picard_solve(&model, &mkv, &bundles).map_err(err)?;
    Ok(Shared {
        cfg,
        model,
        mkv,
        bundles,
        sol,
        ne_foc: Vec::new(),
    })
}

fn convergence_rate(s: &mut Shared) -> Outcome {
    let cfg = &s.cfg;
    let report = run_convergence(&s.model, &cfg.convergence_config(cfg.experiment.seed)).map_err(err)?;
    for (r, foc) in report.reports.iter().zip(&report.ne_foc_residual) {
        s.ne_foc.push((format!("convergence N={}", r.players), *foc));
    }
    let (st, co) = (&report.state_fit, &report.control_fit);
    let detail = format!(
        "state slope {:.3} r2 {:.3}, control slope {:.3} r2 {:.3}",
        st.slope, st.r2, co.slope, co.r2
    );
    let ok = [st, co].iter().all(|f| (-1.5..=-0.5).contains(&f.slope) && f.r2 >= 0.8);
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

fn riccati_equivalence() -> Outcome {
    let start = Instant::now();
    let cfg = config("deterministic.toml");
    let model = lq_coefficients(&cfg.lq, &cfg.time_grid).map_err(err)?;
    let mkv = cfg.mkv_config();
    let bundles = sample_worlds(cfg.time_grid, mkv.worlds, mkv.particles, 1, &cfg.initial, cfg.experiment.seed, 0)
        .map_err(err)?;
    let sol = picard_solve(&model, &mkv, &bundles).map_err(err)?;
    let oracle = riccati_oracle(&cfg.lq, &cfg.time_grid).map_err(err)?;
    let x0 = cfg.initial_mean();
    let (y_ref, a_ref) = (oracle.adjoint(0, x0)[0], oracle.control(0, x0)[0]);
    let (y, a) = (sol.path.theta.y(0, 0, 0)[0], sol.path.alpha(0, 0, 0)[0]);
    let (ey, ea) = ((y - y_ref).abs() / y_ref.abs(), (a - a_ref).abs() / a_ref.abs());
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("Y0 rel err {ey:.2e}, control rel err {ea:.2e}, {secs:.1}s");
    ensure(ey <= 1e-3 && ea <= 1e-3 && secs <= 60.0, || detail.clone())?;
    Ok(detail)
}

fn uniqueness(s: &Shared) -> Outcome {
    let tol = s.mkv.picard_tol;
    let random = picard_solve_from(&s.model, &s.mkv, &s.bundles, &InitialGuess::Random(99)).map_err(err)?;
    let d_guess = h2_norm_diff(&s.sol, &random).map_err(err)?;
    let cont = continuation_solve(&s.model, &s.mkv, &s.bundles).map_err(err)?;
    let d_cont = h2_norm_diff(&s.sol, &cont).map_err(err)?;
    let detail = format!("zero vs random {d_guess:.2e}, continuation vs picard {d_cont:.2e}, bound {:.0e}", 10.0 * tol);
    ensure(d_guess <= 10.0 * tol && d_cont <= 10.0 * tol, || detail.clone())?;
    Ok(detail)
}

fn monotonicity() -> Outcome {
    let start = Instant::now();
    let cfg = config("reference.toml");
    let validation = validate_lq(&cfg.lq, &cfg.time_grid);
    ensure(validation.passed && validation.lambda == 2.0, || format!("validate_lq {validation:?}"))?;
    let lambda = validation.lambda;
    let model = lq_coefficients(&cfg.lq, &cfg.time_grid).map_err(err)?;
    let report = certify(&model, &cfg.time_grid, &CertifyOptions::new(10_000, cfg.experiment.seed)).map_err(err)?;
    ensure(
        report.passed() && report.min_drift_margin >= lambda - 1e-9 && report.min_terminal_margin >= lambda - 1e-9,
        || format!("drift margin {}, terminal margin {}", report.min_drift_margin, report.min_terminal_margin),
    )?;
    let broken = config("broken_q.toml");
    let bad = LqModel::new_unchecked(&broken.lq).map_err(err)?;
    let bad_report = certify(&bad, &broken.time_grid, &CertifyOptions::new(10_000, cfg.experiment.seed)).map_err(err)?;
    let witness = bad_report.witness.ok_or("broken config produced no witness")?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "drift margin {:.4}, terminal margin {:.4}, witness gap {:.3e} ({:?}), {secs:.1}s",
        report.min_drift_margin, report.min_terminal_margin, witness.gap, witness.kind
    );
    ensure(secs <= 60.0, || detail.clone())?;
    Ok(detail)
}

fn coupling(s: &mut Shared) -> Outcome {
    let grid = s.cfg.time_grid;
    let (seed, reps, m_aux, players) = (s.cfg.experiment.seed, 16, 512, 4);
    let plan = CouplingPlan {
        grid,
        mu0: s.cfg.initial.clone(),
        seed,
        repetitions: reps,
        m_aux,
        players,
        diagnostics_for: vec![players],
    };
    let copies = couple_repetitions(&s.model, &s.sol.field, &plan).map_err(err)?;
    let games = sample_worlds(grid, reps, players, 1, &s.cfg.initial, seed, 0).map_err(err)?;
    for (r, game) in games.iter().enumerate() {
        let aux = sample_world(grid, m_aux, 1, &s.cfg.initial, seed, r as u64).map_err(err)?;
        ensure(aux.common_path() == game.common_path(), || format!("common noise differs in repetition {r}"))?;
        for i in 0..players {
            ensure(
                aux.idio_path(i) == game.idio_path(i) && aux.initial(i) == game.initial(i),
                || format!("player {i} noise differs in repetition {r}"),
            )?;
        }
        let direct = build_coupled_copies(&s.model, &s.sol.field, &aux, players).map_err(err)?;
        for k in 0..=grid.steps() {
            for i in 0..players {
                ensure(direct.theta.x(k, 0, i) == copies.path.theta.x(k, r, i), || {
                    format!("copy {i} of repetition {r} differs at step {k}")
                })?;
            }
        }
    }

    let ks_plan = CouplingPlan {
        repetitions: 256,
        m_aux: 256,
        players: 2,
        diagnostics_for: vec![2],
        ..plan
    };
    let pair = couple_repetitions(&s.model, &s.sol.field, &ks_plan).map_err(err)?;
    let k_end = grid.steps();
    let first: Vec<f64> = (0..256).map(|r| pair.path.theta.x(k_end, r, 0)[0]).collect();
    let second: Vec<f64> = (0..256).map(|r| pair.path.theta.x(k_end, r, 1)[0]).collect();
    let ks = ks_two_sample(&first, &second).map_err(err)?;
    ensure(ks.passed, || format!("KS {ks:?}"))?;

    let order = [1, 2, 0, 3];
    let relabelled: Vec<NoiseBundle> = games.iter().map(|b| b.permute_paths(&order)).collect::<Result<_, _>>().map_err(err)?;
    let ne_cfg = s.cfg.ne_config(players);
    let mut ne_cfg = ne_cfg;
    ne_cfg.repetitions = reps;
    let a = ne_picard_solve(&s.model, &ne_cfg, &games).map_err(err)?;
    let p = ne_picard_solve(&s.model, &ne_cfg, &relabelled).map_err(err)?;
    s.ne_foc.push(("permutation base".into(), ne_residual(&a, &s.model).map_err(err)?));
    s.ne_foc.push(("permutation relabelled".into(), ne_residual(&p, &s.model).map_err(err)?));
    let (ta, tp) = (&a.tensor.path.theta, &p.tensor.path.theta);
    let mut worst: f64 = 0.0;
    for k in 0..=k_end {
        for r in 0..reps {
            for (i, &src) in order.iter().enumerate() {
                worst = worst
                    .max((tp.x(k, r, i)[0] - ta.x(k, r, src)[0]).abs())
                    .max((tp.y(k, r, i)[0] - ta.y(k, r, src)[0]).abs())
                    .max((tp.z(k, r, i)[0] - ta.z(k, r, src)[0]).abs());
                if k < k_end {
                    worst = worst.max((p.tensor.path.alpha(k, r, i)[0] - a.tensor.path.alpha(k, r, src)[0]).abs());
                }
            }
        }
    }
    let detail = format!("noise bit-exact, KS {:.4} < {:.4}, permutation gap {worst:.1e}", ks.statistic, ks.critical);
    ensure(worst <= 1e-12, || detail.clone())?;
    Ok(detail)
}

fn foc_residuals(s: &Shared) -> Outcome {
    let worst_ne = s.ne_foc.iter().map(|(_, r)| *r).fold(0.0, f64::max);
    for (what, r) in &s.ne_foc {
        ensure(*r <= 1e-6, || format!("{what}: N-player residual {r:e}"))?;
    }
    let mf = foc_residual_max(&s.model, &s.sol.path).map_err(err)?;
    let detail = format!("{} N-player solves, worst {worst_ne:.1e}; mean-field {mf:.1e}", s.ne_foc.len());
    ensure(!s.ne_foc.is_empty() && mf <= 1e-10, || detail.clone())?;
    Ok(detail)
}

fn random_model(seed: u64) -> Result<LqModel, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let spd = |m: DMatrix<f64>| &m * m.transpose() + DMatrix::identity(m.nrows(), m.nrows()) * 0.5;
    let lq = LqCoefficients {
        dims: Dims { n: 2, l: 2, d: 2 },
        a: Schedule::Constant(mat(2, 2)),
        b: Schedule::Constant(mat(2, 2)),
        c: Schedule::Constant(mat(4, 2)),
        d: Schedule::Constant(mat(4, 2)),
        c0: Schedule::Constant(mat(4, 2)),
        d0: Schedule::Constant(mat(4, 2)),
        q: Schedule::Constant(spd(mat(2, 2))),
        qbar: Schedule::Constant(spd(mat(2, 2))),
        s: Schedule::Constant(mat(2, 2)),
        p: Schedule::Constant(spd(mat(2, 2))),
        pbar: Schedule::Constant(spd(mat(2, 2))),
        c1: 0.8,
        c2: 0.6,
        q_terminal: spd(mat(2, 2)),
        qbar_terminal: spd(mat(2, 2)),
        s_terminal: mat(2, 2),
    };
    LqModel::new_unchecked(&lq).map_err(err)
}

fn run_cli(args: &[&str], cfg: &Path, out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_mfg-lab"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(err)?;
    ensure(status.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&status.stderr))
    })
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>, String> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

fn hygiene(s: &Shared) -> Outcome {
    let mut entries = 0;
    let mut worst: f64 = 0.0;
    let reference = check_derivatives(&s.model, Node::new(0, 0.0), 100, 1);
    for (name, report) in [("reference", reference), ("random 2-D", check_derivatives(&random_model(4)?, Node::new(5, 0.05), 100, 2))] {
        ensure(report.passed(), || format!("{name} model: {:?}", &report.failures[..report.failures.len().min(5)]))?;
        entries += report.entries;
        worst = worst.max(report.worst);
    }

    let bound = 5.0 / (s.mkv.particles as f64).sqrt();
    let mart = martingale_residuals(&s.sol.path, &s.bundles).map_err(err)?;
    let mart_max = mart.iter().copied().fold(0.0, f64::max);
    ensure(mart_max <= bound, || format!("martingale residual {mart_max} above {bound}"))?;

    let smoke = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut compared = 0;
    for cmd in ["solve-mfg", "solve-nplayer"] {
        let dirs: Vec<PathBuf> = ["1", "3", "0"].iter().map(|t| tmp.path().join(format!("{cmd}-{t}"))).collect();
        for (dir, threads) in dirs.iter().zip(["1", "3", "0"]) {
            run_cli(&[cmd, "--seed", "5", "--threads", threads], &smoke, dir)?;
        }
        let base = csv_files(&dirs[0])?;
        ensure(!base.is_empty(), || format!("{cmd} wrote no csv"))?;
        for other in &dirs[1..] {
            for file in &base {
                let name = file.file_name().unwrap();
                let (x, y) = (std::fs::read(file).map_err(err)?, std::fs::read(other.join(name)).map_err(err)?);
                ensure(x == y, || format!("{cmd}: {} differs across thread counts", name.to_string_lossy()))?;
                compared += 1;
            }
        }
    }
    Ok(format!(
        "{entries} derivative entries, worst {worst:.1e}; martingale {mart_max:.3} <= {bound:.3}; {compared} csv pairs identical"
    ))
}

fn report(id: usize, name: &str, outcome: Outcome, secs: f64) -> bool {
    match outcome {
        Ok(detail) => {
            println!("PASS criterion {id}: {name}: {detail} [{secs:.1}s]");
            true
        }
        Err(why) => {
            println!("FAIL criterion {id}: {name}: {why} [{secs:.1}s]");
            false
        }
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn main() {
    let mut all = true;
    let (shared, _) = timed(shared);
    let mut shared = match shared {
        Ok(s) => Some(s),
        Err(e) => {
            println!("shared reference solve failed: {e}");
            None
        }
    };
    let missing = || Err::<String, _>("reference solve unavailable".to_string());

    let (o, t) = timed(|| shared.as_mut().map_or_else(missing, convergence_rate));
    all &= report(1, "convergence rate", o, t);
    let (o, t) = timed(riccati_equivalence);
    all &= report(2, "riccati oracle equivalence", o, t);
    let (o, t) = timed(|| shared.as_ref().map_or_else(missing, uniqueness));
    all &= report(3, "uniqueness and contraction", o, t);
    let (o, t) = timed(monotonicity);
    all &= report(4, "monotonicity certificate", o, t);
    let (o, t) = timed(|| shared.as_mut().map_or_else(missing, coupling));
    let coupling_outcome = (o, t);
    let (o, t) = timed(|| shared.as_ref().map_or_else(missing, foc_residuals));
    all &= report(5, "first-order condition", o, t);
    all &= report(6, "coupling", coupling_outcome.0, coupling_outcome.1);
    let (o, t) = timed(|| shared.as_ref().map_or_else(missing, hygiene));
    all &= report(7, "numerical hygiene", o, t);

    if !all {
        std::process::exit(1);
    }
}
