//! Experiment drivers behind the command-line tool. Every driver writes its
//! tables into the configured output directory and returns the checks it
//! ran. Output depends only on the configuration (workers excluded), never on
//! scheduling or wall-clock time.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use crate::config::{ExperimentConfig, Format};
use crate::coupling::{
    convergence_report, coupled_run, coupling_height, marginal_equality_test, realization_height,
    shared_grid, validate_n_grid, Check, ConvergenceReport, MarginalReport,
};
use crate::discrete::{
    build_unitary, build_unitary_exact, simulate_chain, transition_maps, UnitaryBlocks,
};
use crate::error::{Error, Result};
use crate::exact::{simulate_ensemble, solve_path, uniform_grid, Ensemble, TrajectoryPath};
use crate::flow::{integrate_master, FlowParams, INTEGRATOR_BUDGET};
use crate::poisson::{
    intensity_bound, sample_realization, PoissonRealization, RngStream, StreamDomain,
};
use crate::qmatrix::{validate_state, ComplexMatrix, DensityState, Mat2, C64, TOL_PROB};
use crate::stats::{par_map_indexed, MatMoments, Moments};

/// Tolerance of the state-validity checks along sampled paths.
pub const STATE_CHECK_TOL: f64 = 1e-6;

/// Random states drawn by the algebraic audits.
const AUDIT_STATES: u64 = 1000;

/// Standard errors allowed in the Monte Carlo checks.
const SIGMAS: f64 = 4.0;

pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn entry_fields(m: &Mat2) -> impl Iterator<Item = String> + '_ {
    m.entries()
        .into_iter()
        .flat_map(|z| [fmt_float(z.re), fmt_float(z.im)])
}

const ENTRY_NAMES: [&str; 8] = [
    "re00", "im00", "re01", "im01", "re10", "im10", "re11", "im11",
];

fn with_prefix(prefix: &str) -> impl Iterator<Item = String> + '_ {
    ENTRY_NAMES.iter().map(move |e| format!("{prefix}{e}"))
}

fn write_csv(
    path: &Path,
    header: Vec<String>,
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let map = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(map)?;
    w.write_record(&header).map_err(map)?;
    for row in rows {
        w.write_record(&row).map_err(map)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Canonical `[model]`/`[run]` text the hash is computed from.
    pub config: String,
}

impl Metadata {
    fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Metadata {
            tool: "jumptraj".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.run.seed,
            config: cfg.experiment_text(),
        }
    }
}

/// Self-describing result of one command.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportBundle<T> {
    pub metadata: Metadata,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub report: T,
}

impl<T> ReportBundle<T> {
    fn new(command: &str, cfg: &ExperimentConfig, checks: Vec<Check>, report: T) -> Self {
        ReportBundle {
            metadata: Metadata::new(command, cfg),
            passed: checks.iter().all(|c| c.pass),
            checks,
            report,
        }
    }
}

/// What a command produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub passed: bool,
    pub checks: Vec<Check>,
    pub files: Vec<PathBuf>,
    /// Human-readable lines for the terminal.
    pub lines: Vec<String>,
}

fn check(name: &str, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        pass,
        detail: detail.into(),
    }
}

fn check_lines(checks: &[Check]) -> Vec<String> {
    checks
        .iter()
        .map(|c| {
            format!(
                "[{}] {}: {}",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )
        })
        .collect()
}

fn is_degenerate(params: &FlowParams) -> bool {
    intensity_bound(params.coupling()) <= TOL_PROB
}

/// Worst state-validity defect over every recorded and post-jump state.
fn worst_state_defect(paths: &[TrajectoryPath]) -> (usize, f64) {
    let mut bad = 0;
    let mut worst: f64 = 0.0;
    for p in paths {
        for s in p.states.iter().chain(&p.jump_states) {
            let r = validate_state(s.matrix(), STATE_CHECK_TOL);
            worst = worst
                .max(r.hermiticity_defect)
                .max(r.trace_defect)
                .max((-r.min_eigenvalue).max(0.0));
            bad += usize::from(!r.pass);
        }
    }
    (bad, worst)
}

fn compensator_check(ens: &Ensemble) -> Check {
    let diffs: Vec<f64> = ens
        .paths
        .iter()
        .map(|p| p.terminal_count as f64 - p.terminal_compensator)
        .collect();
    let m = Moments::from_slice(&diffs);
    let pass = m.mean().abs() <= SIGMAS * m.stderr() + 1e-9;
    check(
        "compensator",
        pass,
        format!("E[N_T] − E[∫Tr J] = {:.4e} ± {:.2e}", m.mean(), m.stderr()),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectorySummary {
    pub n_paths: u64,
    pub grid_points: usize,
    pub degenerate: bool,
    pub terminal_count_mean: f64,
    pub terminal_count_stderr: f64,
    pub terminal_compensator_mean: f64,
    pub terminal_compensator_stderr: f64,
    pub chain_n: u32,
}

/// Exact-path ensemble on `grid_points` uniform intervals, per-path tables,
/// the ensemble mean against the master equation, and the mean of the
/// discrete chain at the largest configured `n`.
pub fn run_trajectories(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = cfg.model_spec()?;
    let params = spec.flow_params();
    let rho0 = cfg.initial_state();
    let horizon = cfg.run.horizon;
    let grid = uniform_grid(horizon, cfg.run.grid_points);
    let degenerate = is_degenerate(&params);
    let n_paths = if degenerate { 1 } else { cfg.run.n_paths };
    let ens = simulate_ensemble(
        &params,
        &rho0,
        horizon,
        &grid,
        n_paths,
        cfg.run.seed,
        cfg.run.workers,
    )?;
    let mean = ens.mean()?;

    let mut checks = Vec::new();
    let (bad, worst) = worst_state_defect(&ens.paths);
    checks.push(check(
        "state validity",
        bad == 0,
        format!("{bad} invalid states, worst defect {worst:.2e} (tolerance {STATE_CHECK_TOL:.0e})"),
    ));
    let master: Vec<Mat2> = grid
        .iter()
        .map(|&t| {
            integrate_master(&rho0, t, &params, INTEGRATOR_BUDGET).map(DensityState::into_matrix)
        })
        .collect::<Result<_>>()?;
    let probe = [grid.len() / 2, grid.len() - 1];
    let mut worst_ratio: f64 = 0.0;
    let mut master_ok = true;
    for &i in &probe {
        let diff = mean.mean[i] - master[i];
        for (d, s) in diff.entries().iter().zip(mean.stderr[i].entries()) {
            for (x, se) in [(d.re, s.re), (d.im, s.im)] {
                let allowed = SIGMAS * se + INTEGRATOR_BUDGET;
                master_ok &= x.abs() <= allowed;
                worst_ratio = worst_ratio.max(x.abs() / allowed);
            }
        }
    }
    checks.push(check(
        "master equation",
        master_ok,
        format!(
            "ensemble mean at t = {} and t = {} within {SIGMAS}·stderr + {INTEGRATOR_BUDGET:.0e} (worst ratio {worst_ratio:.3})",
            grid[probe[0]],
            grid[probe[1]]
        ),
    ));
    checks.push(compensator_check(&ens));

    let chain_n = cfg.run.n_grid.iter().copied().max().unwrap_or(1);
    let chain_paths = par_map_indexed(n_paths, cfg.run.workers, |i| {
        let mut rng = RngStream::for_path(cfg.run.seed, StreamDomain::DirectChain, i).rng();
        simulate_chain(&spec, chain_n, horizon, &rho0, &mut rng, cfg.run.blocks).map(|h| h.states)
    })?;
    let steps = chain_paths.first().map_or(0, Vec::len);
    let mut chain_mean = vec![MatMoments::default(); steps];
    for states in &chain_paths {
        for (acc, s) in chain_mean.iter_mut().zip(states) {
            acc.push(s.matrix());
        }
    }

    let dir = &cfg.output.directory;
    create_dir(dir)?;
    let mut files = Vec::new();
    if cfg.output.wants(Format::Csv) {
        let paths_dir = dir.join("paths");
        create_dir(&paths_dir)?;
        for (i, p) in ens.paths.iter().enumerate() {
            let file = paths_dir.join(format!("path_{i:05}.csv"));
            let header = std::iter::once("t".to_string())
                .chain(with_prefix(""))
                .chain(["N".to_string()])
                .collect();
            let rows = p
                .grid
                .iter()
                .zip(&p.states)
                .zip(&p.counting)
                .map(|((t, s), n)| {
                    std::iter::once(fmt_float(*t))
                        .chain(entry_fields(s.matrix()))
                        .chain([n.to_string()])
                        .collect()
                });
            write_csv(&file, header, rows)?;
            files.push(file);
        }
        let file = dir.join("jumps.csv");
        let rows = ens.paths.iter().enumerate().flat_map(|(i, p)| {
            p.jump_times
                .iter()
                .enumerate()
                .map(move |(j, t)| vec![i.to_string(), j.to_string(), fmt_float(*t)])
        });
        write_csv(
            &file,
            vec!["path".into(), "jump".into(), "time".into()],
            rows,
        )?;
        files.push(file);

        let file = dir.join("mean.csv");
        let header = std::iter::once("t".to_string())
            .chain(with_prefix("mean_"))
            .chain(with_prefix("stderr_"))
            .chain(with_prefix("master_"))
            .chain(
                [
                    "N_mean",
                    "N_stderr",
                    "compensator_mean",
                    "compensator_stderr",
                ]
                .map(String::from),
            )
            .collect();
        let rows = (0..grid.len()).map(|i| {
            std::iter::once(fmt_float(grid[i]))
                .chain(entry_fields(&mean.mean[i]))
                .chain(entry_fields(&mean.stderr[i]))
                .chain(entry_fields(&master[i]))
                .chain([
                    fmt_float(mean.counting[i].mean()),
                    fmt_float(mean.counting[i].stderr()),
                    fmt_float(mean.compensator[i].mean()),
                    fmt_float(mean.compensator[i].stderr()),
                ])
                .collect()
        });
        write_csv(&file, header, rows)?;
        files.push(file);

        let file = dir.join("chain_mean.csv");
        let header = std::iter::once("t".to_string())
            .chain(with_prefix("mean_"))
            .chain(with_prefix("stderr_"))
            .collect();
        let rows = chain_mean.iter().enumerate().map(|(k, acc)| {
            std::iter::once(fmt_float(k as f64 / chain_n as f64))
                .chain(entry_fields(&acc.mean()))
                .chain(entry_fields(&acc.stderr()))
                .collect()
        });
        write_csv(&file, header, rows)?;
        files.push(file);
    }
    let last = grid.len() - 1;
    let summary = TrajectorySummary {
        n_paths,
        grid_points: cfg.run.grid_points,
        degenerate,
        terminal_count_mean: mean.counting[last].mean(),
        terminal_count_stderr: mean.counting[last].stderr(),
        terminal_compensator_mean: mean.compensator[last].mean(),
        terminal_compensator_stderr: mean.compensator[last].stderr(),
        chain_n,
    };
    let bundle = ReportBundle::new("trajectories", cfg, checks, summary);
    if cfg.output.wants(Format::Json) {
        let file = dir.join("trajectories.json");
        write_json(&file, &bundle)?;
        files.push(file);
    }
    let mut lines = Vec::new();
    if degenerate {
        lines.push("degenerate model (C = 0): a single deterministic trajectory".to_string());
    }
    lines.push(format!(
        "{} paths, E[N_T] = {:.4} ± {:.4}",
        n_paths, bundle.report.terminal_count_mean, bundle.report.terminal_count_stderr
    ));
    lines.extend(check_lines(&bundle.checks));
    Ok(Outcome {
        passed: bundle.passed,
        checks: bundle.checks,
        files,
        lines,
    })
}

/// Full sup-error report over `n_grid`; rejects grids that do not span
/// at least two octaves with four values.
pub fn run_convergence(
    cfg: &ExperimentConfig,
) -> Result<(Outcome, ReportBundle<ConvergenceReport>)> {
    validate_n_grid(&cfg.run.n_grid)?;
    let spec = cfg.model_spec()?;
    let rho0 = cfg.initial_state();
    let report = convergence_report(
        &spec,
        &rho0,
        cfg.run.horizon,
        &cfg.run.n_grid,
        cfg.run.n_paths,
        cfg.run.seed,
        cfg.run.blocks,
        cfg.run.workers,
    )?;
    let mut checks = report.checks.clone();
    if report.degenerate {
        checks.push(check(
            "degenerate model",
            true,
            "C = 0: no jumps, error rates are undefined and only consistency checks apply",
        ));
    }
    let bundle = ReportBundle::new("convergence", cfg, checks, report);
    let dir = &cfg.output.directory;
    create_dir(dir)?;
    let mut files = Vec::new();
    let r = &bundle.report;
    if cfg.output.wants(Format::Csv) {
        let file = dir.join("convergence.csv");
        let header = [
            "n",
            "A",
            "A_stderr",
            "S",
            "S_stderr",
            "B",
            "B_stderr",
            "Z",
            "Z_stderr",
            "triangle_violations",
            "digest_mismatches",
        ]
        .map(String::from)
        .to_vec();
        let rows = r.rows.iter().map(|row| {
            vec![
                row.n.to_string(),
                fmt_float(row.a),
                fmt_float(row.a_stderr),
                fmt_float(row.s),
                fmt_float(row.s_stderr),
                fmt_float(row.b),
                fmt_float(row.b_stderr),
                fmt_float(row.z),
                fmt_float(row.z_stderr),
                row.triangle_violations.to_string(),
                row.digest_mismatches.to_string(),
            ]
        });
        write_csv(&file, header, rows)?;
        files.push(file);

        let file = dir.join("curves.csv");
        let n_max = r.rows.last().map_or(1, |row| row.n);
        let header = ["k", "t", "A", "A_stderr", "S", "S_stderr", "B", "B_stderr"]
            .map(String::from)
            .to_vec();
        let c = &r.curves;
        let rows = (0..c.a.values.len()).map(|k| {
            vec![
                k.to_string(),
                fmt_float(k as f64 / n_max as f64),
                fmt_float(c.a.values[k]),
                fmt_float(c.a.stderr[k]),
                fmt_float(c.s.values[k]),
                fmt_float(c.s.stderr[k]),
                fmt_float(c.b.values[k]),
                fmt_float(c.b.stderr[k]),
            ]
        });
        write_csv(&file, header, rows)?;
        files.push(file);
    }
    if cfg.output.wants(Format::Json) {
        let file = dir.join("convergence.json");
        write_json(&file, &bundle)?;
        files.push(file);
    }
    let mut lines = vec![format!(
        "{:>6} {:>12} {:>12} {:>12} {:>12}",
        "n", "A", "S", "B", "Z"
    )];
    for row in &r.rows {
        lines.push(format!(
            "{:>6} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
            row.n, row.a, row.s, row.b, row.z
        ));
    }
    for (name, fit) in [
        ("A", &r.fits.a),
        ("S", &r.fits.s),
        ("B", &r.fits.b),
        ("Z", &r.fits.z),
    ] {
        lines.push(match fit {
            Some(f) => format!(
                "slope {name}: {:.3} (95% CI [{:.3}, {:.3}])",
                f.slope, f.ci_low, f.ci_high
            ),
            None => format!("slope {name}: undefined"),
        });
    }
    lines.extend(check_lines(&bundle.checks));
    let outcome = Outcome {
        passed: bundle.passed,
        checks: bundle.checks.clone(),
        files,
        lines,
    };
    Ok((outcome, bundle))
}

/// Test hooks for the invariant suite.
#[derive(Default)]
pub struct AuditHooks {
    /// Replaces the exact blocks before the trace-preservation audit.
    pub blocks: Option<Box<dyn Fn(UnitaryBlocks) -> UnitaryBlocks + Sync>>,
    /// Drives the path audits with empty realizations.
    pub empty_realizations: bool,
}

fn random_state<R: Rng + ?Sized>(rng: &mut R) -> Mat2 {
    // uniform in the Bloch ball
    loop {
        let v: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        if v.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            return Mat2::new(
                C64::new(0.5 * (1.0 + v[2]), 0.0),
                C64::new(0.5 * v[0], -0.5 * v[1]),
                C64::new(0.5 * v[0], 0.5 * v[1]),
                C64::new(0.5 * (1.0 - v[2]), 0.0),
            );
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub n_paths: u64,
    pub outcome_law: Vec<MarginalReport>,
}

/// The invariant suite: state validity, jump decisions, purity,
/// non-explosion, compensator, trace preservation, void probability and the
/// outcome law of the coupled chain.
pub fn run_audit(cfg: &ExperimentConfig, hooks: &AuditHooks) -> Result<Outcome> {
    let spec = cfg.model_spec()?;
    let params = spec.flow_params();
    let rho0 = cfg.initial_state();
    let horizon = cfg.run.horizon;
    let seed = cfg.run.seed;
    let n_paths = cfg.run.n_paths;
    let grid = uniform_grid(horizon, cfg.run.grid_points);
    let height = realization_height(&spec.c);
    let realization = |i: u64| -> Result<PoissonRealization> {
        if hooks.empty_realizations {
            PoissonRealization::empty(horizon, height)
        } else {
            sample_realization(
                height,
                horizon,
                RngStream::for_path(seed, StreamDomain::Realization, i),
            )
        }
    };
    let pure_start = if rho0.purity_defect() <= 1e-12 {
        rho0
    } else {
        DensityState::excited()
    };
    let starts = [rho0, pure_start];
    let paths: Vec<[TrajectoryPath; 2]> = par_map_indexed(n_paths, cfg.run.workers, |i| {
        let r = realization(i)?;
        Ok([
            solve_path(&starts[0], &r, &params, &grid)?,
            solve_path(&starts[1], &r, &params, &grid)?,
        ])
    })?;
    let from_rho0: Vec<TrajectoryPath> = paths.iter().map(|p| p[0].clone()).collect();
    let mut checks = Vec::new();

    let (bad, worst) = worst_state_defect(&from_rho0);
    checks.push(check(
        "state validity",
        bad == 0,
        format!("{bad} invalid states, worst defect {worst:.2e}"),
    ));

    let inconsistent = from_rho0
        .iter()
        .flat_map(|p| &p.decisions)
        .filter(|d| d.accepted != (d.intensity > TOL_PROB && d.mark <= d.intensity))
        .count();
    let decisions: usize = from_rho0.iter().map(|p| p.decisions.len()).sum();
    checks.push(check(
        "jump decisions",
        inconsistent == 0,
        format!(
            "{inconsistent} of {decisions} point decisions disagree with the pre-jump intensity"
        ),
    ));

    let mut worst_purity: f64 = 0.0;
    for p in &paths {
        for s in p[1].states.iter().chain(&p[1].jump_states) {
            worst_purity = worst_purity.max(s.purity_defect());
        }
    }
    let rank_one = spec.c.singular_values()[0] <= 1e-10 && !is_degenerate(&params);
    let mut worst_after_jump: f64 = 0.0;
    if rank_one {
        for p in &from_rho0 {
            if let Some(&tau) = p.jump_times.first() {
                for (t, s) in p.grid.iter().zip(&p.states) {
                    if *t >= tau {
                        worst_after_jump = worst_after_jump.max(s.purity_defect());
                    }
                }
            }
        }
    }
    checks.push(check(
        "purity",
        worst_purity <= STATE_CHECK_TOL && worst_after_jump <= STATE_CHECK_TOL,
        format!("pure start: worst ‖ρ² − ρ‖ = {worst_purity:.2e}; after first jump (rank-one C): {worst_after_jump:.2e}"),
    ));

    let bound = intensity_bound(&spec.c);
    let over = (0..n_paths as usize)
        .filter(|&i| from_rho0[i].terminal_count as usize > from_rho0[i].decisions.len())
        .count();
    let counts = Moments::from_slice(
        &from_rho0
            .iter()
            .map(|p| p.terminal_count as f64)
            .collect::<Vec<_>>(),
    );
    let limit = bound * horizon + SIGMAS * counts.stderr();
    checks.push(check(
        "non-explosion",
        over == 0 && counts.mean() <= limit + 1e-12,
        format!("E[N_T] = {:.4} ≤ K·T + {SIGMAS}·stderr = {limit:.4}; {over} paths exceed their point count", counts.mean()),
    ));
    checks.push(compensator_check(&Ensemble { paths: from_rho0 }));

    let mut rng = RngStream::for_path(seed, StreamDomain::Audit, 0).rng();
    let states: Vec<Mat2> = (0..AUDIT_STATES).map(|_| random_state(&mut rng)).collect();
    let mut ns = cfg.run.n_grid.clone();
    ns.extend([10, 100, cfg.run.audit_n]);
    ns.sort_unstable();
    ns.dedup();
    let mut worst_trace: f64 = 0.0;
    let mut worst_void: f64 = 0.0;
    for &n in &ns {
        let mut blocks = build_unitary_exact(&spec, n)?;
        if let Some(f) = &hooks.blocks {
            blocks = f(blocks);
        }
        let exact_maps = transition_maps(&blocks, &spec.observable);
        let maps = transition_maps(&build_unitary(&spec, n, cfg.run.blocks)?, &spec.observable);
        for s in &states {
            let (m0, m1) = exact_maps.apply(s);
            worst_trace = worst_trace.max((m0.trace().re + m1.trace().re - 1.0).abs());
            worst_void = worst_void.max(crate::coupling::void_probability_defect(s, n, &maps)?);
        }
    }
    checks.push(check(
        "trace preservation",
        worst_trace <= 1e-10,
        format!(
            "max |Tr M0 + Tr M1 − 1| = {worst_trace:.2e} over {AUDIT_STATES} states and n ∈ {ns:?}"
        ),
    ));
    checks.push(check(
        "void probability",
        worst_void <= 1e-12,
        format!("max |P(detect) − q| = {worst_void:.2e}"),
    ));

    let mut outcome_law = Vec::new();
    if spec.observable.is_diagonal() {
        // two of three seeds must pass
        for attempt in 0..3u64 {
            let rep = marginal_equality_test(
                &spec,
                &rho0,
                cfg.run.audit_n,
                cfg.run.audit_outcomes,
                n_paths,
                seed.wrapping_add(attempt),
                cfg.run.blocks,
                cfg.run.workers,
            )?;
            outcome_law.push(rep);
            let passes = outcome_law.iter().filter(|r| r.passed()).count();
            if passes >= 2 || outcome_law.len() - passes >= 2 {
                break;
            }
        }
        let passes = outcome_law.iter().filter(|r| r.passed()).count();
        let p_values: Vec<String> = outcome_law
            .iter()
            .map(|r| format!("{:.3}", r.chi_square.p_value))
            .collect();
        checks.push(check(
            "outcome law",
            passes >= 2,
            format!(
                "coupled vs direct chain, first {} outcomes at n = {}: p-values [{}]",
                cfg.run.audit_outcomes,
                cfg.run.audit_n,
                p_values.join(", ")
            ),
        ));
    } else {
        checks.push(check(
            "outcome law",
            true,
            "not applicable: the coupled chain needs the diagonal observable",
        ));
    }

    let bundle = ReportBundle::new(
        "audit",
        cfg,
        checks,
        AuditReport {
            n_paths,
            outcome_law,
        },
    );
    let dir = &cfg.output.directory;
    create_dir(dir)?;
    let mut files = Vec::new();
    if cfg.output.wants(Format::Csv) {
        let file = dir.join("audit.csv");
        let rows = bundle
            .checks
            .iter()
            .map(|c| vec![c.name.clone(), c.pass.to_string(), c.detail.clone()]);
        write_csv(
            &file,
            vec!["check".into(), "pass".into(), "detail".into()],
            rows,
        )?;
        files.push(file);
    }
    if cfg.output.wants(Format::Json) {
        let file = dir.join("audit.json");
        write_json(&file, &bundle)?;
        files.push(file);
    }
    Ok(Outcome {
        passed: bundle.passed,
        lines: check_lines(&bundle.checks),
        checks: bundle.checks,
        files,
    })
}

/// Where `replay` takes its realization from.
pub enum ReplaySource {
    /// Path index of the configured seed.
    Path(u64),
    File(PathBuf),
}

/// Runs one realization through all four processes at partition `n` and
/// tabulates them step by step.
pub fn run_replay(
    cfg: &ExperimentConfig,
    source: &ReplaySource,
    n: Option<u32>,
) -> Result<Outcome> {
    let spec = cfg.model_spec()?;
    let params = spec.flow_params();
    let rho0 = cfg.initial_state();
    let n = n.unwrap_or_else(|| cfg.run.n_grid.iter().copied().min().unwrap_or(1));
    if n == 0 {
        return Err(Error::InvalidArgument(
            "partition count n must be ≥ 1".into(),
        ));
    }
    let realization = match source {
        ReplaySource::Path(i) => sample_realization(
            coupling_height(&spec, &[n], cfg.run.blocks)?,
            cfg.run.horizon,
            RngStream::for_path(cfg.run.seed, StreamDomain::Realization, *i),
        )?,
        ReplaySource::File(path) => {
            PoissonRealization::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)?
        }
    };
    let horizon = realization.horizon();
    let grid = shared_grid(&[n], horizon);
    let exact = solve_path(&rho0, &realization, &params, &grid)?;
    let digest = realization.digest();
    let run = coupled_run(
        &spec,
        &rho0,
        &realization,
        &exact,
        digest.clone(),
        n,
        horizon,
        cfg.run.blocks,
    )?;
    let errors = run.errors()?;

    let nf = n as f64;
    let mut rows = Vec::new();
    let mut lines = vec![
        format!(
            "realization {digest}: {} points, height {}, horizon {horizon}",
            realization.len(),
            realization.height()
        ),
        format!(
            "{:>5} {:>8} {:>3} {:>3} {:>3} {:>3} {:>10} {:>10} {:>10}",
            "k", "t", "cd", "im", "eu", "N", "|ρ̃−μ|", "|ρ̃−ρ̄|", "|θ−ρ̄|"
        ),
    ];
    for k in 0..run.coupled_discrete.states.len() {
        let t = k as f64 / nf;
        let tilde = run.coupled_discrete.states[k].matrix();
        let bar = run.intermediate.states[k].matrix();
        let theta = &run.euler.states[k];
        let mu = exact.state_at(t).expect("grid holds every k/n");
        let idx = exact
            .grid
            .iter()
            .position(|g| (g - t).abs() <= 1e-12)
            .expect("grid holds every k/n");
        let (cd, im, eu) = if k == 0 {
            (0, 0, 0)
        } else {
            (
                u8::from(run.coupled_discrete.detections[k - 1]),
                u8::from(run.intermediate.detections[k - 1]),
                run.euler.jumps[k - 1],
            )
        };
        let e_b = (*tilde - *mu.matrix()).frobenius_norm();
        let e_a = (*tilde - *bar).frobenius_norm();
        let e_s = (*theta - *bar).frobenius_norm();
        lines.push(format!(
            "{k:>5} {t:>8.4} {cd:>3} {im:>3} {eu:>3} {:>3} {e_b:>10.3e} {e_a:>10.3e} {e_s:>10.3e}",
            exact.counting[idx]
        ));
        rows.push(vec![
            k.to_string(),
            fmt_float(t),
            cd.to_string(),
            im.to_string(),
            eu.to_string(),
            exact.counting[idx].to_string(),
            fmt_float(tilde.get(1, 1).re),
            fmt_float(bar.get(1, 1).re),
            fmt_float(theta.get(1, 1).re),
            fmt_float(mu.matrix().get(1, 1).re),
            fmt_float(e_b),
            fmt_float(e_a),
            fmt_float(e_s),
        ]);
    }
    lines.push(format!(
        "A = {:.4e}, S = {:.4e}, B = {:.4e}, Z = {:.4e}",
        errors.a.last().unwrap_or(&0.0),
        errors.s.last().unwrap_or(&0.0),
        errors.b.last().unwrap_or(&0.0),
        errors.z
    ));
    let checks = vec![check(
        "shared realization",
        run.digests_match(),
        "exact, Euler, coupled and intermediate processes consumed the same realization",
    )];
    lines.extend(check_lines(&checks));

    let dir = &cfg.output.directory;
    create_dir(dir)?;
    let mut files = Vec::new();
    let file = dir.join("realization.bin");
    fs::write(&file, realization.to_bytes()).map_err(|e| Error::io(&file, e))?;
    files.push(file);
    if cfg.output.wants(Format::Csv) {
        let file = dir.join("replay.csv");
        let header = [
            "k",
            "t",
            "coupled_detect",
            "intermediate_detect",
            "euler_jumps",
            "exact_count",
            "coupled_p11",
            "intermediate_p11",
            "euler_p11",
            "exact_p11",
            "err_coupled_exact",
            "err_coupled_intermediate",
            "err_euler_intermediate",
        ]
        .map(String::from)
        .to_vec();
        write_csv(&file, header, rows)?;
        files.push(file);
    }
    Ok(Outcome {
        passed: checks.iter().all(|c| c.pass),
        checks,
        files,
        lines,
    })
}
