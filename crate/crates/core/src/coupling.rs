//! Random coupling of the discrete chain, an intermediate chain, the Euler
//! scheme and the exact solution on one Poisson realization, and the
//! sup-error statistics built from it.
//!
//! The coupled chain detects at step `k` iff the realization has a point in
//! `[k/n, (k+1)/n) × [0, −n ln p_{k+1}]`; the void probability of that box is
//! `p_{k+1}`, so the chain has exactly the law of the repeated-measurement
//! chain. The intermediate chain uses the box height `Tr J(ρ̄_k)` instead.

use serde::Serialize;

use crate::discrete::{build_unitary, transition_maps, BlockMode, ModelSpec, TransitionMaps};
use crate::error::{Error, Result};
use crate::euler::{build_jump_function, euler_path, sup_error, EulerPath};
use crate::exact::{merge_grids, partition_grid, solve_path, step_count, TrajectoryPath};
use crate::flow::FlowParams;
use crate::poisson::{
    intensity_bound, sample_realization, PoissonRealization, RngStream, StreamDomain,
};
use crate::qmatrix::{ComplexMatrix, DensityState, Mat2, TOL_PROB};
use crate::stats::{
    bootstrap_decrease, chi_square_homogeneity, fit_rate, par_map_indexed, ChiSquareResult,
    Moments, RateFit, RatePoint,
};

/// Admissible window for the fitted exponent of `Z` and `B`.
pub const RATE_WINDOW: (f64, f64) = (-1.35, -0.65);

/// Required bootstrap confidence that `Z(n_max) < Z(n_min)`.
pub const MONOTONE_CONFIDENCE: f64 = 0.99;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Extra realization height above `λ_max(C†C)`.
pub const HEIGHT_MARGIN: f64 = 1.0;

pub fn realization_height(c: &Mat2) -> f64 {
    intensity_bound(c) + HEIGHT_MARGIN
}

/// Largest box the coupled chain can draw at partition `n`, from
/// `q ≤ σ_max(L10)² / (σ_max(L10)² + σ_min(L00)²)`.
pub fn max_coupled_height(spec: &ModelSpec, n: u32, mode: BlockMode) -> Result<f64> {
    let blocks = build_unitary(spec, n, mode)?;
    let a = blocks.l10.singular_values()[1].powi(2);
    let b = blocks.l00.singular_values()[0].powi(2);
    if b.is_nan() || b <= 0.0 {
        return Err(Error::Model(format!(
            "L00 is singular at n = {n}; the no-detection branch can vanish"
        )));
    }
    Ok(-(n as f64) * (b / (a + b)).ln())
}

/// Realization height covering the exact process and every coupled-chain box
/// for the partitions in `ns`. Only the diagonal observable couples to the
/// Poisson measure.
pub fn coupling_height(spec: &ModelSpec, ns: &[u32], mode: BlockMode) -> Result<f64> {
    if !spec.observable.is_diagonal() {
        return Err(Error::config(
            "model.observable",
            "coupling with the Poisson measure requires the diagonal observable",
        ));
    }
    ns.iter().try_fold(realization_height(&spec.c), |h, &n| {
        Ok(h.max(max_coupled_height(spec, n, mode)? * (1.0 + 1e-9)))
    })
}

#[derive(Clone, Copy, Debug)]
pub struct CoupledStep {
    pub state: DensityState,
    pub detected: bool,
    pub height: f64,
}

fn box_has_point(realization: &PoissonRealization, k: usize, n: u32, height: f64) -> Result<bool> {
    if height > realization.height() {
        return Err(Error::Model(format!(
            "box height {height} exceeds the realization height {}",
            realization.height()
        )));
    }
    if height <= 0.0 {
        return Ok(false);
    }
    let nf = n as f64;
    Ok(realization.count_in_rectangle(k as f64 / nf, (k + 1) as f64 / nf, 0.0, height) > 0)
}

/// Box height `−n ln p` of the coupled chain.
pub fn coupled_height(p: f64, n: u32) -> Result<f64> {
    if p.is_nan() || p <= 0.0 {
        return Err(Error::Model(format!(
            "no-detection probability {p} is not positive"
        )));
    }
    Ok((-(n as f64) * p.ln()).max(0.0))
}

pub fn coupled_discrete_step(
    rho: &DensityState,
    realization: &PoissonRealization,
    k: usize,
    n: u32,
    maps: &TransitionMaps,
) -> Result<CoupledStep> {
    let br = maps.branches(rho.matrix())?;
    let height = coupled_height(br.p, n)?;
    let detected = box_has_point(realization, k, n, height)?;
    Ok(CoupledStep {
        state: br.collapse(u8::from(detected))?,
        detected,
        height,
    })
}

pub fn intermediate_step(
    rho: &DensityState,
    realization: &PoissonRealization,
    k: usize,
    n: u32,
    maps: &TransitionMaps,
    params: &FlowParams,
) -> Result<CoupledStep> {
    let height = params.jump_intensity(rho.matrix()).max(0.0);
    let detected = height > TOL_PROB && box_has_point(realization, k, n, height)?;
    let br = maps.branches(rho.matrix())?;
    Ok(CoupledStep {
        state: br.collapse(u8::from(detected))?,
        detected,
        height,
    })
}

/// `P(coupled chain detects | ρ) − q`, evaluated from the void probability
/// of its box.
pub fn void_probability_defect(rho: &Mat2, n: u32, maps: &TransitionMaps) -> Result<f64> {
    let br = maps.branches(rho)?;
    let height = coupled_height(br.p, n)?;
    let detect = -(-height / n as f64).exp_m1();
    Ok((detect - br.q).abs())
}

#[derive(Clone, Debug)]
pub struct ChainRun {
    pub states: Vec<DensityState>,
    pub detections: Vec<bool>,
    pub heights: Vec<f64>,
    pub digest: String,
}

pub fn run_coupled_chain(
    rho0: &DensityState,
    realization: &PoissonRealization,
    n: u32,
    steps: usize,
    maps: &TransitionMaps,
) -> Result<ChainRun> {
    run_chain(rho0, realization, steps, |rho, k| {
        coupled_discrete_step(rho, realization, k, n, maps)
    })
}

pub fn run_intermediate_chain(
    rho0: &DensityState,
    realization: &PoissonRealization,
    n: u32,
    steps: usize,
    maps: &TransitionMaps,
    params: &FlowParams,
) -> Result<ChainRun> {
    run_chain(rho0, realization, steps, |rho, k| {
        intermediate_step(rho, realization, k, n, maps, params)
    })
}

fn run_chain(
    rho0: &DensityState,
    realization: &PoissonRealization,
    steps: usize,
    step: impl Fn(&DensityState, usize) -> Result<CoupledStep>,
) -> Result<ChainRun> {
    let mut run = ChainRun {
        states: Vec::with_capacity(steps + 1),
        detections: Vec::with_capacity(steps),
        heights: Vec::with_capacity(steps),
        digest: realization.digest(),
    };
    let mut rho = *rho0;
    run.states.push(rho);
    for k in 0..steps {
        let s = step(&rho, k)?;
        rho = s.state;
        run.states.push(rho);
        run.detections.push(s.detected);
        run.heights.push(s.height);
    }
    Ok(run)
}

/// The four processes of one path at one `n`.
#[derive(Clone, Debug)]
pub struct CoupledRun<'a> {
    pub n: u32,
    pub horizon: f64,
    pub realization: &'a PoissonRealization,
    pub exact: &'a TrajectoryPath,
    pub euler: EulerPath,
    pub coupled_discrete: ChainRun,
    pub intermediate: ChainRun,
    /// Digest of the realization the exact path was solved on.
    pub exact_digest: String,
}

impl CoupledRun<'_> {
    pub fn digests_match(&self) -> bool {
        let d = self.realization.digest();
        [
            &self.exact_digest,
            &self.euler_digest(),
            &self.coupled_discrete.digest,
            &self.intermediate.digest,
        ]
        .iter()
        .all(|x| **x == d)
    }

    fn euler_digest(&self) -> String {
        self.euler.realization().digest()
    }

    /// Running sups `A_k, S_k, B_k` and the Euler sup error `Z`.
    pub fn errors(&self) -> Result<PathErrors> {
        let steps = self.coupled_discrete.states.len();
        let nf = self.n as f64;
        let mut out = PathErrors {
            a: Vec::with_capacity(steps),
            s: Vec::with_capacity(steps),
            b: Vec::with_capacity(steps),
            z: sup_error(self.exact, &self.euler)?,
        };
        let (mut a, mut s, mut b) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..steps {
            let tilde = self.coupled_discrete.states[k].matrix();
            let bar = self.intermediate.states[k].matrix();
            let theta = &self.euler.states[k];
            let mu = self.exact.state_at(k as f64 / nf).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "exact path is not recorded at k/n = {k}/{}",
                    self.n
                ))
            })?;
            a = a.max((*tilde - *bar).frobenius_norm());
            s = s.max((*theta - *bar).frobenius_norm());
            b = b.max((*tilde - *mu.matrix()).frobenius_norm());
            out.a.push(a);
            out.s.push(s);
            out.b.push(b);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathErrors {
    pub a: Vec<f64>,
    pub s: Vec<f64>,
    pub b: Vec<f64>,
    pub z: f64,
}

impl PathErrors {
    pub fn terminal(&self) -> [f64; 4] {
        let last = |v: &Vec<f64>| *v.last().unwrap_or(&0.0);
        [last(&self.a), last(&self.s), last(&self.b), self.z]
    }
}

/// Builds all four processes at partition `n` on a realization whose exact
/// path has already been solved on a grid containing every `k/n`.
#[allow(clippy::too_many_arguments)]
pub fn coupled_run<'a>(
    spec: &ModelSpec,
    rho0: &DensityState,
    realization: &'a PoissonRealization,
    exact: &'a TrajectoryPath,
    exact_digest: String,
    n: u32,
    horizon: f64,
    mode: BlockMode,
) -> Result<CoupledRun<'a>> {
    let params = spec.flow_params();
    let maps = transition_maps(&build_unitary(spec, n, mode)?, &spec.observable);
    let steps = step_count(n, horizon);
    let jf = build_jump_function(&spec.c);
    Ok(CoupledRun {
        n,
        horizon,
        realization,
        exact,
        euler: euler_path(rho0, realization, n, horizon, &jf, &params)?,
        coupled_discrete: run_coupled_chain(rho0, realization, n, steps, &maps)?,
        intermediate: run_intermediate_chain(rho0, realization, n, steps, &maps, &params)?,
        exact_digest,
    })
}

/// Exact-path grid shared by every `n`: the union of all `k/n` and `T`.
pub fn shared_grid(n_grid: &[u32], horizon: f64) -> Vec<f64> {
    let grids: Vec<Vec<f64>> = n_grid.iter().map(|&n| partition_grid(n, horizon)).collect();
    let tail = [horizon];
    merge_grids(grids.iter().map(Vec::as_slice).chain([&tail[..]]))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorStat {
    pub name: String,
    /// Mean running sup at each `k`.
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_paths: u64,
}

impl ErrorStat {
    pub fn terminal(&self) -> (f64, f64) {
        (
            *self.values.last().unwrap_or(&0.0),
            *self.stderr.last().unwrap_or(&0.0),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorStats {
    pub a: ErrorStat,
    pub s: ErrorStat,
    pub b: ErrorStat,
}

/// Per-`k` Monte Carlo means of the running sups over an ensemble of paths
/// sharing `(spec, n, T)`.
pub fn error_statistics(paths: &[PathErrors]) -> Result<ErrorStats> {
    let len = paths
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?
        .a
        .len();
    if paths.iter().any(|p| p.a.len() != len) {
        return Err(Error::InvalidArgument("paths differ in length".into()));
    }
    let stat = |name: &str, pick: fn(&PathErrors) -> &Vec<f64>| {
        let mut acc = vec![Moments::default(); len];
        for p in paths {
            for (m, &v) in acc.iter_mut().zip(pick(p)) {
                m.push(v);
            }
        }
        ErrorStat {
            name: name.to_string(),
            values: acc.iter().map(Moments::mean).collect(),
            stderr: acc.iter().map(Moments::stderr).collect(),
            n_paths: paths.len() as u64,
        }
    };
    Ok(ErrorStats {
        a: stat("A", |p| &p.a),
        s: stat("S", |p| &p.s),
        b: stat("B", |p| &p.b),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalReport {
    pub n: u32,
    pub outcomes: usize,
    pub n_paths: u64,
    pub coupled_cells: Vec<u64>,
    pub direct_cells: Vec<u64>,
    pub chi_square: ChiSquareResult,
    /// `q_1` from the transition maps at `ρ0`.
    pub first_q: f64,
    pub first_coupled_frequency: f64,
    pub first_direct_frequency: f64,
}

impl MarginalReport {
    /// Homogeneity not rejected at 1% and both first-step frequencies within
    /// four binomial standard errors of `q_1`.
    pub fn passed(&self) -> bool {
        let se = (self.first_q * (1.0 - self.first_q) / self.n_paths as f64).sqrt();
        let close = |f: f64| (f - self.first_q).abs() <= 4.0 * se + 1e-12;
        self.chi_square.p_value > 0.01
            && close(self.first_coupled_frequency)
            && close(self.first_direct_frequency)
    }
}

/// Joint law of the first `m` outcomes: coupled chain on realizations
/// `(seed, Realization, i)` against the direct chain with uniforms from
/// `(seed, DirectChain, i)`.
#[allow(clippy::too_many_arguments)]
pub fn marginal_equality_test(
    spec: &ModelSpec,
    rho0: &DensityState,
    n: u32,
    m: usize,
    n_paths: u64,
    seed: u64,
    mode: BlockMode,
    workers: Option<usize>,
) -> Result<MarginalReport> {
    if !(1..=16).contains(&m) {
        return Err(Error::InvalidArgument(format!(
            "outcome count {m} must be in 1..=16"
        )));
    }
    let maps = transition_maps(&build_unitary(spec, n, mode)?, &spec.observable);
    let horizon = m as f64 / n as f64;
    let height = coupling_height(spec, &[n], mode)?;
    let encode = |bits: &mut dyn Iterator<Item = bool>| {
        bits.enumerate()
            .fold(0usize, |acc, (i, b)| acc | (usize::from(b) << i))
    };
    let coupled = par_map_indexed(n_paths, workers, |i| {
        let r = sample_realization(
            height,
            horizon,
            RngStream::for_path(seed, StreamDomain::Realization, i),
        )?;
        let run = run_coupled_chain(rho0, &r, n, m, &maps)?;
        Ok(encode(&mut run.detections.iter().copied()))
    })?;
    let direct = par_map_indexed(n_paths, workers, |i| {
        let mut rng = RngStream::for_path(seed, StreamDomain::DirectChain, i).rng();
        let h = crate::discrete::simulate_steps(&maps, m, rho0, &mut rng)?;
        Ok(encode(&mut h.outcomes.iter().map(|&o| o == 1)))
    })?;
    let tally = |cells: &[usize]| {
        let mut out = vec![0u64; 1 << m];
        cells.iter().for_each(|&c| out[c] += 1);
        out
    };
    let (coupled_cells, direct_cells) = (tally(&coupled), tally(&direct));
    let first =
        |cells: &[usize]| cells.iter().filter(|&&c| c & 1 == 1).count() as f64 / n_paths as f64;
    Ok(MarginalReport {
        n,
        outcomes: m,
        n_paths,
        chi_square: chi_square_homogeneity(&coupled_cells, &direct_cells)?,
        first_q: maps.branches(rho0.matrix())?.q,
        first_coupled_frequency: first(&coupled),
        first_direct_frequency: first(&direct),
        coupled_cells,
        direct_cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: u32,
    pub a: f64,
    pub a_stderr: f64,
    pub s: f64,
    pub s_stderr: f64,
    pub b: f64,
    pub b_stderr: f64,
    pub z: f64,
    pub z_stderr: f64,
    /// Paths where `B > A + S + Z` beyond rounding.
    pub triangle_violations: u64,
    /// Paths whose four processes did not consume the same realization.
    pub digest_mismatches: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFits {
    pub a: Option<RateFit>,
    pub s: Option<RateFit>,
    pub b: Option<RateFit>,
    pub z: Option<RateFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub horizon: f64,
    pub n_paths: u64,
    pub seed: u64,
    pub mode: BlockMode,
    pub degenerate: bool,
    pub rows: Vec<ConvergenceRow>,
    pub fits: RateFits,
    /// Bootstrap confidence that `Z` decreases from the smallest to the
    /// largest `n`.
    pub z_monotone_confidence: f64,
    pub checks: Vec<Check>,
    /// Per-`k` curves for the largest `n`.
    pub curves: ErrorStats,
}

impl ConvergenceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// `n_grid` must hold at least four values with `max/min ≥ 4`.
pub fn validate_n_grid(n_grid: &[u32]) -> Result<()> {
    let lo = n_grid.iter().copied().min().unwrap_or(0);
    let hi = n_grid.iter().copied().max().unwrap_or(0);
    let mut distinct = n_grid.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 || lo == 0 || hi < 4 * lo {
        return Err(Error::config(
            "run.n_grid",
            "need ≥ 4 octave-spanning n values",
        ));
    }
    Ok(())
}

struct PathResult {
    per_n: Vec<PathErrors>,
    triangle: Vec<bool>,
    digests_ok: Vec<bool>,
}

#[allow(clippy::too_many_arguments)]
pub fn convergence_report(
    spec: &ModelSpec,
    rho0: &DensityState,
    horizon: f64,
    n_grid: &[u32],
    n_paths: u64,
    seed: u64,
    mode: BlockMode,
    workers: Option<usize>,
) -> Result<ConvergenceReport> {
    validate_n_grid(n_grid)?;
    if n_paths < 2 {
        return Err(Error::InvalidArgument("need at least 2 paths".into()));
    }
    let mut ns = n_grid.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let params = spec.flow_params();
    let height = coupling_height(spec, &ns, mode)?;
    let grid = shared_grid(&ns, horizon);
    let results = par_map_indexed(n_paths, workers, |i| {
        let r = sample_realization(
            height,
            horizon,
            RngStream::for_path(seed, StreamDomain::Realization, i),
        )?;
        let exact = solve_path(rho0, &r, &params, &grid)?;
        let digest = r.digest();
        let mut out = PathResult {
            per_n: Vec::with_capacity(ns.len()),
            triangle: Vec::with_capacity(ns.len()),
            digests_ok: Vec::with_capacity(ns.len()),
        };
        for &n in &ns {
            let run = coupled_run(spec, rho0, &r, &exact, digest.clone(), n, horizon, mode)?;
            let e = run.errors()?;
            let [a, s, b, z] = e.terminal();
            out.triangle.push(b <= a + s + z + 1e-12);
            out.digests_ok.push(run.digests_match());
            out.per_n.push(e);
        }
        Ok(out)
    })?;

    let mut rows = Vec::with_capacity(ns.len());
    let mut points: [Vec<RatePoint>; 4] = Default::default();
    for (j, &n) in ns.iter().enumerate() {
        let mut m = [Moments::default(); 4];
        let (mut triangle_violations, mut digest_mismatches) = (0, 0);
        for r in &results {
            for (acc, v) in m.iter_mut().zip(r.per_n[j].terminal()) {
                acc.push(v);
            }
            triangle_violations += u64::from(!r.triangle[j]);
            digest_mismatches += u64::from(!r.digests_ok[j]);
        }
        for (pts, acc) in points.iter_mut().zip(&m) {
            pts.push(RatePoint::from_moments(n as f64, acc));
        }
        rows.push(ConvergenceRow {
            n,
            a: m[0].mean(),
            a_stderr: m[0].stderr(),
            s: m[1].mean(),
            s_stderr: m[1].stderr(),
            b: m[2].mean(),
            b_stderr: m[2].stderr(),
            z: m[3].mean(),
            z_stderr: m[3].stderr(),
            triangle_violations,
            digest_mismatches,
        });
    }
    let fits = RateFits {
        a: fit_rate(&points[0]),
        s: fit_rate(&points[1]),
        b: fit_rate(&points[2]),
        z: fit_rate(&points[3]),
    };
    let last = ns.len() - 1;
    let z_first: Vec<f64> = results.iter().map(|r| r.per_n[0].z).collect();
    let z_last: Vec<f64> = results.iter().map(|r| r.per_n[last].z).collect();
    let mut boot_rng = RngStream::for_path(seed, StreamDomain::Bootstrap, 0).rng();
    let z_monotone_confidence =
        bootstrap_decrease(&z_first, &z_last, BOOTSTRAP_RESAMPLES, &mut boot_rng);
    let finals: Vec<PathErrors> = results.iter().map(|r| r.per_n[last].clone()).collect();
    let curves = error_statistics(&finals)?;

    let degenerate = intensity_bound(&spec.c) <= TOL_PROB;
    let mut checks = vec![
        Check {
            name: "shared realization".into(),
            pass: rows.iter().all(|r| r.digest_mismatches == 0),
            detail: "all four processes consumed the same realization on every path".into(),
        },
        Check {
            name: "triangle inequality".into(),
            pass: rows.iter().all(|r| r.triangle_violations == 0),
            detail: "B ≤ A + S + Z on every path".into(),
        },
    ];
    if !degenerate {
        let in_window = |f: &Option<RateFit>| {
            f.is_some_and(|f| f.slope >= RATE_WINDOW.0 && f.slope <= RATE_WINDOW.1)
        };
        let describe = |f: &Option<RateFit>| match f {
            Some(f) => format!(
                "slope {:.3} (95% CI [{:.3}, {:.3}])",
                f.slope, f.ci_low, f.ci_high
            ),
            None => "slope undefined".into(),
        };
        checks.push(Check {
            name: "Z rate".into(),
            pass: in_window(&fits.z),
            detail: format!(
                "{} in [{}, {}]",
                describe(&fits.z),
                RATE_WINDOW.0,
                RATE_WINDOW.1
            ),
        });
        checks.push(Check {
            name: "Z monotone".into(),
            pass: z_monotone_confidence >= MONOTONE_CONFIDENCE,
            detail: format!(
                "bootstrap P(Z({}) < Z({})) = {z_monotone_confidence:.3}, need ≥ {MONOTONE_CONFIDENCE}",
                ns[last], ns[0]
            ),
        });
        checks.push(Check {
            name: "B rate".into(),
            pass: in_window(&fits.b),
            detail: format!(
                "{} in [{}, {}]",
                describe(&fits.b),
                RATE_WINDOW.0,
                RATE_WINDOW.1
            ),
        });
        checks.push(Check {
            name: "S rate".into(),
            pass: fits.s.is_some_and(|f| f.slope <= RATE_WINDOW.1)
                || rows.iter().all(|r| r.s == 0.0),
            detail: format!("{} ≤ {}", describe(&fits.s), RATE_WINDOW.1),
        });
    }
    Ok(ConvergenceReport {
        horizon,
        n_paths,
        seed,
        mode,
        degenerate,
        rows,
        fits,
        z_monotone_confidence,
        checks,
        curves,
    })
}
