//! Pathwise solution of the jump equation on a fixed Poisson realization:
//! deterministic flow between points, thinning by the pre-jump intensity,
//! normalized jump at accepted points.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{integrate_flow, Defects, FlowParams, INTEGRATOR_BUDGET};
use crate::poisson::{
    intensity_bound, sample_realization, PoissonRealization, RngStream, StreamDomain,
};
use crate::qmatrix::{validate_state, ComplexMatrix, DensityState, Mat2, TOL_PROB, TOL_STATE};
use crate::stats::{par_map_indexed, MatMoments, Moments};

/// Times treated as coincident when merging grid and point times.
const TIME_EPS: f64 = 1e-12;

/// `J(ρ)/Tr J(ρ)`
pub fn apply_jump(rho: &DensityState, params: &FlowParams) -> Result<DensityState> {
    let j = params.jump(rho.matrix());
    let tr = j.trace().re;
    if tr <= TOL_PROB {
        return Err(Error::ZeroIntensityJump(tr));
    }
    Ok(DensityState::from_matrix_unchecked(
        (j * (1.0 / tr)).hermitian_part(),
    ))
}

/// `k·T/m` for `k = 0..=m`.
pub fn uniform_grid(horizon: f64, intervals: usize) -> Vec<f64> {
    let m = intervals.max(1);
    (0..=m).map(|k| horizon * k as f64 / m as f64).collect()
}

/// `k/n` for `k = 0..=⌊nT⌋`.
pub fn partition_grid(n: u32, horizon: f64) -> Vec<f64> {
    let steps = step_count(n, horizon);
    (0..=steps).map(|k| k as f64 / n as f64).collect()
}

/// `⌊nT⌋`, robust to `nT` landing a rounding error below an integer.
pub fn step_count(n: u32, horizon: f64) -> usize {
    let x = n as f64 * horizon;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Sorted union of several grids, merging times closer than `1e-12`.
pub fn merge_grids<'a>(grids: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut all: Vec<f64> = grids.into_iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup_by(|a, b| (*a - *b).abs() <= TIME_EPS);
    all
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PointDecision {
    pub time: f64,
    pub mark: f64,
    /// `Tr J(ρ_{τ−})`
    pub intensity: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct TrajectoryPath {
    pub grid: Vec<f64>,
    /// Post-jump value at each grid time.
    pub states: Vec<DensityState>,
    pub counting: Vec<u64>,
    /// `∫_0^t Tr J(ρ_s) ds` at each grid time.
    pub compensator: Vec<f64>,
    pub jump_times: Vec<f64>,
    pub jump_states: Vec<DensityState>,
    pub decisions: Vec<PointDecision>,
    pub horizon: f64,
    pub terminal_state: DensityState,
    pub terminal_count: u64,
    pub terminal_compensator: f64,
    pub max_defects: Defects,
}

impl TrajectoryPath {
    /// State at a grid time, matched to within `1e-12`.
    pub fn state_at(&self, t: f64) -> Option<&DensityState> {
        let i = self.grid.partition_point(|&g| g < t - TIME_EPS);
        match self.grid.get(i) {
            Some(&g) if (g - t).abs() <= TIME_EPS => Some(&self.states[i]),
            _ => None,
        }
    }
}

/// Solves on `realization`, recording states on `grid` (increasing, within
/// `[0, T]`). A point coinciding with a grid time is applied before the
/// state is recorded.
pub fn solve_path(
    rho0: &DensityState,
    realization: &PoissonRealization,
    params: &FlowParams,
    grid: &[f64],
) -> Result<TrajectoryPath> {
    let horizon = realization.horizon();
    let bound = intensity_bound(params.coupling());
    if realization.height() < bound * (1.0 - 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "realization height {} is below the intensity bound {bound}",
            realization.height()
        )));
    }
    if !validate_state(rho0.matrix(), TOL_STATE).pass {
        return Err(Error::InvalidState(
            validate_state(rho0.matrix(), TOL_STATE).to_string(),
        ));
    }
    if grid.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(Error::InvalidArgument(
            "grid must be strictly increasing".into(),
        ));
    }
    if grid.first().is_some_and(|&t| t < 0.0)
        || grid.last().is_some_and(|&t| t > horizon + TIME_EPS)
    {
        return Err(Error::InvalidArgument(format!(
            "grid must lie in [0, {horizon}]"
        )));
    }

    let mut path = TrajectoryPath {
        grid: grid.to_vec(),
        states: Vec::with_capacity(grid.len()),
        counting: Vec::with_capacity(grid.len()),
        compensator: Vec::with_capacity(grid.len()),
        jump_times: Vec::new(),
        jump_states: Vec::new(),
        decisions: Vec::with_capacity(realization.len()),
        horizon,
        terminal_state: *rho0,
        terminal_count: 0,
        terminal_compensator: 0.0,
        max_defects: Defects::default(),
    };
    let mut rho = *rho0;
    let mut now = 0.0;
    let mut count = 0u64;
    let mut integral = 0.0;

    let advance = |rho: &mut DensityState,
                   now: &mut f64,
                   integral: &mut f64,
                   to: f64,
                   d: &mut Defects|
     -> Result<()> {
        if to > *now {
            let step = integrate_flow(rho, to - *now, params, INTEGRATOR_BUDGET)?;
            *rho = step.state;
            *integral += step.integrated_intensity;
            d.trace = d.trace.max(step.defects.trace);
            d.hermiticity = d.hermiticity.max(step.defects.hermiticity);
            d.positivity = d.positivity.max(step.defects.positivity);
            *now = to;
        }
        Ok(())
    };

    let points = realization.points();
    let (mut pi, mut gi) = (0usize, 0usize);
    while pi < points.len() || gi < grid.len() {
        let take_point = match (points.get(pi), grid.get(gi)) {
            (Some(p), Some(&g)) => p.time <= g + TIME_EPS,
            (Some(_), None) => true,
            _ => false,
        };
        if take_point {
            let p = points[pi];
            pi += 1;
            advance(
                &mut rho,
                &mut now,
                &mut integral,
                p.time,
                &mut path.max_defects,
            )?;
            let intensity = params.jump_intensity(rho.matrix());
            let accepted = intensity > TOL_PROB && p.mark <= intensity;
            path.decisions.push(PointDecision {
                time: p.time,
                mark: p.mark,
                intensity,
                accepted,
            });
            if accepted {
                rho = apply_jump(&rho, params)?;
                count += 1;
                path.jump_times.push(p.time);
                path.jump_states.push(rho);
            }
        } else {
            let g = grid[gi];
            gi += 1;
            advance(&mut rho, &mut now, &mut integral, g, &mut path.max_defects)?;
            path.states.push(rho);
            path.counting.push(count);
            path.compensator.push(integral);
        }
    }
    advance(
        &mut rho,
        &mut now,
        &mut integral,
        horizon,
        &mut path.max_defects,
    )?;
    path.terminal_state = rho;
    path.terminal_count = count;
    path.terminal_compensator = integral;
    Ok(path)
}

#[derive(Clone, Debug)]
pub struct MeanPath {
    pub grid: Vec<f64>,
    pub n_paths: u64,
    pub mean: Vec<Mat2>,
    /// Entry standard errors, real and imaginary parts separately.
    pub stderr: Vec<Mat2>,
    pub counting: Vec<Moments>,
    pub compensator: Vec<Moments>,
}

/// Ensemble of independent exact paths. Realizations use height
/// `λ_max(C†C)` and the stream `(seed, Realization, i)` for path `i`.
pub struct Ensemble {
    pub paths: Vec<TrajectoryPath>,
}

pub fn simulate_ensemble(
    params: &FlowParams,
    rho0: &DensityState,
    horizon: f64,
    grid: &[f64],
    n_paths: u64,
    seed: u64,
    workers: Option<usize>,
) -> Result<Ensemble> {
    let height = intensity_bound(params.coupling());
    let paths = par_map_indexed(n_paths, workers, |i| {
        let r = sample_realization(
            height,
            horizon,
            RngStream::for_path(seed, StreamDomain::Realization, i),
        )?;
        solve_path(rho0, &r, params, grid)
    })?;
    Ok(Ensemble { paths })
}

impl Ensemble {
    pub fn mean(&self) -> Result<MeanPath> {
        let first = self
            .paths
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?;
        let len = first.grid.len();
        let mut states = vec![MatMoments::default(); len];
        let mut counting = vec![Moments::default(); len];
        let mut compensator = vec![Moments::default(); len];
        for p in &self.paths {
            for i in 0..len {
                states[i].push(p.states[i].matrix());
                counting[i].push(p.counting[i] as f64);
                compensator[i].push(p.compensator[i]);
            }
        }
        Ok(MeanPath {
            grid: first.grid.clone(),
            n_paths: self.paths.len() as u64,
            mean: states.iter().map(MatMoments::mean).collect(),
            stderr: states.iter().map(MatMoments::stderr).collect(),
            counting,
            compensator,
        })
    }
}

/// Pointwise ensemble mean of exact paths with entry standard errors.
pub fn monte_carlo_mean(
    params: &FlowParams,
    rho0: &DensityState,
    horizon: f64,
    grid: &[f64],
    n_paths: u64,
    seed: u64,
) -> Result<MeanPath> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument("need at least 2 paths".into()));
    }
    simulate_ensemble(params, rho0, horizon, grid, n_paths, seed, None)?.mean()
}
