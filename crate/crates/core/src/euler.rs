//! Frozen-coefficient Euler scheme on a shared Poisson realization.
//!
//! On the slab `[k/n, (k+1)/n)` the scheme adds `f(θ_k)/n` plus one jump
//! displacement `q(θ_k)` for every realization point with mark at most
//! `Re Tr J(θ_k)`. When `C` is singular the whole problem is first rotated
//! by a unitary `V` that makes the second row of `VCV†` vanish, so that every
//! normalized jump lands on `E00`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{merge_grids, partition_grid, solve_path, step_count, TrajectoryPath};
use crate::flow::FlowParams;
use crate::poisson::{
    intensity_bound, sample_realization, PoissonRealization, RngStream, StreamDomain,
};
use crate::qmatrix::{ComplexMatrix, DensityState, Mat2, C64};
use crate::stats::{par_map_indexed, Moments};

/// Lower clamp on the intensity in the invertible-mode denominator.
pub const EPSILON_GUARD: f64 = 1e-12;

/// Singular values at or below this make `C` singular.
const SINGULAR_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JumpMode {
    Invertible,
    Transformed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpFunctionSpec {
    pub mode: JumpMode,
    /// Frame rotation; the scheme runs on `VρV†`.
    pub v: Mat2,
    pub epsilon_guard: f64,
}

impl JumpFunctionSpec {
    /// Invertible-mode jump function in an arbitrary unitary frame.
    pub fn invertible_in_frame(v: Mat2) -> Result<Self> {
        if (v * v.adjoint() - Mat2::identity()).frobenius_norm() > 1e-10 {
            return Err(Error::InvalidArgument("frame matrix is not unitary".into()));
        }
        Ok(JumpFunctionSpec {
            mode: JumpMode::Invertible,
            v,
            epsilon_guard: EPSILON_GUARD,
        })
    }

    /// Jump displacement at `θ`, with `params` already in the scheme frame.
    pub fn q(&self, theta: &Mat2, params: &FlowParams) -> Mat2 {
        match self.mode {
            JumpMode::Invertible => {
                let j = params.jump(theta);
                j * (1.0 / j.trace().re.max(self.epsilon_guard)) - *theta
            }
            JumpMode::Transformed => Mat2::diag(1.0, 0.0) - *theta,
        }
    }
}

/// Picks the mode from the smallest singular value of `C`. In transformed
/// mode `V` has rows `u†, v†` where `C†v = 0` and `u ⊥ v`.
pub fn build_jump_function(c: &Mat2) -> JumpFunctionSpec {
    let smallest = c.singular_values()[0];
    if smallest > SINGULAR_TOL {
        return JumpFunctionSpec {
            mode: JumpMode::Invertible,
            v: Mat2::identity(),
            epsilon_guard: EPSILON_GUARD,
        };
    }
    let cd = c.adjoint();
    let rows = [[cd.get(0, 0), cd.get(0, 1)], [cd.get(1, 0), cd.get(1, 1)]];
    let norm = |r: &[C64; 2]| (r[0].norm_sqr() + r[1].norm_sqr()).sqrt();
    let r = if norm(&rows[0]) >= norm(&rows[1]) {
        rows[0]
    } else {
        rows[1]
    };
    let len = norm(&r);
    let kernel = if len == 0.0 {
        [C64::new(0.0, 0.0), C64::new(1.0, 0.0)]
    } else {
        [-r[1] / len, r[0] / len]
    };
    let other = [kernel[1].conj(), -kernel[0].conj()];
    let v = Mat2::new(
        other[0].conj(),
        other[1].conj(),
        kernel[0].conj(),
        kernel[1].conj(),
    );
    JumpFunctionSpec {
        mode: JumpMode::Transformed,
        v,
        epsilon_guard: EPSILON_GUARD,
    }
}

/// `‖second row of VCV†‖`
pub fn second_row_defect(jf: &JumpFunctionSpec, c: &Mat2) -> f64 {
    let m = c.conjugate_by(&jf.v);
    (m.get(1, 0).norm_sqr() + m.get(1, 1).norm_sqr()).sqrt()
}

/// Intensity seen by the scheme: `max(Re Tr J(θ), 0)`.
pub fn frozen_intensity(theta: &Mat2, params: &FlowParams) -> f64 {
    params.jump_intensity(theta).max(0.0)
}

/// `#{points in [t0, t1) × [0, λ]}`, empty when `λ = 0`.
fn slab_count(realization: &PoissonRealization, t0: f64, t1: f64, intensity: f64) -> usize {
    if intensity > 0.0 {
        realization.count_in_rectangle(t0, t1, 0.0, intensity)
    } else {
        0
    }
}

/// One step in the scheme frame.
pub fn euler_step(
    theta: &Mat2,
    realization: &PoissonRealization,
    k: usize,
    n: u32,
    jf: &JumpFunctionSpec,
    params: &FlowParams,
) -> Mat2 {
    let nf = n as f64;
    let intensity = frozen_intensity(theta, params);
    let count = slab_count(realization, k as f64 / nf, (k + 1) as f64 / nf, intensity);
    let mut next = *theta + params.drift(theta) * (1.0 / nf);
    if count > 0 {
        next += jf.q(theta, params) * count as f64;
    }
    next
}

#[derive(Clone, Debug)]
pub struct EulerPath {
    pub n: u32,
    pub horizon: f64,
    pub jump_function: JumpFunctionSpec,
    /// `θ_k` for `k = 0..=⌊nT⌋`, in the original frame.
    pub states: Vec<Mat2>,
    /// Slab jump counts.
    pub jumps: Vec<usize>,
    frame_states: Vec<Mat2>,
    frame_params: FlowParams,
    realization: PoissonRealization,
}

impl EulerPath {
    /// `θ̃_t`, the piecewise interpolant, in the original frame. Jumps inside
    /// a slab are counted on the closed interval `[k/n, t]`.
    pub fn sample(&self, t: f64) -> Mat2 {
        let nf = self.n as f64;
        let last = self.frame_states.len() - 1;
        let k = step_count(self.n, t.max(0.0)).min(last);
        let theta = &self.frame_states[k];
        let t0 = k as f64 / nf;
        if t <= t0 {
            return self.states[k];
        }
        let intensity = frozen_intensity(theta, &self.frame_params);
        let count = if intensity > 0.0 {
            self.realization
                .points_in_closed(t0, t)
                .iter()
                .filter(|p| p.mark <= intensity)
                .count()
        } else {
            0
        };
        let mut out = *theta + self.frame_params.drift(theta) * (t - t0);
        if count > 0 {
            out += self.jump_function.q(theta, &self.frame_params) * count as f64;
        }
        out.conjugate_by(&self.jump_function.v.adjoint())
    }

    /// `max_k |Tr θ_k − 1|`
    pub fn max_trace_drift(&self) -> f64 {
        self.states
            .iter()
            .map(|m| (m.trace() - C64::new(1.0, 0.0)).norm())
            .fold(0.0, f64::max)
    }

    /// The realization driving the scheme.
    pub fn realization(&self) -> &PoissonRealization {
        &self.realization
    }

    pub fn total_jumps(&self) -> usize {
        self.jumps.iter().sum()
    }
}

pub fn euler_path(
    rho0: &DensityState,
    realization: &PoissonRealization,
    n: u32,
    horizon: f64,
    jf: &JumpFunctionSpec,
    params: &FlowParams,
) -> Result<EulerPath> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "partition count n must be ≥ 1".into(),
        ));
    }
    if !(horizon > 0.0 && horizon <= realization.horizon() * (1.0 + 1e-12)) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} must lie in (0, {}]",
            realization.horizon()
        )));
    }
    let frame_params = params.conjugated(&jf.v);
    let back = jf.v.adjoint();
    let steps = step_count(n, horizon);
    let mut frame_states = Vec::with_capacity(steps + 1);
    let mut jumps = Vec::with_capacity(steps);
    let mut theta = rho0.matrix().conjugate_by(&jf.v);
    frame_states.push(theta);
    let nf = n as f64;
    for k in 0..steps {
        let intensity = frozen_intensity(&theta, &frame_params);
        jumps.push(slab_count(
            realization,
            k as f64 / nf,
            (k + 1) as f64 / nf,
            intensity,
        ));
        theta = euler_step(&theta, realization, k, n, jf, &frame_params);
        if !theta.is_finite() {
            return Err(Error::NonFinite("Euler iterate"));
        }
        frame_states.push(theta);
    }
    Ok(EulerPath {
        n,
        horizon,
        jump_function: *jf,
        states: frame_states.iter().map(|m| m.conjugate_by(&back)).collect(),
        jumps,
        frame_states,
        frame_params,
        realization: realization.clone(),
    })
}

/// `sup ‖θ̃_t − μ_t‖_F` over the `k/n` grid and the exact path's jump times
/// (post-jump values). The exact path must be recorded on a grid containing
/// every `k/n`.
pub fn sup_error(exact: &TrajectoryPath, euler: &EulerPath) -> Result<f64> {
    let nf = euler.n as f64;
    let mut sup: f64 = 0.0;
    for (k, theta) in euler.states.iter().enumerate() {
        let t = k as f64 / nf;
        let mu = exact.state_at(t).ok_or_else(|| {
            Error::InvalidArgument(format!("exact path is not recorded at t = {t}"))
        })?;
        sup = sup.max((*theta - *mu.matrix()).frobenius_norm());
    }
    for (&tau, mu) in exact.jump_times.iter().zip(&exact.jump_states) {
        if tau <= euler.horizon {
            sup = sup.max((euler.sample(tau) - *mu.matrix()).frobenius_norm());
        }
    }
    Ok(sup)
}

#[derive(Clone, Debug)]
pub struct SupErrorEstimate {
    pub n: u32,
    pub mean: f64,
    pub stderr: f64,
    pub per_path: Vec<f64>,
}

/// Monte Carlo estimate of `E[sup_t ‖θ̃_t − μ_t‖]`, the two paths sharing
/// each realization (height `λ_max(C†C) + 1`, stream `(seed, Realization, i)`).
pub fn euler_sup_error(
    params: &FlowParams,
    rho0: &DensityState,
    n: u32,
    horizon: f64,
    n_paths: u64,
    seed: u64,
) -> Result<SupErrorEstimate> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument("need at least 2 paths".into()));
    }
    let jf = build_jump_function(params.coupling());
    let height = intensity_bound(params.coupling()) + 1.0;
    let grid = merge_grids([partition_grid(n, horizon).as_slice(), &[horizon]]);
    let per_path = par_map_indexed(n_paths, None, |i| {
        let r = sample_realization(
            height,
            horizon,
            RngStream::for_path(seed, StreamDomain::Realization, i),
        )?;
        let exact = solve_path(rho0, &r, params, &grid)?;
        let euler = euler_path(rho0, &r, n, horizon, &jf, params)?;
        sup_error(&exact, &euler)
    })?;
    let m = Moments::from_slice(&per_path);
    Ok(SupErrorEstimate {
        n,
        mean: m.mean(),
        stderr: m.stderr(),
        per_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{integrate_flow, INTEGRATOR_BUDGET};
    use crate::poisson::MarkedPoint;
    use crate::qmatrix::{mat_exp, Mat4};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn lowering() -> Mat2 {
        Mat2::from_real([[0.0, 1.0], [0.0, 0.0]])
    }

    fn canonical() -> FlowParams {
        FlowParams::new(Mat2::diag(0.5, -0.5), lowering()).unwrap()
    }

    fn mixed() -> DensityState {
        DensityState::new(Mat2::new(
            c(0.3, 0.0),
            c(0.1, 0.2),
            c(0.1, -0.2),
            c(0.7, 0.0),
        ))
        .unwrap()
    }

    fn unitary(a: f64, b: f64, phi: f64) -> Mat2 {
        let (s, co) = a.sin_cos();
        let e = C64::from_polar(1.0, b);
        let f = C64::from_polar(1.0, phi);
        Mat2::new(e * co, f * s, -f.conj() * s, e.conj() * co)
    }

    #[test]
    fn identity_coupling_never_displaces() {
        let jf = build_jump_function(&Mat2::identity());
        assert_eq!(jf.mode, JumpMode::Invertible);
        assert_eq!(jf.v, Mat2::identity());
        let p = FlowParams::new(Mat2::zero(), Mat2::identity()).unwrap();
        assert!(jf.q(mixed().matrix(), &p).frobenius_norm() < 1e-15);
    }

    #[test]
    fn lowering_coupling_is_transformed() {
        let jf = build_jump_function(&lowering());
        assert_eq!(jf.mode, JumpMode::Transformed);
        assert!(second_row_defect(&jf, &lowering()) <= 1e-10);
        assert!((jf.v * jf.v.adjoint() - Mat2::identity()).frobenius_norm() < 1e-14);
        // the swap would put the coupling in the second row
        let swap = JumpFunctionSpec {
            v: Mat2::from_real([[0.0, 1.0], [1.0, 0.0]]),
            ..jf
        };
        assert!(second_row_defect(&swap, &lowering()) > 0.5);
    }

    #[test]
    fn zero_coupling_is_transformed_with_identity_frame() {
        let jf = build_jump_function(&Mat2::zero());
        assert_eq!(jf.mode, JumpMode::Transformed);
        assert_eq!(jf.v, Mat2::identity());
    }

    proptest! {
        #[test]
        fn kernel_row_is_second(a in -2.0..2.0f64, b in -2.0..2.0f64, x in -2.0..2.0f64, y in -2.0..2.0f64, s in -2.0..2.0f64) {
            // rank one: C = w zᵀ
            let w = [c(a, b), c(x, 0.3)];
            let z = [c(1.0, y), c(s, -0.7)];
            let cm = Mat2::new(w[0] * z[0], w[0] * z[1], w[1] * z[0], w[1] * z[1]);
            let jf = build_jump_function(&cm);
            prop_assert_eq!(jf.mode, JumpMode::Transformed);
            prop_assert!(second_row_defect(&jf, &cm) <= 1e-10 * (1.0 + cm.frobenius_norm()));
            prop_assert!((jf.v * jf.v.adjoint() - Mat2::identity()).frobenius_norm() < 1e-12);
        }

        #[test]
        fn jump_displacement_is_scale_free(scale in 0.1..10.0f64, a in 0.1..2.0f64, b in -1.0..1.0f64) {
            for cm in [Mat2::new(c(a, 0.0), c(b, 0.2), c(0.0, 0.0), c(1.0, -0.5)), lowering() * a] {
                let p1 = FlowParams::new(Mat2::zero(), cm).unwrap();
                let p2 = FlowParams::new(Mat2::zero(), cm * scale).unwrap();
                let j1 = build_jump_function(&cm);
                let j2 = build_jump_function(&(cm * scale));
                prop_assert_eq!(j1.mode, j2.mode);
                let rho = mixed().matrix().conjugate_by(&j1.v);
                let q1 = j1.q(&rho, &p1.conjugated(&j1.v));
                let q2 = j2.q(&rho, &p2.conjugated(&j2.v));
                prop_assert!((q1 - q2).frobenius_norm() < 1e-10);
            }
        }
    }

    #[test]
    fn empty_slab_is_deterministic_euler() {
        let params = canonical();
        let r = PoissonRealization::empty(1.0, 2.0).unwrap();
        let jf = build_jump_function(params.coupling());
        let theta = *mixed().matrix();
        let next = euler_step(&theta, &r, 3, 10, &jf, &params);
        assert_eq!(next, theta + params.drift(&theta) * 0.1);
    }

    #[test]
    fn excited_state_jumps_to_ground() {
        let params = canonical();
        let r = PoissonRealization::new(
            1.0,
            2.0,
            vec![MarkedPoint {
                time: 0.25,
                mark: 0.5,
            }],
        )
        .unwrap();
        let jf = build_jump_function(params.coupling());
        let next = euler_step(&Mat2::diag(0.0, 1.0), &r, 2, 10, &jf, &params);
        assert!((next - Mat2::diag(1.0, 0.0)).frobenius_norm() < 1e-15);
        // a mark above the frozen intensity is ignored
        let r = PoissonRealization::new(
            1.0,
            2.0,
            vec![MarkedPoint {
                time: 0.25,
                mark: 1.5,
            }],
        )
        .unwrap();
        let next = euler_step(&Mat2::diag(0.0, 1.0), &r, 2, 10, &jf, &params);
        assert!((next - Mat2::diag(0.0, 1.0)).frobenius_norm() < 1e-15);
    }

    #[test]
    fn negative_frozen_intensity_is_empty() {
        let params = canonical();
        let theta = Mat2::diag(1.2, -0.2);
        assert_eq!(frozen_intensity(&theta, &params), 0.0);
        let r = PoissonRealization::new(
            1.0,
            2.0,
            vec![MarkedPoint {
                time: 0.05,
                mark: 0.0,
            }],
        )
        .unwrap();
        let jf = build_jump_function(params.coupling());
        assert_eq!(
            euler_step(&theta, &r, 0, 10, &jf, &params),
            theta + params.drift(&theta) * 0.1
        );
    }

    #[test]
    fn unitary_flow_is_first_order() {
        let h = Mat2::new(c(0.7, 0.0), c(0.3, -0.4), c(0.3, 0.4), c(-0.2, 0.0));
        let params = FlowParams::new(h, Mat2::zero()).unwrap();
        let jf = build_jump_function(params.coupling());
        let r = PoissonRealization::empty(1.0, 1.0).unwrap();
        let u = mat_exp(&Mat4::tensor(&h, &Mat2::identity()), -1.0)
            .unwrap()
            .block(0, 0);
        let target = mixed().matrix().conjugate_by(&u);
        let errs: Vec<f64> = [100u32, 1000]
            .iter()
            .map(|&n| {
                let p = euler_path(&mixed(), &r, n, 1.0, &jf, &params).unwrap();
                (*p.states.last().unwrap() - target).frobenius_norm()
            })
            .collect();
        let constant = errs[0] * 100.0;
        assert!(errs[1] <= constant / 1000.0 * 1.5, "{errs:?}");
        assert!(errs[1] >= constant / 1000.0 * 0.5, "{errs:?}");
    }

    #[test]
    fn jump_free_scheme_converges_to_flow() {
        let params = canonical();
        let jf = build_jump_function(params.coupling());
        let r = PoissonRealization::empty(1.0, 2.0).unwrap();
        let target = integrate_flow(&mixed(), 1.0, &params, INTEGRATOR_BUDGET)
            .unwrap()
            .state;
        let err = |n| {
            let p = euler_path(&mixed(), &r, n, 1.0, &jf, &params).unwrap();
            (*p.states.last().unwrap() - *target.matrix()).frobenius_norm()
        };
        let (e1, e2) = (err(100), err(1000));
        assert!(e2 < e1 / 5.0 && e2 < 1e-2, "{e1} {e2}");
    }

    #[test]
    fn interpolant_matches_grid_values() {
        let params = canonical();
        let r = sample_realization(2.0, 1.0, RngStream::new(12, 0)).unwrap();
        let jf = build_jump_function(params.coupling());
        let p = euler_path(&mixed(), &r, 16, 1.0, &jf, &params).unwrap();
        for (k, s) in p.states.iter().enumerate() {
            assert_eq!(p.sample(k as f64 / 16.0), *s);
        }
        assert!(euler_path(&mixed(), &r, 16, 2.0, &jf, &params).is_err());
    }

    #[test]
    fn constant_model_is_constant() {
        let params = FlowParams::new(Mat2::zero(), Mat2::zero()).unwrap();
        let r = sample_realization(1.0, 1.0, RngStream::new(1, 0)).unwrap();
        let jf = build_jump_function(params.coupling());
        let p = euler_path(&mixed(), &r, 8, 1.0, &jf, &params).unwrap();
        assert!(p.states.iter().all(|s| s == mixed().matrix()));
        let z = euler_sup_error(&params, &mixed(), 8, 1.0, 20, 4).unwrap();
        assert_eq!(z.mean, 0.0);
    }

    #[test]
    fn frame_change_round_trip() {
        let h = Mat2::new(c(0.2, 0.0), c(0.1, 0.3), c(0.1, -0.3), c(-0.6, 0.0));
        let cm = Mat2::new(c(0.8, 0.1), c(0.2, 0.0), c(-0.3, 0.2), c(0.5, -0.4));
        let params = FlowParams::new(h, cm).unwrap();
        let direct = build_jump_function(&cm);
        assert_eq!(direct.mode, JumpMode::Invertible);
        let framed = JumpFunctionSpec::invertible_in_frame(unitary(0.7, 0.3, -1.1)).unwrap();
        let height = intensity_bound(&cm) + 1.0;
        for seed in 0..20 {
            let r = sample_realization(height, 1.0, RngStream::new(seed, 0)).unwrap();
            let a = euler_path(&mixed(), &r, 64, 1.0, &direct, &params).unwrap();
            let b = euler_path(&mixed(), &r, 64, 1.0, &framed, &params).unwrap();
            for (x, y) in a.states.iter().zip(&b.states) {
                assert!((*x - *y).frobenius_norm() <= 1e-9);
            }
            assert!((a.sample(0.377) - b.sample(0.377)).frobenius_norm() <= 1e-9);
        }
        assert!(JumpFunctionSpec::invertible_in_frame(Mat2::diag(2.0, 1.0)).is_err());
    }

    #[test]
    fn jump_counts_agree_with_exact_path() {
        let params = FlowParams::new(Mat2::zero(), lowering()).unwrap();
        let jf = build_jump_function(params.coupling());
        let n = 512;
        let grid = partition_grid(n, 1.0);
        let agree = (0..1000u64)
            .filter(|&i| {
                let r = sample_realization(
                    2.0,
                    1.0,
                    RngStream::for_path(6, StreamDomain::Realization, i),
                )
                .unwrap();
                let e = solve_path(&DensityState::excited(), &r, &params, &grid).unwrap();
                let z = euler_path(&DensityState::excited(), &r, n, 1.0, &jf, &params).unwrap();
                e.terminal_count as usize == z.total_jumps()
            })
            .count();
        assert!(agree >= 990, "{agree} of 1000");
    }

    #[test]
    fn sup_error_sees_jump_times() {
        let params = canonical();
        let r = PoissonRealization::new(
            1.0,
            2.0,
            vec![MarkedPoint {
                time: 0.3,
                mark: 0.5,
            }],
        )
        .unwrap();
        let jf = build_jump_function(params.coupling());
        let grid = partition_grid(4, 1.0);
        let exact = solve_path(&DensityState::excited(), &r, &params, &grid).unwrap();
        let euler = euler_path(&DensityState::excited(), &r, 4, 1.0, &jf, &params).unwrap();
        // both jump at 0.3 onto the ground state
        assert_eq!(exact.jump_times, vec![0.3]);
        assert!(sup_error(&exact, &euler).unwrap() < 1e-12);
        let coarse = solve_path(&DensityState::excited(), &r, &params, &[0.0, 1.0]).unwrap();
        assert!(sup_error(&coarse, &euler).is_err());
    }
}
