//! Deterministic dynamics between jumps.
//!
//! `f(ρ) = L(ρ) + Tr[J(ρ)]ρ − J(ρ)` drives the conditional state while no
//! jump occurs; the Lindbladian `L` alone gives the averaged master equation.
//! Both are integrated with fixed-step classical RK4 and renormalized to unit
//! trace after every step. Negative eigenvalues are never clipped.

use crate::error::{Error, Result};
use crate::qmatrix::{
    inner, validate_state, ComplexMatrix, DensityState, Mat2, PureState, C64, TOL_STATE,
};

/// Largest RK4 step.
pub const MAX_ODE_STEP: f64 = 1e-3;

/// Per-unit-time defect budget of the integrator.
pub const INTEGRATOR_BUDGET: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowParams {
    h: Mat2,
    c: Mat2,
    c_dag: Mat2,
    cdc: Mat2,
}

impl FlowParams {
    pub fn new(h: Mat2, c: Mat2) -> Result<Self> {
        if !h.is_finite() || !c.is_finite() {
            return Err(Error::NonFinite("flow parameters"));
        }
        let defect = h.hermiticity_defect();
        if defect > TOL_STATE {
            return Err(Error::Model(format!(
                "hamiltonian is not hermitian (defect {defect:.3e})"
            )));
        }
        let c_dag = c.adjoint();
        Ok(FlowParams {
            h,
            c,
            c_dag,
            cdc: c_dag * c,
        })
    }

    pub fn hamiltonian(&self) -> &Mat2 {
        &self.h
    }

    pub fn coupling(&self) -> &Mat2 {
        &self.c
    }

    /// `C†C`
    pub fn coupling_square(&self) -> &Mat2 {
        &self.cdc
    }

    /// Same dynamics seen in the frame `ρ → VρV†`.
    pub fn conjugated(&self, v: &Mat2) -> Self {
        let h = self.h.conjugate_by(v).hermitian_part();
        let c = self.c.conjugate_by(v);
        FlowParams::new(h, c).expect("unitary conjugation keeps parameters valid")
    }

    /// `J(ρ) = CρC†`
    pub fn jump(&self, rho: &Mat2) -> Mat2 {
        self.c * *rho * self.c_dag
    }

    /// `Tr[CρC†]`, real part.
    pub fn jump_intensity(&self, rho: &Mat2) -> f64 {
        self.jump(rho).trace().re
    }

    /// `L(ρ) = −i[H,ρ] − ½{C†C,ρ} + CρC†`
    pub fn lindblad(&self, rho: &Mat2) -> Mat2 {
        let minus_i = C64::new(0.0, -1.0);
        self.h.commutator(rho) * minus_i - self.cdc.anticommutator(rho) * 0.5 + self.jump(rho)
    }

    /// `f(ρ) = L(ρ) + Tr[J(ρ)]ρ − J(ρ)`
    pub fn drift(&self, rho: &Mat2) -> Mat2 {
        let j = self.jump(rho);
        let minus_i = C64::new(0.0, -1.0);
        self.h.commutator(rho) * minus_i - self.cdc.anticommutator(rho) * 0.5 + *rho * j.trace()
    }

    /// `[−iH − ½C†C + ½η] x` with `η = ⟨x, C†C x⟩`.
    pub fn pure_drift(&self, x: &[C64; 2]) -> [C64; 2] {
        let cdc_x = self.cdc.apply(x);
        let eta = inner(x, &cdc_x).re;
        let hx = self.h.apply(x);
        let minus_i = C64::new(0.0, -1.0);
        [
            minus_i * hx[0] - cdc_x[0] * 0.5 + x[0] * (0.5 * eta),
            minus_i * hx[1] - cdc_x[1] * 0.5 + x[1] * (0.5 * eta),
        ]
    }
}

pub fn lindblad(rho: &Mat2, params: &FlowParams) -> Mat2 {
    params.lindblad(rho)
}

pub fn jump_intensity(rho: &DensityState, params: &FlowParams) -> f64 {
    params.jump_intensity(rho.matrix())
}

pub fn drift_f(rho: &Mat2, params: &FlowParams) -> Mat2 {
    params.drift(rho)
}

pub fn pure_drift(x: &PureState, params: &FlowParams) -> [C64; 2] {
    params.pure_drift(x.vector())
}

/// Invariant defects at the end of an integration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Defects {
    /// Largest `|Tr − 1|` seen before any renormalization.
    pub trace: f64,
    pub hermiticity: f64,
    /// `max(0, −λ_min)`
    pub positivity: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct FlowStepResult {
    pub state: DensityState,
    pub defects: Defects,
    /// `∫ Tr[J(ρ_s)] ds` over the step.
    pub integrated_intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Field {
    Conditional,
    Master,
}

fn rk4_matrix(
    rho0: &Mat2,
    dt: f64,
    params: &FlowParams,
    field: Field,
    tol: f64,
) -> Result<FlowStepResult> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("flow duration {dt}")));
    }
    if !rho0.is_finite() {
        return Err(Error::NonFinite("flow initial state"));
    }
    let eval = |m: &Mat2| match field {
        Field::Conditional => params.drift(m),
        Field::Master => params.lindblad(m),
    };
    let steps = (dt / MAX_ODE_STEP).ceil() as u64;
    let mut rho = *rho0;
    let mut integral = 0.0;
    let mut trace_defect: f64 = 0.0;
    if steps > 0 {
        let h = dt / steps as f64;
        for _ in 0..steps {
            let k1 = eval(&rho);
            let r2 = rho + k1 * (0.5 * h);
            let k2 = eval(&r2);
            let r3 = rho + k2 * (0.5 * h);
            let k3 = eval(&r3);
            let r4 = rho + k3 * h;
            let k4 = eval(&r4);
            integral += h / 6.0
                * (params.jump_intensity(&rho)
                    + 2.0 * params.jump_intensity(&r2)
                    + 2.0 * params.jump_intensity(&r3)
                    + params.jump_intensity(&r4));
            rho += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
            let tr = rho.trace();
            trace_defect = trace_defect.max((tr - C64::new(1.0, 0.0)).norm());
            if !rho.is_finite() || tr.norm() == 0.0 {
                return Err(Error::Integrator(format!(
                    "state left the finite range after {dt} time units"
                )));
            }
            rho = rho.scale(C64::new(1.0, 0.0) / tr);
        }
    }
    let report = validate_state(&rho, f64::INFINITY);
    let defects = Defects {
        trace: trace_defect,
        hermiticity: report.hermiticity_defect,
        positivity: (-report.min_eigenvalue).max(0.0),
    };
    let budget = tol * dt.max(1.0) * 10.0;
    if defects.hermiticity > budget || defects.positivity > budget {
        return Err(Error::Integrator(format!(
            "invariant defects {defects:?} exceed budget {budget:.1e}"
        )));
    }
    Ok(FlowStepResult {
        state: DensityState::from_matrix_unchecked(rho),
        defects,
        integrated_intensity: integral,
    })
}

/// State after `dt` of the between-jump flow `dρ = f(ρ)dt`.
pub fn integrate_flow(
    rho0: &DensityState,
    dt: f64,
    params: &FlowParams,
    tol: f64,
) -> Result<FlowStepResult> {
    rk4_matrix(rho0.matrix(), dt, params, Field::Conditional, tol)
}

/// Master-equation flow `dρ = L(ρ)dt`.
pub fn integrate_master(
    rho0: &DensityState,
    dt: f64,
    params: &FlowParams,
    tol: f64,
) -> Result<DensityState> {
    rk4_matrix(rho0.matrix(), dt, params, Field::Master, tol).map(|r| r.state)
}

/// Pure-state flow, renormalized to unit length after each step.
pub fn integrate_pure(x0: &PureState, dt: f64, params: &FlowParams) -> Result<PureState> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("flow duration {dt}")));
    }
    let steps = (dt / MAX_ODE_STEP).ceil() as u64;
    let mut x = *x0.vector();
    if steps > 0 {
        let h = dt / steps as f64;
        let axpy = |a: &[C64; 2], s: f64, b: &[C64; 2]| [a[0] + b[0] * s, a[1] + b[1] * s];
        for _ in 0..steps {
            let k1 = params.pure_drift(&x);
            let k2 = params.pure_drift(&axpy(&x, 0.5 * h, &k1));
            let k3 = params.pure_drift(&axpy(&x, 0.5 * h, &k2));
            let k4 = params.pure_drift(&axpy(&x, h, &k3));
            for i in 0..2 {
                x[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0);
            }
            x = *PureState::normalized(x)?.vector();
        }
    }
    PureState::normalized(x)
}
