//! Repeated interactions with indirect measurement: the discrete quantum
//! trajectory of a qubit coupled, one step at a time, to fresh ancillas
//! prepared in `β = |Ω⟩⟨Ω|`.
//!
//! Time step `h = 1/n`. The exact unitary is
//! `U(n) = exp(−i h H_tot(n))` with
//! `H_tot(n) = H⊗I + I⊗diag(1,0) + √n [C⊗E10 + C†⊗E01]`; the asymptotic blocks
//! keep only the leading terms `L00 = I + (−iH − ½C†C)/n`, `L10 = C/√n`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::qmatrix::{
    mat_exp, validate_state, ComplexMatrix, DensityState, Mat2, Mat4, C64, TOL_PROB, TOL_STATE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockMode {
    Exact,
    Asymptotic,
}

/// Two orthogonal projectors resolving the identity on the ancilla.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservableSpec {
    p0: Mat2,
    p1: Mat2,
    /// Informational only; the dynamics depend on the projectors alone.
    pub eigenvalues: [f64; 2],
}

impl ObservableSpec {
    pub fn new(p0: Mat2, p1: Mat2, eigenvalues: [f64; 2]) -> Result<Self> {
        for (name, p) in [("P0", &p0), ("P1", &p1)] {
            if !p.is_finite() {
                return Err(Error::NonFinite("observable projector"));
            }
            let herm = p.hermiticity_defect();
            let idem = (*p * *p - *p).frobenius_norm();
            if herm > TOL_STATE || idem > TOL_STATE {
                return Err(Error::Model(format!(
                    "{name} is not an orthogonal projector (hermiticity {herm:.2e}, idempotence {idem:.2e})"
                )));
            }
        }
        let resolution = (p0 + p1 - Mat2::identity()).frobenius_norm();
        let overlap = (p0 * p1).frobenius_norm();
        if resolution > TOL_STATE || overlap > TOL_STATE {
            return Err(Error::Model(format!(
                "projectors do not resolve the identity (P0+P1−I: {resolution:.2e}, P0·P1: {overlap:.2e})"
            )));
        }
        Ok(ObservableSpec {
            p0,
            p1,
            eigenvalues,
        })
    }

    /// Complementary pair with `P1 = I − P0`.
    pub fn from_p0(p0: Mat2) -> Result<Self> {
        Self::new(p0, Mat2::identity() - p0, [0.0, 1.0])
    }

    /// `P0 = diag(1,0)`, `P1 = diag(0,1)`.
    pub fn diagonal() -> Self {
        ObservableSpec {
            p0: Mat2::diag(1.0, 0.0),
            p1: Mat2::diag(0.0, 1.0),
            eigenvalues: [0.0, 1.0],
        }
    }

    pub fn projector(&self, i: usize) -> &Mat2 {
        if i == 0 {
            &self.p0
        } else {
            &self.p1
        }
    }

    pub fn is_diagonal(&self) -> bool {
        (self.p0 - Mat2::diag(1.0, 0.0)).frobenius_norm() <= TOL_STATE
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub h: Mat2,
    pub c: Mat2,
    pub observable: ObservableSpec,
    pub beta: DensityState,
}

impl ModelSpec {
    /// Ancilla fixed to `|Ω⟩⟨Ω|`.
    pub fn new(h: Mat2, c: Mat2, observable: ObservableSpec) -> Result<Self> {
        Self::with_beta(h, c, observable, DensityState::ground())
    }

    pub fn with_beta(
        h: Mat2,
        c: Mat2,
        observable: ObservableSpec,
        beta: DensityState,
    ) -> Result<Self> {
        FlowParams::new(h, c)?;
        if !validate_state(beta.matrix(), TOL_STATE).pass {
            return Err(Error::InvalidState(format!(
                "beta: {}",
                validate_state(beta.matrix(), TOL_STATE)
            )));
        }
        if (*beta.matrix() - Mat2::diag(1.0, 0.0)).frobenius_norm() > TOL_STATE {
            return Err(Error::Model(
                "only the ancilla state β = |Ω⟩⟨Ω| is supported".into(),
            ));
        }
        Ok(ModelSpec {
            h,
            c,
            observable,
            beta,
        })
    }

    /// Amplitude damping with `H = diag(1,−1)/2`, `C = [[0,1],[0,0]]` and the
    /// diagonal observable.
    pub fn amplitude_damping() -> Self {
        ModelSpec::new(
            Mat2::diag(0.5, -0.5),
            Mat2::from_real([[0.0, 1.0], [0.0, 0.0]]),
            ObservableSpec::diagonal(),
        )
        .expect("canonical model is valid")
    }

    pub fn flow_params(&self) -> FlowParams {
        FlowParams::new(self.h, self.c).expect("validated at construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitaryBlocks {
    pub l00: Mat2,
    pub l01: Mat2,
    pub l10: Mat2,
    pub l11: Mat2,
    pub n: u32,
    pub mode: BlockMode,
}

impl UnitaryBlocks {
    pub fn assembled(&self) -> Mat4 {
        Mat4::from_blocks([[self.l00, self.l01], [self.l10, self.l11]])
    }

    /// `‖U†U − I‖_F`
    pub fn unitarity_defect(&self) -> f64 {
        let u = self.assembled();
        (u.adjoint() * u - Mat4::identity()).frobenius_norm()
    }
}

/// `H⊗I + I⊗diag(1,0) + √n [C⊗E10 + C†⊗E01]`
pub fn build_total_hamiltonian(spec: &ModelSpec, n: u32) -> Result<Mat4> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "partition count n must be ≥ 1".into(),
        ));
    }
    let coupling = (n as f64).sqrt();
    let free = Mat4::tensor(&spec.h, &Mat2::identity())
        + Mat4::tensor(&Mat2::identity(), &Mat2::diag(1.0, 0.0));
    let interaction = Mat4::tensor(&spec.c, &Mat2::unit(1, 0))
        + Mat4::tensor(&spec.c.adjoint(), &Mat2::unit(0, 1));
    Ok(free + interaction.scale_re(coupling))
}

/// Blocks of `exp(−i H_tot(n) / n)`.
pub fn build_unitary_exact(spec: &ModelSpec, n: u32) -> Result<UnitaryBlocks> {
    let h_tot = build_total_hamiltonian(spec, n)?;
    let u = mat_exp(&h_tot, -1.0 / n as f64)?;
    Ok(UnitaryBlocks {
        l00: u.block(0, 0),
        l01: u.block(0, 1),
        l10: u.block(1, 0),
        l11: u.block(1, 1),
        n,
        mode: BlockMode::Exact,
    })
}

/// Leading-order blocks. Only `L00` and `L10` enter the dynamics; `L01`
/// and `L11` are first-order completions for assembling `U` and carry no
/// weight.
pub fn build_unitary_asymptotic(spec: &ModelSpec, n: u32) -> Result<UnitaryBlocks> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "partition count n must be ≥ 1".into(),
        ));
    }
    let inv_n = 1.0 / n as f64;
    let inv_sqrt = inv_n.sqrt();
    let minus_i_h = spec.h * C64::new(0.0, -1.0);
    let cdc = spec.c.adjoint() * spec.c;
    let ccd = spec.c * spec.c.adjoint();
    Ok(UnitaryBlocks {
        l00: Mat2::identity() + (minus_i_h - cdc * 0.5) * inv_n,
        l10: spec.c * inv_sqrt,
        l01: -spec.c.adjoint() * inv_sqrt,
        l11: Mat2::identity() + (minus_i_h - ccd * 0.5) * inv_n,
        n,
        mode: BlockMode::Asymptotic,
    })
}

pub fn build_unitary(spec: &ModelSpec, n: u32, mode: BlockMode) -> Result<UnitaryBlocks> {
    match mode {
        BlockMode::Exact => build_unitary_exact(spec, n),
        BlockMode::Asymptotic => build_unitary_asymptotic(spec, n),
    }
}

/// The non-normalized transitions `ρ ↦ (M0(ρ), M1(ρ))` of one interaction
/// followed by a measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionMaps {
    pub blocks: UnitaryBlocks,
    pub observable: ObservableSpec,
}

impl TransitionMaps {
    /// `M_i(ρ) = Σ_{c,d} (P_i)_{dc} L_{c0} ρ L_{d0}†`, the reduced state after
    /// projecting the ancilla on `P_i`.
    pub fn apply(&self, rho: &Mat2) -> (Mat2, Mat2) {
        let a = self.blocks.l00 * *rho;
        let b = self.blocks.l10 * *rho;
        let (l00_dag, l10_dag) = (self.blocks.l00.adjoint(), self.blocks.l10.adjoint());
        let terms = [a * l00_dag, a * l10_dag, b * l00_dag, b * l10_dag];
        let branch = |p: &Mat2| {
            terms[0] * p.get(0, 0)
                + terms[1] * p.get(1, 0)
                + terms[2] * p.get(0, 1)
                + terms[3] * p.get(1, 1)
        };
        (branch(&self.observable.p0), branch(&self.observable.p1))
    }

    /// Normalized branch probabilities `(p, q)` and the branches themselves.
    pub fn branches(&self, rho: &Mat2) -> Result<Branches> {
        let (m0, m1) = self.apply(rho);
        let t0 = m0.trace().re.max(0.0);
        let t1 = m1.trace().re.max(0.0);
        if t0 < TOL_PROB && t1 < TOL_PROB {
            return Err(Error::Model(format!(
                "both branch traces vanish (Tr M0 = {t0:e}, Tr M1 = {t1:e})"
            )));
        }
        let total = t0 + t1;
        Ok(Branches {
            m0,
            m1,
            p: t0 / total,
            q: t1 / total,
            trace_sum: m0.trace().re + m1.trace().re,
        })
    }
}

pub fn transition_maps(blocks: &UnitaryBlocks, observable: &ObservableSpec) -> TransitionMaps {
    TransitionMaps {
        blocks: *blocks,
        observable: *observable,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Branches {
    pub m0: Mat2,
    pub m1: Mat2,
    /// Probability of outcome 0.
    pub p: f64,
    /// Probability of outcome 1.
    pub q: f64,
    /// `Tr M0 + Tr M1` before normalization.
    pub trace_sum: f64,
}

impl Branches {
    /// Normalized post-measurement state for `outcome`.
    pub fn collapse(&self, outcome: u8) -> Result<DensityState> {
        let m = if outcome == 0 { self.m0 } else { self.m1 };
        let tr = m.trace().re;
        if tr < TOL_PROB {
            return Err(Error::Model(format!(
                "outcome {outcome} has zero probability"
            )));
        }
        let mut out = m * (1.0 / tr);
        // remove the imaginary trace residue so Tr = 1 exactly
        out = out.hermitian_part();
        Ok(DensityState::from_matrix_unchecked(out))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ChainStep {
    pub state: DensityState,
    pub outcome: u8,
    pub p: f64,
    pub q: f64,
}

/// Draws outcome 1 with probability `q`; a branch below [`TOL_PROB`] is never
/// selected.
pub fn chain_step<R: Rng + ?Sized>(
    rho: &DensityState,
    maps: &TransitionMaps,
    rng: &mut R,
) -> Result<ChainStep> {
    let br = maps.branches(rho.matrix())?;
    let outcome = if br.q < TOL_PROB {
        0
    } else if br.p < TOL_PROB {
        1
    } else {
        u8::from(rng.random::<f64>() < br.q)
    };
    Ok(ChainStep {
        state: br.collapse(outcome)?,
        outcome,
        p: br.p,
        q: br.q,
    })
}

/// Centered, unit-variance encoding of the outcome:
/// `1 ↦ √(p/q)`, `0 ↦ −√(q/p)`.
pub fn normalized_noise(p: f64, q: f64, outcome: u8) -> Result<f64> {
    if !(p > 0.0 && p < 1.0 && q > 0.0 && q < 1.0) || (p + q - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidProbability { p, q });
    }
    Ok(if outcome == 1 {
        (p / q).sqrt()
    } else {
        -(q / p).sqrt()
    })
}

#[derive(Clone, Debug)]
pub struct ChainHistory {
    pub n: u32,
    /// `ρ_0, …, ρ_K` with `K = ⌊nT⌋`.
    pub states: Vec<DensityState>,
    pub outcomes: Vec<u8>,
    /// `(p_{k+1}, q_{k+1})` for each step.
    pub probabilities: Vec<(f64, f64)>,
    /// `X_{k+1}`; `None` where `p` or `q` is degenerate.
    pub noise: Vec<Option<f64>>,
    pub max_trace_defect: f64,
}

impl ChainHistory {
    pub fn final_state(&self) -> &DensityState {
        self.states.last().expect("history holds the initial state")
    }
}

pub fn simulate_chain<R: Rng + ?Sized>(
    spec: &ModelSpec,
    n: u32,
    horizon: f64,
    rho0: &DensityState,
    rng: &mut R,
    mode: BlockMode,
) -> Result<ChainHistory> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} must be positive"
        )));
    }
    let maps = transition_maps(&build_unitary(spec, n, mode)?, &spec.observable);
    let steps = (n as f64 * horizon).floor() as usize;
    simulate_steps(&maps, steps, rho0, rng)
}

pub fn simulate_steps<R: Rng + ?Sized>(
    maps: &TransitionMaps,
    steps: usize,
    rho0: &DensityState,
    rng: &mut R,
) -> Result<ChainHistory> {
    let mut states = Vec::with_capacity(steps + 1);
    let mut outcomes = Vec::with_capacity(steps);
    let mut probabilities = Vec::with_capacity(steps);
    let mut noise = Vec::with_capacity(steps);
    let mut max_trace_defect: f64 = 0.0;
    states.push(*rho0);
    let mut rho = *rho0;
    for _ in 0..steps {
        let br = maps.branches(rho.matrix())?;
        max_trace_defect = max_trace_defect.max((br.trace_sum - 1.0).abs());
        let step = chain_step(&rho, maps, rng)?;
        noise.push(normalized_noise(step.p, step.q, step.outcome).ok());
        outcomes.push(step.outcome);
        probabilities.push((step.p, step.q));
        rho = step.state;
        states.push(rho);
    }
    Ok(ChainHistory {
        n: maps.blocks.n,
        states,
        outcomes,
        probabilities,
        noise,
        max_trace_defect,
    })
}
