//! Dense 2×2 and 4×4 complex matrices and the qubit state types built on them.
//!
//! Four-dimensional operators act on system ⊗ ancilla in the ordered basis
//! Ω⊗Ω, X⊗Ω, Ω⊗X, X⊗X: the system index varies fastest, so the operator
//! splits into 2×2 system blocks indexed by the ancilla pair `(a, b)`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Tolerance for state invariants after analytic operations.
pub const TOL_STATE: f64 = 1e-9;

/// A branch or intensity below this is treated as probability zero.
pub const TOL_PROB: f64 = 1e-14;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Conjugate transpose, trace and Frobenius norm shared by both sizes.
pub trait ComplexMatrix: Copy {
    fn adjoint(&self) -> Self;
    fn trace(&self) -> C64;
    fn frobenius_norm(&self) -> f64;
    fn is_finite(&self) -> bool;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat2(pub [[C64; 2]; 2]);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat4(pub [[C64; 4]; 4]);

pub fn adjoint<M: ComplexMatrix>(m: &M) -> M {
    m.adjoint()
}

pub fn trace<M: ComplexMatrix>(m: &M) -> C64 {
    m.trace()
}

pub fn frobenius_norm<M: ComplexMatrix>(m: &M) -> f64 {
    m.frobenius_norm()
}

impl Mat2 {
    pub const fn new(a: C64, b: C64, c: C64, d: C64) -> Self {
        Mat2([[a, b], [c, d]])
    }

    pub const fn zero() -> Self {
        Mat2([[ZERO; 2]; 2])
    }

    pub const fn identity() -> Self {
        Mat2([[ONE, ZERO], [ZERO, ONE]])
    }

    pub fn from_real(rows: [[f64; 2]; 2]) -> Self {
        Mat2([
            [C64::new(rows[0][0], 0.0), C64::new(rows[0][1], 0.0)],
            [C64::new(rows[1][0], 0.0), C64::new(rows[1][1], 0.0)],
        ])
    }

    pub fn diag(a: f64, d: f64) -> Self {
        Mat2::from_real([[a, 0.0], [0.0, d]])
    }

    /// Matrix unit with a single one at `(row, col)`.
    pub fn unit(row: usize, col: usize) -> Self {
        let mut m = Mat2::zero();
        m.0[row][col] = ONE;
        m
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.0[row][col]
    }

    pub fn scale(&self, s: C64) -> Self {
        let m = &self.0;
        Mat2([[m[0][0] * s, m[0][1] * s], [m[1][0] * s, m[1][1] * s]])
    }

    pub fn scale_re(&self, s: f64) -> Self {
        self.scale(C64::new(s, 0.0))
    }

    /// `a · self · a†`
    pub fn conjugate_by(&self, a: &Mat2) -> Self {
        *a * *self * a.adjoint()
    }

    pub fn commutator(&self, other: &Mat2) -> Self {
        *self * *other - *other * *self
    }

    pub fn anticommutator(&self, other: &Mat2) -> Self {
        *self * *other + *other * *self
    }

    pub fn apply(&self, v: &[C64; 2]) -> [C64; 2] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1],
            m[1][0] * v[0] + m[1][1] * v[1],
        ]
    }

    /// `(M + M†) / 2`
    pub fn hermitian_part(&self) -> Self {
        (*self + self.adjoint()).scale_re(0.5)
    }

    pub fn hermiticity_defect(&self) -> f64 {
        (*self - self.adjoint()).frobenius_norm()
    }

    /// Eigenvalues (ascending) of the hermitian part, in closed form.
    pub fn hermitian_eigenvalues(&self) -> [f64; 2] {
        let h = self.hermitian_part();
        let a = h.0[0][0].re;
        let d = h.0[1][1].re;
        let b = h.0[0][1];
        let mean = 0.5 * (a + d);
        let half_gap = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
        [mean - half_gap, mean + half_gap]
    }

    /// Singular values (ascending): the largest from `M†M`, the smallest as
    /// `|det M| / σ_max`.
    pub fn singular_values(&self) -> [f64; 2] {
        let hi = (self.adjoint() * *self).hermitian_eigenvalues()[1]
            .max(0.0)
            .sqrt();
        if hi == 0.0 {
            return [0.0, 0.0];
        }
        let det = self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0];
        [(det.norm() / hi).min(hi), hi]
    }

    pub fn entries(&self) -> [C64; 4] {
        [self.0[0][0], self.0[0][1], self.0[1][0], self.0[1][1]]
    }
}

impl ComplexMatrix for Mat2 {
    fn adjoint(&self) -> Self {
        let m = &self.0;
        Mat2([
            [m[0][0].conj(), m[1][0].conj()],
            [m[0][1].conj(), m[1][1].conj()],
        ])
    }

    fn trace(&self) -> C64 {
        self.0[0][0] + self.0[1][1]
    }

    fn frobenius_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|z| z.is_finite())
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, rhs: Mat2) -> Mat2 {
        let (a, b) = (&self.0, &rhs.0);
        Mat2([
            [a[0][0] + b[0][0], a[0][1] + b[0][1]],
            [a[1][0] + b[1][0], a[1][1] + b[1][1]],
        ])
    }
}

impl AddAssign for Mat2 {
    fn add_assign(&mut self, rhs: Mat2) {
        *self = *self + rhs;
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, rhs: Mat2) -> Mat2 {
        self + (-rhs)
    }
}

impl Neg for Mat2 {
    type Output = Mat2;
    fn neg(self) -> Mat2 {
        self.scale_re(-1.0)
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, rhs: Mat2) -> Mat2 {
        let (a, b) = (&self.0, &rhs.0);
        Mat2([
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ])
    }
}

impl Mul<C64> for Mat2 {
    type Output = Mat2;
    fn mul(self, rhs: C64) -> Mat2 {
        self.scale(rhs)
    }
}

impl Mul<f64> for Mat2 {
    type Output = Mat2;
    fn mul(self, rhs: f64) -> Mat2 {
        self.scale_re(rhs)
    }
}

impl Mat4 {
    pub const fn zero() -> Self {
        Mat4([[ZERO; 4]; 4])
    }

    pub fn identity() -> Self {
        let mut m = Mat4::zero();
        for i in 0..4 {
            m.0[i][i] = ONE;
        }
        m
    }

    /// `system ⊗ ancilla` in the fixed basis ordering.
    pub fn tensor(system: &Mat2, ancilla: &Mat2) -> Self {
        let mut m = Mat4::zero();
        for a in 0..2 {
            for b in 0..2 {
                m.set_block(a, b, &system.scale(ancilla.0[a][b]));
            }
        }
        m
    }

    pub fn from_blocks(blocks: [[Mat2; 2]; 2]) -> Self {
        let mut m = Mat4::zero();
        for (a, row) in blocks.iter().enumerate() {
            for (b, block) in row.iter().enumerate() {
                m.set_block(a, b, block);
            }
        }
        m
    }

    /// System operator sitting at ancilla position `(a, b)`.
    pub fn block(&self, a: usize, b: usize) -> Mat2 {
        let m = &self.0;
        let (r, c) = (2 * a, 2 * b);
        Mat2([[m[r][c], m[r][c + 1]], [m[r + 1][c], m[r + 1][c + 1]]])
    }

    pub fn set_block(&mut self, a: usize, b: usize, block: &Mat2) {
        for i in 0..2 {
            for j in 0..2 {
                self.0[2 * a + i][2 * b + j] = block.0[i][j];
            }
        }
    }

    pub fn scale(&self, s: C64) -> Self {
        let mut out = *self;
        out.0.iter_mut().flatten().for_each(|z| *z *= s);
        out
    }

    pub fn scale_re(&self, s: f64) -> Self {
        self.scale(C64::new(s, 0.0))
    }
}

impl ComplexMatrix for Mat4 {
    fn adjoint(&self) -> Self {
        let mut out = Mat4::zero();
        for i in 0..4 {
            for j in 0..4 {
                out.0[i][j] = self.0[j][i].conj();
            }
        }
        out
    }

    fn trace(&self) -> C64 {
        (0..4).map(|i| self.0[i][i]).sum()
    }

    fn frobenius_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|z| z.is_finite())
    }
}

impl Add for Mat4 {
    type Output = Mat4;
    fn add(self, rhs: Mat4) -> Mat4 {
        let mut out = self;
        for (o, r) in out.0.iter_mut().flatten().zip(rhs.0.iter().flatten()) {
            *o += *r;
        }
        out
    }
}

impl Sub for Mat4 {
    type Output = Mat4;
    fn sub(self, rhs: Mat4) -> Mat4 {
        self + rhs.scale_re(-1.0)
    }
}

impl Mul for Mat4 {
    type Output = Mat4;
    fn mul(self, rhs: Mat4) -> Mat4 {
        let mut out = Mat4::zero();
        for i in 0..4 {
            for k in 0..4 {
                let a = self.0[i][k];
                for j in 0..4 {
                    out.0[i][j] += a * rhs.0[k][j];
                }
            }
        }
        out
    }
}

/// `exp(i · scale · m)` by scaling and squaring of a Taylor series.
pub fn mat_exp(m: &Mat4, scale: f64) -> Result<Mat4> {
    if !m.is_finite() || !scale.is_finite() {
        return Err(Error::NonFinite("matrix exponential input"));
    }
    let a = m.scale(C64::new(0.0, scale));
    let norm = a.frobenius_norm();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let a = a.scale_re(0.5f64.powi(squarings));

    // ‖a‖ ≤ 1/2, so 30 terms are far below rounding
    let mut sum = Mat4::identity();
    let mut term = Mat4::identity();
    for k in 1..=30 {
        term = (term * a).scale_re(1.0 / k as f64);
        sum = sum + term;
        if term.frobenius_norm() <= f64::EPSILON * 1e-3 {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    Ok(sum)
}

/// Reduced operator on the system: the sum of the diagonal ancilla blocks.
pub fn partial_trace_second(m: &Mat4) -> Mat2 {
    m.block(0, 0) + m.block(1, 1)
}

/// Unit vector in ℂ².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PureState([C64; 2]);

impl PureState {
    pub fn new(v: [C64; 2]) -> Result<Self> {
        let norm = vec_norm(&v);
        if !norm.is_finite() {
            return Err(Error::NonFinite("pure state"));
        }
        if (norm - 1.0).abs() > TOL_STATE {
            return Err(Error::NotUnitNorm(norm));
        }
        Ok(PureState(v))
    }

    pub fn normalized(v: [C64; 2]) -> Result<Self> {
        let norm = vec_norm(&v);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::NotUnitNorm(norm));
        }
        Ok(PureState([v[0] / norm, v[1] / norm]))
    }

    pub fn vector(&self) -> &[C64; 2] {
        &self.0
    }
}

pub fn vec_norm(v: &[C64; 2]) -> f64 {
    (v[0].norm_sqr() + v[1].norm_sqr()).sqrt()
}

/// `⟨x, y⟩`, antilinear in the first slot.
pub fn inner(x: &[C64; 2], y: &[C64; 2]) -> C64 {
    x[0].conj() * y[0] + x[1].conj() * y[1]
}

/// Positive semidefinite trace-one 2×2 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DensityState(Mat2);

impl DensityState {
    /// Validates at [`TOL_STATE`].
    pub fn new(m: Mat2) -> Result<Self> {
        Self::with_tolerance(m, TOL_STATE)
    }

    pub fn with_tolerance(m: Mat2, tol: f64) -> Result<Self> {
        let report = validate_state(&m, tol);
        if report.pass {
            Ok(DensityState(m))
        } else {
            Err(Error::InvalidState(report.to_string()))
        }
    }

    /// Wraps a matrix produced by a numerical scheme; invariants hold only
    /// up to that scheme's budget.
    pub fn from_matrix_unchecked(m: Mat2) -> Self {
        DensityState(m)
    }

    pub fn ground() -> Self {
        DensityState(Mat2::diag(1.0, 0.0))
    }

    pub fn excited() -> Self {
        DensityState(Mat2::diag(0.0, 1.0))
    }

    pub fn maximally_mixed() -> Self {
        DensityState(Mat2::diag(0.5, 0.5))
    }

    pub fn matrix(&self) -> &Mat2 {
        &self.0
    }

    pub fn into_matrix(self) -> Mat2 {
        self.0
    }

    pub fn purity_defect(&self) -> f64 {
        (self.0 * self.0 - self.0).frobenius_norm()
    }
}

/// Rank-one projector `|x⟩⟨x|`.
pub fn projector_from_vector(x: &PureState) -> Result<DensityState> {
    let v = x.vector();
    if (vec_norm(v) - 1.0).abs() > TOL_STATE {
        return Err(Error::NotUnitNorm(vec_norm(v)));
    }
    let m = Mat2([
        [v[0] * v[0].conj(), v[0] * v[1].conj()],
        [v[1] * v[0].conj(), v[1] * v[1].conj()],
    ]);
    Ok(DensityState(m))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StateReport {
    pub hermiticity_defect: f64,
    pub trace_defect: f64,
    pub min_eigenvalue: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl std::fmt::Display for StateReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "hermiticity defect {:.3e}, trace defect {:.3e}, min eigenvalue {:.3e} (tol {:.1e})",
            self.hermiticity_defect, self.trace_defect, self.min_eigenvalue, self.tolerance
        )
    }
}

pub fn validate_state(m: &Mat2, tol: f64) -> StateReport {
    let finite = m.is_finite();
    let hermiticity_defect = m.hermiticity_defect();
    let trace_defect = (m.trace() - ONE).norm();
    let min_eigenvalue = m.hermitian_eigenvalues()[0];
    let pass = finite && hermiticity_defect <= tol && trace_defect <= tol && min_eigenvalue >= -tol;
    StateReport {
        hermiticity_defect,
        trace_defect,
        min_eigenvalue,
        tolerance: tol,
        pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn adjoint_examples() {
        assert_eq!(Mat2::identity().adjoint(), Mat2::identity());
        let n = Mat2::from_real([[0.0, 1.0], [0.0, 0.0]]);
        assert_eq!(n.adjoint(), Mat2::from_real([[0.0, 0.0], [1.0, 0.0]]));
        let m = Mat2::new(c(0.0, 1.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0));
        assert_eq!(m.adjoint().get(0, 0), c(0.0, -1.0));
        assert_eq!(Mat4::identity().adjoint(), Mat4::identity());
    }

    #[test]
    fn trace_and_norm_examples() {
        assert_eq!(trace(&Mat2::identity()), c(2.0, 0.0));
        assert_eq!(
            trace(&Mat2::from_real([[0.0, 1.0], [0.0, 0.0]])),
            c(0.0, 0.0)
        );
        assert_eq!(frobenius_norm(&Mat2::zero()), 0.0);
        assert!((frobenius_norm(&Mat2::identity()) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            frobenius_norm(&Mat2::from_real([[3.0, 4.0], [0.0, 0.0]])),
            5.0
        );
        assert_eq!(trace(&Mat4::identity()), c(4.0, 0.0));
    }

    #[test]
    fn mat_exp_zero_is_identity() {
        let u = mat_exp(&Mat4::zero(), 3.0).unwrap();
        assert!((u - Mat4::identity()).frobenius_norm() < 1e-15);
    }

    #[test]
    fn mat_exp_diagonal_phase() {
        let mut m = Mat4::zero();
        m.0[0][0] = c(std::f64::consts::PI, 0.0);
        let u = mat_exp(&m, 1.0).unwrap();
        let mut expected = Mat4::identity();
        expected.0[0][0] = c(-1.0, 0.0);
        assert!((u - expected).frobenius_norm() < 1e-12);
    }

    #[test]
    fn mat_exp_matches_pauli_rotation() {
        // exp(i s σx⊗σz) = cos s I + i sin s σx⊗σz since the generator squares to I
        let sx = Mat2::from_real([[0.0, 1.0], [1.0, 0.0]]);
        let sz = Mat2::diag(1.0, -1.0);
        let g = Mat4::tensor(&sx, &sz);
        for s in [0.1, 1.0, 2.7, -9.5] {
            let u = mat_exp(&g, s).unwrap();
            let expected = Mat4::identity().scale_re(s.cos()) + g.scale(c(0.0, s.sin()));
            let rel = (u - expected).frobenius_norm() / expected.frobenius_norm();
            assert!(rel < 1e-12, "s = {s}: rel err {rel:e}");
        }
    }

    #[test]
    fn mat_exp_rejects_non_finite() {
        let mut m = Mat4::zero();
        m.0[1][2] = c(f64::NAN, 0.0);
        assert!(matches!(mat_exp(&m, 1.0), Err(Error::NonFinite(_))));
        assert!(mat_exp(&Mat4::zero(), f64::INFINITY).is_err());
    }

    #[test]
    fn partial_trace_examples() {
        let rho = Mat2::new(c(0.3, 0.0), c(0.1, 0.2), c(0.1, -0.2), c(0.7, 0.0));
        let beta = Mat2::diag(0.6, 0.4);
        let reduced = partial_trace_second(&Mat4::tensor(&rho, &beta));
        assert!((reduced - rho).frobenius_norm() < 1e-15);

        assert_eq!(
            partial_trace_second(&Mat4::identity()),
            Mat2::identity().scale_re(2.0)
        );

        // (|ΩΩ⟩ + |XX⟩)/√2 has amplitude 1/√2 at basis indices 0 and 3
        let amp = [0.5f64.sqrt(), 0.0, 0.0, 0.5f64.sqrt()];
        let mut proj = Mat4::zero();
        for i in 0..4 {
            for j in 0..4 {
                proj.0[i][j] = c(amp[i] * amp[j], 0.0);
            }
        }
        let reduced = partial_trace_second(&proj);
        assert!((reduced - Mat2::identity().scale_re(0.5)).frobenius_norm() < 1e-15);
    }

    #[test]
    fn projector_examples() {
        let p =
            projector_from_vector(&PureState::new([c(1.0, 0.0), c(0.0, 0.0)]).unwrap()).unwrap();
        assert_eq!(*p.matrix(), Mat2::diag(1.0, 0.0));
        let p =
            projector_from_vector(&PureState::new([c(0.0, 0.0), c(1.0, 0.0)]).unwrap()).unwrap();
        assert_eq!(*p.matrix(), Mat2::diag(0.0, 1.0));
        let h = 0.5f64.sqrt();
        let p = projector_from_vector(&PureState::new([c(h, 0.0), c(h, 0.0)]).unwrap()).unwrap();
        for z in p.matrix().entries() {
            assert!((z - c(0.5, 0.0)).norm() < 1e-15);
        }
        assert!(PureState::new([c(1.0, 0.0), c(1.0, 0.0)]).is_err());
    }

    #[test]
    fn validate_state_examples() {
        assert!(validate_state(&Mat2::identity().scale_re(0.5), 1e-6).pass);
        let r = validate_state(&Mat2::diag(1.0, 1e-3), 1e-6);
        assert!(!r.pass);
        assert!((r.trace_defect - 1e-3).abs() < 1e-12);
        let r = validate_state(&Mat2::diag(1.5, -0.5), 1e-6);
        assert!(!r.pass);
        assert!((r.min_eigenvalue + 0.5).abs() < 1e-15);
        let nan = Mat2::diag(f64::NAN, 1.0);
        assert!(!validate_state(&nan, 1e-6).pass);
    }

    #[test]
    fn closed_form_eigenvalues() {
        let m = Mat2::new(c(2.0, 0.0), c(1.0, 1.0), c(1.0, -1.0), c(-1.0, 0.0));
        let [lo, hi] = m.hermitian_eigenvalues();
        // characteristic polynomial λ² − λ − 4 = 0
        let disc = 17f64.sqrt();
        assert!((lo - (1.0 - disc) / 2.0).abs() < 1e-14);
        assert!((hi - (1.0 + disc) / 2.0).abs() < 1e-14);
    }

    fn arb_c64() -> impl Strategy<Value = C64> {
        (-2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b)| c(a, b))
    }

    fn arb_mat4() -> impl Strategy<Value = Mat4> {
        proptest::collection::vec(arb_c64(), 16).prop_map(|v| {
            let mut m = Mat4::zero();
            for (k, z) in v.into_iter().enumerate() {
                m.0[k / 4][k % 4] = z;
            }
            m
        })
    }

    proptest! {
        #[test]
        fn exp_of_hermitian_is_unitary(m in arb_mat4(), s in -10.0..10.0f64) {
            let h = (m + m.adjoint()).scale_re(0.5);
            let u = mat_exp(&h, s).unwrap();
            let defect = (u.adjoint() * u - Mat4::identity()).frobenius_norm();
            prop_assert!(defect <= 1e-10, "defect {defect:e}");
        }

        #[test]
        fn partial_trace_preserves_trace(m in arb_mat4(), x in arb_mat4()) {
            let sum = partial_trace_second(&(m + x));
            let split = partial_trace_second(&m) + partial_trace_second(&x);
            prop_assert!((sum - split).frobenius_norm() <= 1e-14);
            prop_assert!((partial_trace_second(&m).trace() - m.trace()).norm() <= 1e-14);
        }

        #[test]
        fn partial_trace_defining_property(m in arb_mat4(), x in arb_mat4()) {
            let x2 = x.block(0, 1);
            let lhs = (partial_trace_second(&m) * x2).trace();
            let rhs = (m * Mat4::tensor(&x2, &Mat2::identity())).trace();
            prop_assert!((lhs - rhs).norm() <= 1e-12);
        }

        #[test]
        fn projectors_are_idempotent(a in arb_c64(), b in arb_c64()) {
            prop_assume!(a.norm() + b.norm() > 1e-3);
            let x = PureState::normalized([a, b]).unwrap();
            let p = projector_from_vector(&x).unwrap();
            prop_assert!(validate_state(p.matrix(), TOL_STATE).pass);
            prop_assert!(p.purity_defect() <= TOL_STATE);
        }
    }
}
