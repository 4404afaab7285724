//! One realization of a Poisson random measure on `[0,T] × [0,K]` with
//! Lebesgue intensity `dt ⊗ dx`, sampled as a rate-`K` Poisson process of
//! times carrying i.i.d. uniform marks.
//!
//! Every process in the crate reads its randomness from a realization, so
//! several processes driven by the same realization are coupled pathwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::qmatrix::{Mat2, TOL_PROB};

/// Seed plus stream index of a ChaCha8 generator. Streams with the same
/// seed are independent, so paths can be generated in any order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

/// Disjoint stream ranges for the different consumers of one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamDomain {
    Realization = 0,
    DirectChain = 1,
    Bootstrap = 2,
    Audit = 3,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// Stream for path `index` of the given domain.
    pub fn for_path(seed: u64, domain: StreamDomain, index: u64) -> Self {
        RngStream {
            seed,
            stream: ((domain as u64) << 48) | (index & ((1 << 48) - 1)),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkedPoint {
    pub time: f64,
    pub mark: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonRealization {
    horizon: f64,
    height: f64,
    points: Vec<MarkedPoint>,
}

const MAGIC: &[u8; 4] = b"PRM1";

impl PoissonRealization {
    /// Checks `0 < τ_1 < τ_2 < … < T` and `ξ_i ∈ [0, K]`.
    pub fn new(horizon: f64, height: f64, points: Vec<MarkedPoint>) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon {horizon} must be positive"
            )));
        }
        if !(height.is_finite() && height >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "height {height} must be non-negative"
            )));
        }
        let mut prev = 0.0;
        for (i, p) in points.iter().enumerate() {
            if !(p.time > prev && p.time < horizon) {
                return Err(Error::InvalidArgument(format!(
                    "point {i}: time {} not strictly inside ({prev}, {horizon})",
                    p.time
                )));
            }
            if !(p.mark >= 0.0 && p.mark <= height) {
                return Err(Error::InvalidArgument(format!(
                    "point {i}: mark {} outside [0, {height}]",
                    p.mark
                )));
            }
            prev = p.time;
        }
        Ok(PoissonRealization {
            horizon,
            height,
            points,
        })
    }

    pub fn empty(horizon: f64, height: f64) -> Result<Self> {
        Self::new(horizon, height, Vec::new())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn points(&self) -> &[MarkedPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points with `t0 ≤ τ < t1`.
    pub fn points_in(&self, t0: f64, t1: f64) -> &[MarkedPoint] {
        let lo = self.points.partition_point(|p| p.time < t0);
        let hi = self.points.partition_point(|p| p.time < t1);
        &self.points[lo..hi.max(lo)]
    }

    /// Points with `t0 ≤ τ ≤ t1`.
    pub fn points_in_closed(&self, t0: f64, t1: f64) -> &[MarkedPoint] {
        let lo = self.points.partition_point(|p| p.time < t0);
        let hi = self.points.partition_point(|p| p.time <= t1);
        &self.points[lo..hi.max(lo)]
    }

    /// `#{i : t0 < τ_i ≤ t1, ξ_i ≤ h(τ_i)}`. A height at or below the
    /// zero-probability threshold accepts nothing.
    pub fn count_under_curve<F: Fn(f64) -> f64>(&self, t0: f64, t1: f64, height_fn: F) -> usize {
        let lo = self.points.partition_point(|p| p.time <= t0);
        let hi = self.points.partition_point(|p| p.time <= t1);
        self.points[lo..hi.max(lo)]
            .iter()
            .filter(|p| {
                let h = height_fn(p.time);
                h > TOL_PROB && p.mark <= h
            })
            .count()
    }

    /// `#{i : t0 ≤ τ_i < t1, u0 ≤ ξ_i ≤ u1}`
    pub fn count_in_rectangle(&self, t0: f64, t1: f64, u0: f64, u1: f64) -> usize {
        self.points_in(t0, t1)
            .iter()
            .filter(|p| p.mark >= u0 && p.mark <= u1)
            .count()
    }

    /// Little-endian record: magic `PRM1`, `T: f64`, `K: f64`,
    /// `count: u64`, then `count` pairs `(τ: f64, ξ: f64)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 16 * self.points.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.horizon.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&(self.points.len() as u64).to_le_bytes());
        for p in &self.points {
            out.extend_from_slice(&p.time.to_le_bytes());
            out.extend_from_slice(&p.mark.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if rest.len() < n {
                return Err(Error::Decode(format!(
                    "truncated record while reading {what}"
                )));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        if take(4, "magic")? != MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let f = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
        let horizon = f(take(8, "horizon")?);
        let height = f(take(8, "height")?);
        let count = u64::from_le_bytes(take(8, "count")?.try_into().expect("8 bytes"));
        let remaining = rest.len() as u64;
        if count.checked_mul(16) != Some(remaining) {
            return Err(Error::Decode(format!(
                "point count {count} does not match {remaining} payload bytes"
            )));
        }
        let points = rest
            .chunks_exact(16)
            .map(|c| MarkedPoint {
                time: f(&c[..8]),
                mark: f(&c[8..]),
            })
            .collect();
        PoissonRealization::new(horizon, height, points).map_err(|e| Error::Decode(e.to_string()))
    }

    /// SHA-256 of the binary record, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// Sharp bound `λ_max(C†C)` on `Tr[CρC†]` over states.
pub fn intensity_bound(c: &Mat2) -> f64 {
    use crate::qmatrix::ComplexMatrix;
    (c.adjoint() * *c).hermitian_eigenvalues()[1].max(0.0)
}

/// Rate-`K` homogeneous Poisson times on `[0,T]` with uniform marks on `[0,K]`.
pub fn sample_realization(
    height: f64,
    horizon: f64,
    stream: RngStream,
) -> Result<PoissonRealization> {
    if !(height.is_finite() && height >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "height {height} must be non-negative"
        )));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} must be positive"
        )));
    }
    let mut points = Vec::new();
    if height > 0.0 {
        let mut rng = stream.rng();
        let mut t = 0.0;
        loop {
            // 1 − U ∈ (0, 1]
            let u: f64 = rng.random();
            let gap = -(1.0 - u).ln() / height;
            let next = t + gap;
            if next >= horizon {
                break;
            }
            let mark = rng.random::<f64>() * height;
            if next > t {
                points.push(MarkedPoint { time: next, mark });
            }
            t = next;
        }
    }
    PoissonRealization::new(horizon, height, points)
}
