//! Monte Carlo summaries, rate fits and the homogeneity test.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::qmatrix::{Mat2, C64};

/// Running mean and variance (Welford).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Moments::default();
        xs.iter().for_each(|&x| m.push(x));
        m
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Entrywise moments of a complex 2×2 sample; real and imaginary parts are
/// tracked separately.
#[derive(Clone, Copy, Debug, Default)]
pub struct MatMoments {
    parts: [[Moments; 2]; 4],
}

impl MatMoments {
    pub fn push(&mut self, m: &Mat2) {
        for (slot, z) in self.parts.iter_mut().zip(m.entries()) {
            slot[0].push(z.re);
            slot[1].push(z.im);
        }
    }

    fn collect(&self, f: impl Fn(&Moments) -> f64) -> Mat2 {
        let e: Vec<C64> = self
            .parts
            .iter()
            .map(|p| C64::new(f(&p[0]), f(&p[1])))
            .collect();
        Mat2::new(e[0], e[1], e[2], e[3])
    }

    pub fn mean(&self) -> Mat2 {
        self.collect(Moments::mean)
    }

    /// Standard errors: real part of each entry holds the stderr of the
    /// real parts, imaginary part that of the imaginary parts.
    pub fn stderr(&self) -> Mat2 {
        self.collect(Moments::stderr)
    }
}

/// Runs `f(0..count)` on a rayon pool and returns results in index order.
/// `workers = None` uses the global pool.
pub fn par_map_indexed<T, F>(count: u64, workers: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let run = || {
        (0..count)
            .into_par_iter()
            .map(&f)
            .collect::<Result<Vec<T>>>()
    };
    match workers {
        None => run(),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?
            .install(run),
    }
}

/// Power-law fit `E[Y] = exp(a) · n^b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_stderr: f64,
    /// 95% interval for the slope.
    pub ci_low: f64,
    pub ci_high: f64,
    pub dispersion: f64,
}

/// Per-n summary entering [`fit_rate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatePoint {
    pub n: f64,
    pub mean: f64,
    pub variance: f64,
    pub samples: u64,
}

impl RatePoint {
    pub fn from_moments(n: f64, m: &Moments) -> Self {
        RatePoint {
            n,
            mean: m.mean(),
            variance: m.variance(),
            samples: m.count(),
        }
    }
}

/// Quasi-Poisson log-link regression of per-path values on `log n`, fitted
/// by iteratively reweighted least squares from the per-n sufficient
/// statistics. Zero sample means are allowed. Returns `None` when all means
/// vanish or fewer than two distinct `n` carry data.
pub fn fit_rate(points: &[RatePoint]) -> Option<RateFit> {
    let pts: Vec<&RatePoint> = points.iter().filter(|p| p.samples > 0).collect();
    if pts.len() < 2 || pts.iter().all(|p| p.mean <= 0.0) {
        return None;
    }
    if pts
        .iter()
        .any(|p| !(p.mean >= 0.0 && p.mean.is_finite() && p.n > 0.0))
    {
        return None;
    }
    let x: Vec<f64> = pts.iter().map(|p| p.n.ln()).collect();
    let xbar = x.iter().sum::<f64>() / x.len() as f64;
    let xc: Vec<f64> = x.iter().map(|v| v - xbar).collect();
    let total: f64 = pts.iter().map(|p| p.samples as f64 * p.mean).sum();
    let weight: f64 = pts.iter().map(|p| p.samples as f64).sum();
    let (mut a, mut b) = ((total / weight).ln(), 0.0);
    let mut info = [[0.0; 2]; 2];
    for _ in 0..200 {
        let mut grad = [0.0; 2];
        info = [[0.0; 2]; 2];
        for (p, &xi) in pts.iter().zip(&xc) {
            let m = p.samples as f64;
            let mu = (a + b * xi).exp();
            let r = m * (p.mean - mu);
            grad[0] += r;
            grad[1] += r * xi;
            info[0][0] += m * mu;
            info[0][1] += m * mu * xi;
            info[1][1] += m * mu * xi * xi;
        }
        info[1][0] = info[0][1];
        let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
        if !(det > 0.0 && det.is_finite()) {
            return None;
        }
        let da = (info[1][1] * grad[0] - info[0][1] * grad[1]) / det;
        let db = (info[0][0] * grad[1] - info[1][0] * grad[0]) / det;
        // damp the step to keep exp(a + b x) finite on the first iterations
        let scale = 1.0f64.min(5.0 / (da.abs() + db.abs()).max(1e-300));
        a += da * scale;
        b += db * scale;
        if (da.abs() + db.abs()) * scale < 1e-12 {
            break;
        }
    }
    let mut pearson = 0.0;
    let mut dof = -2.0;
    for (p, &xi) in pts.iter().zip(&xc) {
        let m = p.samples as f64;
        let mu = (a + b * xi).exp();
        let ss = (m - 1.0).max(0.0) * p.variance + m * (p.mean - mu).powi(2);
        pearson += ss / mu;
        dof += m;
    }
    let dispersion = if dof > 0.0 { pearson / dof } else { f64::NAN };
    let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
    let slope_stderr = (dispersion * info[0][0] / det).sqrt();
    Some(RateFit {
        intercept: a - b * xbar,
        slope: b,
        slope_stderr,
        ci_low: b - 1.96 * slope_stderr,
        ci_high: b + 1.96 * slope_stderr,
        dispersion,
    })
}

/// Ordinary least squares of `log y` on `log n`; requires positive `y`.
pub fn loglog_ols(ns: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if ns.len() != ys.len() || ns.len() < 2 || ys.iter().any(|&y| y <= 0.0) {
        return None;
    }
    let x: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let y: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / k, y.iter().sum::<f64>() / k);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

/// Fraction of bootstrap resamples (over paths, shared between the two
/// columns) in which the mean of `late` is strictly below the mean of
/// `early`.
pub fn bootstrap_decrease<R: Rng + ?Sized>(
    early: &[f64],
    late: &[f64],
    resamples: usize,
    rng: &mut R,
) -> f64 {
    assert_eq!(early.len(), late.len(), "paired samples");
    let m = early.len();
    if m == 0 || resamples == 0 {
        return 0.0;
    }
    let mut wins = 0usize;
    for _ in 0..resamples {
        let (mut se, mut sl) = (0.0, 0.0);
        for _ in 0..m {
            let j = rng.random_range(0..m);
            se += early[j];
            sl += late[j];
        }
        if sl < se {
            wins += 1;
        }
    }
    wins as f64 / resamples as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Chi-square homogeneity test of two samples over a common set of cells.
/// Cells empty in both samples are dropped.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> Result<ChiSquareResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(
            "cell counts differ in length".into(),
        ));
    }
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let total = na + nb;
    let mut statistic = 0.0;
    let mut cells = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        cells += 1;
        let (ea, eb) = (na * col / total, nb * col / total);
        statistic += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    let dof = cells.saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        let dist =
            ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        (1.0 - dist.cdf(statistic)).clamp(0.0, 1.0)
    };
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poisson::RngStream;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Poisson};

    #[test]
    fn moments_match_two_pass() {
        let xs = [1.0, 4.0, 2.5, -3.0, 7.25];
        let m = Moments::from_slice(&xs);
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((m.mean() - mean).abs() < 1e-14);
        assert!((m.variance() - var).abs() < 1e-12);
        assert!((m.stderr() - (var / 5.0).sqrt()).abs() < 1e-12);
        assert_eq!(Moments::from_slice(&[3.0]).stderr(), 0.0);
    }

    #[test]
    fn par_map_keeps_order_for_any_pool() {
        let f = |i: u64| -> Result<u64> { Ok(i * i) };
        let one = par_map_indexed(1000, Some(1), f).unwrap();
        let many = par_map_indexed(1000, Some(7), f).unwrap();
        assert_eq!(one, many);
        assert_eq!(one[999], 999 * 999);
        let err = par_map_indexed(10, None, |i| {
            if i == 3 {
                Err(Error::Model("x".into()))
            } else {
                Ok(i)
            }
        });
        assert!(err.is_err());
    }

    #[test]
    fn exact_power_law_is_recovered() {
        let pts: Vec<RatePoint> = [8.0, 16.0, 32.0, 64.0]
            .iter()
            .map(|&n: &f64| RatePoint {
                n,
                mean: 3.0 * n.powf(-1.0),
                variance: 1e-6,
                samples: 100,
            })
            .collect();
        let fit = fit_rate(&pts).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-9);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-9);
        assert!(fit.ci_low <= -1.0 && fit.ci_high >= -1.0);
        let (_, ols) = loglog_ols(
            &[8.0, 16.0, 32.0, 64.0],
            &pts.iter().map(|p| p.mean).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((ols + 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_handles_zero_means() {
        let mk = |n: f64, mean: f64| RatePoint {
            n,
            mean,
            variance: mean,
            samples: 2000,
        };
        let fit = fit_rate(&[mk(8.0, 0.05), mk(64.0, 0.006), mk(512.0, 0.0)]).unwrap();
        assert!(fit.slope < -0.5 && fit.slope.is_finite());
        assert!(fit_rate(&[mk(8.0, 0.0), mk(16.0, 0.0)]).is_none());
        assert!(loglog_ols(&[8.0, 512.0], &[0.05, 0.0]).is_none());
    }

    #[test]
    fn poisson_counts_give_the_right_slope() {
        let mut rng = RngStream::new(3, 0).rng();
        let ns = [8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0];
        let pts: Vec<RatePoint> = ns
            .iter()
            .map(|&n: &f64| {
                let lambda = 900.0 / n;
                let dist = Poisson::new(lambda).unwrap();
                let xs: Vec<f64> = (0..50).map(|_| dist.sample(&mut rng)).collect();
                RatePoint::from_moments(n, &Moments::from_slice(&xs))
            })
            .collect();
        let fit = fit_rate(&pts).unwrap();
        assert!(fit.ci_low <= -1.0 && -1.0 <= fit.ci_high, "{fit:?}");
        assert!((fit.dispersion - 1.0).abs() < 0.3);
    }

    #[test]
    fn bootstrap_detects_clear_decrease() {
        let mut rng = RngStream::new(9, 0).rng();
        let early: Vec<f64> = (0..500).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
        let late: Vec<f64> = early.iter().map(|x| x * 0.1).collect();
        assert_eq!(bootstrap_decrease(&early, &late, 200, &mut rng), 1.0);
        assert_eq!(bootstrap_decrease(&late, &early, 200, &mut rng), 0.0);
    }

    #[test]
    fn chi_square_examples() {
        let r = chi_square_homogeneity(&[50, 50, 0], &[50, 50, 0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.dof, 1);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        let r = chi_square_homogeneity(&[100, 0], &[0, 100]).unwrap();
        assert!(r.p_value < 1e-10);
        assert_eq!(chi_square_homogeneity(&[10], &[20]).unwrap().p_value, 1.0);
        assert!(chi_square_homogeneity(&[1, 2], &[0, 0]).is_err());
        assert!(chi_square_homogeneity(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn chi_square_p_values_are_calibrated() {
        let mut rng = RngStream::new(21, 0).rng();
        let probs = [0.5, 0.3, 0.15, 0.05];
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut c = [0u64; 4];
            for _ in 0..400 {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut idx = 3;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                c[idx] += 1;
            }
            c
        };
        let rejections = (0..400)
            .filter(|_| {
                let (a, b) = (draw(&mut rng), draw(&mut rng));
                chi_square_homogeneity(&a, &b).unwrap().p_value < 0.05
            })
            .count();
        // nominal 20 of 400
        assert!((5..=40).contains(&rejections), "{rejections} rejections");
    }

    proptest! {
        #[test]
        fn slope_is_scale_invariant(scale in 1e-6..1e6f64, b in -2.0..0.0f64) {
            let mk = |s: f64| -> Vec<RatePoint> {
                [8.0, 32.0, 128.0, 512.0].iter().enumerate().map(|(i, &n): (usize, &f64)| RatePoint {
                    n,
                    mean: s * n.powf(b) * (1.0 + 0.1 * (i as f64 - 1.5)),
                    variance: s * s * 1e-3,
                    samples: 100,
                }).collect()
            };
            let f1 = fit_rate(&mk(1.0)).unwrap();
            let f2 = fit_rate(&mk(scale)).unwrap();
            prop_assert!((f1.slope - f2.slope).abs() < 1e-8);
        }

        #[test]
        fn mat_moments_track_entries(vals in proptest::collection::vec(-5.0..5.0f64, 2..20)) {
            let mut mm = MatMoments::default();
            for &v in &vals {
                mm.push(&Mat2::new(C64::new(v, -v), C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(2.0 * v, 0.0)));
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let m = mm.mean();
            prop_assert!((m.get(0, 0).re - mean).abs() < 1e-12);
            prop_assert!((m.get(0, 0).im + mean).abs() < 1e-12);
            prop_assert!((m.get(1, 0).re - 1.0).abs() < 1e-12);
            prop_assert_eq!(mm.stderr().get(1, 0), C64::new(0.0, 0.0));
        }
    }
}
