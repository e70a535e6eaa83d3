//! Gaussian members of the exponential family, fitted by moment matching.
//!
//! Every density estimate in this crate bottoms out here: a node of the
//! incremental tree keeps a running mean of sufficient statistics and turns
//! it into a full-covariance Gaussian on demand.  The statistic vector for a
//! point `x` is `[x, upper-triangle of x xᵀ]`, so matching its expectation
//! against the running mean recovers the sample mean and second moments in
//! one pass, without storing the history.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale factor for the diagonal regularizer added to every fitted covariance.
///
/// The floor added is `COV_EPS_SCALE * max(1, trace/d)`, which keeps the
/// Cholesky factorization well-posed for duplicated or collinear samples
/// while staying proportionate to the data scale.
pub const COV_EPS_SCALE: f64 = 1e-6;

/// Number of observations a fit needs before leaving the cold-start prior.
pub fn min_fit_count(dim: usize) -> u64 {
    (dim + 2) as u64
}

/// Length of the sufficient-statistic vector for `dim`-dimensional samples.
pub fn stat_dim(dim: usize) -> usize {
    dim + dim * (dim + 1) / 2
}

fn check_finite(x: &DVector<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{:?}", x.as_slice())))
    }
}

/// Sufficient statistics of a single sample: the sample itself followed by
/// the upper triangle of its outer product, row-major.
///
/// For `x = (1, 2)` this yields `(1, 2, 1, 2, 4)`.
pub fn sufficient_stats(x: &DVector<f64>) -> Result<DVector<f64>> {
    check_finite(x)?;
    let d = x.len();
    let mut s = DVector::zeros(stat_dim(d));
    s.rows_mut(0, d).copy_from(x);
    let mut k = d;
    for i in 0..d {
        for j in i..d {
            s[k] = x[i] * x[j];
            k += 1;
        }
    }
    Ok(s)
}

/// Running mean of sufficient statistics over the samples seen so far.
///
/// The update is the literal recursion `m_t = (m_{t-1} (t-1) + s_t) / t`, so
/// after `t` samples the state equals the arithmetic mean of their
/// statistics and the fit below never has to revisit the stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SufficientStatsAccumulator {
    sample_dim: usize,
    mean: DVector<f64>,
    count: u64,
}

impl SufficientStatsAccumulator {
    /// Empty accumulator for `dim`-dimensional samples.
    pub fn new(dim: usize) -> Self {
        SufficientStatsAccumulator {
            sample_dim: dim,
            mean: DVector::zeros(stat_dim(dim)),
            count: 0,
        }
    }

    pub fn sample_dim(&self) -> usize {
        self.sample_dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Mean statistic vector; all zeros while the accumulator is empty.
    pub fn mean_stats(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Fold one statistic vector (as produced by [`sufficient_stats`]) into
    /// the running mean.
    pub fn accumulate(&mut self, stats: &DVector<f64>) -> Result<()> {
        if stats.len() != stat_dim(self.sample_dim) {
            return Err(Error::DimensionMismatch {
                expected: stat_dim(self.sample_dim),
                got: stats.len(),
            });
        }
        check_finite(stats)?;
        self.count += 1;
        let t = self.count as f64;
        self.mean = (&self.mean * (t - 1.0) + stats) / t;
        Ok(())
    }

    /// Accumulate the statistics of a raw sample.
    pub fn accumulate_sample(&mut self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.sample_dim {
            return Err(Error::DimensionMismatch {
                expected: self.sample_dim,
                got: x.len(),
            });
        }
        self.accumulate(&sufficient_stats(x)?)
    }
}

/// A full-covariance Gaussian density, stored together with the quantities
/// needed to evaluate it quickly and to express it in natural-parameter form.
#[derive(Debug, Clone)]
pub struct GaussianMember {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    /// `-(d/2) ln 2π - ½ ln |Σ|`; the log-density at `x` is this minus half
    /// the Mahalanobis form.
    log_norm_const: f64,
    log_det: f64,
    chol_l: DMatrix<f64>,
}

impl GaussianMember {
    /// Build a member from a mean and covariance.
    ///
    /// The covariance is symmetrized and receives a diagonal floor of
    /// `COV_EPS_SCALE * max(1, trace/d)`; the floor escalates in the rare
    /// case the factorization still fails, so construction cannot panic on
    /// finite inputs.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        let d = mean.len();
        let sym = 0.5 * (&covariance + covariance.transpose());
        let scale = (sym.trace() / d as f64).max(1.0);
        let mut eps = COV_EPS_SCALE * scale;
        for _ in 0..64 {
            let mut reg = sym.clone();
            for i in 0..d {
                reg[(i, i)] += eps;
            }
            if let Some(chol) = reg.clone().cholesky() {
                return Self::from_factored(mean, reg, chol);
            }
            eps *= 10.0;
        }
        // Unreachable for finite input; fall back to the unit ball.
        Self::standard(d)
    }

    /// The cold-start prior: a standard normal, with no regularizer applied.
    pub fn standard(dim: usize) -> Self {
        let cov = DMatrix::identity(dim, dim);
        let chol = cov.clone().cholesky().expect("identity is PD");
        Self::from_factored(DVector::zeros(dim), cov, chol)
    }

    fn from_factored(
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ) -> Self {
        let d = mean.len();
        let chol_l = chol.l();
        let log_det = 2.0 * (0..d).map(|i| chol_l[(i, i)].ln()).sum::<f64>();
        let precision = chol.inverse();
        let log_norm_const =
            -0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det;
        GaussianMember {
            mean,
            covariance,
            precision,
            log_norm_const,
            log_det,
            chol_l,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Covariance after symmetrization and the diagonal floor.
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn log_norm_const(&self) -> f64 {
        self.log_norm_const
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        check_finite(x)
    }

    /// Natural log of the density at `x`.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_point(x)?;
        let centered = x - &self.mean;
        let quad = centered.dot(&(&self.precision * &centered));
        Ok(self.log_norm_const - 0.5 * quad)
    }

    /// Natural parameters, laid out to pair with [`sufficient_stats`]:
    /// `Σ⁻¹μ` on the linear block, then `-½ P_ii` diagonal and `-P_ij`
    /// off-diagonal entries of the precision on the quadratic block.
    pub fn natural_parameter(&self) -> DVector<f64> {
        let d = self.dim();
        let mut eta = DVector::zeros(stat_dim(d));
        let lin = &self.precision * &self.mean;
        eta.rows_mut(0, d).copy_from(&lin);
        let mut k = d;
        for i in 0..d {
            for j in i..d {
                eta[k] = if i == j {
                    -0.5 * self.precision[(i, i)]
                } else {
                    -self.precision[(i, j)]
                };
                k += 1;
            }
        }
        eta
    }

    /// Log-partition function for the natural parameterization above.
    pub fn log_partition(&self) -> f64 {
        let quad = self.mean.dot(&(&self.precision * &self.mean));
        0.5 * quad
            + 0.5 * self.log_det
            + 0.5 * (self.dim() as f64) * (2.0 * std::f64::consts::PI).ln()
    }

    /// Self-information loss `-⟨η, s(x)⟩ + A(η)`, identical to
    /// `-log_density(x)` up to float roundoff.
    pub fn point_loss(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_point(x)?;
        let s = sufficient_stats(x)?;
        Ok(-self.natural_parameter().dot(&s) + self.log_partition())
    }

    /// Lower Cholesky factor of the covariance, for sampling and tests.
    pub fn chol_l(&self) -> &DMatrix<f64> {
        &self.chol_l
    }
}

/// Maximum-likelihood fit from accumulated statistics by moment matching.
///
/// With fewer than `min_fit_count(d)` samples the cold-start prior (a
/// standard normal) is returned; otherwise the running mean of statistics is
/// unpacked into the sample mean and second moments, and the covariance
/// `E[xxᵀ] - μμᵀ` is floored as described on [`GaussianMember::new`].
pub fn fit_moment_match(acc: &SufficientStatsAccumulator) -> GaussianMember {
    let d = acc.sample_dim();
    if acc.count() < min_fit_count(d) {
        return GaussianMember::standard(d);
    }
    let m = acc.mean_stats();
    let mean = DVector::from_fn(d, |i, _| m[i]);
    let mut second = DMatrix::zeros(d, d);
    let mut k = d;
    for i in 0..d {
        for j in i..d {
            second[(i, j)] = m[k];
            second[(j, i)] = m[k];
            k += 1;
        }
    }
    let cov = second - &mean * mean.transpose();
    GaussianMember::new(mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn stats_layout_matches_upper_triangle() {
        let s = sufficient_stats(&vec2(1.0, 2.0)).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 2.0, 1.0, 2.0, 4.0]);

        let s = sufficient_stats(&DVector::from_vec(vec![3.0])).unwrap();
        assert_eq!(s.as_slice(), &[3.0, 9.0]);

        let s = sufficient_stats(&vec2(0.0, 0.0)).unwrap();
        assert!(s.iter().all(|v| *v == 0.0));
        assert_eq!(s.len(), stat_dim(2));
    }

    #[test]
    fn stats_reject_non_finite() {
        assert!(sufficient_stats(&vec2(f64::NAN, 0.0)).is_err());
        assert!(sufficient_stats(&vec2(0.0, f64::INFINITY)).is_err());
    }

    #[test]
    fn accumulator_tracks_arithmetic_mean() {
        let mut acc = SufficientStatsAccumulator::new(2);
        assert_eq!(acc.count(), 0);
        assert!(acc.mean_stats().iter().all(|v| *v == 0.0));

        let xs = [vec2(0.0, 0.0), vec2(2.0, 0.0), vec2(0.0, 2.0), vec2(2.0, 2.0)];
        for x in &xs {
            acc.accumulate_sample(x).unwrap();
        }
        assert_eq!(acc.count(), 4);
        // Mean of the statistics: mean (1,1), second moments (2, 1, 2).
        let m = acc.mean_stats();
        assert_relative_eq!(m[0], 1.0);
        assert_relative_eq!(m[1], 1.0);
        assert_relative_eq!(m[2], 2.0);
        assert_relative_eq!(m[3], 1.0);
        assert_relative_eq!(m[4], 2.0);
    }

    #[test]
    fn accumulator_rejects_wrong_dimension() {
        let mut acc = SufficientStatsAccumulator::new(2);
        let err = acc
            .accumulate(&DVector::from_vec(vec![1.0, 2.0, 3.0]))
            .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 5, got: 3 }));
    }

    #[test]
    fn fit_four_corner_points() {
        let mut acc = SufficientStatsAccumulator::new(2);
        for x in [vec2(0.0, 0.0), vec2(2.0, 0.0), vec2(0.0, 2.0), vec2(2.0, 2.0)] {
            acc.accumulate_sample(&x).unwrap();
        }
        let g = fit_moment_match(&acc);
        assert_relative_eq!(g.mean()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(g.mean()[1], 1.0, epsilon = 1e-12);
        // Population covariance is the identity; the diagonal floor adds
        // COV_EPS_SCALE * max(1, trace/d) = 1e-6.
        assert_relative_eq!(g.covariance()[(0, 0)], 1.0 + 1e-6, epsilon = 1e-9);
        assert_relative_eq!(g.covariance()[(1, 1)], 1.0 + 1e-6, epsilon = 1e-9);
        assert_abs_diff_eq!(g.covariance()[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn fit_duplicate_points_hits_variance_floor() {
        let mut acc = SufficientStatsAccumulator::new(1);
        for _ in 0..4 {
            acc.accumulate_sample(&DVector::from_vec(vec![1.0])).unwrap();
        }
        let g = fit_moment_match(&acc);
        assert_relative_eq!(g.mean()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(g.covariance()[(0, 0)], 1e-6, epsilon = 1e-6);
        assert!(g.log_density(&DVector::from_vec(vec![1.0])).unwrap().is_finite());
    }

    #[test]
    fn fit_before_min_count_returns_cold_start_prior() {
        let mut acc = SufficientStatsAccumulator::new(2);
        for x in [vec2(5.0, 5.0), vec2(6.0, 5.0), vec2(5.0, 6.0)] {
            acc.accumulate_sample(&x).unwrap();
        }
        assert!(acc.count() < min_fit_count(2));
        let g = fit_moment_match(&acc);
        let ld = g.log_density(&vec2(0.0, 0.0)).unwrap();
        assert_relative_eq!(ld, -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn standard_normal_log_density_values() {
        let g1 = GaussianMember::standard(1);
        let ld = g1.log_density(&DVector::from_vec(vec![0.0])).unwrap();
        assert_relative_eq!(ld, -0.9189385332046727, epsilon = 1e-12);

        let g2 = GaussianMember::standard(2);
        let ld = g2.log_density(&vec2(0.0, 0.0)).unwrap();
        assert_relative_eq!(ld, -1.8378770664093453, epsilon = 1e-12);
    }

    #[test]
    fn log_density_is_translation_invariant() {
        let shifted = GaussianMember::new(vec2(3.0, -1.0), DMatrix::identity(2, 2));
        let centered = GaussianMember::new(vec2(0.0, 0.0), DMatrix::identity(2, 2));
        for v in [vec2(0.1, 0.2), vec2(-1.0, 0.5), vec2(2.0, 2.0)] {
            let a = shifted.log_density(&(vec2(3.0, -1.0) + &v)).unwrap();
            let b = centered.log_density(&v).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn log_density_rejects_bad_points() {
        let g = GaussianMember::standard(2);
        assert!(g.log_density(&DVector::from_vec(vec![1.0])).is_err());
        assert!(g.log_density(&vec2(f64::NAN, 0.0)).is_err());
    }

    fn random_member(rng: &mut ChaCha8Rng, d: usize) -> GaussianMember {
        let mean = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
        GaussianMember::new(mean, cov)
    }

    #[test]
    fn point_loss_equals_negative_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..1000 {
            let d = 1 + trial % 3;
            let g = random_member(&mut rng, d);
            let x = DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0));
            let loss = g.point_loss(&x).unwrap();
            let ld = g.log_density(&x).unwrap();
            assert_relative_eq!(loss, -ld, max_relative = 1e-9, epsilon = 1e-9);
        }
    }

    #[test]
    fn moment_match_agrees_with_direct_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200;
        let mut acc = SufficientStatsAccumulator::new(2);
        let mut xs = Vec::new();
        for _ in 0..n {
            let x = vec2(
                1.5 + 0.7 * rng.sample::<f64, _>(StandardNormal),
                -0.5 + 1.2 * rng.sample::<f64, _>(StandardNormal),
            );
            acc.accumulate_sample(&x).unwrap();
            xs.push(x);
        }
        let g = fit_moment_match(&acc);

        let mean = xs.iter().fold(vec2(0.0, 0.0), |a, x| a + x) / n as f64;
        let mut cov = DMatrix::zeros(2, 2);
        for x in &xs {
            let c = x - &mean;
            cov += &c * c.transpose();
        }
        cov /= n as f64;

        assert_relative_eq!(g.mean()[0], mean[0], max_relative = 1e-8);
        assert_relative_eq!(g.mean()[1], mean[1], max_relative = 1e-8);
        for i in 0..2 {
            for j in 0..2 {
                // The fit works from raw second moments, the oracle from
                // centered sums; they agree up to roundoff plus the floor.
                assert_abs_diff_eq!(
                    g.covariance()[(i, j)],
                    cov[(i, j)],
                    epsilon = 1e-5
                );
            }
        }
    }

    #[test]
    fn fitted_member_minimizes_accumulated_point_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut acc = SufficientStatsAccumulator::new(2);
        let mut xs = Vec::new();
        for _ in 0..150 {
            let x = vec2(
                rng.sample::<f64, _>(StandardNormal),
                2.0 + 0.5 * rng.sample::<f64, _>(StandardNormal),
            );
            acc.accumulate_sample(&x).unwrap();
            xs.push(x);
        }
        let fitted = fit_moment_match(&acc);
        let total = |g: &GaussianMember| -> f64 {
            xs.iter().map(|x| g.point_loss(x).unwrap()).sum()
        };
        let base = total(&fitted);
        for _ in 0..100 {
            let dm = vec2(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let jitter: f64 = rng.random_range(0.7..1.4);
            let perturbed = GaussianMember::new(
                fitted.mean() + dm,
                fitted.covariance() * jitter,
            );
            assert!(total(&perturbed) >= base - 1e-9);
        }
    }

    #[test]
    fn density_integrates_to_one_on_a_grid() {
        let g = GaussianMember::new(
            vec2(0.5, -0.2),
            DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]),
        );
        let step = 0.02;
        let mut mass = 0.0;
        let mut x = -4.0;
        while x < 5.0 {
            let mut y = -4.0;
            while y < 4.0 {
                mass += g.log_density(&vec2(x, y)).unwrap().exp() * step * step;
                y += step;
            }
            x += step;
        }
        assert_relative_eq!(mass, 1.0, max_relative = 0.02);
    }

    proptest! {
        #[test]
        fn accumulation_is_order_invariant(
            points in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = points.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

            let mut a = SufficientStatsAccumulator::new(2);
            let mut b = SufficientStatsAccumulator::new(2);
            for (p, q) in points.iter().zip(&shuffled) {
                a.accumulate_sample(&vec2(p.0, p.1)).unwrap();
                b.accumulate_sample(&vec2(q.0, q.1)).unwrap();
            }
            for k in 0..stat_dim(2) {
                prop_assert!(
                    (a.mean_stats()[k] - b.mean_stats()[k]).abs()
                        <= 1e-9 * a.mean_stats()[k].abs().max(1.0)
                );
            }
        }
    }
}
