use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::MetricsError;
use crate::embeddings::{EmbeddingStore, EmbeddingVector};

const EIGEN_EPS: f64 = 1e-14;
const EIGEN_MAX_ITERS: usize = 10_000;

/// Running mean and scatter matrix for a stream of feature vectors.
///
/// Updates use Welford's scheme; two accumulators merge exactly (Chan et
/// al.), so per-shard statistics can be combined in any grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    count: u64,
    mean: DVector<f64>,
    /// Sum of outer products of deviations from the mean.
    scatter: DMatrix<f64>,
}

impl FeatureStats {
    pub fn new(dimension: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dimension),
            scatter: DMatrix::zeros(dimension, dimension),
        }
    }

    /// Statistics with a known mean and unbiased covariance over `count` samples.
    pub fn from_moments(
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        count: u64,
    ) -> Result<Self, MetricsError> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(MetricsError::DimensionMismatch {
                expected: d,
                got: covariance.nrows(),
            });
        }
        if count < 2 {
            return Err(MetricsError::TooFewSamples(count));
        }
        Ok(Self {
            count,
            mean,
            scatter: covariance * (count - 1) as f64,
        })
    }

    pub fn from_store(store: &EmbeddingStore) -> Self {
        let mut s = Self::new(store.dimension());
        for row in store.iter() {
            s.push(&row).expect("store rows share its dimension");
        }
        s
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn push(&mut self, v: &[f64]) -> Result<(), MetricsError> {
        if v.len() != self.dimension() {
            return Err(MetricsError::DimensionMismatch {
                expected: self.dimension(),
                got: v.len(),
            });
        }
        self.count += 1;
        let n = self.count as f64;
        let delta = DVector::from_column_slice(v) - &self.mean;
        self.mean += &delta / n;
        // (x - old_mean)(x - new_mean)^T == (n-1)/n * delta delta^T
        self.scatter.ger((n - 1.0) / n, &delta, &delta, 1.0);
        Ok(())
    }

    /// Combine two accumulators as if all samples were pushed into one.
    pub fn merge(&self, other: &Self) -> Result<Self, MetricsError> {
        if self.dimension() != other.dimension() {
            return Err(MetricsError::DimensionMismatch {
                expected: self.dimension(),
                got: other.dimension(),
            });
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        let mean = &self.mean + &delta * (nb / n);
        let mut scatter = &self.scatter + &other.scatter;
        scatter.ger(na * nb / n, &delta, &delta, 1.0);
        Ok(Self {
            count: self.count + other.count,
            mean,
            scatter,
        })
    }

    /// Unbiased covariance (divisor n − 1). Undefined below two samples.
    pub fn covariance(&self) -> Result<DMatrix<f64>, MetricsError> {
        if self.count < 2 {
            return Err(MetricsError::TooFewSamples(self.count));
        }
        let c = &self.scatter / (self.count - 1) as f64;
        Ok((&c + c.transpose()) * 0.5)
    }
}

/// Functional form of [`FeatureStats::push`].
pub fn accumulate_stats(
    stats: &FeatureStats,
    v: &EmbeddingVector,
) -> Result<FeatureStats, MetricsError> {
    let mut s = stats.clone();
    s.push(v.as_slice())?;
    Ok(s)
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

/// Principal square root of a symmetric positive semi-definite matrix via
/// symmetric eigendecomposition; negative eigenvalues (rounding noise) are
/// clamped to zero.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    if !a.is_square() {
        return Err(MetricsError::NotSymmetric);
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NumericalFailure(
            "non-finite matrix entry".into(),
        ));
    }
    let scale = max_abs(a).max(1.0);
    if max_abs(&(a - a.transpose())) > 1e-9 * scale {
        return Err(MetricsError::NotSymmetric);
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, EIGEN_EPS, EIGEN_MAX_ITERS)
        .ok_or(MetricsError::EigenFailure)?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// Fréchet (2-Wasserstein between Gaussians) distance:
/// `‖μa − μb‖² + tr(Σa + Σb − 2·(√Σa Σb √Σa)^½)`, clamped at zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64, MetricsError> {
    if a.dimension() != b.dimension() {
        return Err(MetricsError::DimensionMismatch {
            expected: a.dimension(),
            got: b.dimension(),
        });
    }
    let ca = a.covariance()?;
    let cb = b.covariance()?;
    let mean_term = (a.mean() - b.mean()).norm_squared();
    let sa = matrix_sqrt_psd(&ca)?;
    let product = &sa * &cb * &sa;
    let product = (&product + product.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&product)?;
    let fd = mean_term + ca.trace() + cb.trace() - 2.0 * cross.trace();
    if !fd.is_finite() {
        return Err(MetricsError::NumericalFailure(format!(
            "FD evaluated to {fd}"
        )));
    }
    Ok(fd.max(0.0))
}
