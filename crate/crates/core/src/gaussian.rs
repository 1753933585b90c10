//! Sampling from multivariate normals with a possibly singular covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Real;

/// Square-root factor `L` with `L Lᵀ = C` for a symmetric PSD `C`.
///
/// Built from the symmetric eigendecomposition so that rank-deficient
/// covariances (including all zeros) are accepted.
#[derive(Debug, Clone)]
pub struct NoiseFactor<T: Real> {
    factor: DMatrix<T>,
}

impl<T: Real> NoiseFactor<T> {
    pub fn new(cov: &DMatrix<T>) -> Self {
        let n = cov.nrows();
        if cov.iter().all(|v| *v == T::zero()) {
            return Self {
                factor: DMatrix::zeros(n, n),
            };
        }
        // Diagonal covariances are the common case; keep them exact.
        let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || cov[(i, j)] == T::zero()));
        if diagonal {
            let mut factor = DMatrix::zeros(n, n);
            for i in 0..n {
                factor[(i, i)] = cov[(i, i)].max(T::zero()).sqrt();
            }
            return Self { factor };
        }
        let eig = cov.clone().symmetric_eigen();
        let mut sqrt_vals = eig.eigenvalues.clone();
        for v in sqrt_vals.iter_mut() {
            *v = v.max(T::zero()).sqrt();
        }
        Self {
            factor: &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals),
        }
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        let n = self.dim();
        let z = DVector::from_fn(n, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
        &self.factor * z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn factor_reproduces_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = NoiseFactor::new(&cov);
        let back = &f.factor * f.factor.transpose();
        assert!((back - cov).abs().max() < 1e-12);
    }

    #[test]
    fn zero_covariance_is_noiseless() {
        let f = NoiseFactor::<f64>::new(&DMatrix::zeros(3, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(f.sample(&mut rng), DVector::zeros(3));
    }
}
