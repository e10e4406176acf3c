//! Synthetic data generation: GMRF sampling through the sparse factor,
//! full dataset simulation from known parameters, and the brute-force
//! posterior oracle used to verify the Laplace engine.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::covariates::CovariateTable;
use crate::error::{Error, Result};
use crate::grid::{year_index, GridSpec, SpaceTimeField};
use crate::mesh::{build_mesh, projector, Mesh};
use crate::model::{CountRecord, DesignRows, LatentModel, ModelVariant, Obs};
use crate::sparse::{rcm_with_dense_last, LdlFactor, SparseMatrix};
use crate::spde::{MaternHyper, SpdeOperators};

/// Draws `n_samples` zero-mean Gaussian vectors with precision `q` by
/// back-substitution of standard normal vectors through the sparse
/// Cholesky factor. Deterministic given the seed.
pub fn sample_gmrf(q: &SparseMatrix, n_samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let factor = gmrf_factor(q)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_samples)
        .map(|_| sample_gmrf_with(&factor, &mut rng))
        .collect())
}

/// Factorization step of [`sample_gmrf`], exposed so callers drawing many
/// samples can amortize it.
pub fn gmrf_factor(q: &SparseMatrix) -> Result<LdlFactor> {
    if q.n_rows() != q.n_cols() {
        return Err(Error::config("gmrf precision must be square"));
    }
    let perm = rcm_with_dense_last(q, (q.n_rows() / 2).max(64));
    LdlFactor::factorize(q, perm)
}

pub fn sample_gmrf_with(factor: &LdlFactor, rng: &mut impl Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..factor.n())
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    factor.sample_from_precision(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Triplets;
    use approx::assert_relative_eq;

    #[test]
    fn identity_precision_gives_standard_normals() {
        let q = SparseMatrix::identity(40);
        let samples = sample_gmrf(&q, 2000, 7).unwrap();
        let mut mean = vec![0.0; 40];
        let mut var = vec![0.0; 40];
        for s in &samples {
            for i in 0..40 {
                mean[i] += s[i];
            }
        }
        for m in &mut mean {
            *m /= samples.len() as f64;
        }
        for s in &samples {
            for i in 0..40 {
                var[i] += (s[i] - mean[i]) * (s[i] - mean[i]);
            }
        }
        for i in 0..40 {
            var[i] /= samples.len() as f64 - 1.0;
            assert!((var[i] - 1.0).abs() < 0.15, "var[{i}] = {}", var[i]);
            assert!(mean[i].abs() < 0.1);
        }
    }

    #[test]
    fn two_by_two_covariance_matches_analytic_inverse() {
        // Q = [[2, -1], [-1, 2]] has covariance [[2/3, 1/3], [1/3, 2/3]].
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 2.0);
        t.push_sym(0, 1, -1.0);
        t.push(1, 1, 2.0);
        let q = t.to_csr();
        let samples = sample_gmrf(&q, 4000, 11).unwrap();
        let n = samples.len() as f64;
        let mut c00 = 0.0;
        let mut c01 = 0.0;
        let mut c11 = 0.0;
        for s in &samples {
            c00 += s[0] * s[0];
            c01 += s[0] * s[1];
            c11 += s[1] * s[1];
        }
        assert_relative_eq!(c00 / n, 2.0 / 3.0, epsilon = 0.05);
        assert_relative_eq!(c01 / n, 1.0 / 3.0, epsilon = 0.05);
        assert_relative_eq!(c11 / n, 2.0 / 3.0, epsilon = 0.05);
    }

    #[test]
    fn sampling_is_reproducible_from_seed() {
        let q = SparseMatrix::identity(5);
        let a = sample_gmrf(&q, 3, 99).unwrap();
        let b = sample_gmrf(&q, 3, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_pd_precision_is_an_error() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(1, 1, 0.0);
        let q = t.to_csr();
        assert!(sample_gmrf(&q, 1, 1).is_err());
    }
}
