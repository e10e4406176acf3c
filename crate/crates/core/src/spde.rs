//! GMRF approximation of a Matern field with smoothness 1 on a FEM mesh:
//! precision assembly Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G),
//! the range convention, and the analytic Matern correlation used as the
//! verification oracle.

use crate::error::{Error, Result};
use crate::mesh::{fem_matrices, Mesh};
use crate::sparse::SparseMatrix;

/// The range parameter is the spatial distance at which the correlation
/// reaches this value.
pub const RANGE_CORRELATION: f64 = 0.1;

/// kappa * range for smoothness 1: the root of x K1(x) = 0.1.
pub const KAPPA_RANGE_FACTOR: f64 = 3.214_323_169_064_343_7;

/// Matern hyperparameters with the smoothness fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternHyper {
    /// Distance (km) at which the correlation is 0.1.
    pub range: f64,
    /// Stationary marginal standard deviation.
    pub sd: f64,
}

pub const MATERN_SMOOTHNESS: f64 = 1.0;

impl MaternHyper {
    pub fn new(range: f64, sd: f64) -> Result<Self> {
        if !(range > 0.0) || !range.is_finite() || !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::domain(format!(
                "matern hyperparameters need range > 0 and sd > 0; got range={range}, sd={sd}"
            )));
        }
        Ok(MaternHyper { range, sd })
    }

    pub fn kappa(&self) -> f64 {
        KAPPA_RANGE_FACTOR / self.range
    }

    /// tau from the stationary variance of the 2D smoothness-1 SPDE:
    /// sigma^2 = Gamma(nu) / (Gamma(nu + 1) 4 pi kappa^(2 nu) tau^2).
    pub fn tau(&self) -> f64 {
        let kappa = self.kappa();
        1.0 / (self.sd * kappa * (4.0 * std::f64::consts::PI).sqrt())
    }
}

/// theta-independent FEM operators cached per mesh: the lumped mass
/// diagonal, stiffness G, and G C^{-1} G.
#[derive(Debug, Clone)]
pub struct SpdeOperators {
    pub c_diag: Vec<f64>,
    pub g: SparseMatrix,
    pub gcg: SparseMatrix,
}

impl SpdeOperators {
    pub fn from_mesh(mesh: &Mesh) -> Result<Self> {
        let (c_diag, g) = fem_matrices(mesh);
        if c_diag.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::numerical(
                "mesh has a vertex with no adjacent area; mass matrix not invertible",
            ));
        }
        let inv_c = SparseMatrix::from_diag(
            &c_diag.iter().map(|&c| 1.0 / c).collect::<Vec<_>>(),
        );
        let gcg = g.matmul(&inv_c)?.matmul(&g)?;
        Ok(SpdeOperators { c_diag, g, gcg })
    }

    pub fn n(&self) -> usize {
        self.c_diag.len()
    }

    /// Sparse precision of the Matern-SPDE field at the given
    /// hyperparameters; symmetric positive definite.
    pub fn precision(&self, hyper: &MaternHyper) -> Result<SparseMatrix> {
        let kappa = hyper.kappa();
        let tau = hyper.tau();
        if !kappa.is_finite() || !tau.is_finite() {
            return Err(Error::domain("non-finite kappa or tau".to_string()));
        }
        let t2 = tau * tau;
        let k2 = kappa * kappa;
        // Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G); C and the two
        // G-terms share no pattern surprises, so assemble by merged add.
        let c_term = SparseMatrix::from_diag(
            &self
                .c_diag
                .iter()
                .map(|&c| t2 * k2 * k2 * c)
                .collect::<Vec<_>>(),
        );
        let g_term = self.g.scale(2.0 * t2 * k2);
        let gcg_term = self.gcg.scale(t2);
        c_term.add(&g_term)?.add(&gcg_term)
    }
}

/// Convenience wrapper building the operators and the precision in one go.
pub fn matern_precision(mesh: &Mesh, hyper: &MaternHyper) -> Result<SparseMatrix> {
    SpdeOperators::from_mesh(mesh)?.precision(hyper)
}

/// Matern correlation with smoothness 1: rho(d) = kappa d K1(kappa d).
pub fn matern1_correlation(d: f64, range: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let x = KAPPA_RANGE_FACTOR * d / range;
    x * bessel_k1(x)
}

/// Modified Bessel function K1 via the Abramowitz & Stegun 9.8 polynomial
/// approximations (about 7 correct digits).
pub fn bessel_k1(x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k1 requires x > 0");
    if x <= 2.0 {
        let y = x * x / 4.0;
        let i1 = bessel_i1(x);
        (x / 2.0).ln() * i1
            + (1.0 / x)
                * (1.0
                    + y * (0.154_431_44
                        + y * (-0.672_785_79
                            + y * (-0.181_568_97
                                + y * (-0.019_194_02
                                    + y * (-0.001_104_04 + y * (-0.000_046_86)))))))
    } else {
        let y = 2.0 / x;
        (x.exp().recip() / x.sqrt())
            * (1.253_314_14
                + y * (0.234_986_19
                    + y * (-0.036_556_20
                        + y * (0.015_042_68
                            + y * (-0.007_803_53 + y * (0.003_256_14 + y * (-0.000_682_45)))))))
    }
}

fn bessel_i1(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 3.75 {
        let y = (x / 3.75) * (x / 3.75);
        x * (0.5
            + y * (0.878_905_94
                + y * (0.514_988_69
                    + y * (0.150_849_34
                        + y * (0.026_587_33 + y * (0.003_015_32 + y * 0.000_324_11))))))
    } else {
        let y = 3.75 / ax;
        let v = (ax.exp() / ax.sqrt())
            * (0.398_942_28
                + y * (-0.039_880_24
                    + y * (-0.003_620_18
                        + y * (0.001_638_01
                            + y * (-0.010_315_55
                                + y * (0.022_829_67
                                    + y * (-0.028_953_12
                                        + y * (0.017_876_54 + y * (-0.004_200_59)))))))));
        if x < 0.0 {
            -v
        } else {
            v
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::mesh::build_mesh;
    use crate::sparse::{rcm_with_dense_last, LdlFactor};
    use approx::assert_relative_eq;

    #[test]
    fn bessel_k1_reference_values() {
        // Reference values to the accuracy of the A&S approximations.
        for (x, expected) in [
            (0.1, 9.853844780870606),
            (0.5, 1.6564411200033007),
            (1.0, 0.6019072301972346),
            (2.0, 0.13986588181652246),
            (5.0, 0.004044613445452163),
            (8.0, 0.00015536921180500112),
        ] {
            assert_relative_eq!(bessel_k1(x), expected, max_relative = 2e-7);
        }
    }

    #[test]
    fn kappa_range_factor_hits_correlation_tenth() {
        let c = KAPPA_RANGE_FACTOR * bessel_k1(KAPPA_RANGE_FACTOR);
        assert!((c - RANGE_CORRELATION).abs() < 1e-6, "x K1(x) = {c}");
        // And through the public correlation function.
        assert!((matern1_correlation(25.0, 25.0) - 0.1).abs() < 1e-6);
        assert_eq!(matern1_correlation(0.0, 25.0), 1.0);
    }

    fn small_ops() -> SpdeOperators {
        let grid = GridSpec::fully_active((0.0, 0.0), 2.0, 8, 8).unwrap();
        let mesh = build_mesh(&grid, 4.0, 8.0, 8.0).unwrap();
        SpdeOperators::from_mesh(&mesh).unwrap()
    }

    #[test]
    fn scaling_sd_by_c_divides_precision_by_c_squared() {
        let ops = small_ops();
        let q1 = ops.precision(&MaternHyper::new(10.0, 1.0).unwrap()).unwrap();
        let q2 = ops.precision(&MaternHyper::new(10.0, 3.0).unwrap()).unwrap();
        for ((_, _, v1), (_, _, v2)) in q1.iter().zip(q2.iter()) {
            assert_relative_eq!(v1 / 9.0, v2, max_relative = 1e-12);
        }
    }

    #[test]
    fn precision_is_symmetric_and_positive_definite() {
        let ops = small_ops();
        for (range, sd) in [(5.0, 0.5), (20.0, 1.36), (80.0, 3.0)] {
            let q = ops.precision(&MaternHyper::new(range, sd).unwrap()).unwrap();
            assert!(q.asymmetry() < 1e-12);
            let perm = rcm_with_dense_last(&q, usize::MAX);
            let f = LdlFactor::factorize(&q, perm).unwrap();
            assert!(f.min_pivot() > 0.0);
        }
    }

    #[test]
    fn precision_pattern_within_two_hop_neighborhood() {
        let ops = small_ops();
        let q = ops.precision(&MaternHyper::new(10.0, 1.0).unwrap()).unwrap();
        // Two-hop adjacency from the stiffness pattern.
        let n = ops.n();
        let mut adj = vec![std::collections::HashSet::new(); n];
        for (i, j, _) in ops.g.iter() {
            adj[i].insert(j);
        }
        for (i, j, v) in q.iter() {
            if v != 0.0 {
                let two_hop = adj[i].contains(&j)
                    || adj[i].iter().any(|&k| adj[k].contains(&j));
                assert!(two_hop, "Q[{i},{j}] outside the two-hop neighborhood");
            }
        }
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(MaternHyper::new(0.0, 1.0).is_err());
        assert!(MaternHyper::new(10.0, -1.0).is_err());
        assert!(MaternHyper::new(f64::NAN, 1.0).is_err());
    }
}
