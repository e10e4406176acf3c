//! Penalized-complexity priors for the model hyperparameters and the
//! Gaussian prior on fixed effects. Each PC prior is an exponential
//! distribution on the distance from a base model, calibrated so a stated
//! tail probability is hit exactly.

use crate::error::{Error, Result};

/// Prior configuration. Defaults follow the reference analysis: fixed
/// effects N(0, precision 0.1); P(range < 50 km) = 0.5; P(sd > 1) = 0.5;
/// P(seasonal variance > 0.25) = 0.5; P(|rho| > 0.5) = 0.5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub fixed_effect_precision: f64,
    /// (range0, p): P(range < range0) = p.
    pub pc_range: (f64, f64),
    /// (sd0, p): P(sd > sd0) = p.
    pub pc_sd: (f64, f64),
    /// (var0, p): P(seasonal marginal variance > var0) = p.
    pub pc_seasonal: (f64, f64),
    /// (rho0, p): P(|rho| > rho0) = p, base model rho = 0, two-sided.
    pub pc_rho: (f64, f64),
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            fixed_effect_precision: 0.1,
            pc_range: (50.0, 0.5),
            pc_sd: (1.0, 0.5),
            pc_seasonal: (0.25, 0.5),
            pc_rho: (0.5, 0.5),
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.pc_range.1,
            self.pc_sd.1,
            self.pc_seasonal.1,
            self.pc_rho.1,
        ];
        if probs.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::config(
                "prior probabilities must lie strictly in (0, 1)",
            ));
        }
        let thresholds = [
            self.fixed_effect_precision,
            self.pc_range.0,
            self.pc_sd.0,
            self.pc_seasonal.0,
            self.pc_rho.0,
        ];
        if thresholds.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::config("prior thresholds must be positive"));
        }
        if self.pc_rho.0 >= 1.0 {
            return Err(Error::config("pc_rho threshold must be below 1"));
        }
        Ok(())
    }

    /// Log density of the PC prior for the Matern range (2D):
    /// pi(r) = (lambda / r^2) exp(-lambda / r) with
    /// lambda = -ln(p) * range0, so P(range < range0) = p.
    pub fn log_prior_range(&self, range: f64) -> f64 {
        if !(range > 0.0) {
            return f64::NEG_INFINITY;
        }
        let (r0, p) = self.pc_range;
        let lambda = -p.ln() * r0;
        lambda.ln() - 2.0 * range.ln() - lambda / range
    }

    /// Log density of the PC prior for the Matern sd:
    /// pi(s) = lambda exp(-lambda s) with lambda = -ln(p) / sd0.
    pub fn log_prior_sd(&self, sd: f64) -> f64 {
        if !(sd > 0.0) {
            return f64::NEG_INFINITY;
        }
        let (s0, p) = self.pc_sd;
        let lambda = -p.ln() / s0;
        lambda.ln() - lambda * sd
    }

    /// Log density of the PC prior for the seasonal standard deviation
    /// (exponential on sigma, threshold from the variance condition).
    pub fn log_prior_seasonal_sd(&self, sd: f64) -> f64 {
        if !(sd > 0.0) {
            return f64::NEG_INFINITY;
        }
        let (v0, p) = self.pc_seasonal;
        let lambda = -p.ln() / v0.sqrt();
        lambda.ln() - lambda * sd
    }

    /// Log density of the symmetric PC prior for the AR(1) coefficient
    /// with base value 0: exponential in the KLD distance
    /// d(rho) = sqrt(-ln(1 - rho^2)), split evenly across signs.
    pub fn log_prior_rho(&self, rho: f64) -> f64 {
        if !(rho.abs() < 1.0) {
            return f64::NEG_INFINITY;
        }
        let (r0, p) = self.pc_rho;
        let d0 = pc_rho_distance(r0);
        let lambda = -p.ln() / d0;
        let d = pc_rho_distance(rho);
        // |d'(rho)| = |rho| / ((1 - rho^2) d); limit 1 at rho -> 0.
        let abs_dprime = if rho.abs() < 1e-8 {
            1.0
        } else {
            rho.abs() / ((1.0 - rho * rho) * d)
        };
        (lambda / 2.0).ln() - lambda * d + abs_dprime.ln()
    }
}

/// KLD-scale distance of AR(1) dependence rho from independence.
pub fn pc_rho_distance(rho: f64) -> f64 {
    (-(1.0 - rho * rho).ln()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Trapezoid quadrature of exp(log_density) over a 1D grid.
    fn integrate(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut acc = 0.5 * (f(lo).exp() + f(hi).exp());
        for i in 1..n {
            acc += f(lo + i as f64 * h).exp();
        }
        acc * h
    }

    #[test]
    fn range_prior_calibrated_by_quadrature() {
        let spec = PriorSpec::default();
        // P(range < 50): integrate in theta = ln(range) with Jacobian.
        let p = integrate((1e-3f64).ln(), (50.0f64).ln(), 60_000, |t| {
            spec.log_prior_range(t.exp()) + t
        });
        assert!((p - 0.5).abs() < 1e-3, "P(range < 50) = {p}");
        // Density integrates to ~1 over the long tail.
        let total = integrate((1e-3f64).ln(), (1e7f64).ln(), 120_000, |t| {
            spec.log_prior_range(t.exp()) + t
        });
        assert!((total - 1.0).abs() < 1e-3, "total mass {total}");
    }

    #[test]
    fn sd_prior_calibrated_by_quadrature() {
        let spec = PriorSpec::default();
        let p = integrate(1.0, 60.0, 60_000, |s| spec.log_prior_sd(s));
        assert!((p - 0.5).abs() < 1e-3, "P(sd > 1) = {p}");
    }

    #[test]
    fn seasonal_prior_calibrated_by_quadrature() {
        let spec = PriorSpec::default();
        // P(var > 0.25) = P(sd > 0.5).
        let p = integrate(0.5, 40.0, 40_000, |s| spec.log_prior_seasonal_sd(s));
        assert!((p - 0.5).abs() < 1e-3, "P(var > 0.25) = {p}");
    }

    #[test]
    fn rho_prior_calibrated_by_quadrature() {
        let spec = PriorSpec::default();
        // Two-sided mass beyond |rho| = 0.5, integrated in Fisher-z space
        // where the density is bounded.
        let z0 = 0.5f64.atanh();
        let one_side = integrate(z0, 40.0, 200_000, |z| {
            let rho: f64 = z.tanh();
            spec.log_prior_rho(rho) + (1.0 - rho * rho).ln()
        });
        let p = 2.0 * one_side;
        assert!((p - 0.5).abs() < 1e-3, "P(|rho| > 0.5) = {p}");
        // Total mass.
        let total = 2.0 * integrate(1e-9, 40.0, 200_000, |z| {
            let rho: f64 = z.tanh();
            spec.log_prior_rho(rho) + (1.0 - rho * rho).ln()
        });
        assert!((total - 1.0).abs() < 2e-3, "total mass {total}");
    }

    #[test]
    fn out_of_domain_is_minus_infinity() {
        let spec = PriorSpec::default();
        assert_eq!(spec.log_prior_range(-1.0), f64::NEG_INFINITY);
        assert_eq!(spec.log_prior_sd(0.0), f64::NEG_INFINITY);
        assert_eq!(spec.log_prior_rho(1.0), f64::NEG_INFINITY);
        assert_eq!(spec.log_prior_rho(-1.2), f64::NEG_INFINITY);
    }

    #[test]
    fn validation_catches_bad_config() {
        let mut s = PriorSpec::default();
        s.pc_rho = (1.5, 0.5);
        assert!(s.validate().is_err());
        let mut s = PriorSpec::default();
        s.pc_range = (50.0, 1.0);
        assert!(s.validate().is_err());
        assert!(PriorSpec::default().validate().is_ok());
    }
}
