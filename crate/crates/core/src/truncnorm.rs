//! Truncated normal densities on closed intervals.

use libm::erfc;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Upper tail probability `P(Z > z)` of a standard normal.
fn upper_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
fn std_pdf(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

/// `ln P(alpha <= Z <= beta)` for a standard normal `Z`, computed from
/// whichever tail keeps the subtraction well conditioned.
pub fn ln_normal_mass(alpha: f64, beta: f64) -> f64 {
    if alpha >= 0.0 {
        (upper_tail(alpha) - upper_tail(beta)).ln()
    } else if beta <= 0.0 {
        (upper_tail(-beta) - upper_tail(-alpha)).ln()
    } else {
        (-(upper_tail(-alpha) + upper_tail(beta))).ln_1p()
    }
}

/// Interval with possibly infinite endpoints; membership is closed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub const UNBOUNDED: Bounds = Bounds {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
    };

    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if lower.is_nan() || upper.is_nan() || lower >= upper {
            return Err(Error::InvalidInput(format!(
                "bounds [{lower}, {upper}] are empty"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncatedNormal {
    mu: f64,
    sigma: f64,
    bounds: Bounds,
    ln_mass: f64,
}

impl TruncatedNormal {
    pub fn new(mu: f64, sigma: f64, bounds: Bounds) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) || !mu.is_finite() {
            return Err(Error::InvalidInput(format!(
                "truncated normal with mu={mu}, sigma={sigma}"
            )));
        }
        let ln_mass = ln_normal_mass((bounds.lower - mu) / sigma, (bounds.upper - mu) / sigma);
        if !ln_mass.is_finite() {
            return Err(Error::InvalidInput(format!(
                "truncation [{}, {}] holds no mass of N({mu}, {sigma}^2)",
                bounds.lower, bounds.upper
            )));
        }
        Ok(Self {
            mu,
            sigma,
            bounds,
            ln_mass,
        })
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    /// Log density; `-inf` outside the closed support.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !self.bounds.contains(x) {
            return f64::NEG_INFINITY;
        }
        let z = (x - self.mu) / self.sigma;
        -0.5 * z * z - LN_SQRT_2PI - self.sigma.ln() - self.ln_mass
    }

    pub fn d_ln_pdf(&self, x: f64) -> f64 {
        -(x - self.mu) / (self.sigma * self.sigma)
    }

    /// Closed-form mean of the truncated distribution.
    pub fn mean(&self) -> f64 {
        let alpha = (self.bounds.lower - self.mu) / self.sigma;
        let beta = (self.bounds.upper - self.mu) / self.sigma;
        let pa = if alpha.is_finite() {
            std_pdf(alpha)
        } else {
            0.0
        };
        let pb = if beta.is_finite() { std_pdf(beta) } else { 0.0 };
        self.mu + self.sigma * (pa - pb) / self.ln_mass.exp()
    }
}

/// Log density of `N(mu, sigma^2)`.
pub fn normal_ln_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - LN_SQRT_2PI - sigma.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mass_matches_direct_difference() {
        // Phi(1) - Phi(-1) = 0.682689492137...
        assert_relative_eq!(
            ln_normal_mass(-1.0, 1.0).exp(),
            0.682_689_492_137_085_9,
            epsilon = 1e-13
        );
        assert_relative_eq!(
            ln_normal_mass(f64::NEG_INFINITY, f64::INFINITY),
            0.0,
            epsilon = 1e-15
        );
        // far tail stays finite
        assert!(ln_normal_mass(30.0, f64::INFINITY).is_finite());
        assert!(ln_normal_mass(f64::NEG_INFINITY, -30.0).is_finite());
    }

    #[test]
    fn half_normal_mean() {
        let tn = TruncatedNormal::new(0.0, 1.0, Bounds::new(0.0, f64::INFINITY).unwrap()).unwrap();
        assert_relative_eq!(
            tn.mean(),
            (2.0 / std::f64::consts::PI).sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn closed_support() {
        let tn = TruncatedNormal::new(1.0, 0.5, Bounds::new(0.0, 2.0).unwrap()).unwrap();
        assert!(tn.ln_pdf(0.0).is_finite());
        assert!(tn.ln_pdf(2.0).is_finite());
        assert_eq!(tn.ln_pdf(2.0 + 1e-12), f64::NEG_INFINITY);
    }
}
