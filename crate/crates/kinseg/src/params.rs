//! Model parameters and the three-rate splitting bookkeeping.

use crate::potential::PotentialSpec;
use crate::Result;
use serde::{Deserialize, Serialize};

/// The parameters of the interaction model.
///
/// `delta1` is the spatial interaction radius, `delta2` the feature
/// confidence threshold, `sigma2` the diffusion weight and `c_max` the
/// per-channel location of the double-well maximum. The scale weights
/// `theta_s : theta_f : theta_b` set the relative update frequencies of the
/// spatial, transport and binarization mechanisms; `theta_b` is normalized
/// to 1 and the macroscopic solver works in the `theta_s -> inf` regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub delta1: f64,
    pub delta2: f64,
    pub sigma2: f64,
    pub c_max: Vec<f64>,
    pub alpha_exp: Vec<f64>,
    pub beta_exp: Vec<f64>,
    #[serde(default = "default_theta")]
    pub theta_s: f64,
    #[serde(default = "default_theta")]
    pub theta_f: f64,
    #[serde(default = "default_theta")]
    pub theta_b: f64,
}

fn default_theta() -> f64 {
    1.0
}

impl ModelParams {
    /// Build parameters with the default exponent rule
    /// `alpha_i = max(1, c_max_i / (1 - c_max_i)) + 1`.
    pub fn with_default_exponents(
        delta1: f64,
        delta2: f64,
        sigma2: f64,
        c_max: Vec<f64>,
    ) -> Result<Self> {
        let alpha_exp: Vec<f64> = c_max
            .iter()
            .map(|&c| (c / (1.0 - c)).max(1.0) + 1.0)
            .collect();
        Self::new(delta1, delta2, sigma2, c_max, alpha_exp)
    }

    /// Build parameters with explicit exponents, validating admissibility.
    pub fn new(
        delta1: f64,
        delta2: f64,
        sigma2: f64,
        c_max: Vec<f64>,
        alpha_exp: Vec<f64>,
    ) -> Result<Self> {
        let spec = PotentialSpec::validate_exponents(&c_max, &alpha_exp)?;
        Ok(Self {
            delta1,
            delta2,
            sigma2,
            c_max,
            alpha_exp,
            beta_exp: spec.beta_exp,
            theta_s: 1.0,
            theta_f: 1.0,
            theta_b: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.c_max.len()
    }

    pub fn potential(&self) -> Result<PotentialSpec> {
        PotentialSpec::validate_exponents(&self.c_max, &self.alpha_exp)
    }
}

/// Derived step counts for the three-rate particle algorithm.
///
/// With `tau1 = 1/theta_s` and `tau2 = 1/theta_f`, the substep is
/// `eps = tau1*tau2/(tau1+tau2) <= min(tau1, tau2)`, so the per-substep
/// selection fractions `eps/tau1`, `eps/tau2` and `eps` are all valid
/// probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRates {
    pub tau1: f64,
    pub tau2: f64,
    pub eps_tilde: f64,
}

impl SplitRates {
    pub fn new(tau1: f64, tau2: f64) -> Self {
        assert!(tau1 > 0.0 && tau2 > 0.0);
        let eps_tilde = tau1 * tau2 / (tau1 + tau2);
        Self { tau1, tau2, eps_tilde }
    }

    /// Particles selected for the spatial update per substep.
    pub fn n1(&self, n: usize) -> usize {
        round_half_even(self.eps_tilde / self.tau1 * n as f64).min(n)
    }

    /// Particles selected for the feature transport per substep.
    pub fn n2(&self, n: usize) -> usize {
        round_half_even(self.eps_tilde / self.tau2 * n as f64).min(n)
    }

    /// Particles selected for the binarization per substep.
    pub fn n3(&self, n: usize) -> usize {
        round_half_even(self.eps_tilde * n as f64).min(n)
    }

    /// Number of interacting pairs per substep: `round(n1/2)`, dropping the
    /// odd particle if needed.
    pub fn pairs(&self, n: usize) -> usize {
        self.n1(n) / 2
    }
}

/// Round half to even, as for the selection counts.
pub fn round_half_even(x: f64) -> usize {
    let f = x.floor();
    let frac = x - f;
    let base = f as usize;
    if (frac - 0.5).abs() < 1e-12 {
        if base % 2 == 0 {
            base
        } else {
            base + 1
        }
    } else if frac > 0.5 {
        base + 1
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_rates_split_evenly() {
        // tau1 = tau2 = tau: eps = tau/2 and n1 = n2 = N/2.
        let r = SplitRates::new(0.2, 0.2);
        assert!((r.eps_tilde - 0.1).abs() < 1e-15);
        assert_eq!(r.n1(1000), 500);
        assert_eq!(r.n2(1000), 500);
    }

    #[test]
    fn test3_rates() {
        // tau2 = 0.1, tau1 = 1e-3 -> eps = tau1*tau2/(tau1+tau2) ~ 9.901e-4.
        let r = SplitRates::new(1e-3, 0.1);
        assert!((r.eps_tilde - 9.900990099009901e-4).abs() < 1e-12);
        assert!(r.eps_tilde <= r.tau1.min(r.tau2));
    }

    #[test]
    fn counts_bounded_by_n() {
        let r = SplitRates::new(1e-3, 0.1);
        let n = 1600;
        assert!(r.n1(n) <= n);
        assert!(r.n2(n) <= n);
        assert!(r.n3(n) <= n);
        assert_eq!(r.pairs(n), r.n1(n) / 2);
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(round_half_even(2.5), 2);
        assert_eq!(round_half_even(3.5), 4);
        assert_eq!(round_half_even(2.4), 2);
        assert_eq!(round_half_even(2.6), 3);
    }

    #[test]
    fn default_exponents_admissible() {
        for c in [0.1, 0.3, 0.5, 0.75, 0.9] {
            let p = ModelParams::with_default_exponents(0.2, 0.5, 0.01, vec![c]).unwrap();
            assert!(p.alpha_exp[0] > 1.0);
            assert!(p.beta_exp[0] > 1.0);
        }
    }
}
