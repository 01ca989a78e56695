//! Double-well binarization potential and the transport modulation function.
//!
//! The potential on `[0,1]^d` is
//!
//! ```text
//! V(c) = sum_i A_i c_i^alpha_i (1 - c_i)^beta_i,
//! A_i  = 1 / (4 c_max_i^alpha_i (1 - c_max_i)^beta_i),
//! ```
//!
//! normalized so `V(c_max) = d/4`. The exponents are tied by
//! `beta_i = alpha_i (1 - c_max_i) / c_max_i`, which places the maximum at
//! `c_max`, and both exponents must exceed 1 so the gradient vanishes on the
//! boundary of the feature box. Descending `-∇V` drives each component
//! toward 0 below `c_max_i` and toward 1 above it.

use crate::{KinsegError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub c_max: Vec<f64>,
    pub alpha_exp: Vec<f64>,
    pub beta_exp: Vec<f64>,
    pub norm_const: Vec<f64>,
}

impl PotentialSpec {
    /// Validate `alpha_i > max(1, c_max_i/(1-c_max_i))` and derive the
    /// remaining coefficients.
    pub fn validate_exponents(c_max: &[f64], alpha_exp: &[f64]) -> Result<Self> {
        assert_eq!(c_max.len(), alpha_exp.len());
        let mut beta_exp = Vec::with_capacity(c_max.len());
        let mut norm_const = Vec::with_capacity(c_max.len());
        for (i, (&c, &a)) in c_max.iter().zip(alpha_exp).enumerate() {
            if !(0.0 < c && c < 1.0) {
                return Err(KinsegError::Config(format!(
                    "c_max[{i}] = {c} must lie strictly inside (0, 1)"
                )));
            }
            let bound = (c / (1.0 - c)).max(1.0);
            if a <= bound {
                return Err(KinsegError::InadmissibleExponent {
                    channel: i,
                    alpha: a,
                    c_max: c,
                    bound,
                });
            }
            let b = a * (1.0 - c) / c;
            beta_exp.push(b);
            norm_const.push(1.0 / (4.0 * c.powf(a) * (1.0 - c).powf(b)));
        }
        Ok(Self {
            c_max: c_max.to_vec(),
            alpha_exp: alpha_exp.to_vec(),
            beta_exp,
            norm_const,
        })
    }

    pub fn dim(&self) -> usize {
        self.c_max.len()
    }

    /// `V(c)`.
    pub fn value(&self, c: &[f64]) -> f64 {
        debug_assert_eq!(c.len(), self.dim());
        let mut v = 0.0;
        for i in 0..self.dim() {
            v += self.norm_const[i]
                * c[i].powf(self.alpha_exp[i])
                * (1.0 - c[i]).powf(self.beta_exp[i]);
        }
        v
    }

    /// One component of `∇V`. The normalization constant is included so the
    /// gradient is the exact derivative of [`Self::value`].
    pub fn gradient_component(&self, i: usize, ci: f64) -> f64 {
        let a = self.alpha_exp[i];
        let b = self.beta_exp[i];
        if ci <= 0.0 || ci >= 1.0 {
            return 0.0;
        }
        self.norm_const[i]
            * ci.powf(a - 1.0)
            * (1.0 - ci).powf(b - 1.0)
            * (a * (1.0 - ci) - b * ci)
    }

    /// `∇V(c)` written into `out`.
    pub fn gradient(&self, c: &[f64], out: &mut [f64]) {
        debug_assert_eq!(c.len(), self.dim());
        debug_assert_eq!(out.len(), self.dim());
        for i in 0..self.dim() {
            out[i] = self.gradient_component(i, c[i]);
        }
    }

    /// Upper bound on the stable explicit-Euler step for `c' = c - eps ∇V`,
    /// estimated as `1 / max |d²V/dc²|` sampled on a per-axis grid.
    pub fn stable_step_bound(&self) -> f64 {
        let mut max_curv: f64 = 0.0;
        let h = 1e-5;
        for i in 0..self.dim() {
            for k in 1..1000 {
                let c = k as f64 / 1000.0;
                if c - h <= 0.0 || c + h >= 1.0 {
                    continue;
                }
                let d2 = (self.gradient_component(i, c + h) - self.gradient_component(i, c - h))
                    / (2.0 * h);
                max_curv = max_curv.max(d2.abs());
            }
        }
        if max_curv == 0.0 {
            1.0
        } else {
            1.0 / max_curv
        }
    }
}

/// Transport modulation `phi(c) = d/2 - sum_l |c_l - 1/2|`, in `[0, d/2]`,
/// vanishing exactly when every component is 0 or 1.
pub fn phi(c: &[f64]) -> f64 {
    let d = c.len() as f64;
    let mut s = 0.0;
    for &ci in c {
        s += (ci - 0.5).abs();
    }
    d / 2.0 - s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_well() {
        // c_max = 0.5, alpha = 2 -> beta = 2 and A = 4.
        let s = PotentialSpec::validate_exponents(&[0.5], &[2.0]).unwrap();
        assert!((s.beta_exp[0] - 2.0).abs() < 1e-14);
        assert!((s.norm_const[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_inadmissible() {
        // c_max = 0.75 needs alpha > 3.
        let err = PotentialSpec::validate_exponents(&[0.75], &[2.0]).unwrap_err();
        match err {
            KinsegError::InadmissibleExponent { bound, .. } => {
                assert!((bound - 3.0).abs() < 1e-12)
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn accepts_low_cmax() {
        // c_max = 0.25, alpha = 1.5 -> beta = 4.5.
        let s = PotentialSpec::validate_exponents(&[0.25], &[1.5]).unwrap();
        assert!((s.beta_exp[0] - 4.5).abs() < 1e-12);
        assert!(s.alpha_exp[0] > 1.0 && s.beta_exp[0] > 1.0);
    }

    #[test]
    fn maximum_value_is_quarter_per_channel() {
        for (c, a) in [(0.5, 2.0), (0.3, 1.7), (0.8, 5.0)] {
            let s = PotentialSpec::validate_exponents(&[c], &[a]).unwrap();
            assert!((s.value(&[c]) - 0.25).abs() < 1e-12);
            assert!(s.gradient_component(0, c).abs() < 1e-10);
        }
        let s3 = PotentialSpec::validate_exponents(&[0.5, 0.4, 0.6], &[2.0, 2.0, 2.0]).unwrap();
        assert!((s3.value(&[0.5, 0.4, 0.6]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_on_boundary() {
        let s = PotentialSpec::validate_exponents(&[0.5, 0.5, 0.5], &[2.0, 3.0, 1.5]).unwrap();
        let mut g = [f64::NAN; 3];
        s.gradient(&[0.0, 1.0, 0.5], &mut g);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // 1000 random interior points, relative error < 1e-6.
        use rand::Rng;
        let mut rng = crate::rng::RngStream::new(11, 0).rng();
        let s = PotentialSpec::validate_exponents(&[0.45, 0.55, 0.62], &[2.3, 2.0, 2.5]).unwrap();
        let h = 1e-6;
        for _ in 0..1000 {
            let c: Vec<f64> = (0..3).map(|_| rng.random_range(0.02..0.98)).collect();
            for i in 0..3 {
                let mut cp = c.clone();
                let mut cm = c.clone();
                cp[i] += h;
                cm[i] -= h;
                let fd = (s.value(&cp) - s.value(&cm)) / (2.0 * h);
                let g = s.gradient_component(i, c[i]);
                let denom = g.abs().max(1e-4);
                assert!(
                    ((g - fd) / denom).abs() < 1e-6,
                    "c = {c:?}, axis {i}: grad {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn value_nonnegative_zero_only_at_corners() {
        let s = PotentialSpec::validate_exponents(&[0.4], &[2.0]).unwrap();
        for k in 0..=100 {
            let c = k as f64 / 100.0;
            let v = s.value(&[c]);
            assert!(v >= 0.0);
            if c > 0.0 && c < 1.0 {
                assert!(v > 0.0);
            } else {
                assert!(v.abs() < 1e-300);
            }
        }
    }

    #[test]
    fn descent_keeps_box_and_is_monotone() {
        // With eps below the stability bound, the flow stays in [0,1] and in
        // 1D drifts monotonically toward 0 below c_max and 1 above it.
        let s = PotentialSpec::validate_exponents(&[0.5], &[2.0]).unwrap();
        let eps = 0.9 * s.stable_step_bound();
        for k in 1..100 {
            let c0 = k as f64 / 100.0;
            let mut c = c0;
            let mut prev = c0;
            for _ in 0..2000 {
                c -= eps * s.gradient_component(0, c);
                assert!((0.0..=1.0).contains(&c), "left the box from {c0}");
                if c0 < 0.5 {
                    assert!(c <= prev + 1e-14);
                } else if c0 > 0.5 {
                    assert!(c >= prev - 1e-14);
                }
                prev = c;
            }
            if (c0 - 0.5).abs() > 1e-9 {
                let target = if c0 < 0.5 { 0.0 } else { 1.0 };
                assert!((c - target).abs() < 0.05, "c0 = {c0} ended at {c}");
            }
        }
    }

    #[test]
    fn phi_values() {
        assert!((phi(&[0.5]) - 0.5).abs() < 1e-15);
        assert_eq!(phi(&[0.0, 1.0, 0.0]), 0.0);
        assert!((phi(&[0.5, 0.5, 0.5]) - 1.5).abs() < 1e-15);
        // range check over a grid
        for k in 0..=20 {
            let c = k as f64 / 20.0;
            let v = phi(&[c]);
            assert!((0.0..=0.5 + 1e-15).contains(&v));
        }
    }
}
