//! Consensus-based optimization over a parameter box.
//!
//! Agents carry candidate parameter vectors, are weighted by a Gibbs
//! distribution `exp(-alpha f(x))` around the current consensus point, and
//! evolve by the Euler-Maruyama discretization of
//!
//! ```text
//! dx_i = -lambda (x_i - c_alpha) dt + sigma |x_i - c_alpha| dW_i,
//! ```
//!
//! projected back onto the box after every step. The noise is isotropic by
//! default (one scalar `|x_i - c_alpha|` scales all coordinates); a
//! component-wise variant is available behind a switch.

use crate::exec;
use crate::rng::RngStream;
use crate::{KinsegError, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Mutex;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CboConfig {
    pub n_particles: usize,
    pub n_iterations: usize,
    /// Drift rate toward the consensus point.
    pub lambda: f64,
    /// Squared diffusion weight; the SDE uses its square root.
    pub sigma2_cbo: f64,
    /// Gibbs sharpness.
    pub alpha_gibbs: f64,
    /// Inclusive bounds per coordinate.
    pub bounds: Vec<(f64, f64)>,
    pub dt: f64,
    /// Component-wise noise instead of the isotropic default.
    pub componentwise: bool,
    pub rng: RngStream,
}

impl CboConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 || self.n_iterations == 0 {
            return Err(KinsegError::Config("CBO needs particles and iterations".into()));
        }
        if self.bounds.is_empty() {
            return Err(KinsegError::Config("empty parameter box".into()));
        }
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(KinsegError::Config(format!(
                    "bad bounds on coordinate {i}: [{lo}, {hi}]"
                )));
            }
        }
        if !(self.lambda > 0.0 && self.sigma2_cbo >= 0.0 && self.alpha_gibbs > 0.0 && self.dt > 0.0)
        {
            return Err(KinsegError::Config("CBO rates must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }
}

#[derive(Debug, Clone)]
pub struct CboState {
    pub dim: usize,
    /// `n_particles x dim`, row-major.
    pub positions: Vec<f64>,
    pub losses: Vec<f64>,
    pub consensus: Vec<f64>,
    pub best_position: Vec<f64>,
    pub best_loss: f64,
}

/// Gibbs-weighted consensus point, computed with the losses shifted by
/// their minimum so the exponentials cannot underflow collectively.
pub fn consensus_point(
    positions: &[f64],
    losses: &[f64],
    dim: usize,
    alpha_gibbs: f64,
) -> Result<Vec<f64>> {
    let n = losses.len();
    assert_eq!(positions.len(), n * dim);
    let fmin = losses.iter().copied().filter(|l| l.is_finite()).fold(f64::INFINITY, f64::min);
    if !fmin.is_finite() {
        return Err(KinsegError::AllLossesInfinite);
    }
    let mut weight_sum = 0.0;
    let mut acc = vec![0.0; dim];
    for i in 0..n {
        if !losses[i].is_finite() {
            continue;
        }
        let w = (-alpha_gibbs * (losses[i] - fmin)).exp();
        weight_sum += w;
        for ell in 0..dim {
            acc[ell] += w * positions[i * dim + ell];
        }
    }
    for a in acc.iter_mut() {
        *a /= weight_sum;
    }
    Ok(acc)
}

/// One optimization record per iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CboHistoryEntry {
    pub iteration: usize,
    pub best_loss: f64,
    pub consensus: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CboResult {
    pub best_position: Vec<f64>,
    pub best_loss: f64,
    pub history: Vec<CboHistoryEntry>,
    pub evaluations: usize,
}

/// Snap a position onto the memoization lattice. Evaluating at the snapped
/// point keeps cached losses exact for their key, so the parameter trace is
/// reproducible regardless of which thread populated the cache.
fn quantize(x: &[f64], q: f64) -> Vec<f64> {
    x.iter().map(|v| (v / q).round() * q).collect()
}

fn key_of(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

const MEMO_QUANTUM: f64 = 1e-6;

/// Minimize `objective` over the box. Objective evaluations run in parallel
/// across particles and are memoized on quantized parameter keys;
/// non-finite objective values are treated as `+inf` losses and the run
/// continues.
pub fn optimize<F>(objective: F, config: &CboConfig) -> Result<CboResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    config.validate()?;
    let dim = config.dim();
    let n = config.n_particles;
    let mut rng = config.rng.rng();

    // Initial swarm uniform in the box.
    let mut positions = vec![0.0; n * dim];
    for i in 0..n {
        for (ell, &(lo, hi)) in config.bounds.iter().enumerate() {
            positions[i * dim + ell] = rng.random_range(lo..hi);
        }
    }

    let memo: Mutex<HashMap<Vec<u64>, f64>> = Mutex::new(HashMap::new());
    let eval_count = std::sync::atomic::AtomicUsize::new(0);
    let evaluate_all = |positions: &[f64]| -> Vec<f64> {
        exec::par_map_indexed(n, |i| {
            let snapped = quantize(&positions[i * dim..(i + 1) * dim], MEMO_QUANTUM);
            let key = key_of(&snapped);
            if let Some(&hit) = memo.lock().unwrap().get(&key) {
                return hit;
            }
            let raw = objective(&snapped);
            let loss = if raw.is_finite() { raw } else { f64::INFINITY };
            eval_count.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            memo.lock().unwrap().insert(key, loss);
            loss
        })
    };

    let mut losses = evaluate_all(&positions);
    let mut best_loss = f64::INFINITY;
    let mut best_position = positions[0..dim].to_vec();
    let update_best = |positions: &[f64], losses: &[f64], best_loss: &mut f64, best_position: &mut Vec<f64>| {
        for i in 0..n {
            if losses[i] < *best_loss {
                *best_loss = losses[i];
                best_position.copy_from_slice(&positions[i * dim..(i + 1) * dim]);
            }
        }
    };
    update_best(&positions, &losses, &mut best_loss, &mut best_position);

    let sigma = config.sigma2_cbo.sqrt();
    let sqrt_dt = config.dt.sqrt();
    let mut history = Vec::with_capacity(config.n_iterations);

    for iteration in 0..config.n_iterations {
        let consensus = consensus_point(&positions, &losses, dim, config.alpha_gibbs)?;
        for i in 0..n {
            let row = &mut positions[i * dim..(i + 1) * dim];
            if config.componentwise {
                for (ell, &(lo, hi)) in config.bounds.iter().enumerate() {
                    let diff = row[ell] - consensus[ell];
                    let xi: f64 = rng.sample(StandardNormal);
                    row[ell] += -config.lambda * diff * config.dt
                        + sigma * diff.abs() * sqrt_dt * xi;
                    row[ell] = row[ell].clamp(lo, hi);
                }
            } else {
                let norm = {
                    let mut s = 0.0;
                    for ell in 0..dim {
                        let d = row[ell] - consensus[ell];
                        s += d * d;
                    }
                    s.sqrt()
                };
                for (ell, &(lo, hi)) in config.bounds.iter().enumerate() {
                    let diff = row[ell] - consensus[ell];
                    let xi: f64 = rng.sample(StandardNormal);
                    row[ell] +=
                        -config.lambda * diff * config.dt + sigma * norm * sqrt_dt * xi;
                    row[ell] = row[ell].clamp(lo, hi);
                }
            }
        }
        losses = evaluate_all(&positions);
        update_best(&positions, &losses, &mut best_loss, &mut best_position);
        history.push(CboHistoryEntry {
            iteration,
            best_loss,
            consensus,
        });
    }

    Ok(CboResult {
        best_position,
        best_loss,
        history,
        evaluations: eval_count.load(std::sync::atomic::Ordering::Relaxed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(dim: usize, seed: u64) -> CboConfig {
        CboConfig {
            n_particles: 64,
            n_iterations: 200,
            lambda: 1.0,
            sigma2_cbo: 0.5,
            alpha_gibbs: 12.0,
            bounds: vec![(-2.0, 2.0); dim],
            dt: 0.1,
            componentwise: false,
            rng: RngStream::new(seed, 0),
        }
    }

    #[test]
    fn consensus_of_identical_particles() {
        let pos = vec![0.3, -1.0, 0.3, -1.0, 0.3, -1.0];
        let losses = vec![5.0, 1.0, 9.0];
        let c = consensus_point(&pos, &losses, 2, 3.0).unwrap();
        assert!((c[0] - 0.3).abs() < 1e-15);
        assert!((c[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn equal_losses_give_midpoint() {
        let pos = vec![0.0, 1.0];
        let losses = vec![7.0, 7.0];
        let c = consensus_point(&pos, &losses, 1, 12.0).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sharp_gibbs_selects_argmin() {
        // alpha -> 1e6 concentrates on the argmin particle (softmax oracle).
        use rand::Rng as _;
        let mut rng = RngStream::new(5, 0).rng();
        let n = 40;
        let pos: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let imin = (0..n)
            .min_by(|&a, &b| losses[a].partial_cmp(&losses[b]).unwrap())
            .unwrap();
        let c = consensus_point(&pos, &losses, 1, 1e6).unwrap();
        assert!((c[0] - pos[imin]).abs() < 1e-6);
    }

    #[test]
    fn gibbs_shift_invariance() {
        let pos = vec![0.1, 0.4, -0.2, 0.9];
        let losses = vec![1.0, 2.0, 0.5, 3.0];
        let shifted: Vec<f64> = losses.iter().map(|l| l + 1000.0).collect();
        let a = consensus_point(&pos, &losses, 1, 12.0).unwrap();
        let b = consensus_point(&pos, &shifted, 1, 12.0).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12);
    }

    #[test]
    fn consensus_inside_hull_every_iteration() {
        let config = CboConfig {
            n_iterations: 50,
            ..base_config(2, 9)
        };
        let f = |x: &[f64]| (x[0] - 0.3).powi(2) + (x[1] + 0.4).powi(2);
        let result = optimize(f, &config).unwrap();
        for entry in &result.history {
            for &c in &entry.consensus {
                assert!((-2.0..=2.0).contains(&c));
            }
        }
    }

    #[test]
    fn all_infinite_losses_error() {
        assert!(matches!(
            consensus_point(&[0.0, 1.0], &[f64::INFINITY, f64::INFINITY], 1, 1.0),
            Err(KinsegError::AllLossesInfinite)
        ));
    }

    #[test]
    fn incumbent_is_monotone() {
        let config = base_config(3, 21);
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() + (x[0] * 9.0).sin().abs();
        let result = optimize(f, &config).unwrap();
        let mut prev = f64::INFINITY;
        for entry in &result.history {
            assert!(entry.best_loss <= prev + 1e-15);
            prev = entry.best_loss;
        }
    }

    #[test]
    fn convex_quadratic_converges() {
        // Interior quadratic minimum recovered to 1e-2 with N_p = 64 and
        // 200 iterations.
        let target = [0.37, -0.81];
        let config = base_config(2, 33);
        let f = move |x: &[f64]| {
            (x[0] - target[0]).powi(2) + 0.5 * (x[1] - target[1]).powi(2)
        };
        let result = optimize(f, &config).unwrap();
        for ell in 0..2 {
            assert!(
                (result.best_position[ell] - target[ell]).abs() < 1e-2,
                "coordinate {ell}: {} vs {}",
                result.best_position[ell],
                target[ell]
            );
        }
    }

    #[test]
    fn pure_drift_jumps_to_consensus() {
        // sigma = 0 and lambda dt = 1: after one step every particle sits at
        // the consensus point.
        let config = CboConfig {
            n_particles: 16,
            n_iterations: 1,
            lambda: 1.0,
            sigma2_cbo: 0.0,
            dt: 1.0,
            ..base_config(2, 41)
        };
        let f = |x: &[f64]| x[0] * x[0] + x[1] * x[1];
        let result = optimize(f, &config).unwrap();
        // After the drift collapse, all particles coincide, so the next
        // consensus equals the collapsed point and the best loss equals
        // f(consensus).
        let c = &result.history[0].consensus;
        assert!(result.best_loss <= f(&[c[0], c[1]]) + 1e-12);
    }

    #[test]
    fn deterministic_trace_per_seed() {
        let config = CboConfig {
            n_iterations: 30,
            ..base_config(2, 55)
        };
        let f = |x: &[f64]| (x[0] + 0.2).powi(2) + (x[1] - 0.6).powi(2);
        let a = optimize(f, &config).unwrap();
        let b = optimize(f, &config).unwrap();
        assert_eq!(a.best_position, b.best_position);
        assert_eq!(a.best_loss, b.best_loss);
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.consensus, y.consensus);
            assert_eq!(x.best_loss, y.best_loss);
        }
    }

    #[test]
    fn failed_evaluations_become_infinite() {
        let config = CboConfig {
            n_iterations: 20,
            ..base_config(1, 61)
        };
        // NaN outside a small pocket; the optimizer must keep going.
        let f = |x: &[f64]| {
            if x[0].abs() > 1.5 {
                f64::NAN
            } else {
                (x[0] - 0.5).powi(2)
            }
        };
        let result = optimize(f, &config).unwrap();
        assert!(result.best_loss < 0.1);
    }
}
