//! Finite-volume evolution of the reduced system in feature space: explicit
//! Euler in time, Rusanov (local Lax-Friedrichs) interface fluxes, no-flux
//! feature boundaries, CFL-controlled step size.
//!
//! The evolved pair is the density `rho(c)` and the pointwise first moment
//! `q(c) = rho m` (a 2-vector density), with cell-centered fluxes per
//! feature axis `l`
//!
//! ```text
//! rho:  [theta_f phi(c) (A_l(c) - c_l) - theta_b dV/dc_l] * rho
//! q_s:   theta_f phi(c) (E_{s,l}(c) - c_l q_s) - theta_b dV/dc_l q_s
//! ```
//!
//! and the common characteristic speed
//! `v_l = theta_f phi (A_l - c_l) - theta_b dV/dc_l`. The windowed moment
//! `𝓕(c) = Σ_{|c-c'|<Δ₂} q(c') Δc^d` that parametrizes the quasi-equilibrium
//! is reconstructed from `q` by the same window sum the particle estimator
//! uses. (Evolving 𝓕 itself is stiff: its flux responds to 𝓕 with gain
//! `2Δ₂ rho/R`, which grows like `1/Δc` as the density concentrates at the
//! feature-box corners, while the q form keeps the O(1) transport speed.)
//! The equilibrium fields `(A, E, m_inf)` are refreshed from the current
//! state every `refresh_every` steps (default every step).

use crate::ensemble::window_sum_vec;
use crate::equilibrium::{build_equilibrium_with_window, drift_fields, DriftFields};
use crate::exec;
use crate::grid::{FeatureGrid, FeatureWindow, SpatialDomain};
use crate::image_field::ImageField;
use crate::params::ModelParams;
use crate::potential::{phi, PotentialSpec};
use crate::{KinsegError, Result};
use serde::{Deserialize, Serialize};

/// The evolved fields on the feature grid: `rho` and `q = rho m`, both in
/// density form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroState {
    pub grid: FeatureGrid,
    pub rho: Vec<f64>,
    pub rho_m: Vec<[f64; 2]>,
}

impl MacroState {
    pub fn new(grid: FeatureGrid, rho: Vec<f64>, rho_m: Vec<[f64; 2]>) -> Self {
        assert_eq!(rho.len(), grid.len());
        assert_eq!(rho_m.len(), grid.len());
        Self { grid, rho, rho_m }
    }

    pub fn total_mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Windowed first moment `𝓕(c)` in mass form.
    pub fn f_cant(&self, delta2: f64) -> Vec<[f64; 2]> {
        let vol = self.grid.cell_volume();
        let mass_form: Vec<[f64; 2]> = self
            .rho_m
            .iter()
            .map(|v| [v[0] * vol, v[1] * vol])
            .collect();
        window_sum_vec(&mass_form, &self.grid, delta2)
    }

    /// Marginal density along one feature axis (sums out the others).
    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let nc = self.grid.nc;
        let mut out = vec![0.0; nc];
        let mut mi = [0usize; 3];
        let other_vol = self.grid.dc().powi(self.grid.dim as i32 - 1);
        for k in 0..self.grid.len() {
            self.grid.multi_index(k, &mut mi[..self.grid.dim]);
            out[mi[axis]] += self.rho[k] * other_vol;
        }
        out
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Solver options.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MacroOptions {
    /// CFL number in (0, 1].
    pub cfl: f64,
    /// Refresh the equilibrium fields every this many steps.
    pub refresh_every: usize,
    /// Early exit once `max(|drho|, |dF|)/dt` falls below this threshold
    /// (the state is then a numerical fixed point). Non-positive disables.
    pub steady_tol: f64,
    /// Override the CFL step with a fixed dt (testing hook).
    pub fixed_dt: Option<f64>,
}

impl Default for MacroOptions {
    fn default() -> Self {
        Self {
            cfl: 0.9,
            refresh_every: 1,
            steady_tol: 1e-13,
            fixed_dt: None,
        }
    }
}

/// A running macroscopic solve.
pub struct MacroRun {
    pub state: MacroState,
    pub params: ModelParams,
    pub spatial: SpatialDomain,
    pub opts: MacroOptions,
    pub t: f64,
    pub steps: usize,
    /// Largest relative total-mass deviation observed so far.
    pub mass_drift: f64,
    initial_mass: f64,
    potential: PotentialSpec,
    window: FeatureWindow,
    /// Static per-cell geometry: phi(c_k) and grad V(c_k).
    phi_cells: Vec<f64>,
    grad_v: Vec<f64>,
    centers: Vec<f64>,
    drift: Option<DriftFields>,
    steady: bool,
}

impl MacroRun {
    pub fn new(
        state: MacroState,
        params: ModelParams,
        spatial: SpatialDomain,
        opts: MacroOptions,
    ) -> Result<Self> {
        let potential = params.potential()?;
        let d = params.dim();
        assert_eq!(d, state.grid.dim, "params and grid dimension mismatch");
        let n = state.grid.len();
        let mut phi_cells = vec![0.0; n];
        let mut grad_v = vec![0.0; n * d];
        let mut centers = vec![0.0; n * d];
        let mut c = vec![0.0; d];
        for k in 0..n {
            state.grid.center(k, &mut c);
            phi_cells[k] = phi(&c);
            for ell in 0..d {
                grad_v[k * d + ell] = potential.gradient_component(ell, c[ell]);
                centers[k * d + ell] = c[ell];
            }
        }
        let initial_mass = state.total_mass();
        let window = FeatureWindow::new(&state.grid, params.delta2);
        Ok(Self {
            state,
            params,
            spatial,
            opts,
            t: 0.0,
            steps: 0,
            mass_drift: 0.0,
            initial_mass,
            potential,
            window,
            phi_cells,
            grad_v,
            centers,
            drift: None,
            steady: false,
        })
    }

    pub fn is_steady(&self) -> bool {
        self.steady
    }

    pub fn potential_spec(&self) -> &PotentialSpec {
        &self.potential
    }

    fn refresh_drift(&mut self) -> Result<()> {
        let vol = self.state.grid.cell_volume();
        let mass_q: Vec<[f64; 2]> = self
            .state
            .rho_m
            .iter()
            .map(|v| [v[0] * vol, v[1] * vol])
            .collect();
        let f_cant = self.window.sum_vec2(&mass_q);
        let eq = build_equilibrium_with_window(
            &self.state.rho,
            &f_cant,
            &self.params,
            &self.state.grid,
            &self.spatial,
            &self.window,
        )?;
        self.drift = Some(drift_fields(&eq, self.params.delta1));
        Ok(())
    }

    /// Cell-centered characteristic speed along each axis.
    fn velocities(&self, drift: &DriftFields) -> Vec<f64> {
        let d = self.params.dim();
        let n = self.state.grid.len();
        let mut v = vec![0.0; n * d];
        exec::par_for_each_chunk(&mut v, d, |k, out| {
            for ell in 0..d {
                let a = drift.cells[k].a[ell];
                let c = self.centers[k * d + ell];
                out[ell] = self.params.theta_f * self.phi_cells[k] * (a - c)
                    - self.params.theta_b * self.grad_v[k * d + ell];
            }
        });
        v
    }

    /// One explicit Euler step; returns the dt taken.
    pub fn step(&mut self, t_remaining: f64) -> Result<f64> {
        if self.drift.is_none() || self.steps % self.opts.refresh_every.max(1) == 0 {
            self.refresh_drift()?;
        }
        let drift = self.drift.as_ref().unwrap();
        let d = self.params.dim();
        let n = self.state.grid.len();
        let dc = self.state.grid.dc();
        let vel = self.velocities(drift);

        // CFL: bound the total outflow coefficient of every cell across all
        // of its interfaces (a cell on a velocity divergence drains both
        // ways, so the one-sided max speed alone is not enough).
        let interface_vel = |k: usize, ell: usize| -> Option<(usize, f64)> {
            let kp = self.state.grid.neighbor(k, ell, 1)?;
            Some((kp, 0.5 * (vel[k * d + ell] + vel[kp * d + ell])))
        };
        // Per-cell dissipation speed for the q equation: a high-frequency
        // perturbation of q (below the Δ₂ window, where E is insensitive)
        // rides on the frozen-E part of the flux, theta_f phi c + theta_b V',
        // so the interface viscosity must cover that as well as |vh|.
        let q_speed = |k: usize, ell: usize| -> f64 {
            self.params.theta_f * self.phi_cells[k] * self.centers[k * d + ell]
                + self.params.theta_b * self.grad_v[k * d + ell].abs()
        };

        let dt = if let Some(fixed) = self.opts.fixed_dt {
            fixed.min(t_remaining)
        } else {
            let mut outflow = vec![0.0f64; n];
            for ell in 0..d {
                for k in 0..n {
                    if let Some((kp, vh)) = interface_vel(k, ell) {
                        let aq = vh.abs().max(q_speed(k, ell).max(q_speed(kp, ell)));
                        outflow[k] += vh.max(0.0).max(aq);
                        outflow[kp] += (-vh).max(0.0).max(aq);
                    }
                }
            }
            let worst = outflow.iter().copied().fold(0.0f64, f64::max);
            if worst == 0.0 {
                // No dynamics: jump to the horizon.
                self.t += t_remaining;
                self.steps += 1;
                return Ok(t_remaining);
            }
            let dt = self.opts.cfl * dc / worst;
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(KinsegError::CflViolation { dt });
            }
            dt.min(t_remaining)
        };

        // Physical fluxes of the q equation per cell and axis.
        let mut flux_q = vec![0.0; n * d * 2];
        for k in 0..n {
            for ell in 0..d {
                let c = self.centers[k * d + ell];
                let gv = self.grad_v[k * d + ell];
                for s in 0..2 {
                    let q = self.state.rho_m[k][s];
                    flux_q[(k * d + ell) * 2 + s] = self.params.theta_f
                        * self.phi_cells[k]
                        * (drift.cells[k].e[s][ell] - c * q)
                        - self.params.theta_b * gv * q;
                }
            }
        }

        // Rusanov divergence, both equations, all axes. The rho flux uses
        // the interface velocity (arithmetic average of the two cell values)
        // for both the advective part and the dissipation: for a flux linear
        // in rho this is exact upwinding, which avoids the numerical
        // boundary layer a larger dissipation coefficient would leave at the
        // attracting feature-box corners. The q flux keeps the central
        // average of its cell values with the wider q wave speed.
        let mut div_rho = vec![0.0; n];
        let mut div_q = vec![[0.0f64; 2]; n];
        for ell in 0..d {
            for k in 0..n {
                let Some((kp, vh)) = interface_vel(k, ell) else {
                    continue; // no-flux boundary
                };
                let a = vh.abs();
                let f_hat = 0.5 * vh * (self.state.rho[k] + self.state.rho[kp])
                    - 0.5 * a * (self.state.rho[kp] - self.state.rho[k]);
                div_rho[k] += f_hat;
                div_rho[kp] -= f_hat;
                let aq = a.max(q_speed(k, ell).max(q_speed(kp, ell)));
                for s in 0..2 {
                    let g_hat = 0.5
                        * (flux_q[(k * d + ell) * 2 + s] + flux_q[(kp * d + ell) * 2 + s])
                        - 0.5 * aq * (self.state.rho_m[kp][s] - self.state.rho_m[k][s]);
                    div_q[k][s] += g_hat;
                    div_q[kp][s] -= g_hat;
                }
            }
        }

        // Euler update with the no-flux telescoping already built in. The
        // moment is limited to the physical cone |q_s| <= rho (positions lie
        // in [-1,1] per axis), which keeps the slice means in the domain and
        // prevents orphaned moment tails in drained cells from feeding back
        // through the equilibrium closure.
        let lam = dt / dc;
        let mut max_change: f64 = 0.0;
        for k in 0..n {
            let dr = lam * div_rho[k];
            let mut r = self.state.rho[k] - dr;
            debug_assert!(r > -1e-12, "rho[{k}] = {r}");
            if r < 0.0 {
                r = 0.0;
            }
            max_change = max_change.max(dr.abs());
            self.state.rho[k] = r;
            for s in 0..2 {
                let df = lam * div_q[k][s];
                max_change = max_change.max(df.abs());
                self.state.rho_m[k][s] = (self.state.rho_m[k][s] - df).clamp(-r, r);
            }
        }

        self.t += dt;
        self.steps += 1;
        let mass = self.state.total_mass();
        self.mass_drift = self
            .mass_drift
            .max(((mass - self.initial_mass) / self.initial_mass.max(1e-300)).abs());
        if self.opts.steady_tol > 0.0 && max_change / dt < self.opts.steady_tol {
            self.steady = true;
        }
        Ok(dt)
    }

    /// Step until `t_final`, stopping early at a numerical fixed point.
    pub fn run_to_time(&mut self, t_final: f64) -> Result<()> {
        while self.t < t_final - 1e-12 && !self.steady {
            self.step(t_final - self.t)?;
        }
        Ok(())
    }

    /// Like [`Self::run_to_time`], invoking `observe` at the start, roughly
    /// every `interval` time units, and at the end.
    pub fn run_with_observer<F>(&mut self, t_final: f64, interval: f64, mut observe: F) -> Result<()>
    where
        F: FnMut(f64, &MacroState),
    {
        observe(self.t, &self.state);
        let mut next = self.t + interval;
        while self.t < t_final - 1e-12 && !self.steady {
            self.step(t_final - self.t)?;
            if self.t >= next {
                observe(self.t, &self.state);
                next = self.t + interval;
            }
        }
        observe(self.t, &self.state);
        Ok(())
    }
}

/// Normalized L1 discrepancy between two densities on the same grid:
/// `∫ |rho - target| dc / ∫ target dc`.
pub fn l1_loss(rho_final: &[f64], rho_target: &[f64], grid: &FeatureGrid) -> Result<f64> {
    assert_eq!(rho_final.len(), rho_target.len());
    let vol = grid.cell_volume();
    let denom: f64 = rho_target.iter().sum::<f64>() * vol;
    if denom <= 0.0 {
        return Err(KinsegError::ZeroTarget);
    }
    let num: f64 = rho_final
        .iter()
        .zip(rho_target)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        * vol;
    Ok(num / denom)
}

/// Feature histogram of a binary mask image: the target density
/// `rho_GTSM(c)`. Mask values are 0/1 per channel, so the mass lands in the
/// first/last cells of each axis.
pub fn rho_gtsm_from_mask(mask: &ImageField, grid: &FeatureGrid) -> Vec<f64> {
    assert_eq!(mask.channels, grid.dim);
    let mut counts = vec![0u64; grid.len()];
    let mut feat = vec![0.0; grid.dim];
    for p in 0..mask.pixel_count() {
        for ch in 0..grid.dim {
            feat[ch] = mask.values[p * mask.channels + ch];
        }
        counts[grid.bin(&feat)] += 1;
    }
    let scale = 1.0 / (mask.pixel_count() as f64 * grid.cell_volume());
    counts.iter().map(|&c| c as f64 * scale).collect()
}

/// Rusanov divergence of a frozen-velocity scalar field along one axis;
/// exposed for the linear-advection order tests.
pub fn rusanov_divergence_frozen(
    grid: &FeatureGrid,
    axis: usize,
    u: &[f64],
    vel: &[f64],
    div: &mut [f64],
) {
    div.fill(0.0);
    for k in 0..grid.len() {
        let Some(kp) = grid.neighbor(k, axis, 1) else {
            continue;
        };
        let vh = 0.5 * (vel[k] + vel[kp]);
        let f_hat = 0.5 * vh * (u[k] + u[kp]) - 0.5 * vh.abs() * (u[kp] - u[k]);
        div[k] += f_hat;
        div[kp] -= f_hat;
    }
}
