//! Spatial quasi-equilibrium of the fast aggregation-diffusion operator and
//! the derived fields that close the macroscopic system.
//!
//! For constant `sigma^2` the stationary slice at feature `c` is an
//! isotropic Gaussian restricted to `Ω`:
//!
//! ```text
//! f_inf(x, c) = rho(c) * g_c(x) * g_c(y),
//! mean        = 𝓕(c) / R(c),
//! variance    = sigma^2 / (2 R(c))   per spatial axis,
//! R(c)        = Σ_{|c - c'| < Δ₂} rho(c') Δc^d   (windowed mass),
//! ```
//!
//! with each 1-D profile renormalized over `[-1, 1]` (truncation at the
//! no-flux boundary). From the slices we evaluate, by midpoint quadrature
//! on the reconstruction grid,
//!
//! * `alpha(x)`: the local average feature within the Euclidean disc `Δ₁`,
//! * `A(c) = ∫ alpha f_inf dx / rho(c)`, a feature-valued convex average,
//! * `E(c) = ∫ x alpha f_inf dx` with slice mass `rho(c)`,
//!
//! which drive the transport fluxes of the reduced system.

use crate::exec;
use crate::grid::{FeatureGrid, FeatureWindow, SpatialDomain};
use crate::microsim::disc_offsets;
use crate::params::ModelParams;
use crate::{KinsegError, Result};

/// Cells whose mass is at roundoff scale are treated as empty: their
/// windowed R can cancel to exactly zero in the prefix sums, and a slice
/// carrying ~1e-19 of mass has no meaningful mean anyway.
pub(crate) const MASS_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct QuasiEquilibrium {
    pub grid: FeatureGrid,
    pub spatial: SpatialDomain,
    pub sigma2: f64,
    pub delta2: f64,
    /// Density `rho(c)` per feature cell.
    pub rho: Vec<f64>,
    /// Cell masses `rho Δc^d`.
    pub cell_mass: Vec<f64>,
    /// Windowed mass `R(c)`.
    pub r: Vec<f64>,
    /// Slice mean `m_inf(c) = 𝓕(c)/R(c)`; zero on empty windows.
    pub mean: Vec<[f64; 2]>,
    /// Per-axis slice variance `sigma^2 / (2 R(c))`.
    pub variance: Vec<f64>,
    /// Unit-mass 1-D profiles, cell-major: `gx[k*nx + i]`, `sum gx Δx = 1`.
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
}

/// Build the equilibrium fields from the conserved pair `(rho, 𝓕)`.
/// `rho` is a density on the feature grid; `f_cant` is in mass form.
pub fn build_equilibrium(
    rho: &[f64],
    f_cant: &[[f64; 2]],
    params: &ModelParams,
    grid: &FeatureGrid,
    spatial: &SpatialDomain,
) -> Result<QuasiEquilibrium> {
    let window = FeatureWindow::new(grid, params.delta2);
    build_equilibrium_with_window(rho, f_cant, params, grid, spatial, &window)
}

/// [`build_equilibrium`] with a precomputed window stencil (the stencil only
/// depends on the grid and `delta2`, so solver loops reuse one).
pub fn build_equilibrium_with_window(
    rho: &[f64],
    f_cant: &[[f64; 2]],
    params: &ModelParams,
    grid: &FeatureGrid,
    spatial: &SpatialDomain,
    window: &FeatureWindow,
) -> Result<QuasiEquilibrium> {
    if params.sigma2 <= 0.0 {
        return Err(KinsegError::ZeroDiffusion);
    }
    let n = grid.len();
    assert_eq!(rho.len(), n);
    assert_eq!(f_cant.len(), n);
    let vol = grid.cell_volume();
    let cell_mass: Vec<f64> = rho.iter().map(|&r| r * vol).collect();
    let r = window.sum_scalar(&cell_mass);

    let (nx, ny) = (spatial.nx, spatial.ny);
    let mut mean = vec![[0.0f64; 2]; n];
    let mut variance = vec![0.0f64; n];
    let mut gx = vec![0.0f64; n * nx];
    let mut gy = vec![0.0f64; n * ny];

    struct Row {
        mean: [f64; 2],
        var: f64,
        gx: Vec<f64>,
        gy: Vec<f64>,
    }

    let rows: Vec<Row> = exec::par_map_indexed(n, |k| {
        if cell_mass[k] <= MASS_FLOOR || r[k] <= MASS_FLOOR {
            return Row {
                mean: [0.0, 0.0],
                var: 0.0,
                gx: vec![0.0; nx],
                gy: vec![0.0; ny],
            };
        }
        // Slice means are positions in Omega; the clamp guards against
        // roundoff in the windowed ratio when R is near the floor.
        let m = [
            (f_cant[k][0] / r[k]).clamp(-1.0, 1.0),
            (f_cant[k][1] / r[k]).clamp(-1.0, 1.0),
        ];
        let var = params.sigma2 / (2.0 * r[k]);
        Row {
            mean: m,
            var,
            gx: truncated_gaussian_profile(spatial, 0, m[0], var),
            gy: truncated_gaussian_profile(spatial, 1, m[1], var),
        }
    });
    for (k, row) in rows.into_iter().enumerate() {
        mean[k] = row.mean;
        variance[k] = row.var;
        gx[k * nx..(k + 1) * nx].copy_from_slice(&row.gx);
        gy[k * ny..(k + 1) * ny].copy_from_slice(&row.gy);
    }

    Ok(QuasiEquilibrium {
        grid: grid.clone(),
        spatial: *spatial,
        sigma2: params.sigma2,
        delta2: params.delta2,
        rho: rho.to_vec(),
        cell_mass,
        r,
        mean,
        variance,
        gx,
        gy,
    })
}

/// Unit-mass 1-D Gaussian profile on the cell centers of one spatial axis,
/// renormalized over the truncated domain.
fn truncated_gaussian_profile(
    spatial: &SpatialDomain,
    axis: usize,
    mean: f64,
    var: f64,
) -> Vec<f64> {
    let (n, h) = if axis == 0 {
        (spatial.nx, spatial.dx())
    } else {
        (spatial.ny, spatial.dy())
    };
    let center = |i: usize| {
        if axis == 0 {
            spatial.x_center(i)
        } else {
            spatial.y_center(i)
        }
    };
    let inv_2v = 1.0 / (2.0 * var);
    let mut g: Vec<f64> = (0..n)
        .map(|i| {
            let d = center(i) - mean;
            (-d * d * inv_2v).exp()
        })
        .collect();
    let z: f64 = g.iter().sum::<f64>() * h;
    if z > 0.0 {
        for v in g.iter_mut() {
            *v /= z;
        }
    }
    g
}

impl QuasiEquilibrium {
    /// Materialize one slice density `f_inf(·, c_k)` (row-major over `y`),
    /// with spatial mass `rho(c_k)`.
    pub fn slice_density(&self, k: usize) -> Vec<f64> {
        let (nx, ny) = (self.spatial.nx, self.spatial.ny);
        let gx = &self.gx[k * nx..(k + 1) * nx];
        let gy = &self.gy[k * ny..(k + 1) * ny];
        let mut out = vec![0.0; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                out[j * nx + i] = self.rho[k] * gx[i] * gy[j];
            }
        }
        out
    }

    /// Mass-weighted mean feature of the whole state.
    pub fn global_mean_feature(&self) -> Vec<f64> {
        let d = self.grid.dim;
        let mut acc = vec![0.0; d];
        let mut total = 0.0;
        let mut c = vec![0.0; d];
        for k in 0..self.grid.len() {
            if self.cell_mass[k] == 0.0 {
                continue;
            }
            self.grid.center(k, &mut c);
            for ell in 0..d {
                acc[ell] += c[ell] * self.cell_mass[k];
            }
            total += self.cell_mass[k];
        }
        if total > 0.0 {
            for a in acc.iter_mut() {
                *a /= total;
            }
        } else {
            acc.fill(0.5);
        }
        acc
    }
}

/// The local average feature on the spatial grid.
#[derive(Debug, Clone)]
pub struct AlphaField {
    pub nx: usize,
    pub ny: usize,
    pub dim: usize,
    /// `values[(j*nx + i)*dim + ell]`.
    pub values: Vec<f64>,
    /// Cells whose disc window carried no mass and fell back to the global
    /// mean feature.
    pub empty_windows: usize,
}

impl AlphaField {
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let c = (j * self.nx + i) * self.dim;
        &self.values[c..c + self.dim]
    }
}

/// Evaluate `alpha(x)` on the reconstruction grid: the ratio of the
/// disc-windowed feature-weighted mass to the disc-windowed mass, both
/// accumulated from the equilibrium slices by midpoint quadrature.
pub fn alpha_field(eq: &QuasiEquilibrium, delta1: f64) -> AlphaField {
    let (nx, ny) = (eq.spatial.nx, eq.spatial.ny);
    let d = eq.grid.dim;
    let ncells = eq.grid.len();

    // Transposed profile tables: gxt[i*ncells + k] for a contiguous scan
    // over feature cells at fixed spatial index.
    let mut gxt = vec![0.0f64; nx * ncells];
    let mut gyt = vec![0.0f64; ny * ncells];
    for k in 0..ncells {
        for i in 0..nx {
            gxt[i * ncells + k] = eq.gx[k * nx + i];
        }
        for j in 0..ny {
            gyt[j * ncells + k] = eq.gy[k * ny + j];
        }
    }
    // Feature-weighted cell masses.
    let mut cw = vec![0.0f64; d * ncells];
    let mut center = vec![0.0f64; d];
    for k in 0..ncells {
        eq.grid.center(k, &mut center);
        for ell in 0..d {
            cw[ell * ncells + k] = center[ell] * eq.cell_mass[k];
        }
    }

    // Spatial mass density n(x) and feature-weighted density p(x).
    let mut fields = vec![0.0f64; nx * ny * (1 + d)];
    exec::par_for_each_chunk(&mut fields, 1 + d, |cell, out| {
        let (i, j) = (cell % nx, cell / nx);
        let gi = &gxt[i * ncells..(i + 1) * ncells];
        let gj = &gyt[j * ncells..(j + 1) * ncells];
        let mut nsum = 0.0;
        for k in 0..ncells {
            nsum += eq.cell_mass[k] * gi[k] * gj[k];
        }
        out[0] = nsum;
        for ell in 0..d {
            let w = &cw[ell * ncells..(ell + 1) * ncells];
            let mut psum = 0.0;
            for k in 0..ncells {
                psum += w[k] * gi[k] * gj[k];
            }
            out[1 + ell] = psum;
        }
    });

    // Disc-window convolution and the ratio.
    let offsets = disc_offsets(&eq.spatial, delta1);
    let global_mean = eq.global_mean_feature();
    let area = eq.spatial.dx() * eq.spatial.dy();
    let mut values = vec![0.0f64; nx * ny * d];
    let empty = std::sync::atomic::AtomicUsize::new(0);
    exec::par_for_each_chunk(&mut values, d, |cell, out| {
        let (i, j) = (cell % nx, cell / nx);
        let mut den = 0.0;
        let mut num = [0.0f64; 3];
        for &(di, dj) in &offsets {
            let ii = i as i64 + di;
            let jj = j as i64 + dj;
            if ii < 0 || jj < 0 || ii >= nx as i64 || jj >= ny as i64 {
                continue;
            }
            let src = (jj as usize * nx + ii as usize) * (1 + d);
            den += fields[src];
            for ell in 0..d {
                num[ell] += fields[src + 1 + ell];
            }
        }
        if den * area > 1e-300 {
            for ell in 0..d {
                out[ell] = num[ell] / den;
            }
        } else {
            out.copy_from_slice(&global_mean);
            empty.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        }
    });

    AlphaField {
        nx,
        ny,
        dim: d,
        values,
        empty_windows: empty.load(std::sync::atomic::Ordering::Relaxed),
    }
}

/// Per-cell drift data for the macroscopic fluxes.
#[derive(Debug, Clone, Copy)]
pub struct CellDrift {
    /// `A(c)` per feature axis.
    pub a: [f64; 3],
    /// `E(c)`: spatial component `s`, feature axis `ell`.
    pub e: [[f64; 3]; 2],
}

#[derive(Debug, Clone)]
pub struct DriftFields {
    pub m_inf: Vec<[f64; 2]>,
    pub cells: Vec<CellDrift>,
    pub alpha: AlphaField,
}

/// Evaluate `A(c)`, `E(c)` and `m_inf(c)` from the equilibrium slices.
/// Empty cells get the neutral drift `A(c) = c`, `E(c) = 0`.
pub fn drift_fields(eq: &QuasiEquilibrium, delta1: f64) -> DriftFields {
    let alpha = alpha_field(eq, delta1);
    let (nx, ny) = (eq.spatial.nx, eq.spatial.ny);
    let d = eq.grid.dim;
    let area = eq.spatial.dx() * eq.spatial.dy();
    let xs: Vec<f64> = (0..nx).map(|i| eq.spatial.x_center(i)).collect();
    let ys: Vec<f64> = (0..ny).map(|j| eq.spatial.y_center(j)).collect();

    let cells: Vec<CellDrift> = exec::par_map_indexed(eq.grid.len(), |k| {
        let mut drift = CellDrift {
            a: [0.0; 3],
            e: [[0.0; 3]; 2],
        };
        if eq.cell_mass[k] <= MASS_FLOOR {
            let mut c = [0.0f64; 3];
            eq.grid.center(k, &mut c[..d]);
            drift.a = c;
            return drift;
        }
        let gx = &eq.gx[k * nx..(k + 1) * nx];
        let gy = &eq.gy[k * ny..(k + 1) * ny];
        let mut acc_a = [0.0f64; 3];
        let mut acc_e = [[0.0f64; 3]; 2];
        for j in 0..ny {
            let wy = gy[j] * area;
            for i in 0..nx {
                let w = gx[i] * wy;
                let al = alpha.at(i, j);
                for ell in 0..d {
                    let wa = w * al[ell];
                    acc_a[ell] += wa;
                    acc_e[0][ell] += wa * xs[i];
                    acc_e[1][ell] += wa * ys[j];
                }
            }
        }
        // acc_a is the unit-slice average of alpha (A in [0,1]^d); E keeps
        // the slice mass rho(c).
        drift.a = acc_a;
        for s in 0..2 {
            for ell in 0..d {
                drift.e[s][ell] = eq.rho[k] * acc_e[s][ell];
            }
        }
        drift
    });

    DriftFields {
        m_inf: eq.mean.clone(),
        cells,
        alpha,
    }
}

/// Sequential reference for [`drift_fields`]; used by the benches to compare
/// the parallel and sequential paths.
pub fn drift_fields_seq(eq: &QuasiEquilibrium, delta1: f64) -> DriftFields {
    #[cfg(feature = "parallel")]
    {
        // Route through a single-thread pool so the arithmetic is identical.
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool");
        pool.install(|| drift_fields(eq, delta1))
    }
    #[cfg(not(feature = "parallel"))]
    {
        drift_fields(eq, delta1)
    }
}
