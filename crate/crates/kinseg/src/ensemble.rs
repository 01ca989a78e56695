//! Particle ensembles and their histogram/moment estimators.
//!
//! Conventions used throughout:
//!
//! * `rho_from_ensemble` returns a *density* on the feature grid
//!   (sums to 1 after multiplying by the cell volume);
//! * windowed quantities (`R`, `𝓕`) and per-cell first moments (`ρ·m`) are
//!   kept in *mass* form: `𝓕(c_k) = Σ_{j: |c_k - c_j| < Δ₂} Σ_{i in cell j} x_i / N`.
//!   Mass form is well-defined on empty cells, where the bare mean `m` is not.

use crate::grid::{FeatureGrid, SpatialDomain};
use crate::image_field::ImageField;
use crate::{KinsegError, Result};

/// One particle per pixel: positions in `Ω`, features in `[0,1]^d`, and the
/// originating `(row, col)` identity which is never modified.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub dim: usize,
    /// `n x 2`, interleaved `(x, y)`.
    pub positions: Vec<f64>,
    /// `n x dim`, interleaved channels.
    pub features: Vec<f64>,
    pub pixel_index: Vec<(u32, u32)>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.pixel_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_index.is_empty()
    }

    #[inline]
    pub fn position(&self, i: usize) -> [f64; 2] {
        [self.positions[2 * i], self.positions[2 * i + 1]]
    }

    #[inline]
    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Debug check of the state invariants: positions inside `Ω`, features
    /// inside the unit box.
    pub fn check_invariants(&self) {
        debug_assert!(self
            .positions
            .iter()
            .all(|v| (SpatialDomain::X_MIN..=SpatialDomain::X_MAX).contains(v)));
        debug_assert!(self.features.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

/// Build one particle per pixel of a normalized image. Pixel centers map
/// affinely into `Ω`: column `c` of `w` lands at `x = -1 + (c + 0.5) * 2/w`,
/// rows likewise onto `y`.
pub fn ensemble_from_image(image: &ImageField) -> ParticleEnsemble {
    let n = image.pixel_count();
    let mut positions = Vec::with_capacity(2 * n);
    let mut features = Vec::with_capacity(n * image.channels);
    let mut pixel_index = Vec::with_capacity(n);
    let sx = 2.0 / image.width as f64;
    let sy = 2.0 / image.height as f64;
    for row in 0..image.height {
        for col in 0..image.width {
            positions.push(-1.0 + (col as f64 + 0.5) * sx);
            positions.push(-1.0 + (row as f64 + 0.5) * sy);
            for ch in 0..image.channels {
                features.push(image.get(row, col, ch));
            }
            pixel_index.push((row as u32, col as u32));
        }
    }
    ParticleEnsemble {
        dim: image.channels,
        positions,
        features,
        pixel_index,
    }
}

/// Joint position-feature histogram density `f(x, c)` with the indicator
/// mollifier (cell-center binning per axis). The table is flat with the
/// spatial index fastest: `values[(k * ny + j) * nx + i]`, and sums to 1
/// after multiplying by `Δx Δy Δc^d`.
#[derive(Debug, Clone)]
pub struct JointHistogram {
    pub spatial: SpatialDomain,
    pub grid: FeatureGrid,
    pub values: Vec<f64>,
}

pub fn histogram_density(
    ensemble: &ParticleEnsemble,
    grid: &FeatureGrid,
    spatial: &SpatialDomain,
) -> Result<JointHistogram> {
    if ensemble.is_empty() {
        return Err(KinsegError::EmptyEnsemble);
    }
    let mut counts = vec![0u64; grid.len() * spatial.nx * spatial.ny];
    for p in 0..ensemble.len() {
        let [x, y] = ensemble.position(p);
        let (i, j) = spatial.cell_of(x, y);
        let k = grid.bin(ensemble.feature(p));
        counts[(k * spatial.ny + j) * spatial.nx + i] += 1;
    }
    let cell_vol = spatial.dx() * spatial.dy() * grid.cell_volume();
    let scale = 1.0 / (ensemble.len() as f64 * cell_vol);
    let values = counts.iter().map(|&c| c as f64 * scale).collect();
    Ok(JointHistogram {
        spatial: *spatial,
        grid: grid.clone(),
        values,
    })
}

impl JointHistogram {
    /// Marginalize over space: recovers the feature density.
    pub fn feature_marginal(&self) -> Vec<f64> {
        let per_cell = self.spatial.nx * self.spatial.ny;
        let da = self.spatial.dx() * self.spatial.dy();
        (0..self.grid.len())
            .map(|k| {
                self.values[k * per_cell..(k + 1) * per_cell]
                    .iter()
                    .sum::<f64>()
                    * da
            })
            .collect()
    }
}

/// Feature-marginal histogram density: `rho_k = n_k / (N Δc^d)`.
pub fn rho_from_ensemble(ensemble: &ParticleEnsemble, grid: &FeatureGrid) -> Vec<f64> {
    let mut counts = vec![0u64; grid.len()];
    for p in 0..ensemble.len() {
        counts[grid.bin(ensemble.feature(p))] += 1;
    }
    let scale = 1.0 / (ensemble.len() as f64 * grid.cell_volume());
    counts.iter().map(|&c| c as f64 * scale).collect()
}

/// Per-cell mass fractions and raw first moments.
#[derive(Debug, Clone)]
pub struct CellMoments {
    /// `n_k / N` per feature cell.
    pub mass: Vec<f64>,
    /// `Σ_{i in cell} x_i / N` per feature cell (2-vector, mass-weighted).
    pub rho_m: Vec<[f64; 2]>,
}

pub fn cell_moments(ensemble: &ParticleEnsemble, grid: &FeatureGrid) -> CellMoments {
    let mut mass = vec![0.0; grid.len()];
    let mut rho_m = vec![[0.0; 2]; grid.len()];
    let w = 1.0 / ensemble.len() as f64;
    for p in 0..ensemble.len() {
        let k = grid.bin(ensemble.feature(p));
        let [x, y] = ensemble.position(p);
        mass[k] += w;
        rho_m[k][0] += x * w;
        rho_m[k][1] += y * w;
    }
    CellMoments { mass, rho_m }
}

/// Windowed first moment `𝓕(c_k)` (mass form): the sum of `ρ·m` over all
/// feature cells within `Δ₂` of `c_k`.
pub fn f_cant_from_ensemble(
    ensemble: &ParticleEnsemble,
    grid: &FeatureGrid,
    delta2: f64,
) -> Vec<[f64; 2]> {
    let m = cell_moments(ensemble, grid);
    window_sum_vec(&m.rho_m, grid, delta2)
}

/// Window sum of a per-cell 2-vector field.
pub fn window_sum_vec(values: &[[f64; 2]], grid: &FeatureGrid, delta2: f64) -> Vec<[f64; 2]> {
    let n = grid.len();
    let mut out = vec![[0.0; 2]; n];
    for k in 0..n {
        let mut acc = [0.0; 2];
        for j in 0..n {
            if grid.center_distance(k, j) < delta2 {
                acc[0] += values[j][0];
                acc[1] += values[j][1];
            }
        }
        out[k] = acc;
    }
    out
}

/// Window sum of a per-cell scalar field.
pub fn window_sum_scalar(values: &[f64], grid: &FeatureGrid, delta2: f64) -> Vec<f64> {
    let n = grid.len();
    let mut out = vec![0.0; n];
    for k in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            if grid.center_distance(k, j) < delta2 {
                acc += values[j];
            }
        }
        out[k] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_field::normalize_features;

    fn tiny_image(w: usize, h: usize) -> ImageField {
        let mut img = ImageField::new(w, h, 1);
        for (i, v) in img.values.iter_mut().enumerate() {
            *v = (i % 7) as f64;
        }
        normalize_features(&img).0
    }

    #[test]
    fn two_by_two_positions() {
        let img = tiny_image(2, 2);
        let e = ensemble_from_image(&img);
        assert_eq!(e.len(), 4);
        assert_eq!(e.position(0), [-0.5, -0.5]);
        assert_eq!(e.position(1), [0.5, -0.5]);
        assert_eq!(e.position(2), [-0.5, 0.5]);
        assert_eq!(e.position(3), [0.5, 0.5]);
    }

    #[test]
    fn all_particles_inside_domain() {
        let e = ensemble_from_image(&tiny_image(40, 40));
        assert_eq!(e.len(), 1600);
        for p in 0..e.len() {
            let [x, y] = e.position(p);
            assert!(SpatialDomain::contains(x, y));
        }
    }

    #[test]
    fn rgb_image_gives_three_features() {
        let mut img = ImageField::new(28, 28, 3);
        for (i, v) in img.values.iter_mut().enumerate() {
            *v = (i % 11) as f64;
        }
        let e = ensemble_from_image(&normalize_features(&img).0);
        assert_eq!(e.len(), 784);
        assert_eq!(e.dim, 3);
        assert_eq!(e.feature(0).len(), 3);
    }

    #[test]
    fn pixel_index_roundtrip() {
        let img = tiny_image(13, 9);
        let e = ensemble_from_image(&img);
        for (p, &(row, col)) in e.pixel_index.iter().enumerate() {
            assert_eq!(p, row as usize * 13 + col as usize);
        }
    }

    #[test]
    fn histogram_single_cell() {
        // All particles in one cell: that cell holds 1/(cell volume).
        let mut e = ensemble_from_image(&tiny_image(4, 4));
        for p in 0..e.len() {
            e.positions[2 * p] = 0.31;
            e.positions[2 * p + 1] = -0.11;
            e.features[p] = 0.52;
        }
        let grid = FeatureGrid::new(1, 10);
        let spatial = SpatialDomain::new(8, 8);
        let h = histogram_density(&e, &grid, &spatial).unwrap();
        let vol = spatial.dx() * spatial.dy() * grid.cell_volume();
        let nonzero: Vec<f64> = h.values.iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert!((nonzero[0] - 1.0 / vol).abs() < 1e-9);
    }

    #[test]
    fn histogram_uniform_multinomial() {
        // Uniform particles: per-cell counts within 4 sigma of the
        // multinomial expectation (fixed seed).
        use rand::Rng;
        let mut rng = crate::rng::RngStream::new(3, 0).rng();
        let n = 100_000;
        let mut e = ParticleEnsemble {
            dim: 1,
            positions: Vec::with_capacity(2 * n),
            features: Vec::with_capacity(n),
            pixel_index: vec![(0, 0); n],
        };
        for _ in 0..n {
            e.positions.push(rng.random_range(-1.0..1.0));
            e.positions.push(rng.random_range(-1.0..1.0));
            e.features.push(rng.random::<f64>());
        }
        let grid = FeatureGrid::new(1, 10);
        let spatial = SpatialDomain::new(10, 10);
        let h = histogram_density(&e, &grid, &spatial).unwrap();
        let cells = grid.len() * 100;
        let p = 1.0 / cells as f64;
        let expect = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let vol = spatial.dx() * spatial.dy() * grid.cell_volume();
        for &v in &h.values {
            let count = v * vol * n as f64;
            assert!(
                (count - expect).abs() <= 4.0 * sigma,
                "count {count} vs {expect} +- {sigma}"
            );
        }
    }

    #[test]
    fn histogram_marginal_matches_rho() {
        let img = tiny_image(20, 20);
        let e = ensemble_from_image(&img);
        let grid = FeatureGrid::new(1, 12);
        let spatial = SpatialDomain::new(16, 16);
        let h = histogram_density(&e, &grid, &spatial).unwrap();
        let marg = h.feature_marginal();
        let rho = rho_from_ensemble(&e, &grid);
        for (a, b) in marg.iter().zip(&rho) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rho_mass_is_one() {
        let e = ensemble_from_image(&tiny_image(17, 23));
        let grid = FeatureGrid::new(1, 30);
        let rho = rho_from_ensemble(&e, &grid);
        let mass: f64 = rho.iter().sum::<f64>() * grid.cell_volume();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fcant_concentrated() {
        // All particles at feature 0.5, position (0.3, -0.1): F(c) equals
        // that position for every cell within delta2 of 0.5, zero outside.
        let n = 64;
        let e = ParticleEnsemble {
            dim: 1,
            positions: (0..n).flat_map(|_| [0.3, -0.1]).collect(),
            features: vec![0.5; n],
            pixel_index: vec![(0, 0); n],
        };
        let grid = FeatureGrid::new(1, 10);
        let f = f_cant_from_ensemble(&e, &grid, 0.25);
        let source = grid.bin(&[0.5]);
        for k in 0..grid.len() {
            let d = grid.center_distance(k, source);
            if d < 0.25 {
                assert!((f[k][0] - 0.3).abs() < 1e-12);
                assert!((f[k][1] + 0.1).abs() < 1e-12);
            } else {
                assert_eq!(f[k], [0.0, 0.0]);
            }
        }
    }

    #[test]
    fn fcant_mirrored_is_zero() {
        // Mirror pairs cancel exactly in the mass-weighted sums.
        let mut positions = Vec::new();
        let mut features = Vec::new();
        let pts = [(0.3, 0.4, 0.2), (-0.7, 0.1, 0.8), (0.05, -0.95, 0.5)];
        for &(x, y, c) in &pts {
            positions.extend_from_slice(&[x, y]);
            features.push(c);
            positions.extend_from_slice(&[-x, -y]);
            features.push(c);
        }
        let e = ParticleEnsemble {
            dim: 1,
            positions,
            features,
            pixel_index: vec![(0, 0); 6],
        };
        let grid = FeatureGrid::new(1, 10);
        let m = cell_moments(&e, &grid);
        for v in &m.rho_m {
            assert_eq!(v[0], 0.0);
            assert_eq!(v[1], 0.0);
        }
        let f = f_cant_from_ensemble(&e, &grid, 0.4);
        assert!(f.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
    }

    #[test]
    fn fcant_full_window_is_constant() {
        // Delta2 = 1 in 1D: F is constant and equals the global mean position.
        use rand::Rng;
        let mut rng = crate::rng::RngStream::new(9, 0).rng();
        let n = 500;
        let mut e = ParticleEnsemble {
            dim: 1,
            positions: Vec::new(),
            features: Vec::new(),
            pixel_index: vec![(0, 0); n],
        };
        for _ in 0..n {
            e.positions.push(rng.random_range(-1.0..1.0));
            e.positions.push(rng.random_range(-1.0..1.0));
            e.features.push(rng.random::<f64>());
        }
        let grid = FeatureGrid::new(1, 30);
        let f = f_cant_from_ensemble(&e, &grid, 1.0);
        let mean_x: f64 = (0..n).map(|p| e.positions[2 * p]).sum::<f64>() / n as f64;
        let mean_y: f64 = (0..n).map(|p| e.positions[2 * p + 1]).sum::<f64>() / n as f64;
        for v in &f {
            assert!((v[0] - mean_x).abs() < 1e-12);
            assert!((v[1] - mean_y).abs() < 1e-12);
        }
    }
}
