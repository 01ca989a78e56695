//! Fixed-radius neighbor queries over particle positions.
//!
//! A uniform hash grid with cell size equal to the query radius answers
//! exact ball queries by scanning the 3x3 cell neighborhood. The O(N²)
//! scan is kept as the oracle for tests.

use crate::ensemble::ParticleEnsemble;

pub struct SpatialHashGrid {
    radius: f64,
    cell: f64,
    nx: usize,
    ny: usize,
    /// CSR layout: particle ids sorted by cell.
    entries: Vec<u32>,
    starts: Vec<u32>,
}

impl SpatialHashGrid {
    /// Build over the current positions. The grid cell size is the query
    /// radius, capped so degenerate radii cannot allocate huge tables.
    pub fn build(ensemble: &ParticleEnsemble, radius: f64) -> Self {
        assert!(radius > 0.0);
        let span = 2.0;
        let cell = radius.max(span / 256.0);
        let nx = (span / cell).ceil() as usize + 1;
        let ny = nx;
        let n = ensemble.len();
        let cell_of = |x: f64, y: f64| -> usize {
            let i = (((x + 1.0) / cell) as usize).min(nx - 1);
            let j = (((y + 1.0) / cell) as usize).min(ny - 1);
            j * nx + i
        };
        let mut counts = vec![0u32; nx * ny + 1];
        for p in 0..n {
            let [x, y] = ensemble.position(p);
            counts[cell_of(x, y) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut cursor = counts;
        let mut entries = vec![0u32; n];
        for p in 0..n {
            let [x, y] = ensemble.position(p);
            let c = cell_of(x, y);
            entries[cursor[c] as usize] = p as u32;
            cursor[c] += 1;
        }
        Self {
            radius,
            cell,
            nx,
            ny,
            entries,
            starts,
        }
    }

    /// Mean feature over the open ball of the build radius around particle
    /// `i`, including `i` itself (so the neighborhood is never empty).
    pub fn mean_feature_around(
        &self,
        ensemble: &ParticleEnsemble,
        i: usize,
        out: &mut [f64],
    ) {
        let [xi, yi] = ensemble.position(i);
        let r2 = self.radius * self.radius;
        let ci = (((xi + 1.0) / self.cell) as usize).min(self.nx - 1);
        let cj = (((yi + 1.0) / self.cell) as usize).min(self.ny - 1);
        out.fill(0.0);
        let mut count = 0usize;
        for dj in -1i64..=1 {
            let j = cj as i64 + dj;
            if j < 0 || j >= self.ny as i64 {
                continue;
            }
            for di in -1i64..=1 {
                let ii = ci as i64 + di;
                if ii < 0 || ii >= self.nx as i64 {
                    continue;
                }
                let c = j as usize * self.nx + ii as usize;
                let lo = self.starts[c] as usize;
                let hi = self.starts[c + 1] as usize;
                for &q in &self.entries[lo..hi] {
                    let q = q as usize;
                    let dx = ensemble.positions[2 * q] - xi;
                    let dy = ensemble.positions[2 * q + 1] - yi;
                    if dx * dx + dy * dy < r2 {
                        let f = ensemble.feature(q);
                        for (o, v) in out.iter_mut().zip(f) {
                            *o += v;
                        }
                        count += 1;
                    }
                }
            }
        }
        debug_assert!(count > 0, "ball query must at least contain the particle itself");
        let inv = 1.0 / count as f64;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
}

/// O(N²) oracle for [`SpatialHashGrid::mean_feature_around`].
pub fn mean_feature_brute_force(
    ensemble: &ParticleEnsemble,
    i: usize,
    radius: f64,
    out: &mut [f64],
) {
    let [xi, yi] = ensemble.position(i);
    let r2 = radius * radius;
    out.fill(0.0);
    let mut count = 0usize;
    for q in 0..ensemble.len() {
        let dx = ensemble.positions[2 * q] - xi;
        let dy = ensemble.positions[2 * q + 1] - yi;
        if dx * dx + dy * dy < r2 {
            for (o, v) in out.iter_mut().zip(ensemble.feature(q)) {
                *o += v;
            }
            count += 1;
        }
    }
    let inv = 1.0 / count as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
}
