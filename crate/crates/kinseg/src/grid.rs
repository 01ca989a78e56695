//! Spatial domain and feature-space grids.

use serde::{Deserialize, Serialize};

/// The rescaled spatial domain `Ω = [-1,1] × [-1,1]` with a reconstruction
/// grid of `nx × ny` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialDomain {
    pub nx: usize,
    pub ny: usize,
}

impl SpatialDomain {
    pub const X_MIN: f64 = -1.0;
    pub const X_MAX: f64 = 1.0;

    pub fn new(nx: usize, ny: usize) -> Self {
        assert!(nx > 0 && ny > 0);
        Self { nx, ny }
    }

    pub fn dx(&self) -> f64 {
        (Self::X_MAX - Self::X_MIN) / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        (Self::X_MAX - Self::X_MIN) / self.ny as f64
    }

    pub fn x_center(&self, i: usize) -> f64 {
        Self::X_MIN + (i as f64 + 0.5) * self.dx()
    }

    pub fn y_center(&self, j: usize) -> f64 {
        Self::X_MIN + (j as f64 + 0.5) * self.dy()
    }

    /// Cell index of a point, clamped into the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let i = ((x - Self::X_MIN) / self.dx()).floor() as i64;
        let j = ((y - Self::X_MIN) / self.dy()).floor() as i64;
        (
            i.clamp(0, self.nx as i64 - 1) as usize,
            j.clamp(0, self.ny as i64 - 1) as usize,
        )
    }

    pub fn contains(x: f64, y: f64) -> bool {
        (Self::X_MIN..=Self::X_MAX).contains(&x) && (Self::X_MIN..=Self::X_MAX).contains(&y)
    }

    /// Reflect a coordinate back into `[-1, 1]`.
    pub fn reflect(mut v: f64) -> f64 {
        while v < Self::X_MIN || v > Self::X_MAX {
            if v < Self::X_MIN {
                v = 2.0 * Self::X_MIN - v;
            } else {
                v = 2.0 * Self::X_MAX - v;
            }
        }
        v
    }
}

/// Uniform grid over the feature box `[0,1]^d` with `nc` cells per axis.
///
/// Cells are half-open `[left, right)` except the last cell on each axis,
/// which is closed on the right so that a feature value of exactly 1 bins
/// into it. Flat indices are row-major with axis 0 fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub dim: usize,
    pub nc: usize,
}

impl FeatureGrid {
    pub fn new(dim: usize, nc: usize) -> Self {
        assert!(dim == 1 || dim == 3, "feature dimension must be 1 or 3");
        assert!(nc > 0);
        Self { dim, nc }
    }

    pub fn dc(&self) -> f64 {
        1.0 / self.nc as f64
    }

    /// Total number of cells, `nc^d`.
    pub fn len(&self) -> usize {
        self.nc.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Cell volume `Δc^d`.
    pub fn cell_volume(&self) -> f64 {
        self.dc().powi(self.dim as i32)
    }

    /// Per-axis bin of a scalar value in `[0,1]`.
    pub fn axis_bin(&self, v: f64) -> usize {
        let b = (v / self.dc()).floor() as i64;
        b.clamp(0, self.nc as i64 - 1) as usize
    }

    /// Flat cell index of a feature vector (`features.len() == dim`).
    pub fn bin(&self, features: &[f64]) -> usize {
        debug_assert_eq!(features.len(), self.dim);
        let mut idx = 0;
        for ell in (0..self.dim).rev() {
            idx = idx * self.nc + self.axis_bin(features[ell]);
        }
        idx
    }

    /// Multi-index of a flat cell index, axis 0 fastest.
    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        debug_assert_eq!(out.len(), self.dim);
        for slot in out.iter_mut() {
            *slot = flat % self.nc;
            flat /= self.nc;
        }
    }

    /// Cell-center coordinate along one axis.
    pub fn axis_center(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * self.dc()
    }

    /// Cell-center feature vector of a flat index.
    pub fn center(&self, flat: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let mut rem = flat;
        for slot in out.iter_mut() {
            *slot = self.axis_center(rem % self.nc);
            rem /= self.nc;
        }
    }

    /// Distance between two cell centers: absolute value for `d = 1`,
    /// Euclidean norm for `d = 3`.
    pub fn center_distance(&self, a: usize, b: usize) -> f64 {
        if self.dim == 1 {
            self.dc() * (a as f64 - b as f64).abs()
        } else {
            let mut ma = [0usize; 3];
            let mut mb = [0usize; 3];
            self.multi_index(a, &mut ma[..self.dim]);
            self.multi_index(b, &mut mb[..self.dim]);
            let mut s = 0.0;
            for ell in 0..self.dim {
                let d = self.dc() * (ma[ell] as f64 - mb[ell] as f64);
                s += d * d;
            }
            s.sqrt()
        }
    }

    /// Flat neighbor index offset by `step` cells along `axis`, if in range.
    pub fn neighbor(&self, flat: usize, axis: usize, step: i64) -> Option<usize> {
        let mut mi = [0usize; 3];
        self.multi_index(flat, &mut mi[..self.dim]);
        let b = mi[axis] as i64 + step;
        if b < 0 || b >= self.nc as i64 {
            return None;
        }
        mi[axis] = b as usize;
        let mut idx = 0;
        for ell in (0..self.dim).rev() {
            idx = idx * self.nc + mi[ell];
        }
        Some(idx)
    }
}

/// Precomputed evaluator of window sums `Σ_{|c_k - c_j| < Δ₂} v_j` over the
/// feature grid.
///
/// The ball of radius `Δ₂` (interval for `d = 1`) is decomposed into runs
/// along axis 0: one `(dj, dk, imax)` triple per transverse offset, with the
/// run summed in O(1) from per-row prefix sums. Total cost is
/// `O(cells * transverse stencil)` instead of the quadratic all-pairs scan.
#[derive(Debug, Clone)]
pub struct FeatureWindow {
    dim: usize,
    nc: usize,
    /// `(dj, dk, imax)`: cells `(i + di, j + dj, k + dk)` with `|di| <= imax`
    /// are inside the window.
    pairs: Vec<(i64, i64, i64)>,
}

impl FeatureWindow {
    pub fn new(grid: &FeatureGrid, delta2: f64) -> Self {
        let dc = grid.dc();
        let reach = (delta2 / dc).ceil() as i64;
        let mut pairs = Vec::new();
        let run_len = |dj: i64, dk: i64| -> Option<i64> {
            let trans2 = (dj as f64 * dc).powi(2) + (dk as f64 * dc).powi(2);
            if trans2 >= delta2 * delta2 {
                return None;
            }
            let mut imax = -1;
            for di in 0..=reach {
                if (di as f64 * dc).powi(2) + trans2 < delta2 * delta2 {
                    imax = di;
                } else {
                    break;
                }
            }
            (imax >= 0).then_some(imax)
        };
        if grid.dim == 1 {
            if let Some(imax) = run_len(0, 0) {
                pairs.push((0, 0, imax));
            }
        } else {
            for dk in -reach..=reach {
                for dj in -reach..=reach {
                    if let Some(imax) = run_len(dj, dk) {
                        pairs.push((dj, dk, imax));
                    }
                }
            }
        }
        Self {
            dim: grid.dim,
            nc: grid.nc,
            pairs,
        }
    }

    fn rows(&self) -> usize {
        self.nc.pow(self.dim as u32 - 1)
    }

    /// Windowed sum of a scalar per-cell field.
    pub fn sum_scalar(&self, values: &[f64]) -> Vec<f64> {
        let nc = self.nc;
        let rows = self.rows();
        debug_assert_eq!(values.len(), rows * nc);
        // Per-row inclusive prefix sums, with a leading zero.
        let mut prefix = vec![0.0f64; rows * (nc + 1)];
        for r in 0..rows {
            let src = &values[r * nc..(r + 1) * nc];
            let dst = &mut prefix[r * (nc + 1)..(r + 1) * (nc + 1)];
            for i in 0..nc {
                dst[i + 1] = dst[i] + src[i];
            }
        }
        let mut out = vec![0.0f64; rows * nc];
        let nrows_j = if self.dim == 1 { 1 } else { nc };
        crate::exec::par_for_each_chunk(&mut out, nc, |row, chunk| {
            let (j, k) = (row % nrows_j, row / nrows_j);
            for (i, slot) in chunk.iter_mut().enumerate() {
                let mut acc = 0.0;
                for &(dj, dk, imax) in &self.pairs {
                    let jj = j as i64 + dj;
                    let kk = k as i64 + dk;
                    if jj < 0 || kk < 0 || jj >= nrows_j as i64 || kk >= (rows / nrows_j) as i64
                    {
                        continue;
                    }
                    let rr = kk as usize * nrows_j + jj as usize;
                    let lo = (i as i64 - imax).max(0) as usize;
                    let hi = ((i as i64 + imax).min(nc as i64 - 1) + 1) as usize;
                    let p = &prefix[rr * (nc + 1)..(rr + 1) * (nc + 1)];
                    acc += p[hi] - p[lo];
                }
                *slot = acc;
            }
        });
        out
    }

    /// Windowed sum of a 2-vector per-cell field.
    pub fn sum_vec2(&self, values: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let xs: Vec<f64> = values.iter().map(|v| v[0]).collect();
        let ys: Vec<f64> = values.iter().map(|v| v[1]).collect();
        let sx = self.sum_scalar(&xs);
        let sy = self.sum_scalar(&ys);
        sx.into_iter().zip(sy).map(|(a, b)| [a, b]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binning_is_half_open_with_closed_top() {
        let g = FeatureGrid::new(1, 10);
        assert_eq!(g.axis_bin(0.0), 0);
        assert_eq!(g.axis_bin(0.1), 1); // left edge of the second cell
        assert_eq!(g.axis_bin(0.999), 9);
        assert_eq!(g.axis_bin(1.0), 9); // closed top
    }

    #[test]
    fn multi_index_roundtrip() {
        let g = FeatureGrid::new(3, 7);
        for flat in [0, 1, 6, 7, 48, 342, 100] {
            let mut mi = [0usize; 3];
            g.multi_index(flat, &mut mi);
            let c: Vec<f64> = mi.iter().map(|&b| g.axis_center(b)).collect();
            assert_eq!(g.bin(&c), flat);
        }
    }

    #[test]
    fn centers_interior() {
        let g = FeatureGrid::new(1, 30);
        for k in 0..30 {
            let c = g.axis_center(k);
            assert!(c > 0.0 && c < 1.0);
        }
    }

    #[test]
    fn reflection_stays_inside() {
        for v in [-1.5, 1.5, 2.7, -3.1, 0.2] {
            let r = SpatialDomain::reflect(v);
            assert!((-1.0..=1.0).contains(&r), "{v} -> {r}");
        }
        assert_eq!(SpatialDomain::reflect(1.2), 0.8);
        assert_eq!(SpatialDomain::reflect(-1.2), -0.8);
    }

    #[test]
    fn spatial_cells() {
        let d = SpatialDomain::new(30, 30);
        assert!((d.dx() - 2.0 / 30.0).abs() < 1e-15);
        assert_eq!(d.cell_of(-1.0, -1.0), (0, 0));
        assert_eq!(d.cell_of(1.0, 1.0), (29, 29));
    }

    // Oracle: the all-pairs scan over cell-center distances.
    fn window_sum_naive(values: &[f64], grid: &FeatureGrid, delta2: f64) -> Vec<f64> {
        let n = grid.len();
        let mut out = vec![0.0; n];
        for k in 0..n {
            for j in 0..n {
                if grid.center_distance(k, j) < delta2 {
                    out[k] += values[j];
                }
            }
        }
        out
    }

    #[test]
    fn window_matches_all_pairs_1d() {
        let grid = FeatureGrid::new(1, 30);
        let values: Vec<f64> = (0..30).map(|k| (k as f64 * 0.7).sin() + 2.0).collect();
        for delta2 in [0.01, 0.05, 0.2, 0.5, 1.0] {
            let fast = FeatureWindow::new(&grid, delta2).sum_scalar(&values);
            let slow = window_sum_naive(&values, &grid, delta2);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "delta2 {delta2}");
            }
        }
    }

    #[test]
    fn window_matches_all_pairs_3d() {
        let grid = FeatureGrid::new(3, 7);
        let values: Vec<f64> = (0..grid.len())
            .map(|k| (k as f64 * 0.13).cos() + 1.5)
            .collect();
        for delta2 in [0.1, 0.35, 0.8, 1.4] {
            let fast = FeatureWindow::new(&grid, delta2).sum_scalar(&values);
            let slow = window_sum_naive(&values, &grid, delta2);
            for (mut_i, (a, b)) in fast.iter().zip(&slow).enumerate() {
                assert!((a - b).abs() < 1e-12, "delta2 {delta2}, cell {mut_i}");
            }
        }
    }
}
