//! Explicit density grid with trilinear point queries.
//!
//! Node `(i, j, k)` sits at
//! `e = (i + 0.5) * extent_e / nx - extent_e / 2`,
//! `n = (j + 0.5) * extent_n / ny - extent_n / 2` and
//! `u = k * max_height / (nz - 1)`, so horizontal nodes line up with the
//! pixel centers of an overhead image with `nx x ny` pixels covering the
//! footprint. Points in the half-cell margin between the outermost nodes and
//! the cube faces clamp to the edge nodes.
//!
//! Layer `k = 0` always reads as `ground_density`; its stored values are
//! ignored and it receives no gradient.

use serde::{Deserialize, Serialize};

use crate::camera::{Vec3, WorldFrame};
use crate::error::{Error, Result};

pub const DEFAULT_GROUND_DENSITY: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Resolution {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for Resolution {
    fn default() -> Self {
        Self::new(256, 256, 65)
    }
}

/// Location of a point inside the grid: the lower corner of its cell and
/// the fractional offsets along each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub base: usize,
    pub k0: usize,
    pub frac: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityVolume {
    frame: WorldFrame,
    res: Resolution,
    ground_density: f64,
    grid: Vec<f64>,
}

/// Trilinear weights of one query point: `(node index, weight)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeWeights {
    pub entries: Vec<(usize, f64)>,
}

impl NodeWeights {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w).sum()
    }

    pub fn weight_of(&self, node: usize) -> f64 {
        self.entries
            .iter()
            .filter(|&&(i, _)| i == node)
            .map(|&(_, w)| w)
            .sum()
    }
}

impl DensityVolume {
    /// Volume filled with a constant density above the pinned ground layer.
    pub fn filled(frame: WorldFrame, res: Resolution, ground_density: f64, fill: f64) -> Result<Self> {
        Self::from_grid(frame, res, ground_density, vec![fill; res.len()])
    }

    pub fn empty(frame: WorldFrame, res: Resolution) -> Result<Self> {
        Self::filled(frame, res, DEFAULT_GROUND_DENSITY, 0.0)
    }

    pub fn from_grid(
        frame: WorldFrame,
        res: Resolution,
        ground_density: f64,
        grid: Vec<f64>,
    ) -> Result<Self> {
        frame.validate()?;
        if res.nx < 2 || res.ny < 2 || res.nz < 2 {
            return Err(Error::domain(format!(
                "volume resolution must be at least 2 along every axis, got {}x{}x{}",
                res.nx, res.ny, res.nz
            )));
        }
        if grid.len() != res.len() {
            return Err(Error::domain(format!(
                "grid has {} values, resolution needs {}",
                grid.len(),
                res.len()
            )));
        }
        if !(ground_density.is_finite() && ground_density >= 0.0) {
            return Err(Error::domain("ground density must be finite and non-negative"));
        }
        if let Some(pos) = grid.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::domain(format!(
                "grid value at index {pos} is negative or non-finite"
            )));
        }
        Ok(Self {
            frame,
            res,
            ground_density,
            grid,
        })
    }

    pub fn frame(&self) -> &WorldFrame {
        &self.frame
    }

    pub fn resolution(&self) -> Resolution {
        self.res
    }

    pub fn ground_density(&self) -> f64 {
        self.ground_density
    }

    /// Stored values, including the (ignored) ground layer.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Overwrites the stored grid. Values must stay finite and non-negative;
    /// this is checked in debug builds only since the optimizer calls it on
    /// every step.
    pub fn set_grid(&mut self, values: &[f64]) {
        debug_assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0));
        self.grid.copy_from_slice(values);
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.res.ny + j) * self.res.nz + k
    }

    pub fn node_indices(&self, idx: usize) -> (usize, usize, usize) {
        let k = idx % self.res.nz;
        let j = (idx / self.res.nz) % self.res.ny;
        let i = idx / (self.res.nz * self.res.ny);
        (i, j, k)
    }

    pub fn is_pinned(&self, idx: usize) -> bool {
        idx % self.res.nz == 0
    }

    pub fn node_spacing(&self) -> [f64; 3] {
        [
            self.frame.extent_e / self.res.nx as f64,
            self.frame.extent_n / self.res.ny as f64,
            self.frame.max_height / (self.res.nz - 1) as f64,
        ]
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let [de, dn, du] = self.node_spacing();
        Vec3::new(
            (i as f64 + 0.5) * de - self.frame.extent_e / 2.0,
            (j as f64 + 0.5) * dn - self.frame.extent_n / 2.0,
            k as f64 * du,
        )
    }

    /// Effective node value seen by interpolation.
    #[inline]
    pub fn value(&self, idx: usize) -> f64 {
        if idx % self.res.nz == 0 {
            self.ground_density
        } else {
            self.grid[idx]
        }
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.grid[idx] = v;
    }

    /// Cell containing `p`, or `None` outside the half-open cube.
    #[inline]
    pub fn cell_at(&self, p: Vec3) -> Option<Cell> {
        if !self.frame.contains(p) {
            return None;
        }
        let [de, dn, du] = self.node_spacing();
        let axis = |v: f64, n: usize| -> (usize, f64) {
            let v = v.clamp(0.0, (n - 1) as f64);
            let i0 = (v.floor() as usize).min(n - 2);
            (i0, v - i0 as f64)
        };
        let (i0, fx) = axis((p.e + self.frame.extent_e / 2.0) / de - 0.5, self.res.nx);
        let (j0, fy) = axis((p.n + self.frame.extent_n / 2.0) / dn - 0.5, self.res.ny);
        let (k0, fz) = axis(p.u / du, self.res.nz);
        Some(Cell {
            base: self.index(i0, j0, k0),
            k0,
            frac: [fx, fy, fz],
        })
    }

    /// The eight `(node, weight)` corners of a cell, weights not pinned.
    #[inline]
    pub fn corners(&self, cell: &Cell) -> [(usize, f64); 8] {
        let sx = self.res.ny * self.res.nz;
        let sy = self.res.nz;
        let [fx, fy, fz] = cell.frac;
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        let wz = [1.0 - fz, fz];
        let mut out = [(0usize, 0.0f64); 8];
        let mut c = 0;
        for di in 0..2 {
            for dj in 0..2 {
                for dk in 0..2 {
                    out[c] = (
                        cell.base + di * sx + dj * sy + dk,
                        wx[di] * wy[dj] * wz[dk],
                    );
                    c += 1;
                }
            }
        }
        out
    }

    #[inline]
    pub fn density_in_cell(&self, cell: &Cell) -> f64 {
        let sx = self.res.ny * self.res.nz;
        let sy = self.res.nz;
        let [fx, fy, fz] = cell.frac;
        let g = &self.grid;
        let b = cell.base;
        let lower = |idx: usize| {
            if cell.k0 == 0 {
                self.ground_density
            } else {
                g[idx]
            }
        };
        let c00 = lower(b) * (1.0 - fz) + g[b + 1] * fz;
        let c01 = lower(b + sy) * (1.0 - fz) + g[b + sy + 1] * fz;
        let c10 = lower(b + sx) * (1.0 - fz) + g[b + sx + 1] * fz;
        let c11 = lower(b + sx + sy) * (1.0 - fz) + g[b + sx + sy + 1] * fz;
        let c0 = c00 * (1.0 - fy) + c01 * fy;
        let c1 = c10 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fx) + c1 * fx
    }

    /// Adds `g * dsigma/dnode` into `grad` for every non-pinned corner.
    #[inline]
    pub fn scatter(&self, cell: &Cell, g: f64, grad: &mut [f64]) {
        for (idx, w) in self.corners(cell) {
            if idx % self.res.nz != 0 {
                grad[idx] += g * w;
            }
        }
    }

    pub fn sample_density(&self, p: Vec3) -> Result<f64> {
        if !p.is_finite() {
            return Err(Error::domain("density query at a non-finite point"));
        }
        Ok(self.cell_at(p).map_or(0.0, |c| self.density_in_cell(&c)))
    }

    /// Partial derivatives of [`Self::sample_density`] with respect to the
    /// stored node values. Pinned ground nodes are reported with weight 0;
    /// points outside the cube touch no nodes.
    pub fn sample_density_gradient(&self, p: Vec3) -> Result<NodeWeights> {
        if !p.is_finite() {
            return Err(Error::domain("density query at a non-finite point"));
        }
        let Some(cell) = self.cell_at(p) else {
            return Ok(NodeWeights::default());
        };
        let entries = self
            .corners(&cell)
            .into_iter()
            .map(|(idx, w)| (idx, if self.is_pinned(idx) { 0.0 } else { w }))
            .collect();
        Ok(NodeWeights { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_frame() -> WorldFrame {
        WorldFrame::new(8.0, 6.0, 4.0).unwrap()
    }

    fn random_volume(seed: u64, res: Resolution) -> DensityVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = (0..res.len()).map(|_| rng.gen_range(0.0..5.0)).collect();
        DensityVolume::from_grid(small_frame(), res, 1e3, grid).unwrap()
    }

    fn interior_point(rng: &mut ChaCha8Rng, vol: &DensityVolume) -> Vec3 {
        let a = vol.node_position(0, 0, 1);
        let b = vol.node_position(vol.res.nx - 1, vol.res.ny - 1, vol.res.nz - 1);
        Vec3::new(
            rng.gen_range(a.e..b.e),
            rng.gen_range(a.n..b.n),
            rng.gen_range(a.u..b.u),
        )
    }

    #[test]
    fn exact_at_nodes() {
        let mut vol = DensityVolume::empty(small_frame(), Resolution::new(4, 3, 5)).unwrap();
        vol.set(2, 1, 3, 7.5);
        let p = vol.node_position(2, 1, 3);
        assert_eq!(vol.sample_density(p).unwrap(), 7.5);
        let w = vol.sample_density_gradient(p).unwrap();
        let idx = vol.index(2, 1, 3);
        assert_eq!(w.weight_of(idx), 1.0);
        assert_eq!(w.total(), 1.0);
    }

    #[test]
    fn zero_outside_cube() {
        let vol = DensityVolume::filled(small_frame(), Resolution::new(4, 3, 5), 1e3, 3.0).unwrap();
        assert_eq!(vol.sample_density(Vec3::new(0.0, 0.0, 5.0)).unwrap(), 0.0);
        assert_eq!(vol.sample_density(Vec3::new(4.0, 0.0, 1.0)).unwrap(), 0.0);
        assert_eq!(vol.sample_density(Vec3::new(0.0, 0.0, -0.01)).unwrap(), 0.0);
        assert!(vol
            .sample_density_gradient(Vec3::new(0.0, 0.0, 5.0))
            .unwrap()
            .entries
            .is_empty());
        assert!(vol.sample_density(Vec3::new(f64::NAN, 0.0, 1.0)).is_err());
    }

    #[test]
    fn linear_along_edge() {
        let mut vol = DensityVolume::empty(small_frame(), Resolution::new(4, 3, 5)).unwrap();
        vol.set(1, 1, 2, 2.0);
        vol.set(2, 1, 2, 6.0);
        let a = vol.node_position(1, 1, 2);
        let b = vol.node_position(2, 1, 2);
        let mid = (a + b) * 0.5;
        assert!((vol.sample_density(mid).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cell_center_has_equal_weights() {
        let vol = DensityVolume::empty(small_frame(), Resolution::new(4, 3, 5)).unwrap();
        let p = (vol.node_position(1, 0, 2) + vol.node_position(2, 1, 3)) * 0.5;
        let w = vol.sample_density_gradient(p).unwrap();
        assert_eq!(w.entries.len(), 8);
        for &(_, wt) in &w.entries {
            assert!((wt - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn ground_layer_reads_pinned_value() {
        let mut vol = DensityVolume::empty(small_frame(), Resolution::new(4, 3, 5)).unwrap();
        vol.set(1, 1, 0, 0.0);
        let p = vol.node_position(1, 1, 0);
        assert_eq!(vol.sample_density(p).unwrap(), 1e3);
        let w = vol.sample_density_gradient(p).unwrap();
        assert_eq!(w.total(), 0.0);
        // Half way up the first cell the pinned value blends with layer 1.
        let mut q = p;
        q.u = vol.node_spacing()[2] / 2.0;
        assert!((vol.sample_density(q).unwrap() - 500.0).abs() < 1e-9);
    }

    #[test]
    fn weights_match_finite_differences() {
        let res = Resolution::new(5, 4, 6);
        let vol = random_volume(3, res);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-4;
        for _ in 0..20 {
            let p = interior_point(&mut rng, &vol);
            let analytic = vol.sample_density_gradient(p).unwrap();
            for idx in 0..res.len() {
                let mut plus = vol.clone();
                plus.grid[idx] += h;
                let mut minus = vol.clone();
                minus.grid[idx] -= h;
                let fd = (plus.sample_density(p).unwrap() - minus.sample_density(p).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - analytic.weight_of(idx)).abs() <= 1e-8,
                    "node {idx}: fd {fd} vs {}",
                    analytic.weight_of(idx)
                );
            }
        }
    }

    #[test]
    fn partition_of_unity_above_ground_cell() {
        let vol = random_volume(5, Resolution::new(6, 6, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dz = vol.node_spacing()[2];
        for _ in 0..500 {
            let mut p = interior_point(&mut rng, &vol);
            p.u = p.u.max(dz);
            let w = vol.sample_density_gradient(p).unwrap();
            assert!(w.entries.iter().all(|&(_, x)| x >= 0.0));
            assert!((w.total() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn continuous_across_cell_faces() {
        let vol = random_volume(9, Resolution::new(6, 6, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (lo, hi) = vol
            .grid
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let range = hi - lo;
        for _ in 0..200 {
            let mut p = interior_point(&mut rng, &vol);
            // Snap e onto an interior node plane.
            let i = rng.gen_range(1..vol.res.nx - 1);
            p.e = vol.node_position(i, 0, 0).e;
            p.u = p.u.max(vol.node_spacing()[2] * 1.5);
            let a = vol.sample_density(Vec3::new(p.e - 1e-7, p.n, p.u)).unwrap();
            let b = vol.sample_density(Vec3::new(p.e + 1e-7, p.n, p.u)).unwrap();
            assert!((a - b).abs() < 1e-4 * range);
        }
    }

    #[test]
    fn rejects_bad_grids() {
        let res = Resolution::new(2, 2, 2);
        assert!(DensityVolume::from_grid(small_frame(), res, 1e3, vec![0.0; 7]).is_err());
        assert!(DensityVolume::from_grid(small_frame(), res, 1e3, vec![-1.0; 8]).is_err());
        assert!(DensityVolume::from_grid(small_frame(), Resolution::new(1, 2, 2), 1e3, vec![0.0; 4]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn raising_a_node_never_lowers_density(
                seed in 0u64..1000,
                node in 0usize..(5 * 4 * 4),
                bump in 0.0f64..10.0,
                pe in -3.99f64..3.99, pn in -2.99f64..2.99, pu in 0.0f64..3.99,
            ) {
                let res = Resolution::new(5, 4, 4);
                let vol = random_volume(seed, res);
                let mut raised = vol.clone();
                raised.grid[node] += bump;
                let p = Vec3::new(pe, pn, pu);
                prop_assert!(raised.sample_density(p).unwrap() >= vol.sample_density(p).unwrap());
            }

            #[test]
            fn density_is_non_negative(
                seed in 0u64..1000,
                pe in -5.0f64..5.0, pn in -4.0f64..4.0, pu in -1.0f64..5.0,
            ) {
                let vol = random_volume(seed, Resolution::new(4, 4, 4));
                prop_assert!(vol.sample_density(Vec3::new(pe, pn, pu)).unwrap() >= 0.0);
            }
        }
    }
}
