//! Voxel lattices, scalar volumes and projection stacks.
//!
//! All arrays are stored in x-fastest linear order: the voxel `(i, j, k)`
//! lives at `i + nx * (j + ny * k)`. Projection data is stored view-major
//! with the detector `u` coordinate fastest: `u + det_u * (v + det_v * view)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator floor used by relative-difference helpers.
pub const EPS_NORM: f64 = 1e-300;

/// Isotropic voxel lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Voxel edge length in mm.
    pub pitch: f64,
    /// World position (mm) of the center of voxel `(0, 0, 0)`.
    pub origin: [f64; 3],
}

impl Grid3 {
    /// Grid centered on the world origin.
    pub fn centered(nx: usize, ny: usize, nz: usize, pitch: f64) -> Result<Self> {
        let origin = [
            -0.5 * (nx as f64 - 1.0) * pitch,
            -0.5 * (ny as f64 - 1.0) * pitch,
            -0.5 * (nz as f64 - 1.0) * pitch,
        ];
        Self::new(nx, ny, nz, pitch, origin)
    }

    pub fn new(nx: usize, ny: usize, nz: usize, pitch: f64, origin: [f64; 3]) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid dimensions must be >= 1, got {nx}x{ny}x{nz}"
            )));
        }
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "voxel pitch must be positive, got {pitch}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidParameter("grid origin must be finite".into()));
        }
        Ok(Self {
            nx,
            ny,
            nz,
            pitch,
            origin,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.nx;
        let j = (idx / self.nx) % self.ny;
        let k = idx / (self.nx * self.ny);
        (i, j, k)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Result<[f64; 3]> {
        if i >= self.nx || j >= self.ny || k >= self.nz {
            return Err(Error::IndexOutOfRange {
                i,
                j,
                k,
                nx: self.nx,
                ny: self.ny,
                nz: self.nz,
            });
        }
        Ok(self.center_unchecked(i, j, k))
    }

    #[inline]
    pub(crate) fn center_unchecked(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + self.pitch * i as f64,
            self.origin[1] + self.pitch * j as f64,
            self.origin[2] + self.pitch * k as f64,
        ]
    }

    /// Index of the voxel whose cell contains `pos`, if any.
    pub fn index_of(&self, pos: [f64; 3]) -> Option<(usize, usize, usize)> {
        let n = self.dims();
        let mut out = [0usize; 3];
        for a in 0..3 {
            let t = ((pos[a] - self.origin[a]) / self.pitch).round();
            if !(t >= 0.0 && t < n[a] as f64) {
                return None;
            }
            out[a] = t as usize;
        }
        Some((out[0], out[1], out[2]))
    }

    /// Continuous (fractional) index coordinates of a world position.
    #[inline]
    pub fn continuous_index(&self, pos: [f64; 3]) -> [f64; 3] {
        [
            (pos[0] - self.origin[0]) / self.pitch,
            (pos[1] - self.origin[1]) / self.pitch,
            (pos[2] - self.origin[2]) / self.pitch,
        ]
    }

    /// World-space bounding box `(min, max)` of the voxel cells.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let h = 0.5 * self.pitch;
        let n = self.dims();
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.origin[a] - h;
            hi[a] = self.origin[a] + self.pitch * (n[a] as f64 - 1.0) + h;
        }
        (lo, hi)
    }

    pub fn voxel_volume(&self) -> f64 {
        self.pitch * self.pitch * self.pitch
    }
}

/// Scalar field sampled on a [`Grid3`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid3,
    data: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: Grid3) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn filled(grid: Grid3, value: f64) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_vec(grid: Grid3, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "volume data has {} values, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: Grid3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.nz {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.linear(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.grid.linear(i, j, k);
        self.data[idx] = v;
    }

    pub fn check_same_grid(&self, other: &Volume) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(format!(
                "{:?} vs {:?}",
                self.grid.dims(),
                other.grid.dims()
            )));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Volume) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn add(&self, other: &Volume) -> Result<Volume> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Volume) -> Result<Volume> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Volume) -> Result<Volume> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> Volume {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Volume, f: impl Fn(f64, f64) -> f64) -> Result<Volume> {
        self.check_same_grid(other)?;
        Ok(Volume {
            grid: self.grid,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_nonnegative_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && *v >= 0.0)
    }

    pub fn ensure_nonnegative_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            None => Ok(()),
            Some(idx) => Err(Error::InvalidData(format!(
                "{what}: voxel {idx} holds {} (values must be finite and >= 0)",
                self.data[idx]
            ))),
        }
    }

    /// Transaxial slice `k` as a row-major `ny x nx` array.
    pub fn slice_z(&self, k: usize) -> &[f64] {
        let n = self.grid.nx * self.grid.ny;
        &self.data[k * n..(k + 1) * n]
    }
}

/// `‖a − b‖₂ / max(‖b‖₂, EPS_NORM)`; `b` is the reference.
pub fn l2_rel_diff(a: &Volume, b: &Volume) -> Result<f64> {
    a.check_same_grid(b)?;
    let diff = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(diff / b.norm().max(EPS_NORM))
}

/// Symmetric variant: `2‖a − b‖₂ / max(‖a‖₂ + ‖b‖₂, EPS_NORM)`.
pub fn l2_rel_diff_sym(a: &Volume, b: &Volume) -> Result<f64> {
    a.check_same_grid(b)?;
    let diff = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(2.0 * diff / (a.norm() + b.norm()).max(EPS_NORM))
}

/// Stack of 2-D detector images, one per view angle.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub det_u: usize,
    pub det_v: usize,
    /// Detector pixel edge length in mm.
    pub pixel_pitch: f64,
    /// View angles in degrees, strictly increasing.
    pub angles: Vec<f64>,
    data: Vec<f64>,
}

impl ProjectionSet {
    pub fn zeros(det_u: usize, det_v: usize, pixel_pitch: f64, angles: Vec<f64>) -> Result<Self> {
        let len = det_u * det_v * angles.len();
        Self::from_vec(det_u, det_v, pixel_pitch, angles, vec![0.0; len])
    }

    pub fn from_vec(
        det_u: usize,
        det_v: usize,
        pixel_pitch: f64,
        angles: Vec<f64>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if det_u == 0 || det_v == 0 {
            return Err(Error::InvalidParameter("detector raster must be non-empty".into()));
        }
        if !(pixel_pitch > 0.0 && pixel_pitch.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "pixel pitch must be positive, got {pixel_pitch}"
            )));
        }
        if angles.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "view angles must be strictly increasing".into(),
            ));
        }
        if data.len() != det_u * det_v * angles.len() {
            return Err(Error::GridMismatch(format!(
                "projection data has {} values, expected {}",
                data.len(),
                det_u * det_v * angles.len()
            )));
        }
        Ok(Self {
            det_u,
            det_v,
            pixel_pitch,
            angles,
            data,
        })
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn view_len(&self) -> usize {
        self.det_u * self.det_v
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn view(&self, v: usize) -> &[f64] {
        let n = self.view_len();
        &self.data[v * n..(v + 1) * n]
    }

    pub fn view_mut(&mut self, v: usize) -> &mut [f64] {
        let n = self.view_len();
        &mut self.data[v * n..(v + 1) * n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn view_sum(&self, v: usize) -> f64 {
        self.view(v).iter().sum()
    }

    pub fn same_layout(&self, other: &ProjectionSet) -> bool {
        self.det_u == other.det_u
            && self.det_v == other.det_v
            && self.angles == other.angles
            && self.pixel_pitch == other.pixel_pitch
    }

    pub fn check_same_layout(&self, other: &ProjectionSet) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::GridMismatch(format!(
                "projection layouts differ: {}x{}x{} vs {}x{}x{}",
                self.n_views(),
                self.det_v,
                self.det_u,
                other.n_views(),
                other.det_v,
                other.det_u
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &ProjectionSet) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn scale(&self, alpha: f64) -> ProjectionSet {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ProjectionSet {
        ProjectionSet {
            det_u: self.det_u,
            det_v: self.det_v,
            pixel_pitch: self.pixel_pitch,
            angles: self.angles.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn ensure_nonnegative_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            None => Ok(()),
            Some(idx) => Err(Error::InvalidData(format!(
                "{what}: bin {idx} holds {} (values must be finite and >= 0)",
                self.data[idx]
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn voxel_center_examples() {
        let g = Grid3::new(8, 8, 8, 4.0, [0.0; 3]).unwrap();
        assert_eq!(g.voxel_center(0, 0, 0).unwrap(), [0.0, 0.0, 0.0]);
        assert_eq!(g.voxel_center(1, 2, 3).unwrap(), [4.0, 8.0, 12.0]);
        let g = Grid3::new(21, 21, 21, 2.0, [-10.0; 3]).unwrap();
        assert_eq!(g.voxel_center(10, 10, 10).unwrap(), [10.0, 10.0, 10.0]);
    }

    #[test]
    fn voxel_center_out_of_range() {
        let g = Grid3::new(4, 4, 4, 1.0, [0.0; 3]).unwrap();
        assert!(matches!(
            g.voxel_center(4, 0, 0),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(Grid3::centered(0, 4, 4, 1.0).is_err());
        assert!(Grid3::centered(4, 4, 4, 0.0).is_err());
        assert!(Grid3::centered(4, 4, 4, -2.0).is_err());
    }

    #[test]
    fn rel_diff_examples() {
        let g = Grid3::centered(5, 4, 3, 1.0).unwrap();
        let b = Volume::from_fn(g, |i, j, k| (i + 2 * j + 3 * k) as f64 + 0.5);
        assert_eq!(l2_rel_diff(&b, &b).unwrap(), 0.0);
        let a = b.scale(2.0);
        assert!((l2_rel_diff(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let other = Volume::zeros(Grid3::centered(5, 4, 4, 1.0).unwrap());
        assert!(l2_rel_diff(&a, &other).is_err());
    }

    #[test]
    fn rel_diff_matches_elementwise_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let g = Grid3::centered(7, 6, 5, 2.0).unwrap();
        let a = Volume::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0));
        let b = Volume::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0));
        let mut num = 0.0;
        let mut den = 0.0;
        for idx in 0..g.len() {
            let (i, j, k) = g.unravel(idx);
            let d = a.get(i, j, k) - b.get(i, j, k);
            num += d * d;
            den += b.get(i, j, k) * b.get(i, j, k);
        }
        let oracle = num.sqrt() / den.sqrt();
        let got = l2_rel_diff(&a, &b).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle);
        let sym = l2_rel_diff_sym(&a, &b).unwrap();
        assert_eq!(sym, l2_rel_diff_sym(&b, &a).unwrap());
    }

    #[test]
    fn projection_angles_must_increase() {
        assert!(ProjectionSet::zeros(2, 2, 1.0, vec![0.0, 3.0, 3.0]).is_err());
        assert!(ProjectionSet::zeros(2, 2, 1.0, vec![0.0, 3.0, 6.0]).is_ok());
    }

    proptest! {
        #[test]
        fn index_round_trip(nx in 1usize..40, ny in 1usize..40, nz in 1usize..40,
                            pitch in 0.1f64..10.0, ox in -100.0f64..100.0,
                            fi in 0.0f64..1.0, fj in 0.0f64..1.0, fk in 0.0f64..1.0) {
            let g = Grid3::new(nx, ny, nz, pitch, [ox, -ox, 0.5 * ox]).unwrap();
            let i = ((fi * nx as f64) as usize).min(nx - 1);
            let j = ((fj * ny as f64) as usize).min(ny - 1);
            let k = ((fk * nz as f64) as usize).min(nz - 1);
            let c = g.voxel_center(i, j, k).unwrap();
            prop_assert_eq!(g.index_of(c), Some((i, j, k)));
            prop_assert_eq!(g.unravel(g.linear(i, j, k)), (i, j, k));
        }

        #[test]
        fn arithmetic_matches_elementwise(seed in 0u64..1000, alpha in -3.0f64..3.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = Grid3::centered(4, 3, 2, 1.0).unwrap();
            let a = Volume::from_fn(g, |_, _, _| rng.random_range(-5.0..5.0));
            let b = Volume::from_fn(g, |_, _, _| rng.random_range(-5.0..5.0));
            let sum = a.add(&b).unwrap();
            let had = a.hadamard(&b).unwrap();
            let sc = a.scale(alpha);
            for idx in 0..g.len() {
                let (x, y) = (a.data()[idx], b.data()[idx]);
                let close = |p: f64, q: f64| (p - q).abs() <= 1e-12 * q.abs().max(1e-300);
                prop_assert!(close(sum.data()[idx], x + y) || sum.data()[idx] == x + y);
                prop_assert!(close(had.data()[idx], x * y) || had.data()[idx] == x * y);
                prop_assert!(close(sc.data()[idx], alpha * x) || sc.data()[idx] == alpha * x);
            }
        }
    }
}
