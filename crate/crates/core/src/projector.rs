//! Rotation-based SPECT projector.
//!
//! For every view the volume is resampled into a detector-aligned frame of
//! depth planes (one plane per voxel pitch along the detector normal). Each
//! plane is weighted by the cumulative attenuation towards the detector,
//! blurred by a Gaussian whose width grows linearly with the distance to the
//! collimator face, and summed onto the detector.
//!
//! The resampling is voxel driven: every voxel splats its value onto the four
//! neighbouring lattice points of its plane (and the two neighbouring detector
//! rows) with bilinear weights that sum to one, so counts are conserved per
//! view. Backprojection is the literal transpose of each forward step, which
//! makes `backproject` the exact adjoint of `forward`.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, ProjectionSet, Volume};

/// Collimator-detector response: σ(d) = sigma0 + slope · d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsfModel {
    /// Gaussian σ at the collimator face (mm).
    pub sigma0: f64,
    /// Growth of σ per mm of source-to-collimator distance.
    pub slope: f64,
}

impl Default for PsfModel {
    fn default() -> Self {
        Self {
            sigma0: 1.7,
            slope: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionGeometry {
    pub n_views: usize,
    pub arc_degrees: f64,
    pub start_angle: f64,
    pub det_u: usize,
    pub det_v: usize,
    /// Detector pixel pitch (mm).
    pub pixel_pitch: f64,
    /// Distance from the rotation axis to the collimator face (mm).
    pub rotation_radius: f64,
    pub psf: PsfModel,
    pub attenuation_on: bool,
    pub psf_on: bool,
    /// Relative acquisition time per view; multiplies every system-matrix
    /// element. 1.0 makes each view's response to a unit source sum to one.
    #[serde(default = "unit_weight")]
    pub view_weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl AcquisitionGeometry {
    /// 120 views over 360°, detector matched to the grid, LEHR-like PSF.
    pub fn for_grid(grid: &Grid3) -> Self {
        Self {
            n_views: 120,
            arc_degrees: 360.0,
            start_angle: 0.0,
            det_u: grid.nx,
            det_v: grid.nz,
            pixel_pitch: grid.pitch,
            rotation_radius: 250.0,
            psf: PsfModel::default(),
            attenuation_on: true,
            psf_on: true,
            view_weight: 1.0,
        }
    }

    pub fn angular_step(&self) -> f64 {
        self.arc_degrees / self.n_views as f64
    }

    pub fn angles(&self) -> Vec<f64> {
        let step = self.angular_step();
        (0..self.n_views)
            .map(|v| self.start_angle + step * v as f64)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 {
            return Err(Error::InvalidParameter("n_views must be >= 1".into()));
        }
        if !(self.arc_degrees > 0.0 && self.arc_degrees <= 360.0) {
            return Err(Error::InvalidParameter(format!(
                "arc must lie in (0, 360] degrees, got {}",
                self.arc_degrees
            )));
        }
        if self.det_u == 0 || self.det_v == 0 {
            return Err(Error::InvalidParameter("detector raster must be non-empty".into()));
        }
        if !(self.pixel_pitch > 0.0) {
            return Err(Error::InvalidParameter("pixel pitch must be positive".into()));
        }
        if !(self.rotation_radius > 0.0) {
            return Err(Error::InvalidParameter("rotation radius must be positive".into()));
        }
        if !(self.psf.sigma0 >= 0.0 && self.psf.slope >= 0.0) {
            return Err(Error::InvalidParameter("PSF sigma0 and slope must be >= 0".into()));
        }
        if !(self.view_weight > 0.0 && self.view_weight.is_finite()) {
            return Err(Error::InvalidParameter("view weight must be positive".into()));
        }
        Ok(())
    }

    /// Empty projection stack matching this geometry.
    pub fn empty_projections(&self) -> ProjectionSet {
        ProjectionSet::zeros(self.det_u, self.det_v, self.pixel_pitch, self.angles())
            .expect("validated geometry")
    }
}

/// σ of the collimator blur at distance `d` (mm) from the collimator face.
pub fn psf_sigma(geometry: &AcquisitionGeometry, d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "distance must be >= 0, got {d}"
        )));
    }
    Ok(geometry.psf.sigma0 + geometry.psf.slope * d)
}

/// Symmetric 1-D Gaussian kernel sampled at multiples of `spacing`,
/// truncated at 3σ and normalized to unit sum. Index `radius` is the center.
pub fn gaussian_kernel(sigma: f64, spacing: f64) -> Vec<f64> {
    let radius = if sigma > 0.0 {
        (3.0 * sigma / spacing + 1e-9).floor() as usize
    } else {
        0
    };
    if radius == 0 {
        return vec![1.0];
    }
    let mut w: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = (i as f64 - radius as f64) * spacing;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Full width at half maximum of a Gaussian with standard deviation σ.
pub fn fwhm(sigma: f64) -> f64 {
    2.0 * (2.0 * std::f64::consts::LN_2).sqrt() * sigma
}

/// Exact sine and cosine at multiples of 90°.
fn sincos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    for (q, s, c) in [(0.0, 0.0, 1.0), (90.0, 1.0, 0.0), (180.0, 0.0, -1.0), (270.0, -1.0, 0.0)] {
        if (r - q).abs() < 1e-12 {
            return (s, c);
        }
    }
    if (r - 360.0).abs() < 1e-12 {
        return (0.0, 1.0);
    }
    deg.to_radians().sin_cos()
}

/// Unit vector from the rotation axis towards the detector of a view.
pub fn detector_normal(angle_deg: f64) -> [f64; 3] {
    let (s, c) = sincos_deg(angle_deg);
    [-s, c, 0.0]
}

/// Trilinear sample with zero extension outside the lattice.
pub fn sample_trilinear(vol: &Volume, pos: [f64; 3]) -> f64 {
    let g = vol.grid();
    let ci = g.continuous_index(pos);
    let dims = g.dims();
    let mut base = [0isize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        if !(ci[a] > -1.0 && ci[a] < dims[a] as f64) {
            return 0.0;
        }
        let f = ci[a].floor();
        base[a] = f as isize;
        frac[a] = ci[a] - f;
    }
    let mut acc = 0.0;
    for dz in 0..2 {
        let k = base[2] + dz;
        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
        if wz == 0.0 || k < 0 || k >= dims[2] as isize {
            continue;
        }
        for dy in 0..2 {
            let j = base[1] + dy;
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            if wy == 0.0 || j < 0 || j >= dims[1] as isize {
                continue;
            }
            for dx in 0..2 {
                let i = base[0] + dx;
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                if wx == 0.0 || i < 0 || i >= dims[0] as isize {
                    continue;
                }
                acc += wx * wy * wz * vol.get(i as usize, j as usize, k as usize);
            }
        }
    }
    acc
}

/// Attenuation factor `exp(−Σ μ·Δl)` from the center of voxel `from` along
/// `direction`, sampled every `step` mm with the first sample at half weight.
/// Marching stops where the lattice ends or, when given, after
/// `max_distance` mm (the detector face).
pub fn ray_attenuation(
    attenuation: &Volume,
    from: (usize, usize, usize),
    direction: [f64; 3],
    step: f64,
    max_distance: Option<f64>,
) -> Result<f64> {
    let g = attenuation.grid();
    let p0 = g.voxel_center(from.0, from.1, from.2)?;
    let norm = (direction[0].powi(2) + direction[1].powi(2) + direction[2].powi(2)).sqrt();
    if !(norm > 0.0) || !(step > 0.0) {
        return Err(Error::InvalidParameter("direction and step must be non-zero".into()));
    }
    let d = [direction[0] / norm, direction[1] / norm, direction[2] / norm];
    let dims = g.dims();
    let mut line = 0.0;
    let mut n = 0usize;
    loop {
        let s = n as f64 * step;
        if let Some(m) = max_distance {
            if s > m {
                break;
            }
        }
        let p = [p0[0] + s * d[0], p0[1] + s * d[1], p0[2] + s * d[2]];
        let ci = g.continuous_index(p);
        if (0..3).any(|a| !(ci[a] > -1.0 && ci[a] < dims[a] as f64)) {
            break;
        }
        let w = if n == 0 { 0.5 } else { 1.0 };
        line += w * sample_trilinear(attenuation, p);
        n += 1;
    }
    Ok((-line * step).exp())
}

/// Partition of view indices into ordered subsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetScheme {
    pub n_subsets: usize,
    /// Subset id of every view.
    pub assignment: Vec<usize>,
}

impl SubsetScheme {
    pub fn n_views(&self) -> usize {
        self.assignment.len()
    }

    /// Views of subset `b` in ascending order.
    pub fn views(&self, b: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == b)
            .map(|(v, _)| v)
            .collect()
    }
}

/// Assigns view `v` to subset `v mod n_subsets`.
pub fn interleaved_subsets(n_views: usize, n_subsets: usize) -> Result<SubsetScheme> {
    if n_subsets == 0 {
        return Err(Error::InvalidParameter("n_subsets must be >= 1".into()));
    }
    if n_subsets > n_views {
        return Err(Error::InvalidParameter(format!(
            "{n_subsets} subsets requested for {n_views} views"
        )));
    }
    Ok(SubsetScheme {
        n_subsets,
        assignment: (0..n_views).map(|v| v % n_subsets).collect(),
    })
}

/// One voxel column's splat onto the rotated frame of a view.
#[derive(Clone, Copy)]
struct Tap {
    /// Rotated-frame offsets (plane and u) of the four bilinear targets.
    idx: [u32; 4],
    w: [f64; 4],
}

struct ViewTable {
    taps: Vec<Tap>,
    /// Planes touched by any tap: `[lo, hi)`.
    planes: (usize, usize),
}

/// Detector-row splat of a voxel slice: up to two `(row, weight)` pairs.
#[derive(Clone, Copy)]
struct RowTaps {
    rows: [usize; 2],
    w: [f64; 2],
    n: usize,
}

/// Matrix-free system model for one grid, geometry and attenuation map.
pub struct Projector {
    grid: Grid3,
    geometry: AcquisitionGeometry,
    angles: Vec<f64>,
    n_depth: usize,
    /// Signed depth of each plane along the detector normal (mm).
    plane_depth: Vec<f64>,
    kernels: Vec<Vec<f64>>,
    row_taps: Vec<RowTaps>,
    mu: Option<Volume>,
    att_cache: Vec<OnceLock<Vec<f32>>>,
    cache_attenuation: bool,
}

/// Attenuation factors above this many bytes are recomputed per use.
const ATT_CACHE_BUDGET: usize = 1 << 30;

impl Projector {
    pub fn new(grid: Grid3, geometry: AcquisitionGeometry, attenuation: Option<&Volume>) -> Result<Self> {
        geometry.validate()?;
        let mu = if geometry.attenuation_on {
            let mu = attenuation.ok_or_else(|| {
                Error::InvalidParameter("attenuation is enabled but no map was given".into())
            })?;
            if mu.grid() != &grid {
                return Err(Error::GridMismatch("attenuation map grid differs".into()));
            }
            mu.ensure_nonnegative_finite("attenuation")?;
            Some(mu.clone())
        } else {
            None
        };

        let diag = ((grid.nx as f64).powi(2) + (grid.ny as f64).powi(2)).sqrt();
        let mut n_depth = diag.ceil() as usize + 2;
        if n_depth % 2 != grid.ny % 2 {
            n_depth += 1;
        }
        let plane_depth: Vec<f64> = (0..n_depth)
            .map(|b| (b as f64 - 0.5 * (n_depth as f64 - 1.0)) * grid.pitch)
            .collect();
        let kernels = plane_depth
            .iter()
            .map(|&w| {
                if geometry.psf_on {
                    let d = (geometry.rotation_radius - w).max(0.0);
                    let sigma = geometry.psf.sigma0 + geometry.psf.slope * d;
                    gaussian_kernel(sigma, geometry.pixel_pitch)
                } else {
                    vec![1.0]
                }
            })
            .collect();

        let z_axis = grid.origin[2] + 0.5 * (grid.nz as f64 - 1.0) * grid.pitch;
        let row0 = z_axis - 0.5 * (geometry.det_v as f64 - 1.0) * geometry.pixel_pitch;
        let row_taps = (0..grid.nz)
            .map(|k| {
                let z = grid.origin[2] + grid.pitch * k as f64;
                let cz = (z - row0) / geometry.pixel_pitch;
                let c0 = cz.floor();
                let f = cz - c0;
                let mut t = RowTaps {
                    rows: [0; 2],
                    w: [0.0; 2],
                    n: 0,
                };
                for (c, w) in [(c0, 1.0 - f), (c0 + 1.0, f)] {
                    if w > 1e-12 && c >= 0.0 && c < geometry.det_v as f64 {
                        t.rows[t.n] = c as usize;
                        t.w[t.n] = w;
                        t.n += 1;
                    }
                }
                t
            })
            .collect();

        let frame = n_depth * geometry.det_v * geometry.det_u;
        let cache_attenuation = mu.is_some() && frame * geometry.n_views * 4 <= ATT_CACHE_BUDGET;
        let att_cache = (0..geometry.n_views).map(|_| OnceLock::new()).collect();
        Ok(Self {
            grid,
            angles: geometry.angles(),
            geometry,
            n_depth,
            plane_depth,
            kernels,
            row_taps,
            mu,
            att_cache,
            cache_attenuation,
        })
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn geometry(&self) -> &AcquisitionGeometry {
        &self.geometry
    }

    pub fn n_views(&self) -> usize {
        self.geometry.n_views
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn empty_projections(&self) -> ProjectionSet {
        self.geometry.empty_projections()
    }

    fn frame_len(&self) -> usize {
        self.n_depth * self.geometry.det_v * self.geometry.det_u
    }

    fn plane_len(&self) -> usize {
        self.geometry.det_v * self.geometry.det_u
    }

    fn u0(&self) -> f64 {
        -0.5 * (self.geometry.det_u as f64 - 1.0) * self.geometry.pixel_pitch
    }

    fn view_table(&self, view: usize) -> ViewTable {
        let g = &self.grid;
        let (s, c) = sincos_deg(self.angles[view]);
        let du = self.geometry.det_u as isize;
        let nd = self.n_depth as isize;
        let plane = self.plane_len() as u32;
        let u0 = self.u0();
        let w0 = self.plane_depth[0];
        let mut lo = usize::MAX;
        let mut hi = 0usize;
        let mut taps = Vec::with_capacity(g.nx * g.ny);
        for j in 0..g.ny {
            let y = g.origin[1] + g.pitch * j as f64;
            for i in 0..g.nx {
                let x = g.origin[0] + g.pitch * i as f64;
                let u = x * c + y * s;
                let w = -x * s + y * c;
                let ca = (u - u0) / self.geometry.pixel_pitch;
                let cb = (w - w0) / g.pitch;
                let a0 = ca.floor();
                let b0 = cb.floor();
                let fa = ca - a0;
                let fb = cb - b0;
                let (a0, b0) = (a0 as isize, b0 as isize);
                let mut tap = Tap {
                    idx: [0; 4],
                    w: [0.0; 4],
                };
                for (n, (da, db)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
                    let a = a0 + da;
                    let b = b0 + db;
                    let wa = if da == 0 { 1.0 - fa } else { fa };
                    let wb = if db == 0 { 1.0 - fb } else { fb };
                    let wt = wa * wb;
                    if wt > 0.0 && a >= 0 && a < du && b >= 0 && b < nd {
                        tap.idx[n] = b as u32 * plane + a as u32;
                        tap.w[n] = wt * self.geometry.view_weight;
                        lo = lo.min(b as usize);
                        hi = hi.max(b as usize + 1);
                    }
                }
                taps.push(tap);
            }
        }
        if lo > hi {
            lo = 0;
            hi = 0;
        }
        ViewTable { taps, planes: (lo, hi) }
    }

    fn attenuation_factors(&self, view: usize) -> Option<std::borrow::Cow<'_, [f32]>> {
        let mu = self.mu.as_ref()?;
        if self.cache_attenuation {
            let f = self.att_cache[view].get_or_init(|| self.compute_attenuation(mu, view));
            Some(std::borrow::Cow::Borrowed(f.as_slice()))
        } else {
            Some(std::borrow::Cow::Owned(self.compute_attenuation(mu, view)))
        }
    }

    /// Cumulative attenuation from every rotated-frame lattice point to the
    /// detector face, midpoint rule with step = voxel pitch.
    fn compute_attenuation(&self, mu: &Volume, view: usize) -> Vec<f32> {
        let (s, c) = sincos_deg(self.angles[view]);
        let du = self.geometry.det_u;
        let dv = self.geometry.det_v;
        let pp = self.geometry.pixel_pitch;
        let pitch = self.grid.pitch;
        let u0 = self.u0();
        let z_axis = self.grid.origin[2] + 0.5 * (self.grid.nz as f64 - 1.0) * pitch;
        let row0 = z_axis - 0.5 * (dv as f64 - 1.0) * pp;
        let plane = self.plane_len();
        let mut out = vec![1.0f32; self.frame_len()];
        let mut running = vec![0.0f64; plane];
        for b in (0..self.n_depth).rev() {
            let w = self.plane_depth[b];
            if w > self.geometry.rotation_radius {
                continue;
            }
            for cv in 0..dv {
                let z = row0 + pp * cv as f64;
                for a in 0..du {
                    let u = u0 + pp * a as f64;
                    let p = [u * c - w * s, u * s + w * c, z];
                    let m = sample_trilinear(mu, p);
                    let idx = cv * du + a;
                    let line = running[idx] + 0.5 * m;
                    out[b * plane + idx] = (-line * pitch).exp() as f32;
                    running[idx] += m;
                }
            }
        }
        out
    }

    fn check_activity(&self, activity: &Volume) -> Result<()> {
        if activity.grid() != &self.grid {
            return Err(Error::GridMismatch(format!(
                "volume grid {:?} differs from projector grid {:?}",
                activity.grid().dims(),
                self.grid.dims()
            )));
        }
        Ok(())
    }

    fn check_projections(&self, proj: &ProjectionSet) -> Result<()> {
        if proj.det_u != self.geometry.det_u
            || proj.det_v != self.geometry.det_v
            || proj.n_views() != self.geometry.n_views
        {
            return Err(Error::GridMismatch(format!(
                "projections {}x{}x{} do not match geometry {}x{}x{}",
                proj.n_views(),
                proj.det_v,
                proj.det_u,
                self.geometry.n_views,
                self.geometry.det_v,
                self.geometry.det_u
            )));
        }
        Ok(())
    }

    fn selected_views(&self, subset: Option<&[usize]>) -> Result<Vec<usize>> {
        match subset {
            None => Ok((0..self.n_views()).collect()),
            Some(v) => {
                if let Some(bad) = v.iter().find(|&&x| x >= self.n_views()) {
                    return Err(Error::InvalidParameter(format!(
                        "view {bad} out of range for {} views",
                        self.n_views()
                    )));
                }
                Ok(v.to_vec())
            }
        }
    }

    /// Mean projections of `activity` for the selected views. Views outside
    /// the subset are left at zero.
    pub fn forward(&self, activity: &Volume, subset: Option<&[usize]>) -> Result<ProjectionSet> {
        self.check_activity(activity)?;
        let views = self.selected_views(subset)?;
        let mut out = self.empty_projections();
        let images: Vec<(usize, Vec<f64>)> = views
            .par_iter()
            .map(|&v| (v, self.forward_view(activity, v)))
            .collect();
        for (v, img) in images {
            out.view_mut(v).copy_from_slice(&img);
        }
        Ok(out)
    }

    fn forward_view(&self, activity: &Volume, view: usize) -> Vec<f64> {
        let g = &self.grid;
        let du = self.geometry.det_u;
        let plane = self.plane_len();
        let table = self.view_table(view);
        let mut frame = vec![0.0f64; self.frame_len()];
        let slice = g.nx * g.ny;
        let mut touched = vec![false; self.n_depth];
        for k in 0..g.nz {
            let rt = self.row_taps[k];
            let src = &activity.data()[k * slice..(k + 1) * slice];
            for (ij, &val) in src.iter().enumerate() {
                if val == 0.0 {
                    continue;
                }
                let tap = &table.taps[ij];
                for r in 0..rt.n {
                    let off = rt.rows[r] * du;
                    let v = val * rt.w[r];
                    for n in 0..4 {
                        frame[tap.idx[n] as usize + off] += v * tap.w[n];
                    }
                }
                for n in 0..4 {
                    if tap.w[n] != 0.0 {
                        touched[tap.idx[n] as usize / plane] = true;
                    }
                }
            }
        }
        if let Some(att) = self.attenuation_factors(view) {
            for b in (0..self.n_depth).filter(|&b| touched[b]) {
                let fr = &mut frame[b * plane..(b + 1) * plane];
                for (x, &f) in fr.iter_mut().zip(&att[b * plane..(b + 1) * plane]) {
                    *x *= f as f64;
                }
            }
        }
        let mut image = vec![0.0f64; plane];
        let mut tmp = vec![0.0f64; plane];
        for b in (0..self.n_depth).filter(|&b| touched[b]) {
            let fr = &frame[b * plane..(b + 1) * plane];
            let kernel = &self.kernels[b];
            if kernel.len() == 1 {
                image.iter_mut().zip(fr).for_each(|(o, x)| *o += x);
            } else {
                tmp.iter_mut().for_each(|t| *t = 0.0);
                conv_u(fr, &mut tmp, du, kernel);
                conv_v(&tmp, &mut image, du, kernel);
            }
        }
        image
    }

    /// Transpose of [`Projector::forward`] restricted to the selected views.
    pub fn backproject(&self, proj: &ProjectionSet, subset: Option<&[usize]>) -> Result<Volume> {
        self.check_projections(proj)?;
        let views = self.selected_views(subset)?;
        let mut out = Volume::zeros(self.grid);
        let chunk = rayon::current_num_threads().max(1);
        for group in views.chunks(chunk) {
            let frames: Vec<(ViewTable, Vec<f64>)> = group
                .par_iter()
                .map(|&v| self.backproject_frame(proj.view(v), v))
                .collect();
            // Accumulate in view order so the result is independent of the
            // thread count.
            for (table, frame) in &frames {
                self.gather(table, frame, &mut out);
            }
        }
        Ok(out)
    }

    fn backproject_frame(&self, image: &[f64], view: usize) -> (ViewTable, Vec<f64>) {
        let du = self.geometry.det_u;
        let plane = self.plane_len();
        let table = self.view_table(view);
        let (lo, hi) = table.planes;
        let mut frame = vec![0.0f64; self.frame_len()];
        let mut tmp = vec![0.0f64; plane];
        let mut last_kernel: Option<&Vec<f64>> = None;
        for b in lo..hi {
            let kernel = &self.kernels[b];
            let fr = &mut frame[b * plane..(b + 1) * plane];
            if kernel.len() == 1 {
                fr.copy_from_slice(image);
            } else {
                // conv_v then conv_u: the transpose of conv_u then conv_v.
                if last_kernel != Some(kernel) {
                    tmp.iter_mut().for_each(|t| *t = 0.0);
                    conv_v(image, &mut tmp, du, kernel);
                    last_kernel = Some(kernel);
                }
                conv_u(&tmp, fr, du, kernel);
            }
        }
        if let Some(att) = self.attenuation_factors(view) {
            for b in lo..hi {
                let fr = &mut frame[b * plane..(b + 1) * plane];
                for (x, &f) in fr.iter_mut().zip(&att[b * plane..(b + 1) * plane]) {
                    *x *= f as f64;
                }
            }
        }
        (table, frame)
    }

    fn gather(&self, table: &ViewTable, frame: &[f64], out: &mut Volume) {
        let g = self.grid;
        let du = self.geometry.det_u;
        let slice = g.nx * g.ny;
        out.data_mut()
            .par_chunks_mut(slice)
            .enumerate()
            .for_each(|(k, dst)| {
                let rt = self.row_taps[k];
                for r in 0..rt.n {
                    let off = rt.rows[r] * du;
                    let wz = rt.w[r];
                    for (o, tap) in dst.iter_mut().zip(&table.taps) {
                        let mut acc = 0.0;
                        for n in 0..4 {
                            acc += tap.w[n] * frame[tap.idx[n] as usize + off];
                        }
                        *o += wz * acc;
                    }
                }
            });
    }

    /// Backprojection of unit data over the selected views (Σ_i a_ij).
    pub fn sensitivity(&self, subset: Option<&[usize]>) -> Result<Volume> {
        let views = self.selected_views(subset)?;
        let mut ones = self.empty_projections();
        for &v in &views {
            ones.view_mut(v).iter_mut().for_each(|x| *x = 1.0);
        }
        self.backproject(&ones, Some(&views))
    }

    /// Dense system matrix (rows = projection bins of all views, columns =
    /// voxels) built from unit impulses. Test oracle only: memory grows as
    /// voxels × bins, so sizes above `max_elements` are refused.
    pub fn explicit_matrix(&self, max_elements: usize) -> Result<Vec<Vec<f64>>> {
        let rows = self.geometry.n_views * self.plane_len();
        let cols = self.grid.len();
        if rows * cols > max_elements {
            return Err(Error::InvalidParameter(format!(
                "explicit matrix {rows}x{cols} exceeds {max_elements} elements"
            )));
        }
        let mut columns = Vec::with_capacity(cols);
        let mut impulse = Volume::zeros(self.grid);
        for j in 0..cols {
            impulse.data_mut()[j] = 1.0;
            columns.push(self.forward(&impulse, None)?.into_data());
            impulse.data_mut()[j] = 0.0;
        }
        Ok(columns)
    }
}

/// `dst += K_u * src` along the contiguous (u) axis, rows of length `du`.
fn conv_u(src: &[f64], dst: &mut [f64], du: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    for (srow, drow) in src.chunks_exact(du).zip(dst.chunks_exact_mut(du)) {
        for (t, &w) in kernel.iter().enumerate() {
            let k = t as isize - r;
            // drow[a] += w * srow[a + k]
            let (a_lo, a_hi) = (
                (-k).max(0) as usize,
                (du as isize - k).min(du as isize).max(0) as usize,
            );
            if a_lo >= a_hi {
                continue;
            }
            let s_lo = (a_lo as isize + k) as usize;
            let n = a_hi - a_lo;
            for (d, s) in drow[a_lo..a_hi].iter_mut().zip(&srow[s_lo..s_lo + n]) {
                *d += w * s;
            }
        }
    }
}

/// `dst += K_v * src` across rows (v axis).
fn conv_v(src: &[f64], dst: &mut [f64], du: usize, kernel: &[f64]) {
    let dv = src.len() / du;
    let r = (kernel.len() / 2) as isize;
    for c in 0..dv {
        let drow = &mut dst[c * du..(c + 1) * du];
        for (t, &w) in kernel.iter().enumerate() {
            let cc = c as isize + t as isize - r;
            if cc < 0 || cc >= dv as isize {
                continue;
            }
            let srow = &src[cc as usize * du..(cc as usize + 1) * du];
            for (d, s) in drow.iter_mut().zip(srow) {
                *d += w * s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_grid() -> Grid3 {
        Grid3::centered(16, 16, 8, 4.0).unwrap()
    }

    fn geometry(grid: &Grid3, n_views: usize, psf: bool, att: bool) -> AcquisitionGeometry {
        let mut g = AcquisitionGeometry::for_grid(grid);
        g.n_views = n_views;
        g.psf_on = psf;
        g.attenuation_on = att;
        g.rotation_radius = 60.0;
        g
    }

    fn random_volume(grid: Grid3, seed: u64) -> Volume {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(grid, |_, _, _| rng.random_range(0.0..1.0))
    }

    fn uniform_mu(grid: Grid3, mu: f64) -> Volume {
        Volume::filled(grid, mu)
    }

    #[test]
    fn psf_sigma_examples() {
        let g = AcquisitionGeometry::for_grid(&small_grid());
        assert_eq!(psf_sigma(&g, 0.0).unwrap(), 1.7);
        assert!((psf_sigma(&g, 100.0).unwrap() - 3.7).abs() < 1e-12);
        assert!((fwhm(3.7) - 8.7128).abs() < 1e-3);
        assert!(psf_sigma(&g, -1.0).is_err());
    }

    #[test]
    fn kernel_is_normalized_and_truncated() {
        let k = gaussian_kernel(3.7, 4.0);
        assert_eq!(k.len(), 2 * 2 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_kernel(0.0, 4.0), vec![1.0]);
        let k = gaussian_kernel(10.0, 1.0);
        assert_eq!(k.len(), 61);
    }

    #[test]
    fn ray_attenuation_examples() {
        let g = Grid3::centered(8, 8, 8, 4.0).unwrap();
        let zero = Volume::zeros(g);
        assert_eq!(ray_attenuation(&zero, (3, 3, 3), [0.0, 1.0, 0.0], 4.0, None).unwrap(), 1.0);

        // 13 voxels at 8 mm: from the first center to the far face is 100 mm.
        let g = Grid3::centered(13, 3, 3, 8.0).unwrap();
        let mu = uniform_mu(g, 0.0154);
        let f = ray_attenuation(&mu, (0, 1, 1), [1.0, 0.0, 0.0], 8.0, None).unwrap();
        assert!((f - (-1.54f64).exp()).abs() < 1e-12, "{f}");
        assert!((f - 0.2144).abs() < 1e-4);

        // 50 mm path squares to the 100 mm factor.
        let g = Grid3::centered(25, 3, 3, 4.0).unwrap();
        let mu = uniform_mu(g, 0.0154);
        let half = ray_attenuation(&mu, (12, 1, 1), [1.0, 0.0, 0.0], 4.0, None).unwrap();
        assert!((half * half - f).abs() < 1e-12);
    }

    #[test]
    fn zero_activity_projects_to_zero() {
        let g = small_grid();
        let p = Projector::new(g, geometry(&g, 8, true, false), None).unwrap();
        let proj = p.forward(&Volume::zeros(g), None).unwrap();
        assert!(proj.data().iter().all(|&x| x == 0.0));
        let back = p.backproject(&p.empty_projections(), None).unwrap();
        assert!(back.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_voxel_counts_conserved_per_view() {
        let g = Grid3::centered(32, 32, 16, 4.0).unwrap();
        let geo = AcquisitionGeometry::for_grid(&g);
        let mut geo = geo;
        geo.attenuation_on = false;
        let p = Projector::new(g, geo, None).unwrap();
        let mut f = Volume::zeros(g);
        f.set(13, 18, 8, 100.0);
        let proj = p.forward(&f, None).unwrap();
        for v in 0..p.n_views() {
            let s = proj.view_sum(v);
            assert!((s - 100.0).abs() <= 0.5, "view {v}: {s}");
        }
    }

    #[test]
    fn interleaved_subset_examples() {
        let s = interleaved_subsets(120, 10).unwrap();
        let geo = AcquisitionGeometry::for_grid(&small_grid());
        let angles = geo.angles();
        for b in 0..10 {
            let v = s.views(b);
            assert_eq!(v.len(), 12);
            for w in v.windows(2) {
                assert!((angles[w[1]] - angles[w[0]] - 30.0).abs() < 1e-9);
            }
        }
        let one = interleaved_subsets(120, 1).unwrap();
        assert_eq!(one.views(0), (0..120).collect::<Vec<_>>());
        let mut all: Vec<usize> = (0..10).flat_map(|b| s.views(b)).collect();
        all.sort();
        assert_eq!(all, (0..120).collect::<Vec<_>>());
        assert!(interleaved_subsets(10, 11).is_err());
    }

    #[test]
    fn subsets_sum_to_full_projection() {
        let g = small_grid();
        let mu = uniform_mu(g, 0.01);
        let p = Projector::new(g, geometry(&g, 12, true, true), Some(&mu)).unwrap();
        let f = random_volume(g, 3);
        let full = p.forward(&f, None).unwrap();
        let scheme = interleaved_subsets(12, 4).unwrap();
        let mut acc = vec![0.0; full.data().len()];
        for b in 0..4 {
            let part = p.forward(&f, Some(&scheme.views(b))).unwrap();
            acc.iter_mut().zip(part.data()).for_each(|(a, x)| *a += x);
        }
        assert_eq!(acc.as_slice(), full.data());
    }

    #[test]
    fn attenuation_matches_ray_marching_on_axis_views() {
        let g = small_grid();
        let mu = Volume::from_fn(g, |i, j, _| 0.005 + 0.001 * ((i * 7 + j * 3) % 5) as f64);
        let mut geo = geometry(&g, 4, false, true);
        geo.rotation_radius = 200.0;
        let p = Projector::new(g, geo, Some(&mu)).unwrap();
        for (v, &angle) in p.angles().to_vec().iter().enumerate() {
            let mut f = Volume::zeros(g);
            f.set(5, 9, 4, 1.0);
            let proj = p.forward(&f, Some(&[v])).unwrap();
            let got = proj.view_sum(v);
            let want = ray_attenuation(&mu, (5, 9, 4), detector_normal(angle), g.pitch, None).unwrap();
            assert!((got - want).abs() < 1e-6 * want, "view {v}: {got} vs {want}");
        }
    }

    #[test]
    fn adjoint_identity_small() {
        let g = small_grid();
        let mu = random_volume(g, 9).scale(0.02);
        for (psf, att) in [(false, false), (true, false), (false, true), (true, true)] {
            let p = Projector::new(g, geometry(&g, 10, psf, att), Some(&mu)).unwrap();
            let f = random_volume(g, 1);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
            let mut q = p.empty_projections();
            q.data_mut().iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
            let lhs = p.forward(&f, None).unwrap().dot(&q).unwrap();
            let rhs = f.dot(&p.backproject(&q, None).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs(), "{psf} {att}: {lhs} {rhs}");
        }
    }

    #[test]
    fn missing_attenuation_map_is_an_error() {
        let g = small_grid();
        assert!(Projector::new(g, geometry(&g, 4, true, true), None).is_err());
        let other = Volume::zeros(Grid3::centered(8, 8, 8, 4.0).unwrap());
        assert!(Projector::new(g, geometry(&g, 4, true, true), Some(&other)).is_err());
        let p = Projector::new(g, geometry(&g, 4, true, false), None).unwrap();
        assert!(p.forward(&other, None).is_err());
    }
}
