//! Digital twin of the NEMA IEC body phantom.
//!
//! The body is an elliptical cylinder along z with a central cylindrical
//! lung insert. Six fillable spheres sit on a circle in one transaxial
//! plane. Voxels are classified by their center point, optionally refined
//! by uniform sub-sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, Volume};

/// Narrow-beam linear attenuation of water at 140 keV, in mm⁻¹.
pub const MU_WATER_140KEV: f64 = 0.0154;

pub const NEMA_SPHERE_DIAMETERS: [f64; 6] = [37.0, 28.0, 22.0, 17.0, 13.0, 10.0];

/// Diameter of the circle carrying the sphere centers (mm).
pub const NEMA_SPHERE_CIRCLE_DIAMETER: f64 = 114.4;

/// Angular position (degrees from +x, counter-clockwise) of each default
/// sphere. Rows from +y down: (10, 13), (17, 37), (22, 28).
const NEMA_SPHERE_ANGLES: [f64; 6] = [0.0, 300.0, 240.0, 180.0, 120.0, 60.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    /// Semi-axis along x (mm).
    pub semi_x: f64,
    /// Semi-axis along y (mm).
    pub semi_y: f64,
    /// Axial length (mm), centered on the sphere plane. `None` spans the grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub sphere_diameters: Vec<f64>,
    pub sphere_centers: Vec<[f64; 3]>,
    pub sphere_activity: f64,
    pub background_activity: f64,
    pub lung_diameter: f64,
    pub lung_activity: f64,
    pub body: BodySpec,
    /// Attenuation coefficients in mm⁻¹.
    pub mu_water: f64,
    pub mu_air: f64,
    pub spheres_enabled: Vec<bool>,
    /// Sub-samples per voxel edge for partial-volume classification; 1 is
    /// the plain center-point test.
    #[serde(default = "one")]
    pub subsamples: usize,
}

fn one() -> usize {
    1
}

pub fn default_nema_spec() -> PhantomSpec {
    let radius = 0.5 * NEMA_SPHERE_CIRCLE_DIAMETER;
    let centers = NEMA_SPHERE_ANGLES
        .iter()
        .map(|deg| {
            let t = deg.to_radians();
            [radius * t.cos(), radius * t.sin(), 0.0]
        })
        .collect();
    PhantomSpec {
        sphere_diameters: NEMA_SPHERE_DIAMETERS.to_vec(),
        sphere_centers: centers,
        sphere_activity: 100.0,
        background_activity: 10.0,
        lung_diameter: 51.0,
        lung_activity: 0.0,
        body: BodySpec {
            semi_x: 150.0,
            semi_y: 110.0,
            height: None,
        },
        mu_water: MU_WATER_140KEV,
        mu_air: 0.0,
        spheres_enabled: vec![true; 6],
        subsamples: 1,
    }
}

/// Keeps only the 10, 13 and 17 mm spheres; geometry is unchanged.
pub fn three_sphere_variant(spec: &PhantomSpec) -> PhantomSpec {
    let mut out = spec.clone();
    for (flag, d) in out.spheres_enabled.iter_mut().zip(&spec.sphere_diameters) {
        *flag = [10.0, 13.0, 17.0].iter().any(|k| (d - k).abs() < 1e-9);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Outside,
    Body,
    Lung,
    Sphere(usize),
}

impl PhantomSpec {
    pub fn n_spheres(&self) -> usize {
        self.sphere_diameters.len()
    }

    pub fn contrast(&self) -> f64 {
        self.sphere_activity / self.background_activity
    }

    pub fn enabled_spheres(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_spheres()).filter(|&s| self.spheres_enabled[s])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sphere_diameters.len();
        if self.sphere_centers.len() != n || self.spheres_enabled.len() != n {
            return Err(Error::InvalidParameter(format!(
                "sphere tables disagree: {} diameters, {} centers, {} flags",
                n,
                self.sphere_centers.len(),
                self.spheres_enabled.len()
            )));
        }
        if self.sphere_diameters.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidParameter("sphere diameters must be positive".into()));
        }
        let acts = [
            self.sphere_activity,
            self.background_activity,
            self.lung_activity,
        ];
        if acts.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidParameter("activities must be finite and >= 0".into()));
        }
        if !(self.mu_water >= 0.0 && self.mu_air >= 0.0) {
            return Err(Error::InvalidParameter("attenuation coefficients must be >= 0".into()));
        }
        if !(self.body.semi_x > 0.0 && self.body.semi_y > 0.0) {
            return Err(Error::InvalidParameter("body semi-axes must be positive".into()));
        }
        if self.lung_diameter < 0.0 {
            return Err(Error::InvalidParameter("lung diameter must be >= 0".into()));
        }
        if self.subsamples == 0 {
            return Err(Error::InvalidParameter("subsamples must be >= 1".into()));
        }
        Ok(())
    }

    fn in_sphere(&self, s: usize, p: [f64; 3]) -> bool {
        let c = self.sphere_centers[s];
        let r = 0.5 * self.sphere_diameters[s];
        let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
        d2 <= r * r
    }

    fn in_body(&self, p: [f64; 3], z_center: f64) -> bool {
        let ex = p[0] / self.body.semi_x;
        let ey = p[1] / self.body.semi_y;
        let axial = match self.body.height {
            Some(h) => (p[2] - z_center).abs() <= 0.5 * h,
            None => true,
        };
        axial && ex * ex + ey * ey <= 1.0
    }

    fn in_lung(&self, p: [f64; 3]) -> bool {
        let r = 0.5 * self.lung_diameter;
        p[0] * p[0] + p[1] * p[1] <= r * r
    }

    /// Region at a world point; enabled spheres take precedence over the
    /// lung, which takes precedence over the body.
    pub fn classify(&self, p: [f64; 3], z_center: f64) -> Region {
        if !self.in_body(p, z_center) {
            // Spheres are only meaningful inside the body shell.
            return match self.enabled_spheres().find(|&s| self.in_sphere(s, p)) {
                Some(s) => Region::Sphere(s),
                None => Region::Outside,
            };
        }
        if let Some(s) = self.enabled_spheres().find(|&s| self.in_sphere(s, p)) {
            return Region::Sphere(s);
        }
        if self.in_lung(p) {
            Region::Lung
        } else {
            Region::Body
        }
    }

    pub fn region_activity(&self, r: Region) -> f64 {
        match r {
            Region::Outside => 0.0,
            Region::Body => self.background_activity,
            Region::Lung => self.lung_activity,
            Region::Sphere(_) => self.sphere_activity,
        }
    }

    pub fn region_attenuation(&self, r: Region) -> f64 {
        match r {
            Region::Outside | Region::Lung => self.mu_air,
            Region::Body | Region::Sphere(_) => self.mu_water,
        }
    }

    /// Axial plane of the sphere centers (mean z of the centers, or 0).
    fn z_center(&self) -> f64 {
        if self.sphere_centers.is_empty() {
            0.0
        } else {
            self.sphere_centers.iter().map(|c| c[2]).sum::<f64>() / self.sphere_centers.len() as f64
        }
    }

    /// Checks that every geometric element lies inside the grid extent.
    pub fn check_fits(&self, grid: &Grid3) -> Result<()> {
        let (lo, hi) = grid.bounds();
        let mut problems = Vec::new();
        if -self.body.semi_x < lo[0] || self.body.semi_x > hi[0] {
            problems.push(format!(
                "body x extent [{}, {}] mm exceeds grid [{:.1}, {:.1}]",
                -self.body.semi_x, self.body.semi_x, lo[0], hi[0]
            ));
        }
        if -self.body.semi_y < lo[1] || self.body.semi_y > hi[1] {
            problems.push(format!(
                "body y extent [{}, {}] mm exceeds grid [{:.1}, {:.1}]",
                -self.body.semi_y, self.body.semi_y, lo[1], hi[1]
            ));
        }
        if let Some(h) = self.body.height {
            let zc = self.z_center();
            if zc - 0.5 * h < lo[2] || zc + 0.5 * h > hi[2] {
                problems.push(format!(
                    "body z extent [{:.1}, {:.1}] mm exceeds grid [{:.1}, {:.1}]",
                    zc - 0.5 * h,
                    zc + 0.5 * h,
                    lo[2],
                    hi[2]
                ));
            }
        }
        for (s, (c, d)) in self
            .sphere_centers
            .iter()
            .zip(&self.sphere_diameters)
            .enumerate()
        {
            let r = 0.5 * d;
            for a in 0..3 {
                if c[a] - r < lo[a] || c[a] + r > hi[a] {
                    problems.push(format!(
                        "sphere {s} ({d} mm) axis {a} extent [{:.1}, {:.1}] exceeds grid [{:.1}, {:.1}]",
                        c[a] - r,
                        c[a] + r,
                        lo[a],
                        hi[a]
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::PhantomOutOfGrid(problems.join("; ")))
        }
    }
}

/// Activity and attenuation maps of a phantom on `grid`.
pub fn build_phantom(spec: &PhantomSpec, grid: &Grid3) -> Result<(Volume, Volume)> {
    spec.validate()?;
    spec.check_fits(grid)?;
    let zc = spec.z_center();
    let n = spec.subsamples;
    let inv = 1.0 / (n * n * n) as f64;
    let offsets: Vec<f64> = (0..n)
        .map(|s| ((s as f64 + 0.5) / n as f64 - 0.5) * grid.pitch)
        .collect();

    let mut activity = Volume::zeros(*grid);
    let mut attenuation = Volume::zeros(*grid);
    for idx in 0..grid.len() {
        let (i, j, k) = grid.unravel(idx);
        let c = grid.center_unchecked(i, j, k);
        let (a, m) = if n == 1 {
            let r = spec.classify(c, zc);
            (spec.region_activity(r), spec.region_attenuation(r))
        } else {
            let mut a = 0.0;
            let mut m = 0.0;
            for dz in &offsets {
                for dy in &offsets {
                    for dx in &offsets {
                        let r = spec.classify([c[0] + dx, c[1] + dy, c[2] + dz], zc);
                        a += spec.region_activity(r);
                        m += spec.region_attenuation(r);
                    }
                }
            }
            (a * inv, m * inv)
        };
        activity.data_mut()[idx] = a;
        attenuation.data_mut()[idx] = m;
    }
    Ok((activity, attenuation))
}

/// Binary mask of the analytic sphere `id`, independent of enable flags.
pub fn sphere_mask(spec: &PhantomSpec, id: usize, grid: &Grid3) -> Result<Volume> {
    if id >= spec.n_spheres() || id >= spec.sphere_centers.len() {
        return Err(Error::BadSphereId(id));
    }
    Ok(sphere_region(spec, id, grid, 0.0))
}

/// Mask of the sphere `id` grown by `margin` mm.
pub fn sphere_region(spec: &PhantomSpec, id: usize, grid: &Grid3, margin: f64) -> Volume {
    let c = spec.sphere_centers[id];
    let r = 0.5 * spec.sphere_diameters[id] + margin;
    Volume::from_fn(*grid, |i, j, k| {
        let p = grid.center_unchecked(i, j, k);
        let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
        if d2 <= r * r {
            1.0
        } else {
            0.0
        }
    })
}

/// Label volume with sphere `s` marked `s + 1` over its region grown by
/// `margin` mm. Overlaps go to the lower sphere index.
pub fn sphere_labels(spec: &PhantomSpec, grid: &Grid3, spheres: &[usize], margin: f64) -> Result<Volume> {
    let mut labels = Volume::zeros(*grid);
    for &s in spheres.iter().rev() {
        if s >= spec.n_spheres() {
            return Err(Error::BadSphereId(s));
        }
        let region = sphere_region(spec, s, grid, margin);
        for (l, m) in labels.data_mut().iter_mut().zip(region.data()) {
            if *m > 0.0 {
                *l = (s + 1) as f64;
            }
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_grid() -> Grid3 {
        Grid3::centered(128, 128, 92, 4.0).unwrap()
    }

    /// Brute-force count of lattice centers inside a ball.
    fn count_centers(grid: &Grid3, c: [f64; 3], r: f64) -> usize {
        let mut n = 0;
        for k in 0..grid.nz {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    let p = grid.voxel_center(i, j, k).unwrap();
                    let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2))
                        .sqrt();
                    if d <= r {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    #[test]
    fn default_spec_values() {
        let s = default_nema_spec();
        assert_eq!(s.sphere_activity, 100.0);
        assert_eq!(s.background_activity, 10.0);
        assert_eq!(s.lung_activity, 0.0);
        assert_eq!(s.contrast(), 10.0);
        assert_eq!(s.n_spheres(), 6);
        assert_eq!(s.sphere_diameters[0], 37.0);
        assert!(s.sphere_diameters.windows(2).all(|w| w[0] > w[1]));
        assert!(s.sphere_centers.iter().all(|c| c[2] == s.sphere_centers[0][2]));
        for c in &s.sphere_centers {
            let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
            assert!((r - 57.2).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_activity_gives_zero_volume() {
        let mut s = default_nema_spec();
        s.sphere_activity = 0.0;
        s.background_activity = 0.0;
        s.lung_activity = 0.0;
        let g = Grid3::centered(80, 64, 10, 4.0).unwrap();
        let (act, _) = build_phantom(&s, &g).unwrap();
        assert!(act.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn largest_sphere_voxel_count() {
        let s = default_nema_spec();
        let g = reference_grid();
        let mask = sphere_mask(&s, 0, &g).unwrap();
        let n = mask.sum();
        let oracle = count_centers(&g, s.sphere_centers[0], 18.5) as f64;
        assert_eq!(n, oracle);
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 18.5f64.powi(3) / 64.0;
        assert!((n - analytic).abs() <= 0.1 * analytic, "{n} vs {analytic}");
    }

    #[test]
    fn smallest_sphere_voxel_count() {
        let s = default_nema_spec();
        let g = reference_grid();
        let n = sphere_mask(&s, 5, &g).unwrap().sum();
        assert_eq!(n, count_centers(&g, s.sphere_centers[5], 5.0) as f64);
        assert!((4.0..=14.0).contains(&n), "{n}");
    }

    #[test]
    fn activity_levels_and_lung() {
        let s = default_nema_spec();
        let g = reference_grid();
        let (act, mu) = build_phantom(&s, &g).unwrap();
        assert_eq!(act.max(), 100.0);
        let (i, j, k) = g.index_of([0.0, 0.0, 0.0]).unwrap();
        assert_eq!(act.get(i, j, k), 0.0);
        let mut values: Vec<f64> = act.data().to_vec();
        values.sort_by(f64::total_cmp);
        values.dedup();
        assert_eq!(values, vec![0.0, 10.0, 100.0]);
        let mut mus: Vec<f64> = mu.data().to_vec();
        mus.sort_by(f64::total_cmp);
        mus.dedup();
        assert_eq!(mus, vec![0.0, MU_WATER_140KEV]);
    }

    #[test]
    fn masks_disjoint_and_constant() {
        let s = default_nema_spec();
        let g = reference_grid();
        let (act, _) = build_phantom(&s, &g).unwrap();
        let big = sphere_mask(&s, 0, &g).unwrap();
        let small = sphere_mask(&s, 5, &g).unwrap();
        assert_eq!(big.dot(&small).unwrap(), 0.0);
        assert_eq!(big.dot(&act).unwrap(), 100.0 * big.sum());
        assert!(matches!(sphere_mask(&s, 6, &g), Err(Error::BadSphereId(6))));
    }

    #[test]
    fn total_activity_matches_classification_oracle() {
        let s = default_nema_spec();
        let g = Grid3::centered(96, 72, 20, 4.0).unwrap();
        let (act, _) = build_phantom(&s, &g).unwrap();
        let (mut n_sph, mut n_body) = (0usize, 0usize);
        for k in 0..g.nz {
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let p = g.voxel_center(i, j, k).unwrap();
                    let in_body = (p[0] / 150.0).powi(2) + (p[1] / 110.0).powi(2) <= 1.0;
                    let in_sph = (0..6).any(|q| {
                        let c = s.sphere_centers[q];
                        let r = s.sphere_diameters[q] / 2.0;
                        (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)
                            <= r * r
                    });
                    let in_lung = p[0] * p[0] + p[1] * p[1] <= 25.5 * 25.5;
                    if in_sph {
                        n_sph += 1;
                    } else if in_body && !in_lung {
                        n_body += 1;
                    }
                }
            }
        }
        assert_eq!(act.sum(), 100.0 * n_sph as f64 + 10.0 * n_body as f64);
    }

    #[test]
    fn deterministic_build() {
        let s = default_nema_spec();
        let g = Grid3::centered(80, 60, 12, 4.0).unwrap();
        let a = build_phantom(&s, &g).unwrap();
        let b = build_phantom(&s, &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn three_sphere_variant_behaviour() {
        let s = default_nema_spec();
        let t = three_sphere_variant(&s);
        let enabled: Vec<f64> = t.enabled_spheres().map(|i| t.sphere_diameters[i]).collect();
        assert_eq!(enabled, vec![17.0, 13.0, 10.0]);
        assert_eq!(t.sphere_centers, s.sphere_centers);
        let g = Grid3::centered(80, 64, 16, 4.0).unwrap();
        let (act, _) = build_phantom(&t, &g).unwrap();
        let m37 = sphere_mask(&t, 0, &g).unwrap();
        assert_eq!(m37.dot(&act).unwrap(), 10.0 * m37.sum());
        assert_eq!(m37, sphere_mask(&s, 0, &g).unwrap());
    }

    #[test]
    fn phantom_larger_than_grid_is_rejected() {
        let s = default_nema_spec();
        let g = Grid3::centered(64, 64, 46, 4.0).unwrap();
        match build_phantom(&s, &g) {
            Err(Error::PhantomOutOfGrid(msg)) => assert!(msg.contains("body x extent")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn subsampling_gives_partial_volume_values() {
        let mut s = default_nema_spec();
        s.subsamples = 3;
        let g = Grid3::centered(80, 60, 10, 4.0).unwrap();
        let (act, mu) = build_phantom(&s, &g).unwrap();
        assert!(act.data().iter().any(|&v| v > 10.0 && v < 100.0));
        assert!(mu.max() <= MU_WATER_140KEV + 1e-15);
    }
}
