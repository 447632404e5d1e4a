//! Browser bindings for a small NEMA study: acquire noisy projections,
//! reconstruct, post-filter.
//!
//! [`Session`] holds the state and is plain Rust so it can be tested
//! natively; [`Demo`] is the thin `wasm_bindgen` wrapper used by
//! `www/index.html`.

use spect_core::analysis::rc_max;
use spect_core::noise::{poisson_sample, scale_to_counts};
use spect_core::phantom::{build_phantom, default_nema_spec, sphere_mask, three_sphere_variant};
use spect_core::postfilter::{butterworth_3d, FilterParams};
use spect_core::recon::{run, Algorithm, Gamma, InitMode, ReconParams, DEFAULT_SYSTEM_SCALE};
use spect_core::{AcquisitionGeometry, Grid3, PhantomSpec, ProjectionSet, Projector, ReconContext, Volume};
use wasm_bindgen::prelude::*;

type CoreResult<T> = spect_core::Result<T>;

pub const DIMS: [usize; 3] = [40, 40, 24];
pub const PITCH: f64 = 8.0;
pub const VIEWS: usize = 60;
pub const SUBSETS: usize = 10;

struct Acquisition {
    geometry: AcquisitionGeometry,
    data: ProjectionSet,
    count_scale: f64,
}

pub struct Session {
    spec: PhantomSpec,
    grid: Grid3,
    activity: Volume,
    attenuation: Volume,
    /// Transverse slice through the sphere centres.
    slice: usize,
    acquisition: Option<Acquisition>,
    recon: Option<Volume>,
}

impl Session {
    pub fn new(three_spheres: bool) -> CoreResult<Self> {
        let mut spec = default_nema_spec();
        if three_spheres {
            spec = three_sphere_variant(&spec);
        }
        let grid = Grid3::centered(DIMS[0], DIMS[1], DIMS[2], PITCH)?;
        let (activity, attenuation) = build_phantom(&spec, &grid)?;
        let slice = grid.index_of(spec.sphere_centers[0]).map_or(DIMS[2] / 2, |(_, _, k)| k);
        Ok(Self {
            spec,
            grid,
            activity,
            attenuation,
            slice,
            acquisition: None,
            recon: None,
        })
    }

    fn slice_of(&self, v: &Volume) -> Vec<f32> {
        v.slice_z(self.slice).iter().map(|&x| x as f32).collect()
    }

    pub fn phantom_slice(&self) -> Vec<f32> {
        self.slice_of(&self.activity)
    }

    /// Simulates a noisy acquisition and returns the sinogram of the detector
    /// row through the sphere plane, `views × det_u`, view-major.
    pub fn acquire(&mut self, psf: bool, attenuation: bool, counts: f64, seed: u64) -> CoreResult<Vec<f32>> {
        let mut geometry = AcquisitionGeometry::for_grid(&self.grid);
        geometry.n_views = VIEWS;
        geometry.psf_on = psf;
        geometry.attenuation_on = attenuation;
        let p = Projector::new(self.grid, geometry.clone(), attenuation.then_some(&self.attenuation))?;
        let (means, count_scale) = scale_to_counts(&p.forward(&self.activity, None)?, counts)?;
        let data = poisson_sample(&means, seed)?;
        let du = data.det_u;
        let row = self.slice.min(data.det_v - 1);
        let sino = (0..data.n_views())
            .flat_map(|v| data.view(v)[row * du..(row + 1) * du].iter().map(|&x| x as f32).collect::<Vec<_>>())
            .collect();
        self.acquisition = Some(Acquisition {
            geometry,
            data,
            count_scale,
        });
        self.recon = None;
        Ok(sino)
    }

    /// Reconstructs the last acquisition with the same system model and
    /// returns the sphere-plane slice in phantom activity units.
    pub fn reconstruct(&mut self, algorithm: Algorithm, iterations: usize, gamma: f64) -> CoreResult<Vec<f32>> {
        let acq = self
            .acquisition
            .as_ref()
            .ok_or_else(|| spect_core::Error::InvalidParameter("acquire projections first".into()))?;
        let mut geometry = acq.geometry.clone();
        geometry.view_weight = DEFAULT_SYSTEM_SCALE * acq.count_scale;
        let p = Projector::new(self.grid, geometry.clone(), geometry.attenuation_on.then_some(&self.attenuation))?;
        let ctx = ReconContext::new(&p);
        let params = ReconParams {
            n_subsets: SUBSETS,
            gamma: (algorithm == Algorithm::MapEnt).then_some(Gamma::Global(gamma)),
            init: InitMode::CountMatched,
            track_likelihood: false,
            ..ReconParams::new(algorithm, iterations)
        };
        let est = run(&params, &acq.data, &ctx)?.final_estimate.scale(DEFAULT_SYSTEM_SCALE);
        let out = self.slice_of(&est);
        self.recon = Some(est);
        Ok(out)
    }

    fn current(&self, cutoff: f64) -> CoreResult<Volume> {
        let recon = self
            .recon
            .as_ref()
            .ok_or_else(|| spect_core::Error::InvalidParameter("reconstruct first".into()))?;
        if cutoff <= 0.0 {
            return Ok(recon.clone());
        }
        butterworth_3d(recon, &FilterParams { cutoff, ..FilterParams::default() })
    }

    /// Sphere-plane slice of the last reconstruction after a Butterworth
    /// filter (order 8) with `cutoff` cycles/mm; 0 disables the filter.
    pub fn filtered_slice(&self, cutoff: f64) -> CoreResult<Vec<f32>> {
        Ok(self.slice_of(&self.current(cutoff)?))
    }

    /// RC_max of every enabled sphere, as `(diameter, rc)`.
    pub fn recovery(&self, cutoff: f64) -> CoreResult<Vec<(f64, f64)>> {
        let v = self.current(cutoff)?;
        self.spec
            .enabled_spheres()
            .map(|id| {
                let mask = sphere_mask(&self.spec, id, &self.grid)?;
                Ok((self.spec.sphere_diameters[id], rc_max(&v, &mask, self.spec.sphere_activity)?))
            })
            .collect()
    }
}

fn js(e: spect_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(three_spheres: bool) -> Result<Demo, JsError> {
        Session::new(three_spheres).map(Demo).map_err(js)
    }

    pub fn width(&self) -> usize {
        DIMS[0]
    }

    pub fn height(&self) -> usize {
        DIMS[1]
    }

    pub fn views(&self) -> usize {
        VIEWS
    }

    pub fn phantom_slice(&self) -> Vec<f32> {
        self.0.phantom_slice()
    }

    pub fn acquire(&mut self, psf: bool, attenuation: bool, counts: f64, seed: u32) -> Result<Vec<f32>, JsError> {
        self.0.acquire(psf, attenuation, counts, seed as u64).map_err(js)
    }

    /// `algorithm` is "osem", "mlem" or "mapent".
    pub fn reconstruct(&mut self, algorithm: &str, iterations: usize, gamma: f64) -> Result<Vec<f32>, JsError> {
        let algorithm: Algorithm = algorithm.parse().map_err(js)?;
        self.0.reconstruct(algorithm, iterations, gamma).map_err(js)
    }

    pub fn filtered_slice(&self, cutoff: f64) -> Result<Vec<f32>, JsError> {
        self.0.filtered_slice(cutoff).map_err(js)
    }

    /// Flat `[diameter, rc, diameter, rc, ...]`.
    pub fn recovery(&self, cutoff: f64) -> Result<Vec<f64>, JsError> {
        let rows = self.0.recovery(cutoff).map_err(js)?;
        Ok(rows.into_iter().flat_map(|(d, rc)| [d, rc]).collect())
    }
}
