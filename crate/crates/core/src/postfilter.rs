//! Isotropic 3-D Butterworth low-pass filter applied in the Fourier domain.
//!
//! The volume is zero-padded by `pad` voxels on every side (0 means plain
//! periodic boundaries), transformed, multiplied by
//! `H(ν) = 1 / sqrt(1 + (ν/ν_c)^(2p))` with `ν` the radial frequency in
//! cycles/mm, transformed back and cropped.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub order: u32,
    /// Cutoff frequency in cycles/mm.
    pub cutoff: f64,
    pub enabled: bool,
    /// Zero padding per side, in voxels.
    #[serde(default = "default_pad")]
    pub pad: usize,
}

fn default_pad() -> usize {
    8
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            order: 8,
            cutoff: 0.048,
            enabled: true,
            pad: 8,
        }
    }
}

impl FilterParams {
    pub fn validate(&self, pitch: f64) -> Result<()> {
        if self.order < 1 {
            return Err(Error::InvalidParameter("filter order must be >= 1".into()));
        }
        let nyquist = 0.5 / pitch;
        if !(self.cutoff > 0.0 && self.cutoff <= nyquist * (1.0 + 1e-12)) {
            return Err(Error::InvalidParameter(format!(
                "cutoff {} must lie in (0, {nyquist}] cycles/mm",
                self.cutoff
            )));
        }
        Ok(())
    }
}

/// Butterworth magnitude response at radial frequency `nu` (cycles/mm).
pub fn filter_gain(params: &FilterParams, nu: f64) -> f64 {
    let x = (nu.abs() / params.cutoff).powi(2 * params.order as i32);
    1.0 / (1.0 + x).sqrt()
}

/// Signed DFT frequency of bin `k` of an `n`-point transform, in cycles/mm.
fn bin_frequency(k: usize, n: usize, pitch: f64) -> f64 {
    let ks = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    ks / (n as f64 * pitch)
}

struct Fft3 {
    dims: [usize; 3],
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
}

impl Fft3 {
    fn new(dims: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        let forward = dims.map(|n| planner.plan_fft_forward(n));
        let inverse = dims.map(|n| planner.plan_fft_inverse(n));
        Self {
            dims,
            forward,
            inverse,
        }
    }

    fn run(&self, data: &mut [Complex<f64>], inverse: bool) {
        let [nx, ny, nz] = self.dims;
        let plans = if inverse { &self.inverse } else { &self.forward };
        for row in data.chunks_exact_mut(nx) {
            plans[0].process(row);
        }
        let mut line = vec![Complex::new(0.0, 0.0); ny.max(nz)];
        for k in 0..nz {
            for i in 0..nx {
                for j in 0..ny {
                    line[j] = data[i + nx * (j + ny * k)];
                }
                plans[1].process(&mut line[..ny]);
                for j in 0..ny {
                    data[i + nx * (j + ny * k)] = line[j];
                }
            }
        }
        for j in 0..ny {
            for i in 0..nx {
                for k in 0..nz {
                    line[k] = data[i + nx * (j + ny * k)];
                }
                plans[2].process(&mut line[..nz]);
                for k in 0..nz {
                    data[i + nx * (j + ny * k)] = line[k];
                }
            }
        }
    }
}

/// Filters `vol`; returns a copy unchanged when the filter is disabled.
pub fn butterworth_3d(vol: &Volume, params: &FilterParams) -> Result<Volume> {
    if !params.enabled {
        return Ok(vol.clone());
    }
    let g = *vol.grid();
    params.validate(g.pitch)?;
    if vol.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("volume holds non-finite values".into()));
    }
    let p = params.pad;
    let dims = [g.nx + 2 * p, g.ny + 2 * p, g.nz + 2 * p];
    let [px, py, pz] = dims;
    let mut buf = vec![Complex::new(0.0, 0.0); px * py * pz];
    for k in 0..g.nz {
        for j in 0..g.ny {
            for i in 0..g.nx {
                buf[(i + p) + px * ((j + p) + py * (k + p))] = Complex::new(vol.get(i, j, k), 0.0);
            }
        }
    }
    let fft = Fft3::new(dims);
    fft.run(&mut buf, false);

    let fx: Vec<f64> = (0..px).map(|k| bin_frequency(k, px, g.pitch)).collect();
    let fy: Vec<f64> = (0..py).map(|k| bin_frequency(k, py, g.pitch)).collect();
    let fz: Vec<f64> = (0..pz).map(|k| bin_frequency(k, pz, g.pitch)).collect();
    for k in 0..pz {
        for j in 0..py {
            for i in 0..px {
                let nu = (fx[i] * fx[i] + fy[j] * fy[j] + fz[k] * fz[k]).sqrt();
                buf[i + px * (j + py * k)] *= filter_gain(params, nu);
            }
        }
    }
    fft.run(&mut buf, true);
    let norm = 1.0 / (px * py * pz) as f64;
    Ok(Volume::from_fn(g, |i, j, k| {
        buf[(i + p) + px * ((j + p) + py * (k + p))].re * norm
    }))
}
