//! Count scaling and Poisson noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ProjectionSet;

pub const DEFAULT_TOTAL_COUNTS: f64 = 5.0e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub target_total_counts: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            target_total_counts: DEFAULT_TOTAL_COUNTS,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_total_counts > 0.0 && self.target_total_counts.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "target total counts must be positive, got {}",
                self.target_total_counts
            )));
        }
        Ok(())
    }
}

/// Rescales `proj` so it sums to `target`; returns the scale factor.
pub fn scale_to_counts(proj: &ProjectionSet, target: f64) -> Result<(ProjectionSet, f64)> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "target counts must be positive, got {target}"
        )));
    }
    proj.ensure_nonnegative_finite("projections")?;
    let total = proj.sum();
    if !(total > 0.0) {
        return Err(Error::InvalidData("projections sum to zero; nothing to scale".into()));
    }
    let scale = target / total;
    Ok((proj.scale(scale), scale))
}

/// Independent Poisson draw per bin with mean equal to the bin value.
///
/// Bin `i` uses its own ChaCha8 stream (`seed`, stream `i`), so the result
/// depends only on the inputs and never on thread scheduling.
pub fn poisson_sample(proj: &ProjectionSet, seed: u64) -> Result<ProjectionSet> {
    proj.ensure_nonnegative_finite("projection means")?;
    let base = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<f64> = proj
        .data()
        .par_iter()
        .enumerate()
        .map(|(i, &lambda)| {
            if lambda == 0.0 {
                return 0.0;
            }
            let mut rng = base.clone();
            rng.set_stream(i as u64);
            Poisson::new(lambda)
                .expect("positive finite mean")
                .sample(&mut rng)
        })
        .collect();
    ProjectionSet::from_vec(
        proj.det_u,
        proj.det_v,
        proj.pixel_pitch,
        proj.angles.clone(),
        samples,
    )
}
