//! Simulates a reduced NEMA acquisition and prints RC_max per sphere after
//! each OSEM iteration.
//!
//!     cargo run --release -p spect-core --example quick_recon

use spect_core::analysis::rc_max;
use spect_core::noise::{poisson_sample, scale_to_counts};
use spect_core::phantom::{build_phantom, default_nema_spec, sphere_mask};
use spect_core::recon::{run_with, InitMode, ReconParams, DEFAULT_SYSTEM_SCALE};
use spect_core::{AcquisitionGeometry, Grid3, Projector, ReconContext};

fn main() -> spect_core::Result<()> {
    let grid = Grid3::centered(64, 64, 46, 8.0)?;
    let spec = default_nema_spec();
    let (activity, mu) = build_phantom(&spec, &grid)?;

    let mut geometry = AcquisitionGeometry::for_grid(&grid);
    geometry.n_views = 60;
    let simulator = Projector::new(grid, geometry.clone(), Some(&mu))?;
    let (means, k) = scale_to_counts(&simulator.forward(&activity, None)?, 5.0e5)?;
    let counts = poisson_sample(&means, 1)?;

    // Reconstruct in activity units: scale a_ij by the count scale.
    geometry.view_weight = DEFAULT_SYSTEM_SCALE * k;
    let model = Projector::new(grid, geometry, Some(&mu))?;
    let ctx = ReconContext::new(&model);
    let params = ReconParams {
        init: InitMode::CountMatched,
        track_likelihood: false,
        ..ReconParams::osem(4, 10)
    };
    let masks = (0..spec.n_spheres())
        .map(|id| sphere_mask(&spec, id, &grid))
        .collect::<spect_core::Result<Vec<_>>>()?;

    println!("iteration  {}", spec.sphere_diameters.iter().map(|d| format!("{d:>6}")).collect::<String>());
    run_with(&params, &counts, &ctx, |it, est| {
        let est = est.scale(DEFAULT_SYSTEM_SCALE);
        let mut line = format!("{it:>9}  ");
        for m in &masks {
            line += &format!("{:>6.3}", rc_max(&est, m, spec.sphere_activity)?);
        }
        println!("{line}");
        Ok(())
    })?;
    Ok(())
}
