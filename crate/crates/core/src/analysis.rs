//! Recovery coefficients, RC curves and activity profiles.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Volume;
use crate::phantom::PhantomSpec;

/// Largest value inside `roi` (mask > 0) and its linear index. Ties resolve
/// to the first voxel in linear order.
pub fn roi_max(recon: &Volume, roi: &Volume) -> Result<(f64, usize)> {
    recon.check_same_grid(roi)?;
    let mut best: Option<(f64, usize)> = None;
    for (idx, (&v, &m)) in recon.data().iter().zip(roi.data()).enumerate() {
        if m > 0.0 && best.is_none_or(|(b, _)| v > b) {
            best = Some((v, idx));
        }
    }
    best.ok_or(Error::EmptyRoi)
}

/// RC_max = max over the ROI of the reconstruction divided by the true
/// activity (both in the same units).
pub fn rc_max(recon: &Volume, roi: &Volume, a_true: f64) -> Result<f64> {
    if !(a_true > 0.0) {
        return Err(Error::InvalidParameter(format!("true activity must be > 0, got {a_true}")));
    }
    Ok(roi_max(recon, roi)?.0 / a_true)
}

/// Identifies the reconstruction variant an RC row belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub algorithm: String,
    pub filtered: bool,
    /// γ value or γ-map id; empty for OSEM/MLEM.
    pub gamma: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcRow {
    pub diameter_mm: f64,
    pub iteration: usize,
    pub algorithm: String,
    pub filtered: bool,
    pub gamma: String,
    pub rc_max: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RcReport {
    pub rows: Vec<RcRow>,
    pub provenance: Provenance,
}

pub const RC_CSV_HEADER: &str = "diameter_mm,iteration,algorithm,filtered,gamma,rc_max";

impl RcReport {
    pub fn extend(&mut self, other: RcReport) {
        self.rows.extend(other.rows);
        self.sort();
    }

    /// Diameter descending, then variant, then iteration.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            b.diameter_mm
                .total_cmp(&a.diameter_mm)
                .then_with(|| a.algorithm.cmp(&b.algorithm))
                .then_with(|| a.filtered.cmp(&b.filtered))
                .then_with(|| a.gamma.cmp(&b.gamma))
                .then_with(|| a.iteration.cmp(&b.iteration))
        });
    }

    pub fn select(&self, keep: impl Fn(&RcRow) -> bool) -> RcReport {
        RcReport {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn for_variant(&self, v: &Variant) -> RcReport {
        self.select(|r| r.algorithm == v.algorithm && r.filtered == v.filtered && r.gamma == v.gamma)
    }

    /// RC of sphere `diameter` at `iteration`, if present (first match).
    pub fn value(&self, diameter: f64, iteration: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.diameter_mm == diameter && r.iteration == iteration)
            .map(|r| r.rc_max)
    }

    pub fn diameters(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.rows.iter().map(|r| r.diameter_mm).collect();
        d.sort_by(|a, b| b.total_cmp(a));
        d.dedup();
        d
    }

    pub fn iterations(&self) -> Vec<usize> {
        let mut it: Vec<usize> = self.rows.iter().map(|r| r.iteration).collect();
        it.sort();
        it.dedup();
        it
    }

    /// Provenance as `#` comment lines, then the header and one line per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# config_hash={}", self.provenance.config_hash);
        let _ = writeln!(s, "# seed={}", self.provenance.seed);
        let _ = writeln!(s, "# scale={}", self.provenance.scale);
        s.push_str(RC_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.diameter_mm, r.iteration, r.algorithm, r.filtered, r.gamma, r.rc_max
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<RcReport> {
        let bad = |line: &str| Error::InvalidData(format!("malformed RC CSV line: '{line}'"));
        let mut report = RcReport::default();
        let mut seen_header = false;
        for line in text.lines() {
            if let Some(meta) = line.strip_prefix("# ") {
                let (k, v) = meta.split_once('=').ok_or_else(|| bad(line))?;
                match k {
                    "config_hash" => report.provenance.config_hash = v.to_string(),
                    "seed" => report.provenance.seed = v.parse().map_err(|_| bad(line))?,
                    "scale" => report.provenance.scale = v.parse().map_err(|_| bad(line))?,
                    _ => {}
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !seen_header {
                if line != RC_CSV_HEADER {
                    return Err(bad(line));
                }
                seen_header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            report.rows.push(RcRow {
                diameter_mm: f[0].parse().map_err(|_| bad(line))?,
                iteration: f[1].parse().map_err(|_| bad(line))?,
                algorithm: f[2].to_string(),
                filtered: f[3].parse().map_err(|_| bad(line))?,
                gamma: f[4].to_string(),
                rc_max: f[5].parse().map_err(|_| bad(line))?,
            });
        }
        Ok(report)
    }
}

/// Sphere ROI with its diameter.
pub struct SphereRoi {
    pub diameter_mm: f64,
    pub mask: Volume,
}

/// One RC row per sphere per snapshot, sorted by diameter descending.
pub fn rc_curve(
    snapshots: &[(usize, &Volume)],
    rois: &[SphereRoi],
    a_true: f64,
    variant: &Variant,
) -> Result<RcReport> {
    let mut report = RcReport::default();
    for (it, vol) in snapshots {
        for roi in rois {
            report.rows.push(RcRow {
                diameter_mm: roi.diameter_mm,
                iteration: *it,
                algorithm: variant.algorithm.clone(),
                filtered: variant.filtered,
                gamma: variant.gamma.clone(),
                rc_max: rc_max(vol, &roi.mask, a_true)?,
            });
        }
    }
    report.sort();
    Ok(report)
}

/// max − min of RC_max over the iterations recorded for one sphere.
pub fn iteration_spread(report: &RcReport, diameter: f64) -> Result<f64> {
    let rows: Vec<&RcRow> = report.rows.iter().filter(|r| r.diameter_mm == diameter).collect();
    let mut iters: Vec<usize> = rows.iter().map(|r| r.iteration).collect();
    iters.sort();
    iters.dedup();
    if iters.len() < 2 {
        return Err(Error::InvalidData(format!(
            "sphere {diameter} mm has {} iteration(s); need at least 2",
            iters.len()
        )));
    }
    let max = rows.iter().map(|r| r.rc_max).fold(f64::NEG_INFINITY, f64::max);
    let min = rows.iter().map(|r| r.rc_max).fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// A voxel row: `axis` varies, the other two indices are fixed (in x, y, z
/// order with the varying one skipped).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub axis: Axis,
    pub fixed: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub line: LineSpec,
    pub indices: Vec<usize>,
    pub recon: Vec<f64>,
    pub truth: Vec<f64>,
}

impl ProfileRecord {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,recon,truth\n");
        for ((i, r), t) in self.indices.iter().zip(&self.recon).zip(&self.truth) {
            let _ = writeln!(s, "{i},{r},{t}");
        }
        s
    }
}

/// x-axis row through the voxel nearest to the center of sphere `id`.
pub fn line_through_sphere(spec: &PhantomSpec, id: usize, grid: &crate::grid::Grid3) -> Result<LineSpec> {
    let c = *spec.sphere_centers.get(id).ok_or(Error::BadSphereId(id))?;
    let (_, j, k) = grid
        .index_of(c)
        .ok_or_else(|| Error::InvalidParameter(format!("sphere {id} center lies outside the grid")))?;
    Ok(LineSpec {
        axis: Axis::X,
        fixed: [j, k],
    })
}

/// Paired reconstructed and true values along a voxel row.
pub fn extract_profile(vol: &Volume, truth: &Volume, line: LineSpec) -> Result<ProfileRecord> {
    vol.check_same_grid(truth)?;
    let g = vol.grid();
    let (n, lim) = match line.axis {
        Axis::X => (g.nx, [g.ny, g.nz]),
        Axis::Y => (g.ny, [g.nx, g.nz]),
        Axis::Z => (g.nz, [g.nx, g.ny]),
    };
    if line.fixed[0] >= lim[0] || line.fixed[1] >= lim[1] {
        return Err(Error::InvalidParameter(format!(
            "line {:?} {:?} is outside the grid",
            line.axis, line.fixed
        )));
    }
    let idx = |t: usize| match line.axis {
        Axis::X => (t, line.fixed[0], line.fixed[1]),
        Axis::Y => (line.fixed[0], t, line.fixed[1]),
        Axis::Z => (line.fixed[0], line.fixed[1], t),
    };
    let indices: Vec<usize> = (0..n).collect();
    let recon = indices.iter().map(|&t| { let (i, j, k) = idx(t); vol.get(i, j, k) }).collect();
    let truth_v = indices.iter().map(|&t| { let (i, j, k) = idx(t); truth.get(i, j, k) }).collect();
    Ok(ProfileRecord {
        line,
        indices,
        recon,
        truth: truth_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid3;
    use crate::phantom::{build_phantom, default_nema_spec, sphere_mask};
    use proptest::prelude::*;

    fn variant() -> Variant {
        Variant {
            algorithm: "osem".into(),
            filtered: false,
            gamma: String::new(),
        }
    }

    #[test]
    fn rc_examples() {
        let spec = default_nema_spec();
        let g = Grid3::centered(96, 72, 16, 4.0).unwrap();
        let (truth, _) = build_phantom(&spec, &g).unwrap();
        let m = sphere_mask(&spec, 0, &g).unwrap();
        assert_eq!(rc_max(&truth, &m, 100.0).unwrap(), 1.0);
        let ninety = truth.map(|v| v.min(90.0));
        assert!((rc_max(&ninety, &m, 100.0).unwrap() - 0.9).abs() < 1e-15);
        assert!(matches!(rc_max(&truth, &Volume::zeros(g), 100.0), Err(Error::EmptyRoi)));
    }

    #[test]
    fn rc_uses_single_max_voxel() {
        let g = Grid3::centered(6, 5, 4, 1.0).unwrap();
        let recon = Volume::from_fn(g, |i, j, k| ((i * 31 + j * 17 + k * 7) % 13) as f64);
        let roi = Volume::from_fn(g, |i, j, _| if i > 1 && j < 4 { 1.0 } else { 0.0 });
        let (v, idx) = roi_max(&recon, &roi).unwrap();
        let mut best = (f64::NEG_INFINITY, 0);
        for t in 0..g.len() {
            if roi.data()[t] > 0.0 && recon.data()[t] > best.0 {
                best = (recon.data()[t], t);
            }
        }
        assert_eq!((v, idx), best);
    }

    #[test]
    fn rc_curve_row_counts() {
        let spec = default_nema_spec();
        let g = Grid3::centered(96, 72, 16, 4.0).unwrap();
        let (truth, _) = build_phantom(&spec, &g).unwrap();
        let rois: Vec<SphereRoi> = (0..6)
            .rev()
            .map(|s| SphereRoi {
                diameter_mm: spec.sphere_diameters[s],
                mask: sphere_mask(&spec, s, &g).unwrap(),
            })
            .collect();
        let one = rc_curve(&[(1, &truth)], &rois, 100.0, &variant()).unwrap();
        assert_eq!(one.rows.len(), 6);
        assert!(one.rows.windows(2).all(|w| w[0].diameter_mm > w[1].diameter_mm));
        let snaps: Vec<(usize, &Volume)> = (1..=4).map(|i| (i, &truth)).collect();
        let four = rc_curve(&snaps, &rois, 100.0, &variant()).unwrap();
        assert_eq!(four.rows.len(), 24);
        assert_eq!(four, rc_curve(&snaps, &rois, 100.0, &variant()).unwrap());
    }

    #[test]
    fn spread_examples() {
        let mk = |vals: &[f64]| RcReport {
            rows: vals
                .iter()
                .enumerate()
                .map(|(i, &v)| RcRow {
                    diameter_mm: 13.0,
                    iteration: i + 1,
                    algorithm: "osem".into(),
                    filtered: true,
                    gamma: String::new(),
                    rc_max: v,
                })
                .collect(),
            provenance: Provenance::default(),
        };
        assert_eq!(iteration_spread(&mk(&[0.7, 0.7, 0.7]), 13.0).unwrap(), 0.0);
        assert!((iteration_spread(&mk(&[0.8, 0.9, 1.1, 1.2]), 13.0).unwrap() - 0.4).abs() < 1e-12);
        assert!(iteration_spread(&mk(&[0.8]), 13.0).is_err());
        assert!(iteration_spread(&mk(&[0.8, 0.9]), 10.0).is_err());
    }

    #[test]
    fn profile_examples() {
        let spec = default_nema_spec();
        let g = Grid3::centered(128, 128, 20, 4.0).unwrap();
        let (truth, _) = build_phantom(&spec, &g).unwrap();
        let line = line_through_sphere(&spec, 0, &g).unwrap();
        let p = extract_profile(&truth, &truth, line).unwrap();
        assert_eq!(p.recon, p.truth);
        assert_eq!(p.indices.len(), g.nx);
        // The 37 mm sphere spans 57.2 ± 18.5 mm along x.
        let plateau: Vec<f64> = p
            .indices
            .iter()
            .filter(|&&i| {
                let x = g.voxel_center(i, 0, 0).unwrap()[0];
                (x - 57.2).abs() < 18.0
            })
            .map(|&i| p.truth[i])
            .collect();
        assert!(plateau.len() >= 8);
        assert!(plateau.iter().all(|&v| v == 100.0));
        let bad = LineSpec {
            axis: Axis::X,
            fixed: [128, 0],
        };
        assert!(extract_profile(&truth, &truth, bad).is_err());
    }

    proptest! {
        #[test]
        fn rc_is_scale_equivariant(alpha in 0.01f64..100.0, seed in 0u64..50) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = Grid3::centered(5, 5, 3, 1.0).unwrap();
            let recon = Volume::from_fn(g, |_, _, _| rng.random_range(0.0..50.0));
            let roi = Volume::from_fn(g, |i, _, _| if i < 3 { 1.0 } else { 0.0 });
            let a = rc_max(&recon.scale(alpha), &roi, alpha * 40.0).unwrap();
            let b = rc_max(&recon, &roi, 40.0).unwrap();
            prop_assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }

        #[test]
        fn csv_round_trip(vals in proptest::collection::vec((1.0f64..40.0, 1usize..100, any::<bool>(), 0.0f64..3.0), 0..20),
                          seed in any::<u64>(), scale in 1e-6f64..1e3) {
            let report = RcReport {
                rows: vals.iter().map(|&(d, it, f, rc)| RcRow {
                    diameter_mm: d, iteration: it, algorithm: "mapent".into(), filtered: f,
                    gamma: "0.1".into(), rc_max: rc,
                }).collect(),
                provenance: Provenance { config_hash: "abc123".into(), seed, scale },
            };
            prop_assert_eq!(RcReport::from_csv(&report.to_csv()).unwrap(), report);
        }
    }
}
