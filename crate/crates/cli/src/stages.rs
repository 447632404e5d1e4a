//! Pipeline stages. Every stage reads and writes core-format files only, so
//! the subcommands chained by hand produce the same bytes as `run`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use spect_core::analysis::{
    extract_profile, line_through_sphere, rc_curve, Provenance, RcReport, SphereRoi, Variant,
};
use spect_core::io::{read_projections, read_volume, write_projections, write_volume, Metadata};
use spect_core::noise::{poisson_sample, scale_to_counts};
use spect_core::phantom::{build_phantom, sphere_labels, sphere_mask};
use spect_core::postfilter::{butterworth_3d, FilterParams};
use spect_core::projector::PsfModel;
use spect_core::recon::{gamma_map_from_labels, run_with, Algorithm, Gamma, InitMode, ReconContext, ReconParams};
use spect_core::svg::{Chart, Series};
use spect_core::{AcquisitionGeometry, Grid3, Projector, Volume};

use crate::config::{sphere_index, GeometryConfig, Preset};
use crate::error::{io, CliError, Result};

pub const ACTIVITY: &str = "activity";
pub const ATTENUATION: &str = "attenuation";
pub const FINAL: &str = "final";
pub const TRACE: &str = "trace.csv";
pub const RC_CSV: &str = "rc.csv";

/// Profile rows: (label, sphere index the line passes through).
pub const PROFILE_ROWS: [(&str, usize); 3] = [("top", 5), ("middle", 3), ("bottom", 2)];

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io(dir))
}

fn require(stem: &Path) -> Result<()> {
    let meta = spect_core::io::meta_path(stem);
    if meta.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(meta))
    }
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).map_err(io(path))?;
    Ok(path.to_path_buf())
}

pub fn snapshot_stem(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("iter_{iteration:04}"))
}

/// `(iteration, stem)` of every snapshot in `dir`, ascending.
pub fn list_snapshots(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|_| CliError::MissingInput(dir.to_path_buf()))?;
    let mut out = Vec::new();
    for e in entries {
        let e = e.map_err(io(dir))?;
        let name = e.file_name().to_string_lossy().to_string();
        if let Some(num) = name.strip_prefix("iter_").and_then(|s| s.strip_suffix(".json")) {
            if let Ok(it) = num.parse::<usize>() {
                out.push((it, dir.join(format!("iter_{num}"))));
            }
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::MissingInput(dir.join("iter_*.json")));
    }
    Ok(out)
}

pub fn phantom(preset: Preset, subsamples: usize, grid: Grid3, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let mut spec = preset.spec();
    spec.subsamples = subsamples;
    let (activity, attenuation) = build_phantom(&spec, &grid)?;
    let mut extra = Map::new();
    extra.insert("preset".into(), json!(preset.name()));
    extra.insert("subsamples".into(), json!(subsamples));
    let mut files = write_volume(&out_dir.join(ACTIVITY), &activity, "activity", extra.clone())?;
    files.extend(write_volume(&out_dir.join(ATTENUATION), &attenuation, "attenuation", extra)?);
    Ok(files)
}

pub fn acquisition(grid: &Grid3, g: &GeometryConfig) -> AcquisitionGeometry {
    AcquisitionGeometry {
        n_views: g.n_views,
        arc_degrees: g.arc_degrees,
        start_angle: g.start_angle,
        rotation_radius: g.rotation_radius,
        psf: PsfModel {
            sigma0: g.psf_sigma0,
            slope: g.psf_slope,
        },
        psf_on: g.psf,
        attenuation_on: g.attenuation,
        ..AcquisitionGeometry::for_grid(grid)
    }
}

fn geometry_from(meta: &Metadata) -> Result<AcquisitionGeometry> {
    let value = meta
        .extra()
        .get("geometry")
        .ok_or_else(|| CliError::Stage("projections carry no acquisition geometry".into()))?;
    serde_json::from_value(value.clone())
        .map_err(|e| CliError::Stage(format!("unreadable acquisition geometry: {e}")))
}

/// Noise-free projections of `activity` (activity units).
pub fn project(activity: &Path, attenuation: &Path, geometry: &GeometryConfig, out: &Path) -> Result<Vec<PathBuf>> {
    require(activity)?;
    let (act, _) = read_volume(activity)?;
    let geo = acquisition(act.grid(), geometry);
    let mu = if geo.attenuation_on {
        require(attenuation)?;
        Some(read_volume(attenuation)?.0)
    } else {
        None
    };
    let projector = Projector::new(*act.grid(), geo.clone(), mu.as_ref())?;
    let clean = projector.forward(&act, None)?;
    if let Some(parent) = out.parent() {
        ensure_dir(parent)?;
    }
    let mut extra = Map::new();
    extra.insert("geometry".into(), serde_json::to_value(&geo).expect("geometry serializes"));
    Ok(write_projections(out, &clean, "projections-clean", extra)?)
}

/// Scales to `total_counts` and optionally draws Poisson counts.
pub fn addnoise(clean: &Path, total_counts: f64, seed: u64, poisson: bool, out: &Path) -> Result<Vec<PathBuf>> {
    require(clean)?;
    let (proj, meta) = read_projections(clean)?;
    let (scaled, k) = scale_to_counts(&proj, total_counts)?;
    let data = if poisson { poisson_sample(&scaled, seed)? } else { scaled };
    let mut extra = meta.extra().clone();
    extra.insert("count_scale".into(), json!(k));
    extra.insert("total_counts".into(), json!(total_counts));
    extra.insert("seed".into(), json!(seed));
    extra.insert("poisson".into(), json!(poisson));
    if let Some(parent) = out.parent() {
        ensure_dir(parent)?;
    }
    Ok(write_projections(out, &data, "projections-noisy", extra)?)
}

#[derive(Debug, Clone)]
pub struct ReconJob {
    pub projections: PathBuf,
    pub attenuation: PathBuf,
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub subsets: usize,
    pub gamma: Option<f64>,
    pub local_gamma: BTreeMap<String, f64>,
    pub local_margin_mm: f64,
    pub system_scale: f64,
    pub init: InitMode,
    pub epsilon: f64,
    pub exponent_clamp: f64,
    pub snapshot_every: usize,
    pub track_likelihood: bool,
}

/// Runs one reconstruction; writes a snapshot per `snapshot_every`
/// iterations, the final estimate and the log-likelihood trace.
///
/// The system matrix is the simulation projector with per-view weight
/// `system_scale · count_scale`; estimates are multiplied by `system_scale`
/// before writing so all outputs are in phantom activity units.
pub fn reconstruct(job: &ReconJob, out_dir: &Path) -> Result<Vec<PathBuf>> {
    require(&job.projections)?;
    let (proj, meta) = read_projections(&job.projections)?;
    let mut geo = geometry_from(&meta)?;
    let count_scale = meta.extra().get("count_scale").and_then(Value::as_f64).unwrap_or(1.0);
    geo.view_weight = job.system_scale * count_scale;

    let needs_map = geo.attenuation_on || !job.local_gamma.is_empty();
    let mu_meta = if needs_map {
        require(&job.attenuation)?;
        Some(read_volume(&job.attenuation)?)
    } else {
        None
    };
    let grid = match &mu_meta {
        Some((mu, _)) => *mu.grid(),
        None => return Err(CliError::Stage("reconstruction needs the attenuation volume for its grid".into())),
    };
    let projector = Projector::new(grid, geo, mu_meta.as_ref().filter(|_| needs_map).map(|(v, _)| v))?;

    let gamma = match (job.algorithm, job.gamma) {
        (Algorithm::MapEnt, Some(g)) if job.local_gamma.is_empty() => Some(Gamma::Global(g)),
        (Algorithm::MapEnt, Some(g)) => {
            let (_, mmeta) = mu_meta.as_ref().expect("loaded above");
            let preset: Preset = mmeta
                .extra()
                .get("preset")
                .and_then(Value::as_str)
                .ok_or_else(|| CliError::Stage("local gamma needs a phantom preset in the volume metadata".into()))?
                .parse()
                .map_err(CliError::Stage)?;
            let spec = preset.spec();
            let mut ids = Vec::new();
            let mut table = BTreeMap::new();
            for (d, gv) in &job.local_gamma {
                let id = sphere_index(&spec, d).ok_or_else(|| CliError::Config(format!("no sphere with diameter '{d}'")))?;
                ids.push(id);
                table.insert(id as u32 + 1, *gv);
            }
            let labels = sphere_labels(&spec, &grid, &ids, job.local_margin_mm)?;
            Some(Gamma::Map(gamma_map_from_labels(&labels, &table, g)?))
        }
        (Algorithm::MapEnt, None) => return Err(CliError::Config("MAP-Ent needs --gamma".into())),
        _ => None,
    };
    let params = ReconParams {
        n_subsets: job.subsets,
        gamma,
        epsilon: job.epsilon,
        exponent_clamp: job.exponent_clamp,
        init: job.init,
        snapshot_every: job.snapshot_every,
        track_likelihood: job.track_likelihood,
        ..ReconParams::new(job.algorithm, job.iterations)
    };
    ensure_dir(out_dir)?;
    let ctx = ReconContext::new(&projector);
    let mut files = Vec::new();
    let scale = job.system_scale;
    let updates_per_iteration = params.effective_subsets();
    let result = run_with(&params, &proj, &ctx, |it, est| {
        if it % job.snapshot_every == 0 {
            let mut extra = Map::new();
            extra.insert("iteration".into(), json!(it));
            extra.insert("number_of_updates".into(), json!(it * updates_per_iteration));
            extra.insert("algorithm".into(), json!(job.algorithm.name()));
            files.extend(write_volume(&snapshot_stem(out_dir, it), &est.scale(scale), "recon-snapshot", extra)?);
        }
        Ok(())
    })?;
    let mut extra = Map::new();
    extra.insert("params".into(), serde_json::to_value(&result.params).expect("echo serializes"));
    extra.insert("stats".into(), serde_json::to_value(result.stats).expect("stats serialize"));
    extra.insert("system_scale".into(), json!(job.system_scale));
    extra.insert("count_scale".into(), json!(count_scale));
    extra.insert("iteration".into(), json!(job.iterations));
    files.extend(write_volume(&out_dir.join(FINAL), &result.final_estimate.scale(scale), "recon-final", extra)?);
    let mut trace = String::from("update,loglik\n");
    for (u, l) in &result.loglik_trace {
        trace.push_str(&format!("{u},{l}\n"));
    }
    files.push(write_text(&out_dir.join(TRACE), &trace)?);
    Ok(files)
}

/// Filters every snapshot (and the final estimate) of `in_dir`.
pub fn filter(in_dir: &Path, params: &FilterParams, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut stems: Vec<PathBuf> = list_snapshots(in_dir)?.into_iter().map(|(_, s)| s).collect();
    let fin = in_dir.join(FINAL);
    if spect_core::io::meta_path(&fin).exists() {
        stems.push(fin);
    }
    ensure_dir(out_dir)?;
    let mut files = Vec::new();
    for stem in stems {
        let (vol, meta) = read_volume(&stem)?;
        let out = butterworth_3d(&vol, params)?;
        let mut extra = meta.extra().clone();
        extra.insert("filter".into(), serde_json::to_value(params).expect("filter serializes"));
        let name = stem.file_name().expect("stem has a name");
        files.extend(write_volume(&out_dir.join(name), &out, "recon-filtered", extra)?);
    }
    Ok(files)
}

pub fn profile_file(iteration: usize, row: &str) -> String {
    format!("profile_iter{iteration:04}_{row}.csv")
}

/// RC table for every snapshot in `recon_dir` plus line profiles at
/// `profile_iterations` (the last snapshot when empty).
pub fn analyze(
    recon_dir: &Path,
    truth: &Path,
    variant: &Variant,
    provenance: Provenance,
    profile_iterations: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    require(truth)?;
    let (truth_vol, tmeta) = read_volume(truth)?;
    let preset: Preset = tmeta
        .extra()
        .get("preset")
        .and_then(Value::as_str)
        .ok_or_else(|| CliError::Stage("truth volume carries no phantom preset".into()))?
        .parse()
        .map_err(CliError::Stage)?;
    let spec = preset.spec();
    let grid = *truth_vol.grid();
    let rois: Vec<SphereRoi> = spec
        .enabled_spheres()
        .into_iter()
        .map(|id| {
            Ok(SphereRoi {
                diameter_mm: spec.sphere_diameters[id],
                mask: sphere_mask(&spec, id, &grid)?,
            })
        })
        .collect::<Result<_>>()?;
    let snaps = list_snapshots(recon_dir)?;
    let wanted: Vec<usize> = if profile_iterations.is_empty() {
        vec![snaps.last().expect("non-empty").0]
    } else {
        profile_iterations.to_vec()
    };
    ensure_dir(out_dir)?;
    let mut files = Vec::new();
    let mut report = RcReport {
        rows: Vec::new(),
        provenance,
    };
    for (it, stem) in &snaps {
        let (vol, _) = read_volume(stem)?;
        report.rows.extend(rc_curve(&[(*it, &vol)], &rois, spec.sphere_activity, variant)?.rows);
        if wanted.contains(it) {
            for (row, sphere) in PROFILE_ROWS {
                let line = line_through_sphere(&spec, sphere, &grid)?;
                let p = extract_profile(&vol, &truth_vol, line)?;
                files.push(write_text(&out_dir.join(profile_file(*it, row)), &p.to_csv())?);
            }
        }
    }
    report.sort();
    files.push(write_text(&out_dir.join(RC_CSV), &report.to_csv())?);
    Ok(files)
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|x| x.parse::<f64>().map_err(|_| CliError::Stage(format!("bad number in {}", path.display()))))
                .collect()
        })
        .collect()
}

/// At most `k` iterations evenly spread over `its`, always keeping the last.
fn pick_iterations(its: &[usize], k: usize) -> Vec<usize> {
    if its.len() <= k {
        return its.to_vec();
    }
    let mut out: Vec<usize> = (0..k).map(|n| its[(n * (its.len() - 1)) / (k - 1)]).collect();
    out.dedup();
    out
}

/// SVG figures and a combined RC table from analysis directories.
pub fn report(analyses: &[(String, PathBuf)], formats: &[String], out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let mut files = Vec::new();
    let mut combined = RcReport::default();
    for (name, dir) in analyses {
        let rc_path = dir.join(RC_CSV);
        let text = std::fs::read_to_string(&rc_path).map_err(|_| CliError::MissingInput(rc_path.clone()))?;
        let rep = RcReport::from_csv(&text)?;
        if combined.rows.is_empty() {
            combined.provenance = rep.provenance.clone();
        }
        combined.rows.extend(rep.rows.iter().cloned());
        if !formats.iter().any(|f| f == "svg") {
            continue;
        }
        let its = pick_iterations(&rep.iterations(), 10);
        let series = its
            .iter()
            .map(|&it| {
                let mut pts: Vec<(f64, f64)> =
                    rep.rows.iter().filter(|r| r.iteration == it).map(|r| (r.diameter_mm, r.rc_max)).collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    label: format!("n = {it}"),
                    points: pts,
                    dashed: false,
                }
            })
            .collect();
        let chart = Chart {
            title: format!("RC_max vs sphere diameter: {name}"),
            x_label: "sphere diameter (mm)".into(),
            y_label: "RC_max".into(),
            series,
            y_range: None,
        };
        files.push(write_text(&out_dir.join(format!("rc_{name}.svg")), &chart.render(720.0, 420.0))?);

        let mut profiles: Vec<String> = std::fs::read_dir(dir)
            .map_err(io(dir))?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().to_string()))
            .filter(|n| n.starts_with("profile_") && n.ends_with(".csv"))
            .collect();
        profiles.sort();
        for p in profiles {
            let rows = read_csv_rows(&dir.join(&p))?;
            let chart = Chart {
                title: format!("{name}: {}", p.trim_end_matches(".csv")),
                x_label: "voxel index".into(),
                y_label: "activity".into(),
                series: vec![
                    Series {
                        label: "reconstruction".into(),
                        points: rows.iter().map(|r| (r[0], r[1])).collect(),
                        dashed: false,
                    },
                    Series {
                        label: "phantom".into(),
                        points: rows.iter().map(|r| (r[0], r[2])).collect(),
                        dashed: true,
                    },
                ],
                y_range: None,
            };
            let svg_name = format!("{name}_{}", p.replace(".csv", ".svg"));
            files.push(write_text(&out_dir.join(svg_name), &chart.render(720.0, 360.0))?);
        }
    }
    if formats.iter().any(|f| f == "csv") {
        combined.sort();
        files.push(write_text(&out_dir.join("rc_all.csv"), &combined.to_csv())?);
    }
    Ok(files)
}

/// Reads a volume, for callers that only need the data.
pub fn load_volume(stem: &Path) -> Result<Volume> {
    require(stem)?;
    Ok(read_volume(stem)?.0)
}
