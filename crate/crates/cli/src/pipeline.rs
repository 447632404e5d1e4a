//! Whole-study orchestration with input-hash caching and a manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use spect_core::analysis::{Provenance, Variant};
use spect_core::io::{meta_path, read_projections, sha256_hex};
use spect_core::Grid3;

use crate::config::StudyConfig;
use crate::error::{io, CliError, Result};
use crate::stages;

pub const MANIFEST: &str = "manifest.json";
pub const STAGE_FILE: &str = "stage.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub outputs: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub fast: bool,
    pub config: Value,
    pub stages: Vec<StageRecord>,
    /// Every file under the output directory except the manifest itself.
    pub files: Vec<FileEntry>,
}

/// Outcome of one pipeline stage, for progress messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io(path))?;
    Ok(sha256_hex(&bytes))
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Checksum recorded in a core-format sidecar, used as an input hash.
fn input_hash(stem: &Path) -> Result<String> {
    hash_file(&meta_path(stem))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in std::fs::read_dir(dir).map_err(io(dir))? {
        let p = e.map_err(io(dir))?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

struct Runner<'a> {
    root: &'a Path,
    stages: Vec<StageRecord>,
    log: &'a mut dyn FnMut(&str, StageStatus),
}

impl Runner<'_> {
    /// Runs `body` unless `dir/stage.json` records the same key and every
    /// listed output still hashes to its recorded value.
    fn stage(&mut self, name: &str, dir: &Path, key_material: Value, body: impl FnOnce() -> Result<Vec<PathBuf>>) -> Result<()> {
        let key = sha256_hex(json!({ "stage": name, "inputs": key_material }).to_string().as_bytes());
        let stage_file = dir.join(STAGE_FILE);
        if let Ok(text) = std::fs::read_to_string(&stage_file) {
            if let Ok(rec) = serde_json::from_str::<StageRecord>(&text) {
                let intact = rec.key == key
                    && rec
                        .outputs
                        .iter()
                        .all(|f| hash_file(&self.root.join(&f.path)).map(|h| h == f.sha256).unwrap_or(false));
                if intact {
                    self.stages.push(rec);
                    (self.log)(name, StageStatus::Cached);
                    return Ok(());
                }
            }
        }
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(io(dir))?;
        }
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut files = body()?;
        files.sort();
        let outputs = files
            .iter()
            .map(|p| Ok(FileEntry { path: rel(self.root, p), sha256: hash_file(p)? }))
            .collect::<Result<Vec<_>>>()?;
        let rec = StageRecord {
            name: name.to_string(),
            key,
            outputs,
        };
        let text = serde_json::to_string_pretty(&rec).expect("record serializes");
        std::fs::write(&stage_file, text).map_err(io(&stage_file))?;
        self.stages.push(rec);
        (self.log)(name, StageStatus::Ran);
        Ok(())
    }
}

/// Runs every stage of `config` into `config.output_dir` and writes the
/// manifest, also when a stage fails (with `status = "failed"`).
pub fn run_pipeline(config: &StudyConfig, log: &mut dyn FnMut(&str, StageStatus)) -> Result<Manifest> {
    config.validate()?;
    let root = config.output_dir.clone();
    std::fs::create_dir_all(&root).map_err(io(&root))?;
    let mut runner = Runner {
        root: &root,
        stages: Vec::new(),
        log,
    };
    let outcome = run_stages(config, &mut runner);
    let stages = std::mem::take(&mut runner.stages);
    let mut files = Vec::new();
    walk(&root, &mut files)?;
    files.sort();
    let manifest_path = root.join(MANIFEST);
    let files = files
        .into_iter()
        .filter(|p| *p != manifest_path)
        .map(|p| Ok(FileEntry { path: rel(&root, &p), sha256: hash_file(&p)? }))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        status: if outcome.is_ok() { "ok".into() } else { "failed".into() },
        error: outcome.as_ref().err().map(|e| e.to_string()),
        config_hash: config.hash(),
        seed: config.seed,
        fast: config.fast,
        config: config.canonical_json(),
        stages,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text + "\n").map_err(io(&manifest_path))?;
    outcome.map(|_| manifest)
}

fn run_stages(c: &StudyConfig, r: &mut Runner) -> Result<()> {
    let root = r.root.to_path_buf();
    let grid = Grid3::centered(c.grid.nx, c.grid.ny, c.grid.nz, c.grid.pitch)?;

    let phantom_dir = root.join("phantom");
    r.stage(
        "phantom",
        &phantom_dir,
        json!({ "grid": c.grid, "phantom": c.phantom }),
        || stages::phantom(c.phantom.preset, c.phantom.subsamples, grid, &phantom_dir),
    )?;
    let activity = phantom_dir.join(stages::ACTIVITY);
    let attenuation = phantom_dir.join(stages::ATTENUATION);

    let proj_dir = root.join("projections");
    let clean = proj_dir.join("clean");
    r.stage(
        "project",
        &proj_dir,
        json!({ "geometry": c.geometry, "activity": input_hash(&activity)?, "attenuation": input_hash(&attenuation)? }),
        || stages::project(&activity, &attenuation, &c.geometry, &clean),
    )?;

    let noise_dir = root.join("noisy");
    let noisy = noise_dir.join("projections");
    r.stage(
        "addnoise",
        &noise_dir,
        json!({ "noise": c.noise, "seed": c.seed, "clean": input_hash(&clean)? }),
        || stages::addnoise(&clean, c.noise.total_counts, c.seed, c.noise.poisson, &noisy),
    )?;
    let (_, noisy_meta) = read_projections(&noisy)?;
    let count_scale = noisy_meta.extra().get("count_scale").and_then(Value::as_f64).unwrap_or(1.0);

    let provenance = Provenance {
        config_hash: c.hash(),
        seed: c.seed,
        scale: count_scale,
    };
    let mut analyses = Vec::new();
    let mut done_recons = std::collections::BTreeSet::new();
    for v in &c.variants {
        let rid = v.recon_id();
        let recon_dir = root.join("recon").join(&rid);
        if done_recons.insert(rid.clone()) {
            let job = stages::ReconJob {
                projections: noisy.clone(),
                attenuation: attenuation.clone(),
                algorithm: v.algorithm,
                iterations: v.iterations,
                subsets: v.subsets,
                gamma: v.gamma,
                local_gamma: v.local_gamma.clone(),
                local_margin_mm: v.local_margin_mm,
                system_scale: c.recon.system_scale,
                init: c.recon.init,
                epsilon: c.recon.epsilon,
                exponent_clamp: c.recon.exponent_clamp,
                snapshot_every: v.snapshot_every,
                track_likelihood: v.track_likelihood,
            };
            r.stage(
                &format!("reconstruct:{rid}"),
                &recon_dir,
                json!({ "variant": v, "recon": c.recon, "projections": input_hash(&noisy)?, "attenuation": input_hash(&attenuation)? }),
                || stages::reconstruct(&job, &recon_dir),
            )?;
        }
        let source_dir = if v.filter {
            let fdir = root.join("filtered").join(&rid);
            let inputs: Vec<String> = stages::list_snapshots(&recon_dir)?
                .iter()
                .map(|(_, s)| input_hash(s))
                .collect::<Result<_>>()?;
            r.stage(
                &format!("filter:{rid}"),
                &fdir,
                json!({ "filter": c.filter, "inputs": inputs, "final": input_hash(&recon_dir.join(stages::FINAL))? }),
                || stages::filter(&recon_dir, &c.filter, &fdir),
            )?;
            fdir
        } else {
            recon_dir
        };
        let name = v.display_name();
        let adir = root.join("analysis").join(&name);
        let variant = Variant {
            algorithm: v.algorithm.name().to_string(),
            filtered: v.filter,
            gamma: v.gamma_label(),
        };
        let inputs: Vec<String> = stages::list_snapshots(&source_dir)?
            .iter()
            .map(|(_, s)| input_hash(s))
            .collect::<Result<_>>()?;
        r.stage(
            &format!("analyze:{name}"),
            &adir,
            json!({ "variant": variant, "provenance": provenance, "analysis": c.analysis, "inputs": inputs, "truth": input_hash(&activity)? }),
            || stages::analyze(&source_dir, &activity, &variant, provenance.clone(), &c.analysis.profile_iterations, &adir),
        )?;
        analyses.push((name, adir));
    }

    let report_dir = root.join("report");
    let inputs: Vec<String> = analyses
        .iter()
        .map(|(n, d)| hash_file(&d.join(STAGE_FILE)).map(|h| format!("{n}:{h}")))
        .collect::<Result<_>>()?;
    r.stage("report", &report_dir, json!({ "report": c.report, "analyses": inputs }), || {
        stages::report(&analyses, &c.report.formats, &report_dir)
    })?;
    Ok(())
}

/// Loads the manifest of a finished run.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&p).map_err(|_| CliError::MissingInput(p.clone()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Stage(format!("unreadable manifest: {e}")))
}
