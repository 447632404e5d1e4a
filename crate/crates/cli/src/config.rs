//! Study configuration (TOML) with defaults, `--fast` overrides and a
//! canonical hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spect_core::io::sha256_hex;
use spect_core::postfilter::FilterParams;
use spect_core::recon::{Algorithm, InitMode, DEFAULT_EPSILON, DEFAULT_EXPONENT_CLAMP};

use crate::error::CliError;

pub use spect_core::recon::DEFAULT_SYSTEM_SCALE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "nema-6")]
    Nema6,
    #[serde(rename = "nema-3")]
    Nema3,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Nema6 => "nema-6",
            Preset::Nema3 => "nema-3",
        }
    }

    pub fn spec(&self) -> spect_core::PhantomSpec {
        let base = spect_core::phantom::default_nema_spec();
        match self {
            Preset::Nema6 => base,
            Preset::Nema3 => spect_core::phantom::three_sphere_variant(&base),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nema-6" => Ok(Preset::Nema6),
            "nema-3" => Ok(Preset::Nema3),
            other => Err(format!("unknown preset '{other}' (expected nema-6 or nema-3)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub pitch: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            nx: 128,
            ny: 128,
            nz: 92,
            pitch: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub preset: Preset,
    /// Supersampling per axis when voxelizing boundaries.
    pub subsamples: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Nema6,
            subsamples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub n_views: usize,
    pub arc_degrees: f64,
    pub start_angle: f64,
    pub rotation_radius: f64,
    pub psf_sigma0: f64,
    pub psf_slope: f64,
    pub psf: bool,
    pub attenuation: bool,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            n_views: 120,
            arc_degrees: 360.0,
            start_angle: 0.0,
            rotation_radius: 250.0,
            psf_sigma0: 1.7,
            psf_slope: 0.02,
            psf: true,
            attenuation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub total_counts: f64,
    /// When false the scaled mean projections are reconstructed directly.
    pub poisson: bool,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            total_counts: spect_core::noise::DEFAULT_TOTAL_COUNTS,
            poisson: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconSection {
    pub system_scale: f64,
    pub init: InitMode,
    pub epsilon: f64,
    pub exponent_clamp: f64,
}

impl Default for ReconSection {
    fn default() -> Self {
        Self {
            system_scale: DEFAULT_SYSTEM_SCALE,
            init: InitMode::CountMatched,
            epsilon: DEFAULT_EPSILON,
            exponent_clamp: DEFAULT_EXPONENT_CLAMP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub algorithm: Algorithm,
    pub iterations: usize,
    #[serde(default = "one")]
    pub subsets: usize,
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Sphere diameter (mm, as text) → γ inside that sphere's region.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub local_gamma: BTreeMap<String, f64>,
    /// Growth of each local-γ region beyond the sphere surface (mm).
    #[serde(default = "default_margin")]
    pub local_margin_mm: f64,
    #[serde(default)]
    pub filter: bool,
    #[serde(default = "one")]
    pub snapshot_every: usize,
    #[serde(default = "yes")]
    pub track_likelihood: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_margin() -> f64 {
    4.0
}

impl VariantConfig {
    /// Identifier of the reconstruction this variant needs (filtering aside).
    pub fn recon_id(&self) -> String {
        let mut id = match self.algorithm {
            Algorithm::Osem => format!("osem-s{}-n{}", self.subsets, self.iterations),
            Algorithm::Mlem => format!("mlem-n{}", self.iterations),
            Algorithm::MapEnt => format!("mapent-g{}-n{}", self.gamma.unwrap_or(0.0), self.iterations),
        };
        if !self.local_gamma.is_empty() {
            let parts: Vec<String> = self.local_gamma.iter().map(|(d, g)| format!("{d}_{g}")).collect();
            id.push_str(&format!("-local-{}-m{}", parts.join("-"), self.local_margin_mm));
        }
        if self.snapshot_every != 1 {
            id.push_str(&format!("-e{}", self.snapshot_every));
        }
        if !self.track_likelihood {
            id.push_str("-nolik");
        }
        id
    }

    pub fn display_name(&self) -> String {
        match &self.name {
            Some(n) => n.clone(),
            None => {
                let mut n = self.recon_id();
                if self.filter {
                    n.push_str("-filtered");
                }
                n
            }
        }
    }

    /// Text stored in the `gamma` column of RC tables.
    pub fn gamma_label(&self) -> String {
        match (self.algorithm, self.local_gamma.is_empty()) {
            (Algorithm::MapEnt, true) => format!("{}", self.gamma.unwrap_or(0.0)),
            (Algorithm::MapEnt, false) => {
                let parts: Vec<String> = self.local_gamma.iter().map(|(d, g)| format!("{d}:{g}")).collect();
                format!("{}|{}", self.gamma.unwrap_or(0.0), parts.join("|"))
            }
            _ => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Iterations at which line profiles are written; empty means the last.
    pub profile_iterations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub formats: Vec<String>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            formats: vec!["csv".into(), "svg".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Not part of the hash: the same study may be written anywhere.
    #[serde(default = "default_output", skip_serializing)]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub fast: bool,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub recon: ReconSection,
    #[serde(default)]
    pub filter: FilterParams,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub variants: Vec<VariantConfig>,
}

fn default_name() -> String {
    "study".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl StudyConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// CI-scale study: 64×64×46 voxels at 8 mm, 60 views, 5·10⁵ counts.
    pub fn apply_fast(&mut self) {
        self.fast = true;
        self.grid = GridConfig {
            nx: 64,
            ny: 64,
            nz: 46,
            pitch: 8.0,
        };
        self.geometry.n_views = 60;
        self.noise.total_counts = 5.0e5;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        if self.variants.is_empty() {
            return bad("variants", "at least one reconstruction variant is required".into());
        }
        let g = &self.grid;
        if g.nx == 0 || g.ny == 0 || g.nz == 0 || !(g.pitch > 0.0) {
            return bad("grid", format!("dimensions and pitch must be positive, got {g:?}"));
        }
        if self.phantom.subsamples == 0 {
            return bad("phantom.subsamples", "must be >= 1".into());
        }
        if self.geometry.n_views == 0 {
            return bad("geometry.n_views", "must be >= 1".into());
        }
        if !(self.noise.total_counts > 0.0 && self.noise.total_counts.is_finite()) {
            return bad("noise.total_counts", format!("must be positive, got {}", self.noise.total_counts));
        }
        if !(self.recon.system_scale > 0.0 && self.recon.system_scale.is_finite()) {
            return bad("recon.system_scale", format!("must be positive, got {}", self.recon.system_scale));
        }
        if self.filter.order < 1 {
            return bad("filter.order", "must be >= 1".into());
        }
        let nyquist = 0.5 / g.pitch;
        if self.variants.iter().any(|v| v.filter) && !(self.filter.cutoff > 0.0 && self.filter.cutoff <= nyquist) {
            return bad(
                "filter.cutoff",
                format!("{} must lie in (0, {nyquist}] cycles/mm for pitch {}", self.filter.cutoff, g.pitch),
            );
        }
        for f in &self.report.formats {
            if f != "csv" && f != "svg" {
                return bad("report.formats", format!("unknown format '{f}' (csv, svg)"));
            }
        }
        let spec = self.phantom.preset.spec();
        let mut names = std::collections::BTreeSet::new();
        for (n, v) in self.variants.iter().enumerate() {
            let field = |f: &str| format!("variants[{n}].{f}");
            if v.iterations == 0 {
                return bad(&field("iterations"), "must be >= 1".into());
            }
            if v.subsets == 0 || v.subsets > self.geometry.n_views {
                return bad(&field("subsets"), format!("must lie in 1..={}", self.geometry.n_views));
            }
            if v.algorithm != Algorithm::Osem && v.subsets != 1 {
                return bad(&field("subsets"), format!("{} uses the full data; subsets must be 1", v.algorithm.name()));
            }
            match (v.algorithm, v.gamma) {
                (Algorithm::MapEnt, Some(g)) if g > 0.0 && g.is_finite() => {}
                (Algorithm::MapEnt, _) => return bad(&field("gamma"), "MAP-Ent needs gamma > 0".into()),
                (_, Some(_)) => return bad(&field("gamma"), "only MAP-Ent takes gamma".into()),
                _ => {}
            }
            if !v.local_gamma.is_empty() && v.algorithm != Algorithm::MapEnt {
                return bad(&field("local_gamma"), "only MAP-Ent takes local gamma".into());
            }
            for (d, g) in &v.local_gamma {
                if sphere_index(&spec, d).is_none() {
                    return bad(&field("local_gamma"), format!("no sphere with diameter '{d}' mm"));
                }
                if !(*g > 0.0 && g.is_finite()) {
                    return bad(&field("local_gamma"), format!("gamma for '{d}' must be > 0"));
                }
            }
            if !(v.local_margin_mm >= 0.0) {
                return bad(&field("local_margin_mm"), "must be >= 0".into());
            }
            if v.snapshot_every == 0 {
                return bad(&field("snapshot_every"), "must be >= 1".into());
            }
            if !names.insert(v.display_name()) {
                return bad(&field("name"), format!("duplicate variant name '{}'", v.display_name()));
            }
        }
        Ok(())
    }

    /// Canonical JSON of the resolved configuration (output directory
    /// excluded).
    pub fn canonical_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().to_string().as_bytes())
    }
}

/// Index of the sphere whose diameter matches `diameter` (mm, as text).
pub fn sphere_index(spec: &spect_core::PhantomSpec, diameter: &str) -> Option<usize> {
    let d: f64 = diameter.trim().parse().ok()?;
    spec.sphere_diameters.iter().position(|&x| (x - d).abs() < 1e-9)
}

/// The reference study: OSEM 10×4 with and without the post-filter,
/// MAP-Ent at γ = 0.01 and 0.1, and the local-γ variant.
pub fn canonical() -> StudyConfig {
    let variant = |algorithm, iterations, subsets, gamma: Option<f64>, filter| VariantConfig {
        name: None,
        algorithm,
        iterations,
        subsets,
        gamma,
        local_gamma: BTreeMap::new(),
        local_margin_mm: default_margin(),
        filter,
        snapshot_every: 1,
        track_likelihood: true,
    };
    let mut local = variant(Algorithm::MapEnt, 10, 1, Some(0.1), false);
    local.local_gamma = BTreeMap::from([("22".to_string(), 0.15), ("17".to_string(), 0.25)]);
    let mut slow = variant(Algorithm::MapEnt, 100, 1, Some(0.01), false);
    slow.snapshot_every = 10;
    StudyConfig {
        name: "nema-canonical".into(),
        seed: 20240601,
        output_dir: default_output(),
        fast: false,
        grid: GridConfig::default(),
        phantom: PhantomConfig::default(),
        geometry: GeometryConfig::default(),
        noise: NoiseSection::default(),
        recon: ReconSection::default(),
        filter: FilterParams::default(),
        analysis: AnalysisConfig::default(),
        report: ReportConfig::default(),
        variants: vec![
            variant(Algorithm::Osem, 4, 10, None, false),
            variant(Algorithm::Osem, 4, 10, None, true),
            slow,
            variant(Algorithm::MapEnt, 20, 1, Some(0.1), false),
            local,
        ],
    }
}
