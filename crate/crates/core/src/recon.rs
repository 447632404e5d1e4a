//! Iterative Poisson reconstruction: MLEM, OSEM and MAP with an entropy
//! prior whose reference image is the previous iterate (MAP-Ent).
//!
//! MLEM / OSEM update, for the views `S` of the current subset:
//!
//! ```text
//! f_j ← f_j / Σ_{i∈S} a_ij · Σ_{i∈S} a_ij g_i / (A f)_i
//! ```
//!
//! MAP-Ent update, always on the full data:
//!
//! ```text
//! f_j ← f_j · exp( γ_j · Σ_i a_ij (g_i / (A f)_i − 1) )
//! ```

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, ProjectionSet, Volume};
use crate::projector::{interleaved_subsets, Projector, SubsetScheme};

pub const DEFAULT_EPSILON: f64 = 1e-12;
pub const DEFAULT_EXPONENT_CLAMP: f64 = 50.0;
/// System-matrix scale relative to count-consistent units (a_ij multiplied
/// by the count scale). MAP-Ent's γ is only meaningful against a fixed
/// normalization of a_ij; this value is a calibration, see the README.
pub const DEFAULT_SYSTEM_SCALE: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Mlem,
    Osem,
    MapEnt,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Mlem => "mlem",
            Algorithm::Osem => "osem",
            Algorithm::MapEnt => "mapent",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mlem" => Ok(Algorithm::Mlem),
            "osem" => Ok(Algorithm::Osem),
            "mapent" | "map-ent" => Ok(Algorithm::MapEnt),
            other => Err(Error::InvalidParameter(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    UniformOnes,
    /// Σg / n_voxels.
    UniformScaled,
    /// Uniform c with Σ_i (A c)_i = Σ g, i.e. c = Σg / Σ_j s_j.
    CountMatched,
}

/// Regularization weight of MAP-Ent: one value or one per voxel.
#[derive(Debug, Clone, PartialEq)]
pub enum Gamma {
    Global(f64),
    Map(Volume),
}

impl Gamma {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Gamma::Global(g) => g.is_finite() && *g > 0.0,
            Gamma::Map(m) => m.data().iter().all(|g| g.is_finite() && *g > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("gamma must be > 0 everywhere".into()))
        }
    }

    #[inline]
    fn at(&self, j: usize) -> f64 {
        match self {
            Gamma::Global(g) => *g,
            Gamma::Map(m) => m.data()[j],
        }
    }

    /// β = 1/γ, the weight of the entropy functional (global γ only).
    pub fn beta(&self) -> Option<f64> {
        match self {
            Gamma::Global(g) => Some(1.0 / g),
            Gamma::Map(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconParams {
    pub algorithm: Algorithm,
    pub n_iterations: usize,
    /// Used by OSEM only; MLEM and MAP-Ent always see the full data.
    pub n_subsets: usize,
    /// Required for MAP-Ent.
    pub gamma: Option<Gamma>,
    pub epsilon: f64,
    pub exponent_clamp: f64,
    pub init: InitMode,
    /// Store a snapshot every this many iterations; 0 disables snapshots.
    pub snapshot_every: usize,
    /// Record the full-data log-likelihood after every update.
    pub track_likelihood: bool,
}

impl ReconParams {
    pub fn new(algorithm: Algorithm, n_iterations: usize) -> Self {
        Self {
            algorithm,
            n_iterations,
            n_subsets: 1,
            gamma: None,
            epsilon: DEFAULT_EPSILON,
            exponent_clamp: DEFAULT_EXPONENT_CLAMP,
            init: InitMode::UniformScaled,
            snapshot_every: 0,
            track_likelihood: true,
        }
    }

    pub fn mlem(n_iterations: usize) -> Self {
        Self::new(Algorithm::Mlem, n_iterations)
    }

    pub fn osem(n_iterations: usize, n_subsets: usize) -> Self {
        Self {
            n_subsets,
            ..Self::new(Algorithm::Osem, n_iterations)
        }
    }

    pub fn mapent(n_iterations: usize, gamma: Gamma) -> Self {
        Self {
            gamma: Some(gamma),
            ..Self::new(Algorithm::MapEnt, n_iterations)
        }
    }

    /// Subsets actually used by the selected algorithm.
    pub fn effective_subsets(&self) -> usize {
        match self.algorithm {
            Algorithm::Osem => self.n_subsets,
            Algorithm::Mlem | Algorithm::MapEnt => 1,
        }
    }

    /// Subsets times iterations.
    pub fn number_of_updates(&self) -> usize {
        self.effective_subsets() * self.n_iterations
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::InvalidParameter("n_iterations must be >= 1".into()));
        }
        if self.n_subsets == 0 {
            return Err(Error::InvalidParameter("n_subsets must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("epsilon must be > 0".into()));
        }
        if !(self.exponent_clamp > 0.0) {
            return Err(Error::InvalidParameter("exponent clamp must be > 0".into()));
        }
        if self.algorithm == Algorithm::MapEnt {
            match &self.gamma {
                None => return Err(Error::InvalidParameter("MAP-Ent requires gamma".into())),
                Some(g) => g.validate()?,
            }
        }
        Ok(())
    }

    pub fn echo(&self) -> ParamsEcho {
        ParamsEcho {
            algorithm: self.algorithm,
            n_iterations: self.n_iterations,
            n_subsets: self.effective_subsets(),
            number_of_updates: self.number_of_updates(),
            gamma: match &self.gamma {
                Some(Gamma::Global(g)) => Some(*g),
                _ => None,
            },
            gamma_map: matches!(self.gamma, Some(Gamma::Map(_))),
            epsilon: self.epsilon,
            exponent_clamp: self.exponent_clamp,
            init: self.init,
            subset_order: "ascending".into(),
        }
    }
}

/// Serializable summary of the parameters a reconstruction ran with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsEcho {
    pub algorithm: Algorithm,
    pub n_iterations: usize,
    pub n_subsets: usize,
    pub number_of_updates: usize,
    pub gamma: Option<f64>,
    pub gamma_map: bool,
    pub epsilon: f64,
    pub exponent_clamp: f64,
    pub init: InitMode,
    pub subset_order: String,
}

/// Bookkeeping of guard events during an update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Bins with g > 0 whose model mean fell below epsilon; skipped.
    pub guarded_bins: usize,
    /// MAP-Ent exponents clipped to ±exponent_clamp.
    pub clamped_voxels: usize,
}

impl std::ops::AddAssign for UpdateStats {
    fn add_assign(&mut self, o: Self) {
        self.guarded_bins += o.guarded_bins;
        self.clamped_voxels += o.clamped_voxels;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    pub final_estimate: Volume,
    pub snapshots: Vec<(usize, Volume)>,
    /// `(update index, log-likelihood after that update)`, indices from 1.
    pub loglik_trace: Vec<(usize, f64)>,
    pub params: ParamsEcho,
    pub stats: UpdateStats,
    /// Count-scale factor of the data, when known.
    pub scale: Option<f64>,
}

/// Projector plus cached sensitivity images.
pub struct ReconContext<'a> {
    projector: &'a Projector,
    sensitivities: Mutex<HashMap<Vec<usize>, Arc<Volume>>>,
}

impl<'a> ReconContext<'a> {
    pub fn new(projector: &'a Projector) -> Self {
        Self {
            projector,
            sensitivities: Mutex::new(HashMap::new()),
        }
    }

    pub fn projector(&self) -> &Projector {
        self.projector
    }

    fn all_views(&self) -> Vec<usize> {
        (0..self.projector.n_views()).collect()
    }

    /// Σ_{i∈views} a_ij, cached per view list.
    pub fn sensitivity(&self, views: &[usize]) -> Result<Arc<Volume>> {
        if let Some(s) = self.sensitivities.lock().unwrap().get(views) {
            return Ok(s.clone());
        }
        let s = Arc::new(self.projector.sensitivity(Some(views))?);
        self.sensitivities
            .lock()
            .unwrap()
            .insert(views.to_vec(), s.clone());
        Ok(s)
    }
}

/// Strictly positive starting image.
pub fn init_estimate(grid: &Grid3, proj: &ProjectionSet, mode: InitMode) -> Volume {
    match mode {
        InitMode::UniformOnes => Volume::filled(*grid, 1.0),
        InitMode::UniformScaled | InitMode::CountMatched => {
            let v = proj.sum() / grid.len() as f64;
            Volume::filled(*grid, if v > 0.0 { v } else { 1.0 })
        }
    }
}

/// Σ_i g_i ln ḡ_i − ḡ_i over the bins of `views` (constant ln g_i! omitted).
/// Bins with ḡ = g = 0 contribute 0; ḡ = 0 with g > 0 gives −∞.
pub fn loglikelihood_from_means(means: &ProjectionSet, data: &ProjectionSet, views: &[usize]) -> f64 {
    let mut total = 0.0;
    for &v in views {
        for (&m, &g) in means.view(v).iter().zip(data.view(v)) {
            if m > 0.0 {
                total += g * m.ln() - m;
            } else if g > 0.0 {
                return f64::NEG_INFINITY;
            }
        }
    }
    total
}

/// Poisson log-likelihood of `estimate` given measured `proj`.
pub fn loglikelihood(estimate: &Volume, proj: &ProjectionSet, ctx: &ReconContext) -> Result<f64> {
    let means = ctx.projector.forward(estimate, None)?;
    Ok(loglikelihood_from_means(&means, proj, &ctx.all_views()))
}

fn check_inputs(estimate: &Volume, proj: &ProjectionSet, ctx: &ReconContext) -> Result<()> {
    estimate.ensure_nonnegative_finite("estimate")?;
    proj.ensure_nonnegative_finite("projection data")?;
    if proj.n_views() != ctx.projector.n_views() {
        return Err(Error::GridMismatch("projection views differ from geometry".into()));
    }
    Ok(())
}

/// g / ḡ on `views`, zero elsewhere; bins with g > 0 and ḡ < ε are skipped.
fn ratio(
    means: &ProjectionSet,
    data: &ProjectionSet,
    views: &[usize],
    epsilon: f64,
) -> (ProjectionSet, usize) {
    let mut out = means.map(|_| 0.0);
    let mut guarded = 0;
    for &v in views {
        let dst = out.view_mut(v);
        for ((r, &m), &g) in dst.iter_mut().zip(means.view(v)).zip(data.view(v)) {
            if g == 0.0 {
                *r = 0.0;
            } else if m < epsilon {
                guarded += 1;
                *r = 0.0;
            } else {
                *r = g / m;
            }
        }
    }
    (out, guarded)
}

/// EM step over `views`; also returns the log-likelihood of the input.
fn em_step(
    estimate: &Volume,
    proj: &ProjectionSet,
    views: &[usize],
    epsilon: f64,
    ctx: &ReconContext,
) -> Result<(Volume, UpdateStats, f64)> {
    check_inputs(estimate, proj, ctx)?;
    let sens = ctx.sensitivity(views)?;
    let means = ctx.projector.forward(estimate, Some(views))?;
    let ll = loglikelihood_from_means(&means, proj, views);
    let (r, guarded) = ratio(&means, proj, views, epsilon);
    let back = ctx.projector.backproject(&r, Some(views))?;
    let mut next = estimate.clone();
    for (j, ((f, &b), &s)) in next
        .data_mut()
        .iter_mut()
        .zip(back.data())
        .zip(sens.data())
        .enumerate()
    {
        if *f == 0.0 {
            continue;
        }
        if s > 0.0 {
            *f *= b / s;
        } else {
            return Err(Error::ZeroSensitivity { voxel: j });
        }
    }
    Ok((
        next,
        UpdateStats {
            guarded_bins: guarded,
            clamped_voxels: 0,
        },
        ll,
    ))
}

/// One MLEM update on the full data.
pub fn mlem_update(
    estimate: &Volume,
    proj: &ProjectionSet,
    ctx: &ReconContext,
    epsilon: f64,
) -> Result<(Volume, UpdateStats)> {
    let views = ctx.all_views();
    em_step(estimate, proj, &views, epsilon, ctx).map(|(v, s, _)| (v, s))
}

/// One OSEM sub-iteration on subset `b` of `scheme`.
pub fn osem_update(
    estimate: &Volume,
    proj: &ProjectionSet,
    scheme: &SubsetScheme,
    b: usize,
    ctx: &ReconContext,
    epsilon: f64,
) -> Result<(Volume, UpdateStats)> {
    if b >= scheme.n_subsets {
        return Err(Error::InvalidParameter(format!(
            "subset {b} out of range for {} subsets",
            scheme.n_subsets
        )));
    }
    if scheme.n_views() != ctx.projector.n_views() {
        return Err(Error::InvalidParameter("subset scheme covers a different view count".into()));
    }
    em_step(estimate, proj, &scheme.views(b), epsilon, ctx).map(|(v, s, _)| (v, s))
}

fn mapent_step(
    estimate: &Volume,
    proj: &ProjectionSet,
    gamma: &Gamma,
    ctx: &ReconContext,
    epsilon: f64,
    clamp: f64,
) -> Result<(Volume, UpdateStats, f64)> {
    gamma.validate()?;
    if let Gamma::Map(m) = gamma {
        estimate.check_same_grid(m)?;
    }
    check_inputs(estimate, proj, ctx)?;
    let views = ctx.all_views();
    let sens = ctx.sensitivity(&views)?;
    let means = ctx.projector.forward(estimate, None)?;
    let ll = loglikelihood_from_means(&means, proj, &views);
    let (r, guarded) = ratio(&means, proj, &views, epsilon);
    let back = ctx.projector.backproject(&r, None)?;
    let mut clamped = 0;
    let mut next = estimate.clone();
    for (j, ((f, &b), &s)) in next
        .data_mut()
        .iter_mut()
        .zip(back.data())
        .zip(sens.data())
        .enumerate()
    {
        if *f == 0.0 {
            continue;
        }
        let mut e = gamma.at(j) * (b - s);
        if e > clamp {
            e = clamp;
            clamped += 1;
        } else if e < -clamp {
            e = -clamp;
            clamped += 1;
        }
        *f *= e.exp();
    }
    Ok((
        next,
        UpdateStats {
            guarded_bins: guarded,
            clamped_voxels: clamped,
        },
        ll,
    ))
}

/// One MAP-Ent update on the full data.
pub fn mapent_update(
    estimate: &Volume,
    proj: &ProjectionSet,
    gamma: &Gamma,
    ctx: &ReconContext,
    epsilon: f64,
    exponent_clamp: f64,
) -> Result<(Volume, UpdateStats)> {
    mapent_step(estimate, proj, gamma, ctx, epsilon, exponent_clamp).map(|(v, s, _)| (v, s))
}

/// Runs `params` and collects snapshots in memory.
pub fn run(params: &ReconParams, proj: &ProjectionSet, ctx: &ReconContext) -> Result<ReconResult> {
    let mut snapshots = Vec::new();
    let mut result = run_with(params, proj, ctx, |it, vol| {
        if params.snapshot_every > 0 && it % params.snapshot_every == 0 {
            snapshots.push((it, vol.clone()));
        }
        Ok(())
    })?;
    result.snapshots = snapshots;
    Ok(result)
}

/// Runs `params`, handing every completed iteration to `on_iteration`
/// instead of storing snapshots.
pub fn run_with(
    params: &ReconParams,
    proj: &ProjectionSet,
    ctx: &ReconContext,
    mut on_iteration: impl FnMut(usize, &Volume) -> Result<()>,
) -> Result<ReconResult> {
    params.validate()?;
    let grid = *ctx.projector.grid();
    let all_views = ctx.all_views();
    let scheme = interleaved_subsets(ctx.projector.n_views(), params.effective_subsets())?;
    let subset_views: Vec<Vec<usize>> = (0..scheme.n_subsets).map(|b| scheme.views(b)).collect();

    let mut estimate = init_estimate(&grid, proj, params.init);
    // Voxels some update never sees (outside the field of view) start and stay at 0.
    let fov_sets: Vec<&[usize]> = match params.algorithm {
        Algorithm::MapEnt => vec![&all_views[..]],
        _ => subset_views.iter().map(|v| &v[..]).collect(),
    };
    for views in fov_sets {
        let sens = ctx.sensitivity(views)?;
        for (f, &s) in estimate.data_mut().iter_mut().zip(sens.data()) {
            if s <= 0.0 {
                *f = 0.0;
            }
        }
    }
    if params.init == InitMode::CountMatched {
        let sens = ctx.sensitivity(&all_views)?;
        let total: f64 = estimate.data().iter().zip(sens.data()).map(|(f, s)| f * s).sum();
        let g = proj.sum();
        if total > 0.0 && g > 0.0 {
            estimate = estimate.scale(g / total);
        }
    }
    let mut stats = UpdateStats::default();
    let mut trace = Vec::with_capacity(params.number_of_updates());
    // Updates whose resulting log-likelihood is still unknown.
    let mut pending: VecDeque<usize> = VecDeque::new();
    let mut update = 0usize;

    for it in 1..=params.n_iterations {
        match params.algorithm {
            Algorithm::Mlem | Algorithm::Osem => {
                for views in &subset_views {
                    let (next, s, ll) = em_step(&estimate, proj, views, params.epsilon, ctx)?;
                    if views.len() == all_views.len() {
                        if let Some(u) = pending.pop_front() {
                            trace.push((u, ll));
                        }
                    }
                    estimate = next;
                    stats += s;
                    update += 1;
                    if params.track_likelihood {
                        if views.len() == all_views.len() {
                            pending.push_back(update);
                        } else {
                            trace.push((update, loglikelihood(&estimate, proj, ctx)?));
                        }
                    }
                }
            }
            Algorithm::MapEnt => {
                let gamma = params.gamma.as_ref().expect("validated");
                let (next, s, ll) =
                    mapent_step(&estimate, proj, gamma, ctx, params.epsilon, params.exponent_clamp)?;
                if let Some(u) = pending.pop_front() {
                    trace.push((u, ll));
                }
                estimate = next;
                stats += s;
                update += 1;
                if params.track_likelihood {
                    pending.push_back(update);
                }
            }
        }
        on_iteration(it, &estimate)?;
    }
    if let Some(u) = pending.pop_front() {
        trace.push((u, loglikelihood(&estimate, proj, ctx)?));
    }

    Ok(ReconResult {
        final_estimate: estimate,
        snapshots: Vec::new(),
        loglik_trace: trace,
        params: params.echo(),
        stats,
        scale: None,
    })
}

/// Labels 6-connected lesion candidates.
///
/// Voxels above `background_level` form candidate regions; inside each
/// region voxels above `background + frac · (region max − background)` are
/// kept and split again into 6-connected components. Labels run from 1 in
/// order of each component's first voxel; 0 is background.
pub fn segment_lesions(prerecon: &Volume, background_level: f64, threshold_frac: f64) -> Result<Volume> {
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold fraction must lie in (0, 1), got {threshold_frac}"
        )));
    }
    let grid = *prerecon.grid();
    let data = prerecon.data();
    let above: Vec<bool> = data.iter().map(|&v| v > background_level).collect();
    let regions = connected_components(&grid, &above);

    let mut region_max: Vec<f64> = Vec::new();
    for (idx, &r) in regions.iter().enumerate() {
        if r > 0 {
            let r = r - 1;
            if r >= region_max.len() {
                region_max.resize(r + 1, f64::NEG_INFINITY);
            }
            region_max[r] = region_max[r].max(data[idx]);
        }
    }
    let keep: Vec<bool> = regions
        .iter()
        .zip(data)
        .map(|(&r, &v)| {
            r > 0 && {
                let m = region_max[r - 1];
                v > background_level + threshold_frac * (m - background_level)
            }
        })
        .collect();
    let labels = connected_components(&grid, &keep);
    Volume::from_vec(grid, labels.into_iter().map(|l| l as f64).collect())
}

/// 6-connected labelling of `mask`; 0 = outside.
fn connected_components(grid: &Grid3, mask: &[bool]) -> Vec<usize> {
    let mut labels = vec![0usize; mask.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            let (i, j, k) = grid.unravel(idx);
            let mut visit = |ii: usize, jj: usize, kk: usize| {
                let n = grid.linear(ii, jj, kk);
                if mask[n] && labels[n] == 0 {
                    labels[n] = next;
                    queue.push_back(n);
                }
            };
            if i > 0 {
                visit(i - 1, j, k);
            }
            if i + 1 < grid.nx {
                visit(i + 1, j, k);
            }
            if j > 0 {
                visit(i, j - 1, k);
            }
            if j + 1 < grid.ny {
                visit(i, j + 1, k);
            }
            if k > 0 {
                visit(i, j, k - 1);
            }
            if k + 1 < grid.nz {
                visit(i, j, k + 1);
            }
        }
    }
    labels
}

/// Voxelwise γ: table value inside each labelled region, `default` elsewhere.
pub fn gamma_map_from_labels(labels: &Volume, table: &BTreeMap<u32, f64>, default: f64) -> Result<Volume> {
    if !(default > 0.0 && default.is_finite()) {
        return Err(Error::InvalidParameter(format!("default gamma must be > 0, got {default}")));
    }
    for (label, g) in table {
        if !(*g > 0.0 && g.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma for label {label} must be > 0, got {g}"
            )));
        }
        if !labels.data().iter().any(|&l| l == *label as f64) {
            return Err(Error::InvalidParameter(format!("label {label} does not occur")));
        }
    }
    Ok(labels.map(|l| {
        if l > 0.0 && l.fract() == 0.0 {
            table.get(&(l as u32)).copied().unwrap_or(default)
        } else {
            default
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_phantom, default_nema_spec};
    use crate::projector::AcquisitionGeometry;
    use rand::{Rng, SeedableRng};

    fn setup(psf: bool, att: bool, n_views: usize) -> (Projector, Volume) {
        let g = Grid3::centered(16, 16, 8, 4.0).unwrap();
        let mut geo = AcquisitionGeometry::for_grid(&g);
        geo.n_views = n_views;
        geo.psf_on = psf;
        geo.attenuation_on = att;
        geo.rotation_radius = 60.0;
        let mu = Volume::from_fn(g, |i, j, _| if (4..12).contains(&i) && (4..12).contains(&j) { 0.0154 } else { 0.0 });
        let p = Projector::new(g, geo, Some(&mu)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        // Support inside a disk the detector sees from every angle.
        let f = Volume::from_fn(g, |i, j, k| {
            let c = g.voxel_center(i, j, k).unwrap();
            let v = rng.random_range(0.5..2.0);
            if c[0].hypot(c[1]) < 26.0 { v } else { 0.0 }
        });
        (p, f)
    }

    #[test]
    fn init_examples() {
        let g = Grid3::centered(128, 128, 92, 4.0).unwrap();
        let p = ProjectionSet::from_vec(1, 1, 1.0, vec![0.0], vec![5e6]).unwrap();
        let ones = init_estimate(&g, &p, InitMode::UniformOnes);
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let s = init_estimate(&g, &p, InitMode::UniformScaled);
        let want = 5e6 / 1_507_328.0;
        assert!((s.data()[0] - want).abs() < 1e-12);
        assert!((s.data()[0] - 3.3172).abs() < 1e-3);
        assert!(s.min() > 0.0);
    }

    #[test]
    fn loglikelihood_examples() {
        let (p, _) = setup(false, false, 4);
        let ctx = ReconContext::new(&p);
        let g = *p.grid();
        let f = Volume::filled(g, 1.0);
        let means = p.forward(&f, None).unwrap();
        // Bins with unit mean and unit data contribute 1·ln 1 − 1 = −1.
        let unit = means.map(|_| 1.0);
        let n = unit.data().len() as f64;
        let views: Vec<usize> = (0..4).collect();
        assert!((loglikelihood_from_means(&unit, &unit, &views) + n).abs() < 1e-9);
        let zero = Volume::zeros(g);
        let data = means.map(|_| 1.0);
        assert_eq!(loglikelihood(&zero, &data, &ctx).unwrap(), f64::NEG_INFINITY);
        // Direct per-bin summation oracle.
        let mut oracle = 0.0;
        for (m, d) in means.data().iter().zip(means.data()) {
            if *m > 0.0 {
                oracle += d * m.ln() - m;
            }
        }
        let got = loglikelihood(&f, &means, &ctx).unwrap();
        assert!((got - oracle).abs() <= 1e-10 * oracle.abs());
    }

    #[test]
    fn fixed_points() {
        let (p, f) = setup(true, true, 6);
        let ctx = ReconContext::new(&p);
        let g = p.forward(&f, None).unwrap();
        let (m, _) = mlem_update(&f, &g, &ctx, DEFAULT_EPSILON).unwrap();
        assert!(crate::grid::l2_rel_diff(&m, &f).unwrap() < 1e-12);
        let scheme = interleaved_subsets(6, 3).unwrap();
        let (o, _) = osem_update(&f, &g, &scheme, 1, &ctx, DEFAULT_EPSILON).unwrap();
        assert!(crate::grid::l2_rel_diff(&o, &f).unwrap() < 1e-12);
        let (e, st) = mapent_update(&f, &g, &Gamma::Global(0.1), &ctx, DEFAULT_EPSILON, 50.0).unwrap();
        assert!(crate::grid::l2_rel_diff(&e, &f).unwrap() < 1e-12);
        assert_eq!(st.clamped_voxels, 0);
    }

    #[test]
    fn zero_voxels_stay_zero() {
        let (p, f) = setup(true, false, 6);
        let ctx = ReconContext::new(&p);
        let data = p.forward(&f, None).unwrap();
        let mut est = Volume::filled(*p.grid(), 1.0);
        est.set(3, 4, 2, 0.0);
        for _ in 0..3 {
            est = mlem_update(&est, &data, &ctx, DEFAULT_EPSILON).unwrap().0;
        }
        assert_eq!(est.get(3, 4, 2), 0.0);
        assert!(est.is_nonnegative_finite());
    }

    #[test]
    fn nonpositive_gamma_rejected() {
        let (p, f) = setup(false, false, 4);
        let ctx = ReconContext::new(&p);
        let g = p.forward(&f, None).unwrap();
        assert!(mapent_update(&f, &g, &Gamma::Global(0.0), &ctx, 1e-12, 50.0).is_err());
        assert!(mapent_update(&f, &g, &Gamma::Global(-1.0), &ctx, 1e-12, 50.0).is_err());
        assert!(ReconParams::new(Algorithm::MapEnt, 3).validate().is_err());
    }

    #[test]
    fn mapent_clamps_large_exponents() {
        let (p, f) = setup(false, false, 4);
        let ctx = ReconContext::new(&p);
        let g = p.forward(&f, None).unwrap().scale(1000.0);
        let (next, st) = mapent_update(&f, &g, &Gamma::Global(10.0), &ctx, 1e-12, 5.0).unwrap();
        assert!(st.clamped_voxels > 0);
        assert!(next.is_nonnegative_finite());
        let ratio = next.max() / f.data()[next.data().iter().position(|&x| x == next.max()).unwrap()];
        assert!(ratio <= 5f64.exp() * (1.0 + 1e-12));
    }

    #[test]
    fn guarded_bins_are_counted() {
        let (p, _) = setup(false, false, 4);
        let ctx = ReconContext::new(&p);
        let g = *p.grid();
        let mut est = Volume::zeros(g);
        est.set(8, 8, 4, 1.0);
        let data = p.empty_projections().map(|_| 1.0);
        let (_, st) = mlem_update(&est, &data, &ctx, DEFAULT_EPSILON).unwrap();
        assert!(st.guarded_bins > 0);
    }

    #[test]
    fn run_records_updates_and_snapshots() {
        let (p, f) = setup(true, true, 10);
        let ctx = ReconContext::new(&p);
        let g = p.forward(&f, None).unwrap();
        let params = ReconParams {
            snapshot_every: 1,
            ..ReconParams::osem(4, 5)
        };
        let r = run(&params, &g, &ctx).unwrap();
        assert_eq!(r.snapshots.len(), 4);
        assert_eq!(r.loglik_trace.len(), 20);
        assert_eq!(r.params.number_of_updates, 20);
        assert_eq!(r.loglik_trace.last().unwrap().0, 20);
        let again = run(&params, &g, &ctx).unwrap();
        assert_eq!(r, again);

        let m = run(&ReconParams::mlem(3), &g, &ctx).unwrap();
        assert!(m.snapshots.is_empty());
        assert_eq!(m.loglik_trace.iter().map(|t| t.0).collect::<Vec<_>>(), vec![1, 2, 3]);
        let direct = loglikelihood(&m.final_estimate, &g, &ctx).unwrap();
        assert_eq!(m.loglik_trace[2].1, direct);
    }

    #[test]
    fn osem_single_subset_is_mlem() {
        let (p, f) = setup(true, true, 6);
        let ctx = ReconContext::new(&p);
        let g = p.forward(&f, None).unwrap().map(|x| x.round());
        let est = Volume::filled(*p.grid(), 1.0);
        let scheme = interleaved_subsets(6, 1).unwrap();
        let (a, _) = mlem_update(&est, &g, &ctx, DEFAULT_EPSILON).unwrap();
        let (b, _) = osem_update(&est, &g, &scheme, 0, &ctx, DEFAULT_EPSILON).unwrap();
        assert!(crate::grid::l2_rel_diff(&b, &a).unwrap() <= 1e-12);
    }

    /// Breadth-first count of 6-connected components above a threshold.
    fn count_components(vol: &Volume, thr: f64) -> usize {
        let g = *vol.grid();
        let mut seen = vec![false; g.len()];
        let mut n = 0;
        for s in 0..g.len() {
            if seen[s] || vol.data()[s] <= thr {
                continue;
            }
            n += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(x) = stack.pop() {
                let (i, j, k) = g.unravel(x);
                let nb = [
                    (i as i64 - 1, j as i64, k as i64),
                    (i as i64 + 1, j as i64, k as i64),
                    (i as i64, j as i64 - 1, k as i64),
                    (i as i64, j as i64 + 1, k as i64),
                    (i as i64, j as i64, k as i64 - 1),
                    (i as i64, j as i64, k as i64 + 1),
                ];
                for (a, b, c) in nb {
                    if a < 0 || b < 0 || c < 0 || a >= g.nx as i64 || b >= g.ny as i64 || c >= g.nz as i64 {
                        continue;
                    }
                    let y = g.linear(a as usize, b as usize, c as usize);
                    if !seen[y] && vol.data()[y] > thr {
                        seen[y] = true;
                        stack.push(y);
                    }
                }
            }
        }
        n
    }

    #[test]
    fn segmentation_examples() {
        let g = Grid3::centered(96, 72, 16, 4.0).unwrap();
        let uniform = Volume::filled(g, 10.0);
        assert_eq!(segment_lesions(&uniform, 10.0, 0.5).unwrap().max(), 0.0);

        let (truth, _) = build_phantom(&default_nema_spec(), &g).unwrap();
        let labels = segment_lesions(&truth, 10.0, 0.5).unwrap();
        assert_eq!(labels.max() as usize, count_components(&truth, 55.0));
        assert_eq!(labels.max(), 6.0);
        for (l, v) in labels.data().iter().zip(truth.data()) {
            if *l > 0.0 {
                assert!(*v > 55.0);
            }
        }
        assert!(segment_lesions(&truth, 10.0, 1.0).is_err());
    }

    #[test]
    fn gamma_map_examples() {
        let g = Grid3::centered(8, 8, 4, 4.0).unwrap();
        let labels = Volume::from_fn(g, |i, _, _| if i < 2 { 3.0 } else if i < 4 { 4.0 } else { 0.0 });
        let table = BTreeMap::from([(3u32, 0.15), (4u32, 0.25)]);
        let m = gamma_map_from_labels(&labels, &table, 0.1).unwrap();
        let mut vals: Vec<f64> = m.data().to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        assert_eq!(vals, vec![0.1, 0.15, 0.25]);
        let m = gamma_map_from_labels(&labels, &BTreeMap::new(), 0.1).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.1));
        assert!(gamma_map_from_labels(&labels, &BTreeMap::from([(3u32, 0.0)]), 0.1).is_err());
        assert!(gamma_map_from_labels(&labels, &BTreeMap::from([(9u32, 0.2)]), 0.1).is_err());
    }
}
