use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spect_cli::config::{self, GeometryConfig, Preset, StudyConfig};
use spect_cli::pipeline::{run_pipeline, StageStatus};
use spect_cli::stages;
use spect_cli::{CliError, Result};
use spect_core::analysis::{Provenance, Variant};
use spect_core::postfilter::FilterParams;
use spect_core::recon::{Algorithm, InitMode, DEFAULT_EPSILON, DEFAULT_EXPONENT_CLAMP};
use spect_core::Grid3;

#[derive(Parser)]
#[command(name = "spect", version, about = "SPECT phantom simulation and reconstruction study")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole study described by a TOML config.
    Run {
        config: PathBuf,
        /// 64×64×46 voxels at 8 mm, 60 views, 5·10⁵ counts.
        #[arg(long)]
        fast: bool,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the canonical study config as TOML.
    Canonical,
    /// Build activity and attenuation volumes.
    Phantom {
        #[arg(long, default_value = "nema-6")]
        preset: String,
        #[arg(long, value_delimiter = ',', default_value = "128,128,92")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 4.0)]
        pitch: f64,
        #[arg(long, default_value_t = 1)]
        subsamples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Noise-free projections of an activity volume.
    Project {
        #[arg(long)]
        activity: PathBuf,
        #[arg(long)]
        attenuation: PathBuf,
        #[command(flatten)]
        geometry: GeometryArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scale projections to a total count and draw Poisson noise.
    Addnoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5.0e6)]
        counts: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep the scaled means instead of sampling.
        #[arg(long)]
        no_poisson: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// MLEM, OSEM or MAP-Ent reconstruction with per-iteration snapshots.
    Reconstruct {
        #[arg(long)]
        projections: PathBuf,
        #[arg(long)]
        attenuation: PathBuf,
        #[arg(long, default_value = "osem")]
        algo: String,
        #[arg(long, default_value_t = 4)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        subsets: usize,
        #[arg(long)]
        gamma: Option<f64>,
        /// Local γ per sphere diameter, e.g. `22=0.15,17=0.25`.
        #[arg(long, value_delimiter = ',')]
        local_gamma: Vec<String>,
        #[arg(long, default_value_t = 4.0)]
        local_margin: f64,
        #[arg(long, default_value_t = config::DEFAULT_SYSTEM_SCALE)]
        system_scale: f64,
        #[arg(long, default_value_t = 1)]
        snapshot_every: usize,
        #[arg(long)]
        no_likelihood: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Butterworth post-filter of every snapshot in a directory.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        order: u32,
        #[arg(long, default_value_t = 0.048)]
        cutoff: f64,
        #[arg(long, default_value_t = 8)]
        pad: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// RC_max table and line profiles for a snapshot directory.
    Analyze {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "osem")]
        algo: String,
        #[arg(long)]
        filtered: bool,
        #[arg(long, default_value = "")]
        gamma_label: String,
        #[arg(long, value_delimiter = ',')]
        profile_iterations: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// SVG figures and a combined RC table from analysis directories.
    Report {
        /// `name=dir` pairs.
        #[arg(long = "analysis", required = true)]
        analyses: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "csv,svg")]
        formats: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GeometryArgs {
    #[arg(long, default_value_t = 120)]
    views: usize,
    #[arg(long, default_value_t = 360.0)]
    arc: f64,
    #[arg(long, default_value_t = 0.0)]
    start_angle: f64,
    #[arg(long, default_value_t = 250.0)]
    radius: f64,
    #[arg(long, default_value_t = 1.7)]
    psf_sigma0: f64,
    #[arg(long, default_value_t = 0.02)]
    psf_slope: f64,
    #[arg(long)]
    no_psf: bool,
    #[arg(long)]
    no_attenuation: bool,
}

impl From<GeometryArgs> for GeometryConfig {
    fn from(a: GeometryArgs) -> Self {
        GeometryConfig {
            n_views: a.views,
            arc_degrees: a.arc,
            start_angle: a.start_angle,
            rotation_radius: a.radius,
            psf_sigma0: a.psf_sigma0,
            psf_slope: a.psf_slope,
            psf: !a.no_psf,
            attenuation: !a.no_attenuation,
        }
    }
}

fn parse_algo(s: &str) -> Result<Algorithm> {
    s.parse().map_err(|e: spect_core::Error| CliError::Config(e.to_string()))
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("{}", f.display());
    }
}

fn execute(cli: Cli) -> Result<()> {
    spect_cli::init_threads()?;
    match cli.command {
        Command::Run { config, fast, out } => {
            let mut cfg = StudyConfig::load(&config)?;
            if fast {
                cfg.apply_fast();
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let mut log = |name: &str, st: StageStatus| {
                let what = match st {
                    StageStatus::Ran => "done",
                    StageStatus::Cached => "cached",
                };
                eprintln!("[{what}] {name}");
            };
            let manifest = run_pipeline(&cfg, &mut log)?;
            eprintln!(
                "{} files, config hash {}",
                manifest.files.len(),
                manifest.config_hash
            );
            println!("{}", cfg.output_dir.join(spect_cli::pipeline::MANIFEST).display());
        }
        Command::Canonical => {
            let text = toml::to_string(&config::canonical()).map_err(|e| CliError::Stage(e.to_string()))?;
            print!("{text}");
        }
        Command::Phantom { preset, dims, pitch, subsamples, out } => {
            let preset: Preset = preset.parse().map_err(CliError::Config)?;
            if dims.len() != 3 {
                return Err(CliError::Config("--dims needs three values nx,ny,nz".into()));
            }
            let grid = Grid3::centered(dims[0], dims[1], dims[2], pitch)?;
            print_files(&stages::phantom(preset, subsamples, grid, &out)?);
        }
        Command::Project { activity, attenuation, geometry, out } => {
            print_files(&stages::project(&activity, &attenuation, &geometry.into(), &out)?);
        }
        Command::Addnoise { input, counts, seed, no_poisson, out } => {
            print_files(&stages::addnoise(&input, counts, seed, !no_poisson, &out)?);
        }
        Command::Reconstruct {
            projections,
            attenuation,
            algo,
            iters,
            subsets,
            gamma,
            local_gamma,
            local_margin,
            system_scale,
            snapshot_every,
            no_likelihood,
            out,
        } => {
            let mut table = BTreeMap::new();
            for item in &local_gamma {
                let (d, g) = item
                    .split_once('=')
                    .ok_or_else(|| CliError::Config(format!("--local-gamma expects diameter=gamma, got '{item}'")))?;
                let g: f64 = g.parse().map_err(|_| CliError::Config(format!("bad gamma in '{item}'")))?;
                table.insert(d.to_string(), g);
            }
            let job = stages::ReconJob {
                projections,
                attenuation,
                algorithm: parse_algo(&algo)?,
                iterations: iters,
                subsets,
                gamma,
                local_gamma: table,
                local_margin_mm: local_margin,
                system_scale,
                init: InitMode::CountMatched,
                epsilon: DEFAULT_EPSILON,
                exponent_clamp: DEFAULT_EXPONENT_CLAMP,
                snapshot_every,
                track_likelihood: !no_likelihood,
            };
            print_files(&stages::reconstruct(&job, &out)?);
        }
        Command::Filter { input, order, cutoff, pad, out } => {
            let params = FilterParams { order, cutoff, enabled: true, pad };
            print_files(&stages::filter(&input, &params, &out)?);
        }
        Command::Analyze { recon, truth, algo, filtered, gamma_label, profile_iterations, out } => {
            let variant = Variant {
                algorithm: parse_algo(&algo)?.name().to_string(),
                filtered,
                gamma: gamma_label,
            };
            print_files(&stages::analyze(&recon, &truth, &variant, Provenance::default(), &profile_iterations, &out)?);
        }
        Command::Report { analyses, formats, out } => {
            let pairs = analyses
                .iter()
                .map(|a| {
                    a.split_once('=')
                        .map(|(n, d)| (n.to_string(), PathBuf::from(d)))
                        .ok_or_else(|| CliError::Config(format!("--analysis expects name=dir, got '{a}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            print_files(&stages::report(&pairs, &formats, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
