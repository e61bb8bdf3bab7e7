//! Layered run configuration.
//!
//! Every knob resolves with the same precedence: command-line flag, then
//! the optional `--config` JSON file, then the built-in default. The
//! resolved settings are serialized verbatim into each artifact's
//! manifest, so a manifest alone is enough to rerun a stage.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use lensforge_core::cosmo::{Cosmology, LensScene};
use lensforge_core::grid::AngularGrid;
use lensforge_core::likelihood::{
    RbfConfig, DEFAULT_LAMBDA_GEO, DEFAULT_LAMBDA_IMG, DEFAULT_LAMBDA_WEAK,
};
use lensforge_core::sampler::{NoiseSchedule, SamplerConfig};

use crate::runio::{CliError, CliResult};

pub const DEFAULT_N_PIX: usize = 128;
pub const DEFAULT_FOV_ARCSEC: f64 = 100.0;

const DEFAULT_N_PARTICLES: usize = 20_000;
/// Total cluster mass in 1e10 M☉/h (2.5e14 M☉/h): massive enough that a
/// z = 0.5 lens multiply-images most background sources.
const DEFAULT_TOTAL_MASS: f64 = 25_000.0;
/// Halo scale radius in ckpc/h.
const DEFAULT_SCALE_RADIUS: f64 = 150.0;
const DEFAULT_SUBSTRUCTURES: usize = 3;
const DEFAULT_VIEWS: usize = 1;
const DEFAULT_KDE_NEIGHBORS: usize = 32;
const DEFAULT_STRONG_SOURCES: usize = 8;
/// Background galaxies per square arcminute.
const DEFAULT_WEAK_DENSITY: f64 = 30.0;
/// Per-component shear measurement variance.
const DEFAULT_SIGMA_W2: f64 = 0.03;
const DEFAULT_PRIOR_SLOPE: f64 = -2.0;
const DEFAULT_PRIOR_AMPLITUDE: f64 = 0.02;

/// Photometry quantile separating "dark" held-out pixels from bright ones
/// when `eval` builds its mask.
pub const EVAL_PHOTOMETRY_QUANTILE: f64 = 0.90;

// ---------------------------------------------------------------------------
// JSON config file
// ---------------------------------------------------------------------------

/// Optional `--config` file; every block and field may be omitted.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub cosmology: Option<CosmologyBlock>,
    pub scene: Option<SceneBlock>,
    pub grid: Option<GridBlock>,
    pub mock: Option<MockBlock>,
    pub observe: Option<ObserveBlock>,
    pub weights: Option<WeightsBlock>,
    pub rbf: Option<RbfBlock>,
    pub sampler: Option<SamplerBlock>,
    pub prior: Option<PriorBlock>,
}

impl FileConfig {
    /// Parse the config file if one was given; the raw bytes are returned
    /// too so the caller can record the file as a run input.
    pub fn load(path: Option<&Path>) -> CliResult<(Self, Option<(PathBuf, Vec<u8>)>)> {
        let Some(path) = path else {
            return Ok((Self::default(), None));
        };
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let config = serde_json::from_slice(&bytes).map_err(|e| {
            CliError::Decode { path: path.to_path_buf(), message: e.to_string() }
        })?;
        Ok((config, Some((path.to_path_buf(), bytes))))
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosmologyBlock {
    pub h0: Option<f64>,
    pub omega_m: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBlock {
    pub z_lens: Option<f64>,
    pub z_ref: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub n_pix: Option<usize>,
    pub fov_arcsec: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockBlock {
    pub n_particles: Option<usize>,
    pub total_mass: Option<f64>,
    pub scale_radius: Option<f64>,
    pub substructures: Option<usize>,
    pub views: Option<usize>,
    pub kde_neighbors: Option<usize>,
    pub icl_flux: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserveBlock {
    pub strong_sources: Option<usize>,
    pub weak_density: Option<f64>,
    pub sigma_w2: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsBlock {
    pub lambda_geo: Option<f64>,
    pub lambda_img: Option<f64>,
    pub lambda_w: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbfBlock {
    pub length_scale: Option<f64>,
    pub ridge: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerBlock {
    pub sigma_max: Option<f64>,
    pub sigma_min: Option<f64>,
    pub steps: Option<usize>,
    pub inner_steps: Option<usize>,
    pub inner_lr: Option<f64>,
    pub tau: Option<f64>,
    pub n_samples: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorBlock {
    pub slope: Option<f64>,
    pub amplitude: Option<f64>,
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

// ---------------------------------------------------------------------------
// Shared flag groups
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Args)]
pub struct SceneArgs {
    /// Hubble constant in km/s/Mpc.
    #[arg(long)]
    pub h0: Option<f64>,
    /// Matter density parameter Ωₘ.
    #[arg(long)]
    pub omega_m: Option<f64>,
    /// Lens (cluster) redshift.
    #[arg(long)]
    pub z_lens: Option<f64>,
    /// Reference source redshift the convergence maps are scaled to.
    #[arg(long)]
    pub z_ref: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GridArgs {
    /// Map side length in pixels.
    #[arg(long)]
    pub n_pix: Option<usize>,
    /// Field of view in arcseconds.
    #[arg(long)]
    pub fov: Option<f64>,
}

// ---------------------------------------------------------------------------
// Resolved settings (these become the manifest `config` value)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SceneSettings {
    pub h0: f64,
    pub omega_m: f64,
    pub z_lens: f64,
    pub z_ref: f64,
}

impl SceneSettings {
    pub fn resolve(args: &SceneArgs, file: &FileConfig) -> Self {
        let cosmo = file.cosmology.clone().unwrap_or_default();
        let scene = file.scene.clone().unwrap_or_default();
        let defaults = LensScene::default();
        Self {
            h0: pick(args.h0, cosmo.h0, defaults.cosmology.h0),
            omega_m: pick(args.omega_m, cosmo.omega_m, defaults.cosmology.omega_m),
            z_lens: pick(args.z_lens, scene.z_lens, defaults.z_lens),
            z_ref: pick(args.z_ref, scene.z_ref, defaults.z_ref),
        }
    }

    pub fn to_scene(&self) -> CliResult<LensScene> {
        let cosmology = Cosmology::new(self.h0, self.omega_m)
            .map_err(|e| CliError::usage(e.to_string()))?;
        LensScene::new(cosmology, self.z_lens, self.z_ref)
            .map_err(|e| CliError::usage(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GridSettings {
    pub n_pix: usize,
    pub fov_arcsec: f64,
}

impl GridSettings {
    pub fn resolve(args: &GridArgs, file: &FileConfig) -> Self {
        let block = file.grid.clone().unwrap_or_default();
        Self {
            n_pix: pick(args.n_pix, block.n_pix, DEFAULT_N_PIX),
            fov_arcsec: pick(args.fov, block.fov_arcsec, DEFAULT_FOV_ARCSEC),
        }
    }

    /// Like [`resolve`](Self::resolve) but without a built-in fallback:
    /// `None` when neither flags nor the config file pin the grid.
    pub fn resolve_explicit(args: &GridArgs, file: &FileConfig) -> Option<Self> {
        let block = file.grid.clone().unwrap_or_default();
        let n_pix = args.n_pix.or(block.n_pix);
        let fov = args.fov.or(block.fov_arcsec);
        match (n_pix, fov) {
            (Some(n_pix), Some(fov_arcsec)) => Some(Self { n_pix, fov_arcsec }),
            (None, None) => None,
            // Half-specified grids fall back to the default for the
            // missing half so a lone --n-pix still works.
            (n, f) => Some(Self {
                n_pix: n.unwrap_or(DEFAULT_N_PIX),
                fov_arcsec: f.unwrap_or(DEFAULT_FOV_ARCSEC),
            }),
        }
    }

    pub fn to_grid(&self) -> CliResult<AngularGrid> {
        AngularGrid::new(self.n_pix, self.fov_arcsec)
            .map_err(|e| CliError::usage(e.to_string()))
    }

    pub fn default_grid() -> CliResult<AngularGrid> {
        Self { n_pix: DEFAULT_N_PIX, fov_arcsec: DEFAULT_FOV_ARCSEC }.to_grid()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MockSettings {
    pub seed: u64,
    pub n_particles: usize,
    pub total_mass: f64,
    pub scale_radius: f64,
    pub substructures: usize,
    pub views: usize,
    pub kde_neighbors: usize,
    pub icl_flux: f64,
    pub grid: GridSettings,
    pub scene: SceneSettings,
}

#[derive(Debug, Clone, Serialize)]
pub struct ObserveSettings {
    pub seed: u64,
    pub strong_sources: usize,
    pub weak_density: f64,
    pub sigma_w2: f64,
    pub scene: SceneSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    /// Built-in Gaussian random field prior.
    Grf,
    /// External score provider spoken to over the wire protocol.
    External,
}

#[derive(Debug, Clone, Serialize)]
pub struct PriorSettings {
    pub kind: PriorKind,
    pub slope: f64,
    pub amplitude: f64,
    pub score_cmd: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightSettings {
    pub lambda_geo: f64,
    pub lambda_img: f64,
    pub lambda_w: f64,
}

impl WeightSettings {
    pub fn all_zero(&self) -> bool {
        self.lambda_geo == 0.0 && self.lambda_img == 0.0 && self.lambda_w == 0.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplerSettings {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub steps: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub tau: f64,
    pub n_samples: usize,
}

impl SamplerSettings {
    pub fn resolve(file: &FileConfig, n_samples_flag: Option<usize>) -> Self {
        let block = file.sampler.clone().unwrap_or_default();
        let d = SamplerConfig::default();
        let ds = NoiseSchedule::default();
        Self {
            sigma_max: block.sigma_max.unwrap_or(ds.sigma_max),
            sigma_min: block.sigma_min.unwrap_or(ds.sigma_min),
            steps: block.steps.unwrap_or(ds.steps),
            inner_steps: block.inner_steps.unwrap_or(d.inner_steps),
            inner_lr: block.inner_lr.unwrap_or(d.inner_lr),
            tau: block.tau.unwrap_or(d.tau),
            n_samples: pick(n_samples_flag, block.n_samples, d.n_samples),
        }
    }

    pub fn to_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            schedule: NoiseSchedule {
                sigma_max: self.sigma_max,
                sigma_min: self.sigma_min,
                steps: self.steps,
            },
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            tau: self.tau,
            n_samples: self.n_samples,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructSettings {
    pub seed: u64,
    pub prior: PriorSettings,
    pub weights: WeightSettings,
    pub rbf: Option<RbfConfig>,
    pub sampler: SamplerSettings,
    pub scene: SceneSettings,
    /// Only set when no photometry pins the reconstruction grid.
    pub grid: Option<GridSettings>,
}

pub fn resolve_weights(
    file: &FileConfig,
    lambda_geo: Option<f64>,
    lambda_img: Option<f64>,
    lambda_w: Option<f64>,
) -> WeightSettings {
    let block = file.weights.clone().unwrap_or_default();
    WeightSettings {
        lambda_geo: pick(lambda_geo, block.lambda_geo, DEFAULT_LAMBDA_GEO),
        lambda_img: pick(lambda_img, block.lambda_img, DEFAULT_LAMBDA_IMG),
        lambda_w: pick(lambda_w, block.lambda_w, DEFAULT_LAMBDA_WEAK),
    }
}

pub fn resolve_rbf(file: &FileConfig) -> Option<RbfConfig> {
    let block = file.rbf.as_ref()?;
    // A half-filled block keeps the likelihood's data-driven default for
    // the missing half via non-finite sentinels being rejected there, so
    // require both fields instead.
    match (block.length_scale, block.ridge) {
        (Some(length_scale), Some(ridge)) => Some(RbfConfig { length_scale, ridge }),
        _ => None,
    }
}

pub fn resolve_prior(
    file: &FileConfig,
    kind: PriorKind,
    slope: Option<f64>,
    amplitude: Option<f64>,
    score_cmd: Option<String>,
) -> PriorSettings {
    let block = file.prior.clone().unwrap_or_default();
    PriorSettings {
        kind,
        slope: pick(slope, block.slope, DEFAULT_PRIOR_SLOPE),
        amplitude: pick(amplitude, block.amplitude, DEFAULT_PRIOR_AMPLITUDE),
        score_cmd,
    }
}

pub fn resolve_mock(
    seed: u64,
    views: Option<usize>,
    knobs: &MockKnobs,
    grid: &GridArgs,
    scene: &SceneArgs,
    file: &FileConfig,
) -> MockSettings {
    let block = file.mock.clone().unwrap_or_default();
    MockSettings {
        seed,
        n_particles: pick(knobs.n_particles, block.n_particles, DEFAULT_N_PARTICLES),
        total_mass: pick(knobs.mass, block.total_mass, DEFAULT_TOTAL_MASS),
        scale_radius: pick(knobs.scale_radius, block.scale_radius, DEFAULT_SCALE_RADIUS),
        substructures: pick(knobs.substructures, block.substructures, DEFAULT_SUBSTRUCTURES),
        views: pick(views, block.views, DEFAULT_VIEWS),
        kde_neighbors: pick(knobs.kde_k, block.kde_neighbors, DEFAULT_KDE_NEIGHBORS),
        icl_flux: pick(knobs.icl_flux, block.icl_flux, 0.0),
        grid: GridSettings::resolve(grid, file),
        scene: SceneSettings::resolve(scene, file),
    }
}

/// Mock-stage tunables shared between `mock` and `pipeline`.
#[derive(Debug, Clone, Default, Args)]
pub struct MockKnobs {
    /// Number of particles in the halo cloud.
    #[arg(long)]
    pub n_particles: Option<usize>,
    /// Total cluster mass in 1e10 M☉/h.
    #[arg(long)]
    pub mass: Option<f64>,
    /// Halo scale radius in ckpc/h.
    #[arg(long)]
    pub scale_radius: Option<f64>,
    /// Number of substructure clumps.
    #[arg(long)]
    pub substructures: Option<usize>,
    /// k-NN neighbour count for the density projection.
    #[arg(long)]
    pub kde_k: Option<usize>,
    /// Total intracluster-light flux to inject (omit to disable).
    #[arg(long)]
    pub icl_flux: Option<f64>,
}

/// Observation-stage tunables shared between `observe` and `pipeline`.
#[derive(Debug, Clone, Default, Args)]
pub struct ObserveKnobs {
    /// Number of strong-lens source systems (0 skips strong lensing).
    #[arg(long)]
    pub strong: Option<usize>,
    /// Weak-lensing galaxy density per square arcminute (0 skips).
    #[arg(long)]
    pub weak_density: Option<f64>,
    /// Per-component shear measurement variance.
    #[arg(long)]
    pub sigma_w2: Option<f64>,
}

pub fn resolve_observe(
    seed: u64,
    knobs: &ObserveKnobs,
    scene: &SceneArgs,
    file: &FileConfig,
) -> ObserveSettings {
    let block = file.observe.clone().unwrap_or_default();
    ObserveSettings {
        seed,
        strong_sources: pick(knobs.strong, block.strong_sources, DEFAULT_STRONG_SOURCES),
        weak_density: pick(knobs.weak_density, block.weak_density, DEFAULT_WEAK_DENSITY),
        sigma_w2: pick(knobs.sigma_w2, block.sigma_w2, DEFAULT_SIGMA_W2),
        scene: SceneSettings::resolve(scene, file),
    }
}

/// `--kappa-init` accepts only the annealed start; reject anything else
/// loudly rather than silently ignoring a path the user expected to load.
pub fn check_kappa_init(value: &str) -> CliResult<()> {
    if value == "auto" {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "--kappa-init only supports \"auto\" (annealed prior start); got {value:?}"
        )))
    }
}
