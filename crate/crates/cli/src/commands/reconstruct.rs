//! `lensforge reconstruct`: sample the convergence posterior behind the
//! supplied observations and write summary maps plus every sample.

use std::path::{Path, PathBuf};

use serde::Serialize;

use lensforge_core::grid::{PhotometryStack, Quantity, ScalarField};
use lensforge_core::likelihood::{LossWeights, NegLogLikelihood, ObservedData};
use lensforge_core::observe::{StrongLensSystem, WeakCatalog};
use lensforge_core::raster::RasterData;
use lensforge_core::sampler::{
    daps_sample, ExternalScorePrior, GrfPrior, NllOutput, NormalizedNll, ReconstructionResult,
    SampleManifest, ScorePrior,
};

use crate::commands::{observe::read_photometry, ConfigInput};
use crate::config::{
    check_kappa_init, resolve_prior, resolve_rbf, resolve_weights, FileConfig, GridSettings,
    PriorKind, ReconstructSettings, SamplerSettings, SceneSettings,
};
use crate::runio::{CliError, CliResult, RunContext};
use crate::ReconstructArgs;

pub struct ReconstructInputs<'a> {
    pub strong: Option<&'a Path>,
    pub weak: Option<&'a Path>,
    pub photometry: Option<&'a Path>,
}

pub fn run(command: String, config_path: Option<&Path>, args: &ReconstructArgs) -> CliResult<()> {
    check_kappa_init(&args.kappa_init)?;
    if args.prior == PriorKind::External && args.score_cmd.is_none() {
        return Err(CliError::usage("--prior external requires --score-cmd"));
    }
    if args.prior == PriorKind::Grf && args.score_cmd.is_some() {
        return Err(CliError::usage(
            "--score-cmd only applies to --prior external",
        ));
    }
    let (file, config_input) = FileConfig::load(config_path)?;
    let settings = ReconstructSettings {
        seed: args.seed,
        prior: resolve_prior(
            &file,
            args.prior,
            args.prior_slope,
            args.prior_amplitude,
            args.score_cmd.clone(),
        ),
        weights: resolve_weights(&file, args.lambda_geo, args.lambda_img, args.lambda_w),
        rbf: resolve_rbf(&file),
        sampler: SamplerSettings::resolve(&file, args.samples),
        scene: SceneSettings::resolve(&args.scene, &file),
        // Without photometry to pin the grid the default must be explicit
        // in the manifest, so resolve it eagerly here.
        grid: if args.photometry.is_none() {
            Some(GridSettings::resolve(&args.grid, &file))
        } else {
            GridSettings::resolve_explicit(&args.grid, &file)
        },
    };
    let inputs = ReconstructInputs {
        strong: args.strong.as_deref(),
        weak: args.weak.as_deref(),
        photometry: args.photometry.as_deref(),
    };
    execute(command, config_input, &settings, &inputs, &args.out_dir)?;
    Ok(())
}

/// Posterior-run artifact: sampling manifest plus the σ/drift trace.
#[derive(Debug, Serialize)]
struct SamplingRecord<'a> {
    manifest: &'a SampleManifest,
    noise_trace: &'a [(f64, f64)],
}

/// Runs the reconstruction; returns the posterior-mean path for chaining.
pub fn execute(
    command: String,
    config_input: ConfigInput,
    settings: &ReconstructSettings,
    inputs: &ReconstructInputs<'_>,
    out_dir: &Path,
) -> CliResult<PathBuf> {
    let config = serde_json::to_value(settings).expect("settings serialize");
    let mut ctx = RunContext::new(command, config, Some(settings.seed));
    if let Some((path, bytes)) = &config_input {
        ctx.note_input(path, bytes);
    }

    let strong: Vec<StrongLensSystem> = match inputs.strong {
        Some(path) => ctx.read_json(path)?,
        None => Vec::new(),
    };
    let weak: Option<WeakCatalog> = match inputs.weak {
        Some(path) => Some(ctx.read_json(path)?),
        None => None,
    };
    let photometry: Option<PhotometryStack> = match inputs.photometry {
        Some(path) => Some(read_photometry(&mut ctx, path)?),
        None => None,
    };

    // The photometry raster pins the grid; explicit flags must agree.
    let grid = match (&photometry, &settings.grid) {
        (Some(stack), Some(gs)) => {
            let grid = stack.grid();
            if grid.n_pix() != gs.n_pix || grid.fov_arcsec() != gs.fov_arcsec {
                return Err(CliError::usage(format!(
                    "grid flags ({}px, {}\") disagree with the photometry raster ({}px, {}\")",
                    gs.n_pix,
                    gs.fov_arcsec,
                    grid.n_pix(),
                    grid.fov_arcsec()
                )));
            }
            grid
        }
        (Some(stack), None) => stack.grid(),
        (None, Some(gs)) => gs.to_grid()?,
        (None, None) => GridSettings::default_grid()?,
    };
    let scene = settings.scene.to_scene()?;
    for system in &strong {
        system
            .validate(&scene, grid)
            .map_err(|e| CliError::usage(e.to_string()))?;
    }

    let no_data = strong.is_empty() && weak.is_none() && photometry.is_none();
    let prior_only = settings.weights.all_zero() || no_data;
    if prior_only {
        eprintln!(
            "warning: {}; sampling from the prior alone",
            if no_data { "no observations were given" } else { "all likelihood weights are zero" }
        );
    }

    let nll = if prior_only {
        None
    } else {
        let weights = LossWeights {
            lambda_geo: settings.weights.lambda_geo,
            lambda_img: settings.weights.lambda_img,
            lambda_w: settings.weights.lambda_w,
        };
        let data = ObservedData {
            strong,
            photometry: photometry.clone(),
            weak,
            rbf: settings.rbf,
        };
        Some(
            NegLogLikelihood::new(grid, &scene, data, weights)
                .map_err(|e| CliError::usage(e.to_string()))?,
        )
    };
    let adapter = nll.as_ref().map(NormalizedNll::new);
    let nll_fn = move |x: &ScalarField| -> NllOutput {
        match &adapter {
            Some(adapter) => adapter.eval(x),
            None => Ok((0.0, ScalarField::zeros(x.grid(), Quantity::Generic))),
        }
    };

    let prior: Box<dyn ScorePrior> = match settings.prior.kind {
        PriorKind::Grf => Box::new(GrfPrior::new(settings.prior.slope, settings.prior.amplitude)?),
        PriorKind::External => {
            let cmd = settings.prior.score_cmd.as_deref().ok_or_else(|| {
                CliError::usage("external prior requires a score command")
            })?;
            Box::new(ExternalScorePrior::spawn(cmd)?)
        }
    };

    let sampler_config = settings.sampler.to_config(settings.seed);
    let result = daps_sample(
        prior.as_ref(),
        nll_fn,
        &sampler_config,
        grid,
        photometry.as_ref(),
    )?;

    write_result(&ctx, &result, out_dir)?;
    println!(
        "reconstruct: {} posterior sample(s), mean kappa in [{:.4}, {:.4}] -> {}",
        result.samples.len(),
        result.mean.min(),
        result.mean.max(),
        out_dir.display()
    );
    Ok(out_dir.join("mean.f32r"))
}

fn write_result(
    ctx: &RunContext,
    result: &ReconstructionResult,
    out_dir: &Path,
) -> CliResult<()> {
    ctx.write_raster(&out_dir.join("mean.f32r"), &RasterData::Scalar(result.mean.clone()))?;
    ctx.write_raster(&out_dir.join("std.f32r"), &RasterData::Scalar(result.std.clone()))?;
    for (k, sample) in result.samples.iter().enumerate() {
        ctx.write_raster(
            &out_dir.join(format!("sample_{k:02}.f32r")),
            &RasterData::Scalar(sample.clone()),
        )?;
    }
    let record = SamplingRecord {
        manifest: &result.manifest,
        noise_trace: &result.noise_trace,
    };
    ctx.write_json(&out_dir.join("sampling.json"), &record)
}
