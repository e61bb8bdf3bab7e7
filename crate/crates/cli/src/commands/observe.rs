//! `lensforge observe`: turn a truth convergence map into strong-lens
//! image catalogs, a weak-shear catalog, and arc-stamped photometry.

use std::path::{Path, PathBuf};

use lensforge_core::grid::{PhotometryStack, Quantity, ScalarField};
use lensforge_core::observe::{gen_strong_systems, gen_weak_catalog, stamp_appearances};
use lensforge_core::raster::RasterData;

use crate::commands::{ConfigInput, ObservationBundle};
use crate::config::{resolve_observe, FileConfig, ObserveSettings};
use crate::runio::{CliError, CliResult, RunContext};
use crate::ObserveArgs;

pub fn run(command: String, config_path: Option<&Path>, args: &ObserveArgs) -> CliResult<()> {
    let (file, config_input) = FileConfig::load(config_path)?;
    let settings = resolve_observe(args.seed, &args.knobs, &args.scene, &file);
    execute(
        command,
        config_input,
        &settings,
        &args.kappa,
        args.photometry.as_deref(),
        &args.out_dir,
    )?;
    Ok(())
}

/// Runs the observation stage; returns the bundle path for chaining.
pub fn execute(
    command: String,
    config_input: ConfigInput,
    settings: &ObserveSettings,
    kappa_path: &Path,
    photometry_path: Option<&Path>,
    out_dir: &Path,
) -> CliResult<PathBuf> {
    let config = serde_json::to_value(settings).expect("settings serialize");
    let mut ctx = RunContext::new(command, config, Some(settings.seed));
    if let Some((path, bytes)) = &config_input {
        ctx.note_input(path, bytes);
    }

    let kappa = read_convergence(&mut ctx, kappa_path)?;
    let mut stack = match photometry_path {
        Some(path) => Some(read_photometry(&mut ctx, path)?),
        None => None,
    };
    let scene = settings.scene.to_scene()?;

    let mut bundle = ObservationBundle {
        kappa: kappa_path.display().to_string(),
        photometry: None,
        strong: None,
        weak: None,
        sigma_w2: settings.sigma_w2,
    };

    let mut n_images = 0;
    if settings.strong_sources > 0 {
        let systems = gen_strong_systems(&kappa, &scene, settings.strong_sources, settings.seed)
            .map_err(|e| CliError::usage(e.to_string()))?;
        n_images = systems.iter().map(|s| s.images.len()).sum();
        if let Some(stack) = stack.as_mut() {
            stamp_appearances(stack, &systems).map_err(|e| CliError::usage(e.to_string()))?;
        }
        ctx.write_json(&out_dir.join("strong.json"), &systems)?;
        bundle.strong = Some("strong.json".into());
    }

    let mut n_weak = 0;
    if settings.weak_density > 0.0 {
        let catalog = gen_weak_catalog(
            &kappa,
            &scene,
            settings.weak_density,
            settings.sigma_w2,
            settings.seed,
        )
        .map_err(|e| CliError::usage(e.to_string()))?;
        n_weak = catalog.entries.len();
        ctx.write_json(&out_dir.join("weak.json"), &catalog)?;
        bundle.weak = Some("weak.json".into());
    }

    if let Some(stack) = stack {
        ctx.write_raster(
            &out_dir.join("photometry_obs.f32r"),
            &RasterData::Photometry(stack),
        )?;
        bundle.photometry = Some("photometry_obs.f32r".into());
    }

    let bundle_path = out_dir.join("observations.json");
    ctx.write_json(&bundle_path, &bundle)?;

    println!(
        "observe: {} strong system(s) ({} images), {} weak galaxies -> {}",
        if bundle.strong.is_some() { settings.strong_sources } else { 0 },
        n_images,
        n_weak,
        out_dir.display()
    );
    Ok(bundle_path)
}

pub fn read_convergence(ctx: &mut RunContext, path: &Path) -> CliResult<ScalarField> {
    match ctx.read_raster(path)? {
        RasterData::Scalar(field) if field.quantity() == Quantity::Convergence => Ok(field),
        RasterData::Scalar(field) => Err(CliError::Decode {
            path: path.to_path_buf(),
            message: format!(
                "expected a convergence raster, found {:?}",
                field.quantity()
            ),
        }),
        other => Err(CliError::Decode {
            path: path.to_path_buf(),
            message: format!("expected a scalar raster, found {} channel(s)", other.channels()),
        }),
    }
}

pub fn read_photometry(ctx: &mut RunContext, path: &Path) -> CliResult<PhotometryStack> {
    match ctx.read_raster(path)? {
        RasterData::Photometry(stack) => Ok(stack),
        other => Err(CliError::Decode {
            path: path.to_path_buf(),
            message: format!(
                "expected a 3-band photometry raster, found {} channel(s)",
                other.channels()
            ),
        }),
    }
}
