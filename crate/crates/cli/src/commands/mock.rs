//! `lensforge mock`: sample a halo cloud, project it along one or more
//! lines of sight, and write truth convergence plus clean photometry.

use std::path::Path;

use lensforge_core::grid::{Quantity, ScalarField};
use lensforge_core::mock::{
    hemisphere_directions, inject_icl, photometry_from_particles, project_kde,
    sample_halo_cloud, write_cloud,
};
use lensforge_core::raster::RasterData;

use crate::commands::ConfigInput;
use crate::config::{resolve_mock, FileConfig, MockSettings};
use crate::runio::{CliError, CliResult, RunContext};
use crate::MockArgs;

pub fn run(command: String, config_path: Option<&Path>, args: &MockArgs) -> CliResult<()> {
    let (file, config_input) = FileConfig::load(config_path)?;
    let settings = resolve_mock(args.seed, args.views, &args.knobs, &args.grid, &args.scene, &file);
    execute(command, config_input, &settings, &args.out_dir)
}

pub fn execute(
    command: String,
    config_input: ConfigInput,
    settings: &MockSettings,
    out_dir: &Path,
) -> CliResult<()> {
    let config = serde_json::to_value(settings).expect("settings serialize");
    let mut ctx = RunContext::new(command, config, Some(settings.seed));
    if let Some((path, bytes)) = &config_input {
        ctx.note_input(path, bytes);
    }

    let grid = settings.grid.to_grid()?;
    let scene = settings.scene.to_scene()?;
    if settings.views == 0 {
        return Err(CliError::usage("--views must be at least 1"));
    }

    let cloud = sample_halo_cloud(
        settings.seed,
        settings.n_particles,
        settings.total_mass,
        settings.scale_radius,
        settings.substructures,
    )
    .map_err(|e| CliError::usage(e.to_string()))?;
    let mut cloud_bytes = Vec::new();
    write_cloud(&mut cloud_bytes, &cloud).map_err(|e| CliError::usage(e.to_string()))?;
    ctx.write_bytes(&out_dir.join("cloud.pcl"), &cloud_bytes)?;

    let sigma_crit = scene
        .sigma_crit(settings.scene.z_ref)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let directions = hemisphere_directions(settings.views)
        .map_err(|e| CliError::usage(e.to_string()))?;

    for (view, direction) in directions.iter().enumerate() {
        let sigma = project_kde(&cloud, *direction, grid, &scene, settings.kde_neighbors)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let kappa_values = sigma.values().iter().map(|&s| s / sigma_crit).collect();
        let kappa = ScalarField::new(grid, Quantity::Convergence, kappa_values)
            .map_err(|e| CliError::usage(e.to_string()))?;
        ctx.write_raster(
            &out_dir.join(format!("kappa_view{view}.f32r")),
            &RasterData::Scalar(kappa),
        )?;

        let mut stack = photometry_from_particles(&cloud, *direction, grid, &scene)
            .map_err(|e| CliError::usage(e.to_string()))?;
        if settings.icl_flux > 0.0 {
            inject_icl(&mut stack, settings.seed, settings.icl_flux)
                .map_err(|e| CliError::usage(e.to_string()))?;
        }
        ctx.write_raster(
            &out_dir.join(format!("photometry_view{view}.f32r")),
            &RasterData::Photometry(stack),
        )?;
    }

    println!(
        "mock: {} particles, {} view(s) on a {}x{} grid -> {}",
        settings.n_particles,
        settings.views,
        grid.n_pix(),
        grid.n_pix(),
        out_dir.display()
    );
    Ok(())
}
