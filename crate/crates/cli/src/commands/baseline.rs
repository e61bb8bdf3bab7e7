//! `lensforge baseline`: render the light-traces-mass convergence
//! estimate for a catalog of dPIE components.

use std::path::Path;

use serde::Serialize;

use lensforge_core::evaluate::{ltm_baseline, LtmSource};
use lensforge_core::raster::RasterData;

use crate::commands::ConfigInput;
use crate::config::{FileConfig, GridSettings};
use crate::runio::{CliError, CliResult, RunContext};
use crate::BaselineArgs;

#[derive(Debug, Serialize)]
struct BaselineSettings {
    grid: GridSettings,
}

pub fn run(command: String, config_path: Option<&Path>, args: &BaselineArgs) -> CliResult<()> {
    let (file, config_input) = FileConfig::load(config_path)?;
    let grid = GridSettings::resolve(&args.grid, &file);
    execute(command, config_input, grid, &args.sources, &args.out)
}

pub fn execute(
    command: String,
    config_input: ConfigInput,
    grid_settings: GridSettings,
    sources_path: &Path,
    out_path: &Path,
) -> CliResult<()> {
    let settings = BaselineSettings { grid: grid_settings };
    let config = serde_json::to_value(&settings).expect("settings serialize");
    let mut ctx = RunContext::new(command, config, None);
    if let Some((path, bytes)) = &config_input {
        ctx.note_input(path, bytes);
    }

    let raw: Vec<LtmSource> = ctx.read_json(sources_path)?;
    // Deserialization bypasses the constructor, so re-run its checks.
    let sources = raw
        .into_iter()
        .map(|s| LtmSource::new(s.center, s.sigma_v, s.core_radius, s.cut_radius, s.ellipticity))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Decode {
            path: sources_path.to_path_buf(),
            message: e.to_string(),
        })?;

    let grid = grid_settings.to_grid()?;
    let field = ltm_baseline(&sources, grid).map_err(|e| CliError::usage(e.to_string()))?;
    ctx.write_raster(out_path, &RasterData::Scalar(field))?;
    println!(
        "baseline: {} component(s) on a {}x{} grid -> {}",
        sources.len(),
        grid.n_pix(),
        grid.n_pix(),
        out_path.display()
    );
    Ok(())
}
