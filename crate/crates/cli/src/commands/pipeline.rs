//! `lensforge pipeline`: mock → observe → reconstruct → eval under one
//! seed, writing every stage's artifacts into a single directory.
//!
//! Each stage goes through the same `execute` entry point as its
//! standalone subcommand, so a pipeline run is exactly equivalent to the
//! four commands chained by hand — including the per-artifact manifests.

use std::path::Path;

use crate::commands::{eval, mock, observe, reconstruct};
use crate::config::{
    resolve_mock, resolve_observe, resolve_prior, resolve_rbf, resolve_weights, FileConfig,
    PriorKind, ReconstructSettings, SamplerSettings, SceneSettings,
};
use crate::runio::{CliError, CliResult};
use crate::PipelineArgs;

pub fn run(command: String, config_path: Option<&Path>, args: &PipelineArgs) -> CliResult<()> {
    if args.prior == PriorKind::External && args.score_cmd.is_none() {
        return Err(CliError::usage("--prior external requires --score-cmd"));
    }
    if args.prior == PriorKind::Grf && args.score_cmd.is_some() {
        return Err(CliError::usage("--score-cmd only applies to --prior external"));
    }
    let (file, config_input) = FileConfig::load(config_path)?;
    let out = &args.out_dir;

    let mock_settings =
        resolve_mock(args.seed, Some(1), &args.mock, &args.grid, &args.scene, &file);
    mock::execute(command.clone(), config_input.clone(), &mock_settings, out)?;
    let kappa_path = out.join("kappa_view0.f32r");
    let photometry_path = out.join("photometry_view0.f32r");

    let observe_settings = resolve_observe(args.seed, &args.observe, &args.scene, &file);
    let bundle_path = observe::execute(
        command.clone(),
        config_input.clone(),
        &observe_settings,
        &kappa_path,
        Some(&photometry_path),
        out,
    )?;

    let reconstruct_settings = ReconstructSettings {
        seed: args.seed,
        prior: resolve_prior(&file, args.prior, None, None, args.score_cmd.clone()),
        weights: resolve_weights(&file, None, None, None),
        rbf: resolve_rbf(&file),
        sampler: SamplerSettings::resolve(&file, args.samples),
        scene: SceneSettings::resolve(&args.scene, &file),
        // The observed photometry pins the reconstruction grid.
        grid: None,
    };
    let strong_path = (observe_settings.strong_sources > 0).then(|| out.join("strong.json"));
    let weak_path = (observe_settings.weak_density > 0.0).then(|| out.join("weak.json"));
    let observed_photometry = out.join("photometry_obs.f32r");
    let inputs = reconstruct::ReconstructInputs {
        strong: strong_path.as_deref(),
        weak: weak_path.as_deref(),
        photometry: Some(&observed_photometry),
    };
    let mean_path = reconstruct::execute(
        command.clone(),
        config_input.clone(),
        &reconstruct_settings,
        &inputs,
        out,
    )?;

    let cases = vec![eval::EvalCase {
        estimate: mean_path,
        truth: kappa_path,
        mask_from: Some(bundle_path),
    }];
    eval::execute(command, config_input, &cases, out)?;
    println!("pipeline: all stages complete -> {}", out.display());
    Ok(())
}
