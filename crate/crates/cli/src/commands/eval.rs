//! `lensforge eval`: score estimates against truth maps and report
//! per-cluster plus median-aggregated metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use lensforge_core::evaluate::{
    heldout_mask, heldout_rmse, pcc, psnr, ssim, ClusterMetrics, MetricReport,
};
use lensforge_core::grid::{AngularGrid, Quantity, ScalarField};
use lensforge_core::numeric::percentile;
use lensforge_core::observe::{StrongLensSystem, WeakCatalog};
use lensforge_core::raster::RasterData;
use lensforge_core::sampler::normalize;

use crate::commands::{observe::read_photometry, ConfigInput, ObservationBundle};
use crate::config::{FileConfig, EVAL_PHOTOMETRY_QUANTILE};
use crate::runio::{CliError, CliResult, RunContext};
use crate::EvalArgs;

/// One cluster to score: estimate, truth, optional observation bundle.
pub struct EvalCase {
    pub estimate: PathBuf,
    pub truth: PathBuf,
    pub mask_from: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EvalSettings {
    photometry_quantile: f64,
}

pub fn run(command: String, config_path: Option<&Path>, args: &EvalArgs) -> CliResult<()> {
    let (_, config_input) = FileConfig::load(config_path)?;
    if args.estimate.len() != args.truth.len() {
        return Err(CliError::usage(format!(
            "{} estimate(s) but {} truth map(s); give one --truth per --estimate",
            args.estimate.len(),
            args.truth.len()
        )));
    }
    let masks: Vec<Option<PathBuf>> = match args.mask_from.len() {
        0 => vec![None; args.estimate.len()],
        1 => vec![Some(args.mask_from[0].clone()); args.estimate.len()],
        n if n == args.estimate.len() => args.mask_from.iter().cloned().map(Some).collect(),
        n => {
            return Err(CliError::usage(format!(
                "{n} --mask-from value(s) for {} cluster(s); give none, one, or one per cluster",
                args.estimate.len()
            )))
        }
    };
    let cases: Vec<EvalCase> = args
        .estimate
        .iter()
        .zip(&args.truth)
        .zip(masks)
        .map(|((estimate, truth), mask_from)| EvalCase {
            estimate: estimate.clone(),
            truth: truth.clone(),
            mask_from,
        })
        .collect();
    execute(command, config_input, &cases, &args.out_dir)?;
    Ok(())
}

pub fn execute(
    command: String,
    config_input: ConfigInput,
    cases: &[EvalCase],
    out_dir: &Path,
) -> CliResult<MetricReport> {
    let settings = EvalSettings { photometry_quantile: EVAL_PHOTOMETRY_QUANTILE };
    let config = serde_json::to_value(&settings).expect("settings serialize");
    let mut ctx = RunContext::new(command, config, None);
    if let Some((path, bytes)) = &config_input {
        ctx.note_input(path, bytes);
    }

    let mut clusters = Vec::with_capacity(cases.len());
    for case in cases {
        let estimate = read_scalar(&mut ctx, &case.estimate)?;
        let truth = read_scalar(&mut ctx, &case.truth)?;
        estimate
            .check_same_grid(&truth)
            .map_err(|e| CliError::usage(format!(
                "{} vs {}: {e}",
                case.estimate.display(),
                case.truth.display()
            )))?;

        let mask = match &case.mask_from {
            Some(bundle_path) => build_mask(&mut ctx, bundle_path, estimate.grid())?,
            None => vec![true; estimate.values().len()],
        };

        let norm_estimate = normalize(&estimate);
        let norm_truth = normalize(&truth);
        let metrics = ClusterMetrics {
            psnr: psnr(&norm_estimate, &norm_truth, 1.0)
                .map_err(|e| CliError::usage(e.to_string()))?,
            ssim: ssim(&norm_estimate, &norm_truth)
                .map_err(|e| CliError::usage(e.to_string()))?,
            pcc: pcc(&estimate, &truth).map_err(|e| CliError::usage(e.to_string()))?,
            heldout_rmse: heldout_rmse(&estimate, &truth, &mask)
                .map_err(|e| CliError::usage(e.to_string()))?,
        };
        clusters.push(metrics);
    }

    let report =
        MetricReport::from_clusters(clusters).map_err(|e| CliError::usage(e.to_string()))?;
    ctx.write_json(&out_dir.join("report.json"), &report)?;
    ctx.write_bytes(&out_dir.join("report.csv"), render_csv(&report).as_bytes())?;
    let agg = &report.aggregate;
    println!(
        "eval: {} cluster(s); median psnr {:.3} dB, ssim {:.4}, pcc {:.4}, held-out rmse {:.5}",
        report.per_cluster.len(),
        agg.psnr,
        agg.ssim,
        agg.pcc,
        agg.heldout_rmse
    );
    Ok(report)
}

fn read_scalar(ctx: &mut RunContext, path: &Path) -> CliResult<ScalarField> {
    match ctx.read_raster(path)? {
        RasterData::Scalar(field) => Ok(field),
        other => Err(CliError::Decode {
            path: path.to_path_buf(),
            message: format!("expected a scalar raster, found {} channel(s)", other.channels()),
        }),
    }
}

/// Build the held-out mask for one cluster from its observation bundle:
/// pixels at or below the photometry brightness quantile, away from every
/// strong image and weak-catalog galaxy.
fn build_mask(
    ctx: &mut RunContext,
    bundle_path: &Path,
    grid: AngularGrid,
) -> CliResult<Vec<bool>> {
    let bundle: ObservationBundle = ctx.read_json(bundle_path)?;
    let strong: Vec<StrongLensSystem> = match &bundle.strong {
        Some(name) => ctx.read_json(&bundle.artifact(bundle_path, name))?,
        None => Vec::new(),
    };
    let weak: Option<WeakCatalog> = match &bundle.weak {
        Some(name) => Some(ctx.read_json(&bundle.artifact(bundle_path, name))?),
        None => None,
    };
    let (brightness, threshold) = match &bundle.photometry {
        Some(name) => {
            let stack = read_photometry(ctx, &bundle.artifact(bundle_path, name))?;
            if stack.grid() != grid {
                return Err(CliError::usage(format!(
                    "photometry in {} is on a different grid than the maps under evaluation",
                    bundle_path.display()
                )));
            }
            let totals: Vec<f64> =
                stack.values().iter().map(|px| px.iter().sum()).collect();
            let threshold = percentile(&totals, EVAL_PHOTOMETRY_QUANTILE).ok_or_else(|| {
                CliError::usage("photometry stack is empty; cannot set a brightness threshold")
            })?;
            let field = ScalarField::new(grid, Quantity::Generic, totals)
                .map_err(|e| CliError::usage(e.to_string()))?;
            (field, threshold)
        }
        // No photometry: keep every pixel that no catalog entry excludes.
        None => (ScalarField::zeros(grid, Quantity::Generic), 0.0),
    };
    heldout_mask(&brightness, threshold, &strong, weak.as_ref())
        .map_err(|e| CliError::usage(e.to_string()))
}

fn render_csv(report: &MetricReport) -> String {
    let mut csv = String::from("cluster,psnr_db,ssim,pcc,heldout_rmse\n");
    for (i, m) in report.per_cluster.iter().enumerate() {
        writeln!(csv, "{i},{},{},{},{}", m.psnr, m.ssim, m.pcc, m.heldout_rmse)
            .expect("string write");
    }
    let a = &report.aggregate;
    writeln!(csv, "median,{},{},{},{}", a.psnr, a.ssim, a.pcc, a.heldout_rmse)
        .expect("string write");
    csv
}
