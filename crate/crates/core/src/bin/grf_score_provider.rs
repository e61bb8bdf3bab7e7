//! Reference external score provider: serves the built-in Gaussian
//! random-field prior over the framed stdin/stdout protocol. Primarily a
//! conformance target — a learned-prior provider replaces this binary
//! without any client-side changes.

use std::process::ExitCode;

use lensforge_core::grid::AngularGrid;
use lensforge_core::sampler::{serve_score, GrfPrior};

struct Options {
    n_pix: usize,
    fov_arcsec: f64,
    power_slope: f64,
    amplitude: f64,
}

fn parse_args() -> Result<Options, String> {
    let mut opts =
        Options { n_pix: 128, fov_arcsec: 64.0, power_slope: -2.0, amplitude: 1.0 };
    let mut args = std::env::args().skip(1);
    while let Some(flag) = args.next() {
        let mut value = |name: &str| {
            args.next().ok_or_else(|| format!("{name} expects a value"))
        };
        match flag.as_str() {
            "--n-pix" => {
                opts.n_pix = value("--n-pix")?
                    .parse()
                    .map_err(|e| format!("--n-pix: {e}"))?;
            }
            "--fov" => {
                opts.fov_arcsec = value("--fov")?
                    .parse()
                    .map_err(|e| format!("--fov: {e}"))?;
            }
            "--slope" => {
                opts.power_slope = value("--slope")?
                    .parse()
                    .map_err(|e| format!("--slope: {e}"))?;
            }
            "--amplitude" => {
                opts.amplitude = value("--amplitude")?
                    .parse()
                    .map_err(|e| format!("--amplitude: {e}"))?;
            }
            other => return Err(format!("unknown flag {other:?}")),
        }
    }
    Ok(opts)
}

fn main() -> ExitCode {
    let opts = match parse_args() {
        Ok(opts) => opts,
        Err(message) => {
            eprintln!(
                "grf_score_provider: {message}\n\
                 usage: grf_score_provider [--n-pix N] [--fov ARCSEC] [--slope S] [--amplitude A]"
            );
            return ExitCode::from(2);
        }
    };
    let grid = match AngularGrid::new(opts.n_pix, opts.fov_arcsec) {
        Ok(grid) => grid,
        Err(e) => {
            eprintln!("grf_score_provider: invalid grid: {e}");
            return ExitCode::from(2);
        }
    };
    let prior = match GrfPrior::new(opts.power_slope, opts.amplitude) {
        Ok(prior) => prior,
        Err(e) => {
            eprintln!("grf_score_provider: invalid prior: {e}");
            return ExitCode::from(2);
        }
    };
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    match serve_score(stdin, stdout, &prior, grid) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("grf_score_provider: I/O error: {e}");
            ExitCode::from(3)
        }
    }
}
