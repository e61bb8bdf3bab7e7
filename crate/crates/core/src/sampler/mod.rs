//! Annealed posterior sampling for convergence maps.
//!
//! The reconstruction treats the κ map as the unknown of a Bayesian inverse
//! problem: a score-based prior (either the built-in Gaussian random field
//! or an external provider speaking the [`proto`] wire format) is combined
//! with the lensing likelihood through a decoupled annealing loop. An outer
//! schedule walks a variance-exploding noise level σ_t downward; at each
//! level an inner unadjusted Langevin chain, initialized at the prior's
//! denoising estimate, samples the clean field conditioned on the noisy
//! state and the data, and fresh Gaussian noise re-inflates the result to
//! the next level. Repeating the loop with independent keyed streams
//! yields posterior samples whose per-pixel mean and dispersion form the
//! reconstruction and its uncertainty map.
//!
//! Sampling happens in a normalized log-convergence space so that one prior
//! serves fields spanning several decades of κ; [`normalize`] and
//! [`denormalize`] convert between the two representations.

pub mod grf;
pub mod proto;

pub use grf::GrfPrior;
pub use proto::{serve_score, ExternalScorePrior};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest;
use crate::grid::{AngularGrid, GridError, PhotometryStack, Quantity, ScalarField};
use crate::likelihood::NegLogLikelihood;
use crate::rng::stream_rng;

/// Additive floor inside the log transform; κ = 0 maps to a finite value.
pub const NORM_EPSILON: f64 = 1e-6;
/// Lower edge of the log10 range mapped onto `[0, 1]`.
pub const NORM_LOG_LO: f64 = -6.0;
/// Upper edge of the log10 range mapped onto `[0, 1]`.
pub const NORM_LOG_HI: f64 = 1.0;
const NORM_LOG_RANGE: f64 = NORM_LOG_HI - NORM_LOG_LO;

/// Divergence guard: a denoised state whose magnitude exceeds ten times the
/// normalized range is reported as a diverged chain rather than silently
/// folded back by the clamps in [`denormalize`].
pub const DIVERGENCE_BOUND: f64 = 10.0;

/// Ceiling on the per-step damping ratio (step size × stiffest curvature).
/// The unadjusted chain is stable only below 2; half of one leaves headroom
/// for the secant probe underestimating the drift stiffness.
const MAX_DAMPING: f64 = 0.5;

/// Displacement used by the per-level secant probe of drift stiffness.
const CURVATURE_PROBE_STEP: f64 = 1e-3;

/// The level probe samples stiffness near the chain's starting point,
/// which can grossly understate it for data terms that steepen away from
/// the anchor (the normalized map is log-spaced, so physical-space
/// quadratics grow exponentially along the chain's direction of travel).
/// Each inner iteration therefore re-measures stiffness from the drift
/// change along the move just made; only when that trajectory secant
/// exceeds the assumed value by this factor does the step re-damp, so
/// targets whose curvature the probe already captured keep bit-identical
/// trajectories.
const STIFFNESS_TRUST: f64 = 4.0;

// Stream keys for the sampler's independent noise sources.
const STREAM_SAMPLER_INIT: u64 = 0x5349_4E49; // "SINI"
const STREAM_SAMPLER_INNER: u64 = 0x534C_414E; // "SLAN"
const STREAM_SAMPLER_RENOISE: u64 = 0x5352_4E5A; // "SRNZ"
const STREAM_SAMPLER_PROBE: u64 = 0x5350_5242; // "SPRB"

/// Errors from sampler configuration, execution, and score providers.
#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A chain left the trusted region or produced non-finite quantities.
    #[error(
        "chain {sample_index} diverged at outer step {outer_step}: state digest {state_digest}"
    )]
    Diverged {
        sample_index: usize,
        outer_step: usize,
        /// Inner Langevin iteration, when the blow-up happened inside step 1.
        inner_step: Option<usize>,
        /// FNV-1a digest of the offending state, for reproducing reports.
        state_digest: String,
    },
    #[error("score provider protocol: {0}")]
    Protocol(String),
    #[error("likelihood evaluation failed: {0}")]
    Nll(#[source] Box<dyn std::error::Error + Send + Sync>),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("score provider I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Result type of a likelihood closure: `(value, gradient)` in the
/// sampler's normalized space.
pub type NllOutput = Result<(f64, ScalarField), Box<dyn std::error::Error + Send + Sync>>;

/// Maps physical convergence to the normalized sampling variable.
pub fn normalize_value(kappa: f64) -> f64 {
    let shifted = (kappa + NORM_EPSILON).max(f64::MIN_POSITIVE);
    ((shifted.log10() - NORM_LOG_LO) / NORM_LOG_RANGE).clamp(0.0, 1.0)
}

/// Inverse of [`normalize_value`]; clamps to the representable range, so
/// outputs are always ≥ 0.
pub fn denormalize_value(x: f64) -> f64 {
    let xc = x.clamp(0.0, 1.0);
    (10.0_f64.powf(xc * NORM_LOG_RANGE + NORM_LOG_LO) - NORM_EPSILON).max(0.0)
}

/// Log-transforms a physical κ map onto the normalized `[0, 1]` range.
pub fn normalize(kappa: &ScalarField) -> ScalarField {
    let values = kappa.values().iter().map(|&v| normalize_value(v)).collect();
    ScalarField::new(kappa.grid(), Quantity::Generic, values)
        .expect("normalize preserves the grid length")
}

/// Maps a normalized field back to physical convergence.
pub fn denormalize(x: &ScalarField) -> ScalarField {
    let values = x.values().iter().map(|&v| denormalize_value(v)).collect();
    ScalarField::new(x.grid(), Quantity::Convergence, values)
        .expect("denormalize preserves the grid length")
}

/// Geometric noise schedule for the variance-exploding outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_max: 10.0, sigma_min: 1e-3, steps: 30 }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.sigma_max.is_finite() && self.sigma_min.is_finite()) || self.sigma_min <= 0.0 {
            return Err(SamplerError::InvalidArgument(
                "noise levels must be finite and positive".into(),
            ));
        }
        if self.sigma_max <= self.sigma_min {
            return Err(SamplerError::InvalidArgument(format!(
                "sigma_max ({}) must exceed sigma_min ({})",
                self.sigma_max, self.sigma_min
            )));
        }
        if self.steps < 2 {
            return Err(SamplerError::InvalidArgument(
                "a schedule needs at least two noise levels".into(),
            ));
        }
        Ok(())
    }

    /// The descending noise levels, geometrically spaced from `sigma_max`
    /// to exactly `sigma_min`.
    pub fn sigmas(&self) -> Vec<f64> {
        let ratio = self.sigma_min / self.sigma_max;
        let last = (self.steps - 1) as f64;
        (0..self.steps)
            .map(|i| {
                if i + 1 == self.steps {
                    self.sigma_min
                } else {
                    self.sigma_max * ratio.powf(i as f64 / last)
                }
            })
            .collect()
    }
}

/// Tunables of the annealed sampling loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    /// Langevin iterations per outer noise level.
    pub inner_steps: usize,
    /// Langevin step size at the terminal noise level (normalized units);
    /// at other levels the step scales with the tether variance and the
    /// probed likelihood curvature, with the damping ratio capped for
    /// stability.
    pub inner_lr: f64,
    /// Langevin temperature; 1 targets the posterior, smaller values quench
    /// toward the conditional mode.
    pub tau: f64,
    /// Number of independent posterior samples (chains).
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::default(),
            inner_steps: 100,
            inner_lr: 2.8e-6,
            tau: 2.6e-3,
            n_samples: 20,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        self.schedule.validate()?;
        if self.inner_steps == 0 {
            return Err(SamplerError::InvalidArgument("inner_steps must be at least 1".into()));
        }
        if !self.inner_lr.is_finite() || self.inner_lr <= 0.0 {
            return Err(SamplerError::InvalidArgument("inner_lr must be finite and > 0".into()));
        }
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(SamplerError::InvalidArgument("tau must be finite and >= 0".into()));
        }
        if self.n_samples == 0 {
            return Err(SamplerError::InvalidArgument("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// A prior usable by the annealing loop: the score of its σ-smoothed
/// marginal, optionally conditioned on photometry.
pub trait ScorePrior: Sync {
    /// ∇_x log p_σ(x | conditioning) evaluated at the normalized state `x`.
    fn score(
        &self,
        x: &ScalarField,
        sigma: f64,
        conditioning: Option<&PhotometryStack>,
    ) -> Result<ScalarField, SamplerError>;

    /// Short identifier recorded in run manifests.
    fn name(&self) -> String;
}

/// Reproducibility record attached to every sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub prior: String,
    pub config: SamplerConfig,
    pub n_pix: usize,
    pub fov_arcsec: f64,
    /// Content digest of the conditioning stack, when one was attached.
    pub conditioning_digest: Option<String>,
}

/// Posterior samples with their per-pixel summary statistics.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    /// Physical κ maps, one per chain.
    pub samples: Vec<ScalarField>,
    /// The same chains before [`denormalize`]; unlike the physical maps
    /// these are not floored at κ = 0, so prior-space diagnostics (spectra,
    /// normality) stay exact.
    pub normalized: Vec<ScalarField>,
    /// Per-pixel posterior mean (physical units).
    pub mean: ScalarField,
    /// Per-pixel uncorrected posterior standard deviation.
    pub std: ScalarField,
    pub manifest: SampleManifest,
    /// `(σ_t, rms of the injected noise)` pairs from every chain's step-2
    /// re-noising, for auditing that injection follows the schedule.
    pub noise_trace: Vec<(f64, f64)>,
}

/// Per-pixel sample mean and uncorrected standard deviation.
pub fn posterior_stats(
    samples: &[ScalarField],
) -> Result<(ScalarField, ScalarField), SamplerError> {
    let first = samples
        .first()
        .ok_or_else(|| SamplerError::InvalidArgument("no samples to summarize".into()))?;
    let len = first.values().len();
    let mut mean = vec![0.0; len];
    let mut m2 = vec![0.0; len];
    for (k, sample) in samples.iter().enumerate() {
        sample.check_same_grid(first)?;
        // Welford update, vectorized over pixels.
        let kf = (k + 1) as f64;
        for (j, &v) in sample.values().iter().enumerate() {
            let d = v - mean[j];
            mean[j] += d / kf;
            m2[j] += d * (v - mean[j]);
        }
    }
    let nf = samples.len() as f64;
    let std: Vec<f64> = m2.iter().map(|&s| (s / nf).max(0.0).sqrt()).collect();
    let mean = ScalarField::new(first.grid(), first.quantity(), mean)?;
    let std = ScalarField::new(first.grid(), Quantity::Generic, std)?;
    Ok((mean, std))
}

/// Adapts a physical-space likelihood to the sampler's normalized variable
/// via the chain rule of [`denormalize`].
pub struct NormalizedNll<'a> {
    inner: &'a NegLogLikelihood,
}

impl<'a> NormalizedNll<'a> {
    pub fn new(inner: &'a NegLogLikelihood) -> Self {
        Self { inner }
    }

    /// `(value, gradient)` with respect to the normalized field.
    pub fn eval(&self, x: &ScalarField) -> NllOutput {
        let kappa = denormalize(x);
        let (value, grad_kappa) = self.inner.eval(&kappa)?;
        let ln10 = std::f64::consts::LN_10;
        let values = x
            .values()
            .iter()
            .zip(grad_kappa.values().iter().zip(kappa.values()))
            .map(|(&xv, (&gk, &kv))| {
                // dκ/dx vanishes where the range clamp is active.
                if (0.0..=1.0).contains(&xv) {
                    gk * ln10 * NORM_LOG_RANGE * (kv + NORM_EPSILON)
                } else {
                    0.0
                }
            })
            .collect();
        let grad = ScalarField::new(x.grid(), Quantity::Generic, values)?;
        Ok((value, grad))
    }
}

/// Draws posterior samples by decoupled annealing.
///
/// For each noise level σ_t of the schedule (descending): the prior's
/// denoising estimate x̂₀ = x_t + σ_t²·score(x_t, σ_t) initializes an inner
/// unadjusted Langevin chain at temperature `tau` whose target is the clean
/// field conditioned on the noisy state and the data,
/// `log p(x) − |x − x_t|²/(2σ_t²) − nll(x)`; the chain's final state is
/// then re-noised to the next level. After the last level the chain state
/// is recorded as one posterior sample. Chains are independent and keyed by
/// `(seed, sample, outer step, inner step)`, so results do not depend on
/// thread count.
pub fn daps_sample<P, F>(
    prior: &P,
    nll: F,
    config: &SamplerConfig,
    grid: AngularGrid,
    conditioning: Option<&PhotometryStack>,
) -> Result<ReconstructionResult, SamplerError>
where
    P: ScorePrior + ?Sized,
    F: Fn(&ScalarField) -> NllOutput + Sync,
{
    config.validate()?;
    if let Some(stack) = conditioning {
        if stack.grid() != grid {
            return Err(SamplerError::InvalidArgument(
                "conditioning stack grid differs from the sampling grid".into(),
            ));
        }
    }
    let sigmas = config.schedule.sigmas();
    let chains = (0..config.n_samples)
        .into_par_iter()
        .map(|idx| run_chain(prior, &nll, config, grid, conditioning, &sigmas, idx))
        .collect::<Result<Vec<ChainRun>, SamplerError>>()?;

    let mut samples = Vec::with_capacity(chains.len());
    let mut normalized = Vec::with_capacity(chains.len());
    let mut noise_trace = Vec::new();
    for chain in chains {
        let x = ScalarField::new(grid, Quantity::Generic, chain.x0)?;
        samples.push(denormalize(&x));
        normalized.push(x);
        noise_trace.extend_from_slice(&chain.trace);
    }
    let (mean, std) = posterior_stats(&samples)?;
    let manifest = SampleManifest {
        prior: prior.name(),
        config: *config,
        n_pix: grid.n_pix(),
        fov_arcsec: grid.fov_arcsec(),
        conditioning_digest: conditioning
            .map(|stack| {
                let mut bytes = Vec::with_capacity(stack.values().len() * 24);
                for v in stack.values() {
                    for c in v {
                        bytes.extend_from_slice(&c.to_le_bytes());
                    }
                }
                digest::to_hex(digest::fnv1a64(&bytes))
            }),
    };
    Ok(ReconstructionResult { samples, normalized, mean, std, manifest, noise_trace })
}

struct ChainRun {
    /// Final denoised state in normalized space.
    x0: Vec<f64>,
    trace: Vec<(f64, f64)>,
}

fn run_chain<P, F>(
    prior: &P,
    nll: &F,
    config: &SamplerConfig,
    grid: AngularGrid,
    conditioning: Option<&PhotometryStack>,
    sigmas: &[f64],
    sample_index: usize,
) -> Result<ChainRun, SamplerError>
where
    P: ScorePrior + ?Sized,
    F: Fn(&ScalarField) -> NllOutput + Sync,
{
    let n = grid.len();
    let seed = config.seed;
    let idx = sample_index as u64;
    let mut trace = Vec::with_capacity(sigmas.len());

    // State at the top of the schedule: pure noise at sigma_max. Noisy
    // states legitimately exceed the normalized range, so the divergence
    // guard applies only to denoised quantities.
    let mut x: Vec<f64> = {
        let mut rng = stream_rng(seed, &[STREAM_SAMPLER_INIT, idx]);
        (0..n).map(|_| sigmas[0] * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    trace.push((sigmas[0], rms(&x)));

    for (t, &sigma) in sigmas.iter().enumerate() {
        let diverged = |inner: Option<usize>, state: &[f64]| SamplerError::Diverged {
            sample_index,
            outer_step: t,
            inner_step: inner,
            state_digest: digest::to_hex(digest::fnv1a64_f64(state)),
        };

        // Denoising estimate from the prior score (Tweedie's identity);
        // the inner chain starts at this conditional mean.
        let xt = ScalarField::new(grid, Quantity::Generic, x.clone())?;
        let score = prior.score(&xt, sigma, conditioning)?;
        score.check_same_grid(&xt)?;
        let mut state: Vec<f64> = x
            .iter()
            .zip(score.values())
            .map(|(&xv, &sv)| xv + sigma * sigma * sv)
            .collect();
        check_state(&state, || diverged(None, &state))?;

        // Drift of the clean field conditioned on the noisy level state and
        // the data: ∇ log p(x | x_t, y) splits into the prior score, the
        // tether back to x_t, and the likelihood pull. The prior is queried
        // at the terminal smoothing scale, which stands in for its clean
        // score while staying inside a provider's trained range.
        let sigma_clean = config.schedule.sigma_min;
        let eval_drift = |values: &[f64]| -> Result<(f64, Vec<f64>), SamplerError> {
            let field = ScalarField::new(grid, Quantity::Generic, values.to_vec())?;
            let prior_score = prior.score(&field, sigma_clean, conditioning)?;
            prior_score.check_same_grid(&field)?;
            let (value, grad) = nll(&field).map_err(SamplerError::Nll)?;
            grad.check_same_grid(&field)?;
            let drift = values
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    prior_score.values()[j] + (x[j] - v) / (sigma * sigma)
                        - grad.values()[j]
                })
                .collect();
            Ok((value, drift))
        };

        // Inner step size for this level: a secant probe bounds the drift
        // stiffness so the damping ratio stays below MAX_DAMPING even for
        // stiff data terms; the tether guarantees curvature ≥ 1/σ_t².
        let (mut value, mut drift) = eval_drift(&state)?;
        let mut lambda = probe_curvature(&eval_drift, &state, &drift, seed, idx, t)?
            .max(1.0 / (sigma * sigma));
        let damping =
            (config.inner_lr / config.schedule.sigma_min.powi(2)).min(MAX_DAMPING);
        let mut step = damping / lambda;
        let mut noise_scale = (2.0 * step * config.tau).sqrt();

        // Step 1: unadjusted Langevin toward the conditional. The drift for
        // the first iteration was just computed.
        let mut prev_state = vec![0.0; n];
        for i in 0..config.inner_steps {
            if !value.is_finite() || drift.iter().any(|v| !v.is_finite()) {
                return Err(diverged(Some(i), &state));
            }
            prev_state.copy_from_slice(&state);
            let mut rng = stream_rng(seed, &[STREAM_SAMPLER_INNER, idx, t as u64, i as u64]);
            for (j, s) in state.iter_mut().enumerate() {
                *s += step * drift[j] + noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
            check_state(&state, || diverged(Some(i), &state))?;
            if i + 1 < config.inner_steps {
                let prev_drift = std::mem::take(&mut drift);
                (value, drift) = eval_drift(&state)?;
                // Trajectory secant: a free directional stiffness sample
                // along the move just made. Re-damp only on a gross
                // underestimate (see STIFFNESS_TRUST).
                let dx = l2_diff(&state, &prev_state);
                if dx > 0.0 {
                    let observed = l2_diff(&drift, &prev_drift) / dx;
                    if observed.is_finite() && observed > STIFFNESS_TRUST * lambda {
                        lambda = observed;
                        step = damping / lambda;
                        noise_scale = (2.0 * step * config.tau).sqrt();
                    }
                }
            }
        }

        // Step 2: re-noise the denoised sample to the next level.
        if t + 1 < sigmas.len() {
            let sigma_next = sigmas[t + 1];
            let mut rng = stream_rng(seed, &[STREAM_SAMPLER_RENOISE, idx, t as u64]);
            let mut injected_sq = 0.0;
            for (xv, sv) in x.iter_mut().zip(&state) {
                let noise = sigma_next * rng.sample::<f64, _>(StandardNormal);
                injected_sq += noise * noise;
                *xv = sv + noise;
            }
            trace.push((sigma_next, (injected_sq / n as f64).sqrt()));
        } else {
            x = state;
        }
    }

    Ok(ChainRun { x0: x, trace })
}

/// Secant estimate of the drift stiffness near the level anchor, used to
/// bound the inner step size.
fn probe_curvature<E>(
    eval_drift: &E,
    anchor: &[f64],
    drift_at_anchor: &[f64],
    seed: u64,
    sample: u64,
    outer_step: usize,
) -> Result<f64, SamplerError>
where
    E: Fn(&[f64]) -> Result<(f64, Vec<f64>), SamplerError>,
{
    let mut rng = stream_rng(seed, &[STREAM_SAMPLER_PROBE, sample, outer_step as u64]);
    let mut probe: Vec<f64> =
        (0..anchor.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = rms(&probe) * (probe.len() as f64).sqrt();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let scale = CURVATURE_PROBE_STEP / norm;
    for (d, &a) in probe.iter_mut().zip(anchor) {
        *d = a + *d * scale;
    }
    let diverged = || SamplerError::Diverged {
        sample_index: sample as usize,
        outer_step,
        inner_step: None,
        state_digest: digest::to_hex(digest::fnv1a64_f64(&probe)),
    };
    let (value, drift) = eval_drift(&probe)?;
    if !value.is_finite() {
        return Err(diverged());
    }
    let diff_sq: f64 = drift
        .iter()
        .zip(drift_at_anchor)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    let lambda = diff_sq.sqrt() / CURVATURE_PROBE_STEP;
    if lambda.is_finite() {
        Ok(lambda.max(0.0))
    } else {
        Err(diverged())
    }
}

fn check_state(state: &[f64], err: impl Fn() -> SamplerError) -> Result<(), SamplerError> {
    for &v in state {
        if !v.is_finite() || v.abs() > DIVERGENCE_BOUND {
            return Err(err());
        }
    }
    Ok(())
}

fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
