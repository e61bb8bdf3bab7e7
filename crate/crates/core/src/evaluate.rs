//! Reconstruction quality metrics and baselines: image metrics (PSNR,
//! SSIM, PCC), RMSE at held-out points, the uncertainty-calibration
//! harness, the mass–light correlation, and a light-traces-mass
//! baseline built from dual-pseudo-isothermal components.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{AngularGrid, GridError, Quantity, ScalarField};
use crate::numeric::{compensated_sum, linear_fit};
use crate::observe::{StrongLensSystem, WeakCatalog};
use crate::sampler::ReconstructionResult;

/// Exclusion radius around lensing signals in the held-out mask, in pixels.
pub const HELDOUT_EXCLUSION_PX: f64 = 2.0;
/// Equal-count bins per cluster in the calibration curve.
pub const CALIBRATION_BINS: usize = 10;
/// SSIM window width in pixels.
pub const SSIM_WINDOW: usize = 7;
/// Standard deviation of the SSIM Gaussian window, in pixels.
pub const SSIM_SIGMA: f64 = 1.5;
// Standard SSIM regularizers (K₁ = 0.01, K₂ = 0.03) on the unit dynamic
// range; callers are expected to pass maps on a normalized [0, 1] scale.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("held-out mask selects no pixels")]
    EmptyMask,
    #[error("calibration curve is degenerate: {0}")]
    DegenerateCalibration(String),
}

/// Quality metrics for one reconstructed cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    /// Peak signal-to-noise ratio in dB (+∞ for an exact match).
    pub psnr: f64,
    /// Structural similarity in [−1, 1].
    pub ssim: f64,
    /// Pearson correlation over all pixels, in [−1, 1].
    pub pcc: f64,
    /// RMSE restricted to held-out pixels, in κ units.
    pub heldout_rmse: f64,
}

/// Per-cluster metrics with their median aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_cluster: Vec<ClusterMetrics>,
    /// Field-wise median across clusters.
    pub aggregate: ClusterMetrics,
}

impl MetricReport {
    /// Aggregates per-cluster metrics by the field-wise median.
    pub fn from_clusters(per_cluster: Vec<ClusterMetrics>) -> Result<Self, EvaluateError> {
        if per_cluster.is_empty() {
            return Err(EvaluateError::InvalidArgument(
                "metric report needs at least one cluster".into(),
            ));
        }
        let field = |f: fn(&ClusterMetrics) -> f64| -> f64 {
            median(&per_cluster.iter().map(f).collect::<Vec<_>>())
        };
        let aggregate = ClusterMetrics {
            psnr: field(|m| m.psnr),
            ssim: field(|m| m.ssim),
            pcc: field(|m| m.pcc),
            heldout_rmse: field(|m| m.heldout_rmse),
        };
        Ok(Self { per_cluster, aggregate })
    }
}

/// Median with the even/odd midpoint convention.
///
/// Unlike interpolation-based percentiles this never multiplies an
/// infinite order statistic by zero, so +∞ PSNR entries aggregate to a
/// finite median whenever the majority is finite.
fn median(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Peak signal-to-noise ratio `10·log10(data_range² / MSE)` in dB.
///
/// Identical inputs return `+∞`. The caller chooses the dynamic range
/// (the normalized κ range for reconstruction scoring).
pub fn psnr(
    estimate: &ScalarField,
    truth: &ScalarField,
    data_range: f64,
) -> Result<f64, EvaluateError> {
    estimate.check_same_grid(truth)?;
    if !data_range.is_finite() || data_range <= 0.0 {
        return Err(EvaluateError::InvalidArgument(format!(
            "data_range must be finite and positive, got {data_range}"
        )));
    }
    let n = estimate.values().len() as f64;
    let sq = estimate
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b) * (a - b));
    let mse = compensated_sum(sq) / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Mean structural similarity with a 7-pixel Gaussian window (σ = 1.5).
///
/// Uses the standard regularizers on a unit dynamic range, so inputs
/// are expected on a normalized [0, 1] scale. Symmetric in its
/// arguments; `ssim(x, x) = 1`.
pub fn ssim(estimate: &ScalarField, truth: &ScalarField) -> Result<f64, EvaluateError> {
    estimate.check_same_grid(truth)?;
    let n = estimate.grid().n_pix();
    let x = estimate.values();
    let y = truth.values();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.iter().map(|b| b * b).collect();

    let mu_x = gaussian_blur(x, n);
    let mu_y = gaussian_blur(y, n);
    let m_xx = gaussian_blur(&xx, n);
    let m_yy = gaussian_blur(&yy, n);
    let m_xy = gaussian_blur(&xy, n);

    let per_pixel = (0..x.len()).map(|i| {
        let var_x = m_xx[i] - mu_x[i] * mu_x[i];
        let var_y = m_yy[i] - mu_y[i] * mu_y[i];
        let cov = m_xy[i] - mu_x[i] * mu_y[i];
        let num = (2.0 * mu_x[i] * mu_y[i] + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + SSIM_C1) * (var_x + var_y + SSIM_C2);
        num / den
    });
    Ok(compensated_sum(per_pixel) / x.len() as f64)
}

/// Separable Gaussian filter with the SSIM window, mirrored at borders.
fn gaussian_blur(values: &[f64], n: usize) -> Vec<f64> {
    debug_assert!(n >= 2 && values.len() == n * n);
    let kernel = {
        let half = (SSIM_WINDOW / 2) as isize;
        let mut k = [0.0; SSIM_WINDOW];
        for (i, k_i) in k.iter_mut().enumerate() {
            let d = (i as isize - half) as f64;
            *k_i = (-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
        let sum: f64 = k.iter().sum();
        for k_i in &mut k {
            *k_i /= sum;
        }
        k
    };
    let half = (SSIM_WINDOW / 2) as isize;
    // Mirror an index about the pixel-centre line at each border (the
    // edge sample is not repeated).
    let mirror = |mut i: isize| -> usize {
        loop {
            if i < 0 {
                i = -i;
            } else if i >= n as isize {
                i = 2 * (n as isize - 1) - i;
            } else {
                return i as usize;
            }
        }
    };
    // Rows, then columns.
    let mut rows = vec![0.0; values.len()];
    for iy in 0..n {
        for ix in 0..n {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let jx = mirror(ix as isize + t as isize - half);
                acc += w * values[iy * n + jx];
            }
            rows[iy * n + ix] = acc;
        }
    }
    let mut out = vec![0.0; values.len()];
    for iy in 0..n {
        for ix in 0..n {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let jy = mirror(iy as isize + t as isize - half);
                acc += w * rows[jy * n + ix];
            }
            out[iy * n + ix] = acc;
        }
    }
    out
}

/// Pearson correlation coefficient over all pixels.
///
/// `pcc(x, a·x + b) = 1` for `a > 0`; constant fields have no defined
/// correlation and are rejected.
pub fn pcc(a: &ScalarField, b: &ScalarField) -> Result<f64, EvaluateError> {
    a.check_same_grid(b)?;
    let n = a.values().len() as f64;
    let mean_a = compensated_sum(a.values().iter().copied()) / n;
    let mean_b = compensated_sum(b.values().iter().copied()) / n;
    let pairs = || a.values().iter().zip(b.values());
    let saa = compensated_sum(pairs().map(|(x, _)| (x - mean_a) * (x - mean_a)));
    let sbb = compensated_sum(pairs().map(|(_, y)| (y - mean_b) * (y - mean_b)));
    let sab = compensated_sum(pairs().map(|(x, y)| (x - mean_a) * (y - mean_b)));
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(EvaluateError::InvalidArgument(
            "correlation of a constant field is undefined".into(),
        ));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Pearson correlation between a surface-density map and one
/// photometry band, measuring how far light traces mass.
pub fn mass_light_pcc(
    sigma_map: &ScalarField,
    photometry_band: &ScalarField,
) -> Result<f64, EvaluateError> {
    pcc(sigma_map, photometry_band)
}

/// Pixels carrying no observational signal: photometry at or below
/// `threshold`, no strong-lensing image and no weak-lensing galaxy
/// within [`HELDOUT_EXCLUSION_PX`] pixels.
pub fn heldout_mask(
    photometry: &ScalarField,
    threshold: f64,
    strong: &[StrongLensSystem],
    weak: Option<&WeakCatalog>,
) -> Result<Vec<bool>, EvaluateError> {
    if !threshold.is_finite() {
        return Err(EvaluateError::InvalidArgument(format!(
            "photometry threshold must be finite, got {threshold}"
        )));
    }
    let grid = photometry.grid();
    let mut mask: Vec<bool> = photometry.values().iter().map(|&v| v <= threshold).collect();
    let radius = HELDOUT_EXCLUSION_PX * grid.pixel_scale();
    let points = strong
        .iter()
        .flat_map(|s| s.images.iter().copied())
        .chain(weak.iter().flat_map(|c| c.entries.iter().map(|e| e.theta)));
    for theta in points {
        for iy in 0..grid.n_pix() {
            for ix in 0..grid.n_pix() {
                let c = grid.pixel_center(ix, iy);
                let d2 = (c[0] - theta[0]).powi(2) + (c[1] - theta[1]).powi(2);
                if d2 <= radius * radius {
                    mask[grid.index(ix, iy)] = false;
                }
            }
        }
    }
    Ok(mask)
}

/// RMSE restricted to the masked pixels; symmetric in its two fields.
pub fn heldout_rmse(
    estimate: &ScalarField,
    truth: &ScalarField,
    mask: &[bool],
) -> Result<f64, EvaluateError> {
    estimate.check_same_grid(truth)?;
    if mask.len() != estimate.values().len() {
        return Err(EvaluateError::InvalidArgument(format!(
            "mask has {} entries, grid needs {}",
            mask.len(),
            estimate.values().len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(EvaluateError::EmptyMask);
    }
    let sq = estimate
        .values()
        .iter()
        .zip(truth.values())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (a - b) * (a - b));
    Ok((compensated_sum(sq) / count as f64).sqrt())
}

/// One calibration curve: predicted posterior spread against realized
/// error, with its least-squares summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    /// `(predicted std, actual RMSE)` per bin; clusters concatenated.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Bins each cluster's pixels by predicted posterior standard
/// deviation ([`CALIBRATION_BINS`] equal-count bins), aggregates the
/// predicted std (RMS) and the posterior-mean error (RMSE) per bin,
/// and fits a least-squares line through all bins.
///
/// A well-calibrated sampler puts the curve on the diagonal. Results
/// whose samples carry no spread (or fewer than two samples) have no
/// defined curve and are flagged degenerate.
pub fn calibration_curve(
    results: &[ReconstructionResult],
    truths: &[ScalarField],
) -> Result<CalibrationCurve, EvaluateError> {
    if results.is_empty() || results.len() != truths.len() {
        return Err(EvaluateError::InvalidArgument(format!(
            "need matching non-empty results and truths, got {} and {}",
            results.len(),
            truths.len()
        )));
    }
    let mut points = Vec::new();
    for (result, truth) in results.iter().zip(truths) {
        if result.samples.len() < 2 {
            return Err(EvaluateError::InvalidArgument(
                "calibration needs at least two posterior samples per cluster".into(),
            ));
        }
        result.mean.check_same_grid(truth)?;
        result.std.check_same_grid(truth)?;
        let stds = result.std.values();
        let errs: Vec<f64> = result
            .mean
            .values()
            .iter()
            .zip(truth.values())
            .map(|(m, t)| m - t)
            .collect();
        let mut order: Vec<usize> = (0..stds.len()).collect();
        order.sort_by(|&i, &j| stds[i].total_cmp(&stds[j]));
        for b in 0..CALIBRATION_BINS {
            let lo = b * order.len() / CALIBRATION_BINS;
            let hi = (b + 1) * order.len() / CALIBRATION_BINS;
            if lo == hi {
                continue;
            }
            let bin = &order[lo..hi];
            let ms2 = bin.iter().map(|&i| stds[i] * stds[i]).sum::<f64>() / bin.len() as f64;
            let me2 = bin.iter().map(|&i| errs[i] * errs[i]).sum::<f64>() / bin.len() as f64;
            points.push((ms2.sqrt(), me2.sqrt()));
        }
    }
    let (slope, intercept, r_squared) = linear_fit(&points).ok_or_else(|| {
        EvaluateError::DegenerateCalibration(
            "predicted standard deviations carry no spread".into(),
        )
    })?;
    Ok(CalibrationCurve { points, slope, intercept, r_squared })
}

/// One parametric component of the light-traces-mass baseline: a
/// dual-pseudo-isothermal profile placed on a cluster-member galaxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtmSource {
    /// Angular position of the component centre, arcsec.
    pub center: [f64; 2],
    /// Velocity-dispersion proxy; its square carries the component's
    /// mass, so the fixed `σ_v = √flux` scaling makes mass follow
    /// light one-to-one.
    pub sigma_v: f64,
    /// Core radius, arcsec.
    pub core_radius: f64,
    /// Cut radius, arcsec; the profile steepens from 1/R to 1/R³
    /// beyond it.
    pub cut_radius: f64,
    /// Ellipticity `e = 1 − b/a` in [0, 1), applied as an
    /// area-preserving stretch with the major axis along x.
    pub ellipticity: f64,
}

impl LtmSource {
    pub fn new(
        center: [f64; 2],
        sigma_v: f64,
        core_radius: f64,
        cut_radius: f64,
        ellipticity: f64,
    ) -> Result<Self, EvaluateError> {
        if !center.iter().all(|c| c.is_finite()) {
            return Err(EvaluateError::InvalidArgument(format!(
                "source centre must be finite, got [{}, {}]",
                center[0], center[1]
            )));
        }
        if !sigma_v.is_finite() || sigma_v < 0.0 {
            return Err(EvaluateError::InvalidArgument(format!(
                "velocity-dispersion proxy must be finite and non-negative, got {sigma_v}"
            )));
        }
        if !(core_radius.is_finite() && cut_radius.is_finite() && core_radius > 0.0) {
            return Err(EvaluateError::InvalidArgument(format!(
                "radii must be finite with core_radius > 0, got core {core_radius} cut {cut_radius}"
            )));
        }
        if cut_radius <= core_radius {
            return Err(EvaluateError::InvalidArgument(format!(
                "need core_radius < cut_radius, got {core_radius} >= {cut_radius}"
            )));
        }
        if !ellipticity.is_finite() || !(0.0..1.0).contains(&ellipticity) {
            return Err(EvaluateError::InvalidArgument(format!(
                "ellipticity must lie in [0, 1), got {ellipticity}"
            )));
        }
        Ok(Self { center, sigma_v, core_radius, cut_radius, ellipticity })
    }

    /// Builds a component from an observed flux with the fixed
    /// one-to-one flux-to-mass scaling.
    pub fn from_flux(
        center: [f64; 2],
        flux: f64,
        core_radius: f64,
        cut_radius: f64,
        ellipticity: f64,
    ) -> Result<Self, EvaluateError> {
        if !flux.is_finite() || flux < 0.0 {
            return Err(EvaluateError::InvalidArgument(format!(
                "flux must be finite and non-negative, got {flux}"
            )));
        }
        Self::new(center, flux.sqrt(), core_radius, cut_radius, ellipticity)
    }

    /// Central convergence κ₀ = σ_v² / (2π r_core r_cut), fixed so the
    /// component's total convergence mass is exactly σ_v².
    pub fn central_convergence(&self) -> f64 {
        self.sigma_v * self.sigma_v
            / (2.0 * std::f64::consts::PI * self.core_radius * self.cut_radius)
    }

    /// The dual-pseudo-isothermal convergence at an angular position:
    /// `κ(R) = κ₀·(r_core·r_cut/(r_cut − r_core))·(1/√(r_core² + R²) −
    /// 1/√(r_cut² + R²))`, with the elliptical radius from an
    /// area-preserving coordinate stretch.
    pub fn convergence_at(&self, theta: [f64; 2]) -> f64 {
        let q = 1.0 - self.ellipticity;
        let dx = theta[0] - self.center[0];
        let dy = theta[1] - self.center[1];
        let r2 = q * dx * dx + dy * dy / q;
        let a = self.core_radius;
        let b = self.cut_radius;
        let scale = a * b / (b - a);
        self.central_convergence() * scale * (1.0 / (a * a + r2).sqrt() - 1.0 / (b * b + r2).sqrt())
    }
}

/// The light-traces-mass baseline: the summed convergence of one
/// dual-pseudo-isothermal component per catalogued galaxy.
///
/// The output is everywhere non-negative with finite total mass
/// (each component integrates to σ_v²).
pub fn ltm_baseline(
    sources: &[LtmSource],
    grid: AngularGrid,
) -> Result<ScalarField, EvaluateError> {
    let mut values = vec![0.0; grid.len()];
    for source in sources {
        for iy in 0..grid.n_pix() {
            for ix in 0..grid.n_pix() {
                values[grid.index(ix, iy)] += source.convergence_at(grid.pixel_center(ix, iy));
            }
        }
    }
    Ok(ScalarField::new(grid, Quantity::Convergence, values)?)
}
