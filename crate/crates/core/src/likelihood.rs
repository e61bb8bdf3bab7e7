//! Data-fidelity terms and their gradients with respect to the
//! convergence map: the geometric and photometric strong-lensing
//! losses, the RBF-interpolated weak-lensing loss, and their weighted
//! sum.
//!
//! Every gradient is an analytic adjoint. The strong-lensing terms
//! touch the convergence only through the deflection field sampled at
//! the image positions, so their cotangents are bilinear splats pushed
//! through the adjoint of the linear κ → α operator; the weak term is
//! a dense residual pushed through the adjoint of the κ → γ operator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cosmo::{CosmoError, LensScene};
use crate::grid::{AngularGrid, GridError, PhotometryStack, Quantity, ScalarField, VectorField};
use crate::lens::{LensError, LensOperator};
use crate::mock::{sersic_bn, MockError, SersicSource};
use crate::numeric::{cholesky_factor, cholesky_solve_in_place, gamma, percentile};
use crate::observe::{StrongLensSystem, WeakCatalog};

/// Default weight of the geometric strong-lensing loss.
pub const DEFAULT_LAMBDA_GEO: f64 = 0.6e-2;
/// Default weight of the photometric strong-lensing loss.
pub const DEFAULT_LAMBDA_IMG: f64 = 0.6e-3;
/// Default weight of the weak-lensing loss.
pub const DEFAULT_LAMBDA_WEAK: f64 = 0.05;

#[derive(Debug, Error)]
pub enum LikelihoodError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Cosmo(#[from] CosmoError),
    #[error(transparent)]
    Lens(#[from] LensError),
    #[error(transparent)]
    Mock(#[from] MockError),
}

/// Weights of the loss terms; a zero weight disables its term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_geo: f64,
    pub lambda_img: f64,
    pub lambda_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_geo: DEFAULT_LAMBDA_GEO,
            lambda_img: DEFAULT_LAMBDA_IMG,
            lambda_w: DEFAULT_LAMBDA_WEAK,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LikelihoodError> {
        for (name, v) in [
            ("lambda_geo", self.lambda_geo),
            ("lambda_img", self.lambda_img),
            ("lambda_w", self.lambda_w),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LikelihoodError::InvalidArgument(format!(
                    "{name} = {v} (need finite, >= 0)"
                )));
            }
        }
        Ok(())
    }
}

/// Gaussian-kernel RBF interpolation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfConfig {
    /// Kernel length-scale (arcsec).
    pub length_scale: f64,
    /// Ridge added to the kernel diagonal.
    pub ridge: f64,
}

impl RbfConfig {
    pub fn validate(&self) -> Result<(), LikelihoodError> {
        if !(self.length_scale.is_finite() && self.length_scale > 0.0) {
            return Err(LikelihoodError::InvalidArgument(format!(
                "rbf length_scale = {} (need > 0)",
                self.length_scale
            )));
        }
        if !(self.ridge.is_finite() && self.ridge > 0.0) {
            return Err(LikelihoodError::InvalidArgument(format!(
                "rbf ridge = {} (need > 0)",
                self.ridge
            )));
        }
        Ok(())
    }

    /// Data-driven defaults: length-scale = 2× the median nearest-
    /// neighbour spacing of the catalog, ridge = 1e−6 + σ_w²/count.
    pub fn defaults_for(catalog: &WeakCatalog) -> Result<Self, LikelihoodError> {
        let n = catalog.entries.len();
        if n < 2 {
            return Err(LikelihoodError::InvalidArgument(format!(
                "rbf defaults need >= 2 catalog entries, got {n}"
            )));
        }
        let mut nn = Vec::with_capacity(n);
        for (i, a) in catalog.entries.iter().enumerate() {
            let mut best = f64::INFINITY;
            for (j, b) in catalog.entries.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d2 = (a.theta[0] - b.theta[0]).powi(2) + (a.theta[1] - b.theta[1]).powi(2);
                best = best.min(d2);
            }
            nn.push(best.sqrt());
        }
        let median = percentile(&nn, 0.5).expect("non-empty spacing list");
        if !(median > 0.0) {
            return Err(LikelihoodError::InvalidArgument(
                "catalog has coincident entries; cannot derive a length scale".into(),
            ));
        }
        Ok(Self {
            length_scale: 2.0 * median,
            ridge: 1e-6 + catalog.sigma_w2 / n as f64,
        })
    }
}

// ---------------------------------------------------------------------------
// Source-position estimates
// ---------------------------------------------------------------------------

/// Returns a position's bilinear-interpolation point, erroring when it
/// lies outside the field; the outermost half-pixel strip is clamped
/// onto the hull of pixel centres.
fn interior_point(grid: AngularGrid, theta: [f64; 2]) -> Result<[f64; 2], LikelihoodError> {
    if grid.pixel_of(theta).is_none() {
        return Err(LikelihoodError::InvalidArgument(format!(
            "position [{}, {}] outside the {}\" field",
            theta[0],
            theta[1],
            grid.fov_arcsec()
        )));
    }
    Ok(grid.clamp_to_domain(theta))
}

fn beta_hat_with(
    alpha: &VectorField,
    scene: &LensScene,
    system: &StrongLensSystem,
) -> Result<(Vec<[f64; 2]>, [f64; 2]), LikelihoodError> {
    if system.images.is_empty() {
        return Err(LikelihoodError::InvalidArgument(format!(
            "system {} has no images",
            system.source_id
        )));
    }
    let rho = scene.kappa_rescale(system.z_s)?;
    let grid = alpha.grid();
    let mut betas = Vec::with_capacity(system.images.len());
    let mut mean = [0.0, 0.0];
    for &theta in &system.images {
        let p = interior_point(grid, theta)?;
        let a = alpha.bilinear(p)?;
        let b = [theta[0] - rho * a[0], theta[1] - rho * a[1]];
        mean[0] += b[0];
        mean[1] += b[1];
        betas.push(b);
    }
    let m = betas.len() as f64;
    Ok((betas, [mean[0] / m, mean[1] / m]))
}

/// Per-image source positions β̂_{i,j} = θ_{i,j} − ρ(z_S)·α̂(θ_{i,j})
/// and their mean β̂_i, with α̂ bilinearly interpolated.
pub fn beta_hat(
    kappa: &ScalarField,
    scene: &LensScene,
    system: &StrongLensSystem,
) -> Result<(Vec<[f64; 2]>, [f64; 2]), LikelihoodError> {
    let op = LensOperator::new(kappa.grid());
    let alpha = op.deflection_from_kappa(kappa)?;
    beta_hat_with(&alpha, scene, system)
}

// ---------------------------------------------------------------------------
// Strong-lensing losses
// ---------------------------------------------------------------------------

/// Accumulates the geometric loss and `weight` × its cotangent on the
/// deflection field.
fn geo_terms(
    alpha: &VectorField,
    scene: &LensScene,
    systems: &[StrongLensSystem],
    cot: &mut VectorField,
    weight: f64,
) -> Result<f64, LikelihoodError> {
    let n = systems.len() as f64;
    let mut value = 0.0;
    for sys in systems {
        let rho = scene.kappa_rescale(sys.z_s)?;
        let (betas, mean) = beta_hat_with(alpha, scene, sys)?;
        let m = betas.len() as f64;
        for (b, &theta) in betas.iter().zip(&sys.images) {
            let d = [b[0] - mean[0], b[1] - mean[1]];
            value += (d[0] * d[0] + d[1] * d[1]) / (n * m);
            // d/dβ̂_{i,j} of the per-system spread is 2(β̂_{i,j} − β̂_i)
            // (the mean terms cancel); dβ̂/dα̂ = −ρ.
            let s = -2.0 * rho * weight / (n * m);
            cot.splat_bilinear(interior_point(alpha.grid(), theta)?, [s * d[0], s * d[1]])?;
        }
    }
    Ok(value)
}

/// Geometric strong-lensing loss: the mean squared spread of the
/// per-image source positions about their system means, with its
/// gradient with respect to the convergence.
pub fn loss_strong_geo(
    kappa: &ScalarField,
    scene: &LensScene,
    systems: &[StrongLensSystem],
) -> Result<(f64, ScalarField), LikelihoodError> {
    let grid = kappa.grid();
    if systems.is_empty() {
        return Ok((0.0, ScalarField::zeros(grid, Quantity::Generic)));
    }
    let op = LensOperator::new(grid);
    let alpha = op.deflection_from_kappa(kappa)?;
    let mut cot = VectorField::zeros(grid);
    let value = geo_terms(&alpha, scene, systems, &mut cot, 1.0)?;
    Ok((value, op.deflection_adjoint(&cot)?))
}

/// Sérsic surface brightness of the profile recentred at the origin,
/// with its gradient in the offset — the analytic counterpart of
/// [`SersicSource::intensity_at`].
fn sersic_origin_intensity_grad(src: &SersicSource, delta: [f64; 2]) -> (f64, [f64; 2]) {
    let ns = src.index;
    let b = sersic_bn(ns);
    let re = src.effective_radius;
    let ie = src.total_flux * b.powf(2.0 * ns)
        / (2.0 * std::f64::consts::PI * ns * b.exp() * gamma(2.0 * ns) * re * re);
    let e = (src.ellipticity[0].powi(2) + src.ellipticity[1].powi(2)).sqrt();
    let q = (1.0 - e) / (1.0 + e);
    let phi = 0.5 * src.ellipticity[1].atan2(src.ellipticity[0]);
    let (s, c) = phi.sin_cos();
    let xp = c * delta[0] + s * delta[1];
    let yp = -s * delta[0] + c * delta[1];
    let u = (q * xp * xp + yp * yp / q).sqrt();
    let i = ie * (-b * ((u / re).powf(1.0 / ns) - 1.0)).exp();
    if u < 1e-12 * re {
        // The profile peak: a cusp for index > 1, measure-zero either way.
        return (i, [0.0, 0.0]);
    }
    let di_du = i * (-b / ns) * (u / re).powf(1.0 / ns) / u;
    let du_dxp = q * xp / u;
    let du_dyp = yp / (q * u);
    (i, [di_du * (du_dxp * c - du_dyp * s), di_du * (du_dxp * s + du_dyp * c)])
}

/// Accumulates the photometric loss and `weight` × its cotangent on the
/// deflection field.
fn img_terms(
    alpha: &VectorField,
    scene: &LensScene,
    systems: &[StrongLensSystem],
    photometry: &PhotometryStack,
    cot: &mut VectorField,
    weight: f64,
) -> Result<f64, LikelihoodError> {
    if photometry.grid() != alpha.grid() {
        return Err(LikelihoodError::InvalidArgument(
            "photometry grid differs from the convergence grid".into(),
        ));
    }
    let n = systems.len() as f64;
    let grid = alpha.grid();
    let mut value = 0.0;
    for sys in systems {
        let rho = scene.kappa_rescale(sys.z_s)?;
        let (betas, mean) = beta_hat_with(alpha, scene, sys)?;
        let m = betas.len() as f64;
        // h_j = ∂(loss)/∂δ_j at δ_j = β̂_{i,j} − β̂_i.
        let mut hs = Vec::with_capacity(betas.len());
        for (b, &theta) in betas.iter().zip(&sys.images) {
            let delta = [b[0] - mean[0], b[1] - mean[1]];
            let (phat, dphat) = sersic_origin_intensity_grad(&sys.sersic, delta);
            let p = photometry.bilinear_band(sys.sersic.band, interior_point(grid, theta)?)?;
            let r = p - phat;
            value += r * r / (n * m);
            let s = -2.0 * r / (n * m);
            hs.push([s * dphat[0], s * dphat[1]]);
        }
        let hsum = hs.iter().fold([0.0, 0.0], |a, h| [a[0] + h[0], a[1] + h[1]]);
        for (h, &theta) in hs.iter().zip(&sys.images) {
            // δ_k depends on every β̂ through the mean: ∂δ_j/∂β̂_k =
            // δ_{jk} − 1/m, then dβ̂/dα̂ = −ρ.
            let g = [h[0] - hsum[0] / m, h[1] - hsum[1] / m];
            cot.splat_bilinear(
                interior_point(grid, theta)?,
                [-rho * weight * g[0], -rho * weight * g[1]],
            )?;
        }
    }
    Ok(value)
}

/// Photometric strong-lensing loss: squared mismatch between the
/// observed photometry at each image position and the system's Sérsic
/// profile recentred at the estimated source position (surface
/// brightness is preserved by the lens mapping), with its gradient with
/// respect to the convergence. Sérsic shape parameters are data, not
/// optimized.
pub fn loss_strong_img(
    kappa: &ScalarField,
    scene: &LensScene,
    systems: &[StrongLensSystem],
    photometry: &PhotometryStack,
) -> Result<(f64, ScalarField), LikelihoodError> {
    let grid = kappa.grid();
    if systems.is_empty() {
        return Ok((0.0, ScalarField::zeros(grid, Quantity::Generic)));
    }
    let op = LensOperator::new(grid);
    let alpha = op.deflection_from_kappa(kappa)?;
    let mut cot = VectorField::zeros(grid);
    let value = img_terms(&alpha, scene, systems, photometry, &mut cot, 1.0)?;
    Ok((value, op.deflection_adjoint(&cot)?))
}

// ---------------------------------------------------------------------------
// Weak-lensing loss
// ---------------------------------------------------------------------------

/// Dense shear map from a weak-lensing catalog: every observation is
/// rescaled to the reference source plane (divided by ρ(z_S)), then a
/// Gaussian-kernel RBF system with ridge regularization is solved per
/// component and evaluated at all pixel centres.
pub fn rbf_interpolate(
    catalog: &WeakCatalog,
    cfg: &RbfConfig,
    grid: AngularGrid,
    scene: &LensScene,
) -> Result<VectorField, LikelihoodError> {
    cfg.validate()?;
    let n = catalog.entries.len();
    if n == 0 {
        return Err(LikelihoodError::InvalidArgument(
            "cannot interpolate an empty catalog".into(),
        ));
    }
    let inv_2l2 = 1.0 / (2.0 * cfg.length_scale * cfg.length_scale);

    // Observations rescaled to the reference plane.
    let mut w1 = Vec::with_capacity(n);
    let mut w2 = Vec::with_capacity(n);
    for e in &catalog.entries {
        let rho = scene.kappa_rescale(e.z_s)?;
        w1.push(e.gamma[0] / rho);
        w2.push(e.gamma[1] / rho);
    }

    // Kernel system (K + ridge·I) w = y, solved per shear component.
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        let a = catalog.entries[i].theta;
        for j in 0..=i {
            let b = catalog.entries[j].theta;
            let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
            let v = (-d2 * inv_2l2).exp();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] += cfg.ridge;
    }
    if !cholesky_factor(&mut k, n) {
        return Err(LikelihoodError::Numeric(format!(
            "RBF kernel system of size {n} is not positive definite (ridge {})",
            cfg.ridge
        )));
    }
    cholesky_solve_in_place(&k, n, &mut w1);
    cholesky_solve_in_place(&k, n, &mut w2);

    let mut phi = VectorField::zeros(grid);
    let npix = grid.n_pix();
    for iy in 0..npix {
        for ix in 0..npix {
            let p = grid.pixel_center(ix, iy);
            let mut g = [0.0, 0.0];
            for (e, (c1, c2)) in catalog.entries.iter().zip(w1.iter().zip(&w2)) {
                let d2 = (p[0] - e.theta[0]).powi(2) + (p[1] - e.theta[1]).powi(2);
                let v = (-d2 * inv_2l2).exp();
                g[0] += c1 * v;
                g[1] += c2 * v;
            }
            phi.set(ix, iy, g);
        }
    }
    Ok(phi)
}

/// Weak-lensing residual against an interpolated shear map: value and
/// the cotangent (2·weight/σ_w²)·(γ̂ − Φ) on the shear field.
fn weak_terms(gamma_hat: &VectorField, phi: &VectorField, sigma_w2: f64, weight: f64) -> (f64, VectorField) {
    let mut y = VectorField::zeros(gamma_hat.grid());
    let mut value = 0.0;
    let s = 2.0 * weight / sigma_w2;
    for (out, (g, p)) in y
        .values_mut()
        .iter_mut()
        .zip(gamma_hat.values().iter().zip(phi.values()))
    {
        let r = [g[0] - p[0], g[1] - p[1]];
        value += r[0] * r[0] + r[1] * r[1];
        *out = [s * r[0], s * r[1]];
    }
    (value / sigma_w2, y)
}

/// Weak-lensing loss: (1/σ_w²) × the squared pixel-wise mismatch between
/// the model shear at the reference plane and the RBF-interpolated
/// observations, with its gradient via the exact shear adjoint.
pub fn loss_weak(
    kappa: &ScalarField,
    scene: &LensScene,
    catalog: &WeakCatalog,
    cfg: &RbfConfig,
) -> Result<(f64, ScalarField), LikelihoodError> {
    let grid = kappa.grid();
    if catalog.entries.is_empty() {
        return Ok((0.0, ScalarField::zeros(grid, Quantity::Generic)));
    }
    if !(catalog.sigma_w2.is_finite() && catalog.sigma_w2 > 0.0) {
        return Err(LikelihoodError::InvalidArgument(format!(
            "sigma_w2 = {} (the weak loss needs > 0)",
            catalog.sigma_w2
        )));
    }
    let phi = rbf_interpolate(catalog, cfg, grid, scene)?;
    let op = LensOperator::new(grid);
    let gamma_hat = op.shear_from_kappa(kappa)?;
    let (value, y) = weak_terms(&gamma_hat, &phi, catalog.sigma_w2, 1.0);
    Ok((value, op.shear_adjoint(&y)?))
}

// ---------------------------------------------------------------------------
// Combined negative log-likelihood
// ---------------------------------------------------------------------------

/// Observations entering the likelihood; absent pieces disable their
/// terms.
#[derive(Debug, Clone, Default)]
pub struct ObservedData {
    pub strong: Vec<StrongLensSystem>,
    pub photometry: Option<PhotometryStack>,
    pub weak: Option<WeakCatalog>,
    /// RBF settings; data-driven defaults when absent.
    pub rbf: Option<RbfConfig>,
}

/// Cached evaluator of the weighted loss sum: the lensing operator and
/// the RBF solve are prepared once, evaluations are pure.
pub struct NegLogLikelihood {
    scene: LensScene,
    weights: LossWeights,
    grid: AngularGrid,
    op: LensOperator,
    strong: Vec<StrongLensSystem>,
    photometry: Option<PhotometryStack>,
    weak: Option<(f64, VectorField)>,
}

impl NegLogLikelihood {
    pub fn new(
        grid: AngularGrid,
        scene: &LensScene,
        data: ObservedData,
        weights: LossWeights,
    ) -> Result<Self, LikelihoodError> {
        weights.validate()?;
        let weak = match &data.weak {
            Some(catalog) if weights.lambda_w > 0.0 && !catalog.entries.is_empty() => {
                if !(catalog.sigma_w2.is_finite() && catalog.sigma_w2 > 0.0) {
                    return Err(LikelihoodError::InvalidArgument(format!(
                        "sigma_w2 = {} (the weak loss needs > 0)",
                        catalog.sigma_w2
                    )));
                }
                let cfg = match data.rbf {
                    Some(cfg) => cfg,
                    None => RbfConfig::defaults_for(catalog)?,
                };
                Some((catalog.sigma_w2, rbf_interpolate(catalog, &cfg, grid, scene)?))
            }
            _ => None,
        };
        Ok(Self {
            scene: *scene,
            weights,
            grid,
            op: LensOperator::new(grid),
            strong: data.strong,
            photometry: data.photometry,
            weak,
        })
    }

    pub fn grid(&self) -> AngularGrid {
        self.grid
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    /// Weighted loss sum and its gradient with respect to the
    /// convergence; terms with zero weight or absent data are omitted.
    pub fn eval(&self, kappa: &ScalarField) -> Result<(f64, ScalarField), LikelihoodError> {
        if kappa.grid() != self.grid {
            return Err(LikelihoodError::InvalidArgument(
                "convergence grid differs from the likelihood grid".into(),
            ));
        }
        let geo_on = self.weights.lambda_geo > 0.0 && !self.strong.is_empty();
        let img_on =
            self.weights.lambda_img > 0.0 && !self.strong.is_empty() && self.photometry.is_some();

        let mut value = 0.0;
        let mut grad = ScalarField::zeros(self.grid, Quantity::Generic);

        if geo_on || img_on {
            let alpha = self.op.deflection_from_kappa(kappa)?;
            let mut cot = VectorField::zeros(self.grid);
            if geo_on {
                value += self.weights.lambda_geo
                    * geo_terms(&alpha, &self.scene, &self.strong, &mut cot, self.weights.lambda_geo)?;
            }
            if img_on {
                let stack = self.photometry.as_ref().expect("img_on implies photometry");
                value += self.weights.lambda_img
                    * img_terms(
                        &alpha,
                        &self.scene,
                        &self.strong,
                        stack,
                        &mut cot,
                        self.weights.lambda_img,
                    )?;
            }
            let g = self.op.deflection_adjoint(&cot)?;
            for (o, v) in grad.values_mut().iter_mut().zip(g.values()) {
                *o += v;
            }
        }

        if let Some((sigma_w2, phi)) = &self.weak {
            let gamma_hat = self.op.shear_from_kappa(kappa)?;
            let (v, y) = weak_terms(&gamma_hat, phi, *sigma_w2, self.weights.lambda_w);
            value += self.weights.lambda_w * v;
            let g = self.op.shear_adjoint(&y)?;
            for (o, v) in grad.values_mut().iter_mut().zip(g.values()) {
                *o += v;
            }
        }

        Ok((value, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Band, BANDS};
    use crate::observe::WeakEntry;
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn scene() -> LensScene {
        LensScene::default()
    }

    fn test_grid() -> AngularGrid {
        AngularGrid::new(32, 64.0).unwrap()
    }

    /// A smooth convergence map: a few Gaussian blobs in the interior.
    fn blob_kappa(grid: AngularGrid, seed: u64) -> ScalarField {
        let mut rng = stream_rng(seed, &[7001]);
        let half = grid.fov_arcsec() / 2.0;
        let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(-0.3 * half..0.3 * half),
                    rng.gen_range(-0.3 * half..0.3 * half),
                    rng.gen_range(0.15 * half..0.3 * half),
                    rng.gen_range(0.2..0.6),
                )
            })
            .collect();
        let mut field = ScalarField::zeros(grid, Quantity::Convergence);
        for iy in 0..grid.n_pix() {
            for ix in 0..grid.n_pix() {
                let c = grid.pixel_center(ix, iy);
                let v = blobs
                    .iter()
                    .map(|&(x, y, s, a)| {
                        a * (-((c[0] - x).powi(2) + (c[1] - y).powi(2)) / (2.0 * s * s)).exp()
                    })
                    .sum();
                field.set(ix, iy, v);
            }
        }
        field
    }

    fn test_sersic(band: Band) -> SersicSource {
        SersicSource {
            center: [0.0, 0.0],
            effective_radius: 2.5,
            index: 1.5,
            ellipticity: [0.12, -0.07],
            total_flux: 40.0,
            band,
        }
    }

    fn test_system(source_id: u32, z_s: f64, images: Vec<[f64; 2]>, band: Band) -> StrongLensSystem {
        StrongLensSystem {
            source_id,
            z_s,
            images,
            sersic: test_sersic(band),
            true_beta: [0.0, 0.0],
            appearances: vec![],
        }
    }

    fn funnel_systems() -> Vec<StrongLensSystem> {
        vec![
            test_system(0, 1.4, vec![[8.0, 3.0], [-6.5, -2.0], [1.5, -9.0]], Band::F125),
            test_system(1, 2.0, vec![[-11.0, 7.5], [10.0, -5.0]], Band::F606),
        ]
    }

    /// Central finite differences of `f` against `grad` at chosen pixels.
    fn assert_grad_matches_fd(
        f: &dyn Fn(&ScalarField) -> f64,
        kappa: &ScalarField,
        grad: &ScalarField,
        seed: u64,
        tol: f64,
    ) {
        let grid = kappa.grid();
        let mut rng = stream_rng(seed, &[7002]);
        let h = 1e-4;
        for _ in 0..10 {
            let ix = rng.gen_range(0..grid.n_pix());
            let iy = rng.gen_range(0..grid.n_pix());
            let mut up = kappa.clone();
            up.set(ix, iy, up.at(ix, iy) + h);
            let mut dn = kappa.clone();
            dn.set(ix, iy, dn.at(ix, iy) - h);
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let an = grad.at(ix, iy);
            let denom = an.abs().max(fd.abs());
            assert!(
                (fd - an).abs() <= tol * denom,
                "pixel ({ix},{iy}): fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn weights_and_rbf_config_validate() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_geo, 0.6e-2);
        assert_eq!(w.lambda_img, 0.6e-3);
        assert_eq!(w.lambda_w, 0.05);
        w.validate().unwrap();
        assert!(LossWeights { lambda_geo: -1.0, ..w }.validate().is_err());
        assert!(LossWeights { lambda_w: f64::NAN, ..w }.validate().is_err());

        assert!(RbfConfig { length_scale: 0.0, ridge: 1e-6 }.validate().is_err());
        assert!(RbfConfig { length_scale: 5.0, ridge: 0.0 }.validate().is_err());

        // Four entries on a square of side d: every nearest-neighbour
        // spacing is d, so the default length-scale is 2d.
        let d = 7.0;
        let entries = [[0.0, 0.0], [d, 0.0], [0.0, d], [d, d]]
            .iter()
            .map(|&theta| WeakEntry { theta, gamma: [0.01, 0.0], z_s: 2.0 })
            .collect();
        let cat = WeakCatalog { sigma_w2: 0.03, entries };
        let cfg = RbfConfig::defaults_for(&cat).unwrap();
        assert_relative_eq!(cfg.length_scale, 2.0 * d, max_relative = 1e-12);
        assert_relative_eq!(cfg.ridge, 1e-6 + 0.03 / 4.0, max_relative = 1e-12);
    }

    #[test]
    fn beta_hat_identity_lens_and_errors() {
        let grid = test_grid();
        let sc = scene();
        let kappa = ScalarField::zeros(grid, Quantity::Convergence);
        let sys = test_system(0, 2.0, vec![[4.0, -2.0], [-6.0, 8.0]], Band::F125);
        let (betas, mean) = beta_hat(&kappa, &sc, &sys).unwrap();
        assert_eq!(betas, sys.images);
        assert_eq!(mean, [-1.0, 3.0]);

        let single = test_system(1, 2.0, vec![[5.0, 5.0]], Band::F125);
        let (betas, mean) = beta_hat(&kappa, &sc, &single).unwrap();
        assert_eq!(mean, betas[0]);

        let outside = test_system(2, 2.0, vec![[55.0, 0.0], [0.0, 0.0]], Band::F125);
        assert!(matches!(
            beta_hat(&kappa, &sc, &outside),
            Err(LikelihoodError::InvalidArgument(_))
        ));
        let empty = test_system(3, 2.0, vec![], Band::F125);
        assert!(beta_hat(&kappa, &sc, &empty).is_err());
    }

    #[test]
    fn geo_two_image_closed_form_and_empty_case() {
        let grid = test_grid();
        let sc = scene();
        let kappa = ScalarField::zeros(grid, Quantity::Convergence);
        let (t1, t2) = ([6.0, -3.0], [-4.0, 5.0]);
        let sys = test_system(0, 2.0, vec![t1, t2], Band::F125);
        let (value, _) = loss_strong_geo(&kappa, &sc, &[sys]).unwrap();
        let d2 = (t1[0] - t2[0] as f64).powi(2) + (t1[1] - t2[1] as f64).powi(2);
        assert_relative_eq!(value, d2 / 4.0, max_relative = 1e-12);

        let (v0, g0) = loss_strong_geo(&kappa, &sc, &[]).unwrap();
        assert_eq!(v0, 0.0);
        assert!(g0.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn geo_gradient_matches_finite_differences() {
        let grid = test_grid();
        let sc = scene();
        let kappa = blob_kappa(grid, 21);
        let systems = funnel_systems();
        let (_, grad) = loss_strong_geo(&kappa, &sc, &systems).unwrap();
        let f = |k: &ScalarField| loss_strong_geo(k, &sc, &systems).unwrap().0;
        assert_grad_matches_fd(&f, &kappa, &grad, 22, 1e-4);
    }

    #[test]
    fn sersic_intensity_gradient_is_consistent() {
        let src = test_sersic(Band::F125);
        let mut rng = stream_rng(9, &[7003]);
        for _ in 0..20 {
            let delta = [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)];
            let (value, grad) = sersic_origin_intensity_grad(&src, delta);
            // The value must agree with the rendered profile about the
            // origin.
            let origin = SersicSource { center: [0.0, 0.0], ..src };
            assert_relative_eq!(value, origin.intensity_at(delta), max_relative = 1e-12);
            // The gradient must agree with finite differences.
            let h = 1e-6;
            for axis in 0..2 {
                let mut up = delta;
                up[axis] += h;
                let mut dn = delta;
                dn[axis] -= h;
                let fd = (sersic_origin_intensity_grad(&src, up).0
                    - sersic_origin_intensity_grad(&src, dn).0)
                    / (2.0 * h);
                assert_relative_eq!(grad[axis], fd, max_relative = 1e-5, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn img_loss_vanishes_when_model_matches_photometry() {
        let grid = test_grid();
        let sc = scene();
        let kappa = ScalarField::zeros(grid, Quantity::Convergence);
        // Two images symmetric about the origin: with no lensing the
        // source estimate is the origin and both images sit at offset
        // ±θ, where the (point-symmetric) profile has equal intensity.
        let t = [5.0, 3.0];
        let sys = test_system(0, 2.0, vec![t, [-t[0], -t[1]]], Band::F125);
        let level = sersic_origin_intensity_grad(&sys.sersic, t).0;
        let mut stack = PhotometryStack::zeros(grid);
        for v in stack.values_mut() {
            v[Band::F125.channel()] = level;
        }
        let (value, grad) = loss_strong_img(&kappa, &sc, std::slice::from_ref(&sys), &stack).unwrap();
        assert!(value.abs() < 1e-24, "value {value}");
        assert!(grad.values().iter().all(|&v| v.abs() < 1e-18));

        // Any lensing perturbation moves the source estimates and
        // strictly increases the mismatch against this matched stack.
        let blob = blob_kappa(grid, 5);
        let (perturbed, _) = loss_strong_img(&blob, &sc, &[sys], &stack).unwrap();
        assert!(perturbed > 1e-12, "perturbed {perturbed}");
    }

    #[test]
    fn img_gradient_matches_finite_differences() {
        let grid = test_grid();
        let sc = scene();
        let kappa = blob_kappa(grid, 31);
        let systems = funnel_systems();
        // Smooth, spatially varying photometry: two broad profiles per
        // band so P varies at the image positions.
        let mut stack = PhotometryStack::zeros(grid);
        for (i, &band) in BANDS.iter().enumerate() {
            let src = SersicSource {
                center: [3.0 - 2.0 * i as f64, -2.0 + 1.5 * i as f64],
                effective_radius: 14.0,
                index: 1.0,
                ellipticity: [0.1, 0.05],
                total_flux: 900.0,
                band,
            };
            crate::mock::add_sersic_to_stack(&mut stack, &src).unwrap();
        }
        let (_, grad) = loss_strong_img(&kappa, &sc, &systems, &stack).unwrap();
        let f = |k: &ScalarField| loss_strong_img(k, &sc, &systems, &stack).unwrap().0;
        assert_grad_matches_fd(&f, &kappa, &grad, 32, 1e-3);
    }

    /// Catalog with entries at every `stride`-th pixel centre carrying
    /// the model shear at `z_probe`, observed as ρ(z_probe)·γ_ref.
    fn pixel_catalog(
        kappa: &ScalarField,
        sc: &LensScene,
        z_probe: f64,
        stride: usize,
        sigma_w2: f64,
    ) -> WeakCatalog {
        let gamma = crate::lens::shear_from_kappa(kappa, crate::lens::Method::Fft).unwrap();
        let rho = sc.kappa_rescale(z_probe).unwrap();
        let grid = kappa.grid();
        let mut entries = Vec::new();
        for iy in (0..grid.n_pix()).step_by(stride) {
            for ix in (0..grid.n_pix()).step_by(stride) {
                let g = gamma.at(ix, iy);
                entries.push(WeakEntry {
                    theta: grid.pixel_center(ix, iy),
                    gamma: [rho * g[0], rho * g[1]],
                    z_s: z_probe,
                });
            }
        }
        WeakCatalog { sigma_w2, entries }
    }

    #[test]
    fn rbf_reproduces_observations_and_rescales_them() {
        let grid = test_grid();
        let sc = scene();
        let kappa = blob_kappa(grid, 41);
        // Observations at z ≠ z_ref: interpolation must undo the
        // rescaling and reproduce the reference-plane shear.
        // Kernel length of one node spacing keeps the system well
        // conditioned, so the vanishing ridge recovers interpolation.
        let cat = pixel_catalog(&kappa, &sc, 3.7, 3, 0.0);
        let cfg = RbfConfig { length_scale: 6.0, ridge: 1e-10 };
        let phi = rbf_interpolate(&cat, &cfg, grid, &sc).unwrap();
        let gamma = crate::lens::shear_from_kappa(&kappa, crate::lens::Method::Fft).unwrap();
        for iy in (0..grid.n_pix()).step_by(3) {
            for ix in (0..grid.n_pix()).step_by(3) {
                let got = phi.at(ix, iy);
                let want = gamma.at(ix, iy);
                for c in 0..2 {
                    assert_relative_eq!(got[c], want[c], max_relative = 1e-6, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn rbf_constant_catalog_yields_constant_map() {
        let grid = test_grid();
        let sc = scene();
        let c = [0.04, -0.025];
        // Constant observations at the reference redshift (ρ = 1),
        // covering every pixel centre so the whole map lies in the hull.
        let mut entries = Vec::new();
        for iy in 0..grid.n_pix() {
            for ix in 0..grid.n_pix() {
                entries.push(WeakEntry {
                    theta: grid.pixel_center(ix, iy),
                    gamma: c,
                    z_s: sc.z_ref,
                });
            }
        }
        let cat = WeakCatalog { sigma_w2: 0.0, entries };
        let cfg = RbfConfig { length_scale: grid.pixel_scale(), ridge: 1e-8 };
        let phi = rbf_interpolate(&cat, &cfg, grid, &sc).unwrap();
        for iy in 0..grid.n_pix() {
            for ix in 0..grid.n_pix() {
                let got = phi.at(ix, iy);
                assert!(
                    (got[0] - c[0]).abs() < 1e-6 && (got[1] - c[1]).abs() < 1e-6,
                    "pixel ({ix},{iy}): {got:?}"
                );
            }
        }
    }

    #[test]
    fn rbf_matches_brute_force_dense_solve() {
        let grid = test_grid();
        let sc = scene();
        let mut rng = stream_rng(51, &[7004]);
        let n = 200;
        let entries: Vec<WeakEntry> = (0..n)
            .map(|_| WeakEntry {
                theta: [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)],
                gamma: [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
                z_s: rng.gen_range(1.0..4.0),
            })
            .collect();
        let cat = WeakCatalog { sigma_w2: 0.03, entries };
        // Short kernel and a firm ridge keep the system well conditioned
        // enough for two solvers to agree at the 1e−10 level.
        let cfg = RbfConfig { length_scale: 3.0, ridge: 1e-3 };
        let phi = rbf_interpolate(&cat, &cfg, grid, &sc).unwrap();

        // Independent dense solve: Gauss-Jordan elimination with partial
        // pivoting on the same kernel system.
        let mut a = vec![0.0f64; n * n];
        let mut rhs = vec![[0.0f64; 2]; n];
        for (i, e) in cat.entries.iter().enumerate() {
            let rho = sc.kappa_rescale(e.z_s).unwrap();
            rhs[i] = [e.gamma[0] / rho, e.gamma[1] / rho];
            for (j, f) in cat.entries.iter().enumerate() {
                let d2 =
                    (e.theta[0] - f.theta[0]).powi(2) + (e.theta[1] - f.theta[1]).powi(2);
                a[i * n + j] = (-d2 / (2.0 * cfg.length_scale.powi(2))).exp();
            }
            a[i * n + i] += cfg.ridge;
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
                .unwrap();
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            rhs.swap(col, pivot);
            let d = a[col * n + col];
            for i in 0..n {
                if i == col {
                    continue;
                }
                let f = a[i * n + col] / d;
                for k in 0..n {
                    a[i * n + k] -= f * a[col * n + k];
                }
                rhs[i][0] -= f * rhs[col][0];
                rhs[i][1] -= f * rhs[col][1];
            }
        }
        let w: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let d = a[i * n + i];
                [rhs[i][0] / d, rhs[i][1] / d]
            })
            .collect();
        for iy in 0..grid.n_pix() {
            for ix in 0..grid.n_pix() {
                let p = grid.pixel_center(ix, iy);
                let mut want = [0.0, 0.0];
                for (e, wi) in cat.entries.iter().zip(&w) {
                    let d2 = (p[0] - e.theta[0]).powi(2) + (p[1] - e.theta[1]).powi(2);
                    let v = (-d2 / (2.0 * cfg.length_scale.powi(2))).exp();
                    want[0] += wi[0] * v;
                    want[1] += wi[1] * v;
                }
                let got = phi.at(ix, iy);
                for c in 0..2 {
                    assert_relative_eq!(got[c], want[c], max_relative = 1e-10, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn weak_loss_scales_with_noise_and_handles_empty_catalogs() {
        let grid = test_grid();
        let sc = scene();
        let kappa = blob_kappa(grid, 61);
        let lo = pixel_catalog(&kappa, &sc, 2.6, 4, 0.03);
        let hi = WeakCatalog { sigma_w2: 0.3, entries: lo.entries.clone() };
        // Same residual (same entries, same interpolation settings), so
        // the values sit in the exact 1/σ_w² ratio.
        let cfg = RbfConfig { length_scale: 8.0, ridge: 1e-5 };
        let (v_lo, _) = loss_weak(&kappa, &sc, &lo, &cfg).unwrap();
        let (v_hi, _) = loss_weak(&kappa, &sc, &hi, &cfg).unwrap();
        assert_relative_eq!(v_lo, 10.0 * v_hi, max_relative = 1e-12);

        let empty = WeakCatalog { sigma_w2: 0.03, entries: vec![] };
        let (v0, g0) = loss_weak(&kappa, &sc, &empty, &cfg).unwrap();
        assert_eq!(v0, 0.0);
        assert!(g0.values().iter().all(|&v| v == 0.0));

        let zero_noise = WeakCatalog { sigma_w2: 0.0, entries: lo.entries.clone() };
        assert!(loss_weak(&kappa, &sc, &zero_noise, &cfg).is_err());
    }

    #[test]
    fn weak_loss_is_permutation_invariant() {
        let grid = test_grid();
        let sc = scene();
        let kappa = blob_kappa(grid, 71);
        let cat = pixel_catalog(&kappa, &sc, 1.8, 5, 0.03);
        let mut reversed = cat.clone();
        reversed.entries.reverse();
        let cfg = RbfConfig { length_scale: 10.0, ridge: 1e-5 };
        let (v1, g1) = loss_weak(&kappa, &sc, &cat, &cfg).unwrap();
        let (v2, g2) = loss_weak(&kappa, &sc, &reversed, &cfg).unwrap();
        assert_relative_eq!(v1, v2, max_relative = 1e-10);
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert_relative_eq!(a, b, max_relative = 1e-8, epsilon = 1e-15);
        }
    }

    #[test]
    fn weak_loss_is_minimal_near_the_truth() {
        let grid = test_grid();
        let sc = scene();
        let kappa = blob_kappa(grid, 81);
        // Dense noiseless sampling at the reference redshift; the RBF
        // map is fixed by the catalog, so solve it once.
        let cat = pixel_catalog(&kappa, &sc, sc.z_ref, 2, 0.03);
        let cfg = RbfConfig::defaults_for(&cat).unwrap();
        let phi = rbf_interpolate(&cat, &cfg, grid, &sc).unwrap();
        let op = LensOperator::new(grid);
        let value = |k: &ScalarField| {
            let gamma_hat = op.shear_from_kappa(k).unwrap();
            weak_terms(&gamma_hat, &phi, cat.sigma_w2, 1.0).0
        };
        let at_truth = value(&kappa);
        let mut rng = stream_rng(82, &[7005]);
        for _ in 0..100 {
            let mut perturbed = kappa.clone();
            let half = grid.fov_arcsec() / 2.0;
            let (x, y, s, a) = (
                rng.gen_range(-0.4 * half..0.4 * half),
                rng.gen_range(-0.4 * half..0.4 * half),
                rng.gen_range(0.1 * half..0.25 * half),
                rng.gen_range(-0.05..0.05f64),
            );
            for iy in 0..grid.n_pix() {
                for ix in 0..grid.n_pix() {
                    let c = grid.pixel_center(ix, iy);
                    let v = a
                        * (-((c[0] - x).powi(2) + (c[1] - y).powi(2)) / (2.0 * s * s)).exp();
                    perturbed.set(ix, iy, perturbed.at(ix, iy) + v);
                }
            }
            let un = value(&perturbed);
            assert!(
                at_truth <= un,
                "perturbation lowered the loss: {at_truth} > {un}"
            );
        }
    }

    #[test]
    fn weak_gradient_matches_finite_differences() {
        let grid = test_grid();
        let sc = scene();
        let kappa = blob_kappa(grid, 91);
        let cat = pixel_catalog(&kappa, &sc, 2.9, 4, 0.03);
        let cfg = RbfConfig { length_scale: 9.0, ridge: 1e-5 };
        let (_, grad) = loss_weak(&kappa, &sc, &cat, &cfg).unwrap();
        let f = |k: &ScalarField| loss_weak(k, &sc, &cat, &cfg).unwrap().0;
        assert_grad_matches_fd(&f, &kappa, &grad, 92, 1e-4);
    }

    #[test]
    fn nll_combines_terms_linearly() {
        let grid = test_grid();
        let sc = scene();
        let kappa = blob_kappa(grid, 101);
        let systems = funnel_systems();
        let mut stack = PhotometryStack::zeros(grid);
        let wide = SersicSource {
            center: [1.0, -2.0],
            effective_radius: 12.0,
            index: 1.2,
            ellipticity: [0.05, 0.1],
            total_flux: 500.0,
            band: Band::F125,
        };
        crate::mock::add_sersic_to_stack(&mut stack, &wide).unwrap();
        let wide606 = SersicSource { band: Band::F606, ..wide };
        crate::mock::add_sersic_to_stack(&mut stack, &wide606).unwrap();
        let cat = pixel_catalog(&kappa, &sc, 2.2, 4, 0.03);
        let cfg = RbfConfig { length_scale: 9.0, ridge: 1e-5 };

        let data = ObservedData {
            strong: systems.clone(),
            photometry: Some(stack.clone()),
            weak: Some(cat.clone()),
            rbf: Some(cfg),
        };

        // All weights zero: exactly (0, 0).
        let off = LossWeights { lambda_geo: 0.0, lambda_img: 0.0, lambda_w: 0.0 };
        let nll = NegLogLikelihood::new(grid, &sc, data.clone(), off).unwrap();
        let (v, g) = nll.eval(&kappa).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.values().iter().all(|&x| x == 0.0));

        // Single active term: λ times the standalone loss.
        let (geo_v, geo_g) = loss_strong_geo(&kappa, &sc, &systems).unwrap();
        let only_geo = LossWeights { lambda_geo: 2.5, lambda_img: 0.0, lambda_w: 0.0 };
        let nll = NegLogLikelihood::new(grid, &sc, data.clone(), only_geo).unwrap();
        let (v, g) = nll.eval(&kappa).unwrap();
        assert_relative_eq!(v, 2.5 * geo_v, max_relative = 1e-12);
        for (a, b) in g.values().iter().zip(geo_g.values()) {
            assert_relative_eq!(*a, 2.5 * b, max_relative = 1e-9, epsilon = 1e-18);
        }

        // All terms: the weighted sum of the standalone losses.
        let (img_v, img_g) = loss_strong_img(&kappa, &sc, &systems, &stack).unwrap();
        let (wk_v, wk_g) = loss_weak(&kappa, &sc, &cat, &cfg).unwrap();
        let weights = LossWeights::default();
        let nll = NegLogLikelihood::new(grid, &sc, data.clone(), weights).unwrap();
        let (v, g) = nll.eval(&kappa).unwrap();
        let want = weights.lambda_geo * geo_v + weights.lambda_img * img_v + weights.lambda_w * wk_v;
        assert_relative_eq!(v, want, max_relative = 1e-12);
        for (i, got) in g.values().iter().enumerate() {
            let want = weights.lambda_geo * geo_g.values()[i]
                + weights.lambda_img * img_g.values()[i]
                + weights.lambda_w * wk_g.values()[i];
            assert_relative_eq!(*got, want, max_relative = 1e-8, epsilon = 1e-16);
        }

        // Absent data silently disables its term even at nonzero weight.
        let no_weak = ObservedData { weak: None, ..data.clone() };
        let nll = NegLogLikelihood::new(grid, &sc, no_weak, weights).unwrap();
        let (v, _) = nll.eval(&kappa).unwrap();
        assert_relative_eq!(
            v,
            weights.lambda_geo * geo_v + weights.lambda_img * img_v,
            max_relative = 1e-12
        );
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let grid = test_grid();
        let sc = scene();
        let kappa = blob_kappa(grid, 111);
        let systems = funnel_systems();
        let mut stack = PhotometryStack::zeros(grid);
        for band in BANDS {
            let wide = SersicSource {
                center: [0.5, 0.8],
                effective_radius: 13.0,
                index: 1.1,
                ellipticity: [0.0, 0.15],
                total_flux: 700.0,
                band,
            };
            crate::mock::add_sersic_to_stack(&mut stack, &wide).unwrap();
        }
        let cat = pixel_catalog(&kappa, &sc, 2.4, 4, 0.03);
        let data = ObservedData {
            strong: systems,
            photometry: Some(stack),
            weak: Some(cat),
            rbf: Some(RbfConfig { length_scale: 9.0, ridge: 1e-5 }),
        };
        let nll = NegLogLikelihood::new(grid, &sc, data, LossWeights::default()).unwrap();
        let (_, grad) = nll.eval(&kappa).unwrap();
        let f = |k: &ScalarField| nll.eval(k).unwrap().0;
        assert_grad_matches_fd(&f, &kappa, &grad, 112, 1e-3);
    }
}
