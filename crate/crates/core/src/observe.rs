//! Synthetic observations of a convergence map: multiply imaged
//! strong-lensing systems and noisy weak-lensing shear catalogs.
//!
//! Source redshifts follow p(z) ∝ z² exp(−z/z₀) (a Gamma(3, z₀) law)
//! truncated to (0, z_max], drawn by inverse CDF on a tabulated grid.
//! Generators additionally reject draws at or below the lens redshift,
//! since those sources are not lensed.
//!
//! Image finding works on precomputed deflection/shear/convergence maps:
//! candidate images are local minima of |β(θ) − β_src|² over pixel
//! centres, refined by Newton iteration with the local lens Jacobian,
//! accepted below a residual of a quarter pixel, deduplicated within one
//! pixel, and sorted by |θ|.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cosmo::{CosmoError, LensScene, MIN_Z_SEPARATION};
use crate::grid::{AngularGrid, GridError, PhotometryStack, ScalarField, VectorField, BANDS};
use crate::lens::{LensError, LensOperator};
use crate::mock::{add_sersic_to_stack, MockError, SersicSource};
use crate::rng::stream_rng;

/// Default scale of the source-redshift law.
pub const Z0_DEFAULT: f64 = 2.0 / 3.0;
/// Default upper truncation of source redshifts.
pub const Z_MAX_DEFAULT: f64 = 5.0;
/// Rejection-trial budget per requested strong-lensing source.
pub const STRONG_TRIALS_PER_SOURCE: usize = 200;
/// Demagnification floor of the image finder. Discretizing a singular
/// profile (SIS, point mass) cores it out, creating a central image
/// with |μ| ~ κ_centre⁻² ≲ 10⁻² that the singular solution does not
/// have and that would be unobservable behind the brightest cluster
/// galaxy; genuine images in the operating regime sit orders of
/// magnitude above this floor.
pub const MIN_IMAGE_MAGNIFICATION: f64 = 0.05;

const STREAM_REDSHIFT: u64 = 0x5A53_414D; // "ZSAM"
const STREAM_STRONG: u64 = 0x5354_524F; // "STRO"
const STREAM_WEAK_COUNT: u64 = 0x574B_4354; // "WKCT"
const STREAM_WEAK_ENTRY: u64 = 0x574B_454E; // "WKEN"

#[derive(Debug, Error)]
pub enum ObserveError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient lensing: source slot {slot} found no multiply imaged configuration in {trials} trials")]
    InsufficientLensing { slot: usize, trials: usize },
    #[error("could not draw a redshift above {z_min} (upper truncation {z_max})")]
    InfeasibleRedshift { z_min: f64, z_max: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Cosmo(#[from] CosmoError),
    #[error(transparent)]
    Lens(#[from] LensError),
    #[error(transparent)]
    Mock(#[from] MockError),
}

// ---------------------------------------------------------------------------
// Source redshifts
// ---------------------------------------------------------------------------

/// Inverse-CDF sampler for the truncated source-redshift law.
#[derive(Debug, Clone)]
pub struct RedshiftSampler {
    z0: f64,
    z_max: f64,
    /// Inverse CDF tabulated at uniform quantiles u_k = k/(len−1).
    knots: Vec<f64>,
}

impl RedshiftSampler {
    const TABLE_LEN: usize = 4097;

    pub fn new(z0: f64, z_max: f64) -> Result<Self, ObserveError> {
        if !(z0.is_finite() && z0 > 0.0) {
            return Err(ObserveError::InvalidArgument(format!("z0 = {z0} (need > 0)")));
        }
        if !(z_max.is_finite() && z_max > 0.0) {
            return Err(ObserveError::InvalidArgument(format!("z_max = {z_max} (need > 0)")));
        }
        let total = gamma3_cdf(z_max / z0);
        let mut knots = Vec::with_capacity(Self::TABLE_LEN);
        for k in 0..Self::TABLE_LEN {
            let u = k as f64 / (Self::TABLE_LEN - 1) as f64;
            knots.push(invert_gamma3_cdf(u * total, z_max / z0) * z0);
        }
        Ok(Self { z0, z_max, knots })
    }

    pub fn z0(&self) -> f64 {
        self.z0
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    /// CDF of the truncated law (0 below 0, 1 at z_max and above).
    pub fn cdf(&self, z: f64) -> f64 {
        if z <= 0.0 {
            return 0.0;
        }
        if z >= self.z_max {
            return 1.0;
        }
        gamma3_cdf(z / self.z0) / gamma3_cdf(self.z_max / self.z0)
    }

    /// One draw from the truncated law.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen_range(0.0..1.0);
        let pos = u * (self.knots.len() - 1) as f64;
        let i = (pos as usize).min(self.knots.len() - 2);
        let frac = pos - i as f64;
        self.knots[i] + frac * (self.knots[i + 1] - self.knots[i])
    }

    /// One draw conditioned on z > z_min (rejection against the table).
    pub fn sample_above(&self, rng: &mut impl Rng, z_min: f64) -> Result<f64, ObserveError> {
        if z_min >= self.z_max {
            return Err(ObserveError::InfeasibleRedshift { z_min, z_max: self.z_max });
        }
        for _ in 0..10_000 {
            let z = self.sample(rng);
            if z > z_min {
                return Ok(z);
            }
        }
        Err(ObserveError::InfeasibleRedshift { z_min, z_max: self.z_max })
    }
}

/// CDF of the unit-scale Gamma(3) law: F(t) = 1 − e^{−t}(1 + t + t²/2).
fn gamma3_cdf(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        -(-t).exp_m1() - (-t).exp() * (t + 0.5 * t * t)
    }
}

/// Inverts gamma3_cdf on [0, t_max] by bisection with Newton polish.
fn invert_gamma3_cdf(target: f64, t_max: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    if target >= gamma3_cdf(t_max) {
        return t_max;
    }
    let (mut lo, mut hi) = (0.0f64, t_max);
    let mut t = 0.5 * t_max;
    for _ in 0..80 {
        let f = gamma3_cdf(t) - target;
        if f > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let pdf = 0.5 * t * t * (-t).exp();
        let next = if pdf > 0.0 { t - f / pdf } else { f64::NAN };
        t = if next.is_finite() && next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-14 * t_max {
            break;
        }
    }
    t
}

/// Draws a single source redshift (convenience over [`RedshiftSampler`]).
pub fn sample_source_redshift(seed: u64, z0: f64, z_max: f64) -> Result<f64, ObserveError> {
    let sampler = RedshiftSampler::new(z0, z_max)?;
    let mut rng = stream_rng(seed, &[STREAM_REDSHIFT]);
    Ok(sampler.sample(&mut rng))
}

// ---------------------------------------------------------------------------
// Image finding
// ---------------------------------------------------------------------------

/// Precomputed lensing maps of one convergence field, reusable across
/// source planes: deflection, shear, and convergence at the reference
/// redshift, rescaled per query.
pub struct ImageFinder {
    grid: AngularGrid,
    scene: LensScene,
    alpha: VectorField,
    gamma: VectorField,
    kappa: ScalarField,
}

impl ImageFinder {
    pub fn new(kappa: &ScalarField, scene: &LensScene) -> Result<Self, ObserveError> {
        let op = LensOperator::new(kappa.grid());
        Ok(Self {
            grid: kappa.grid(),
            scene: *scene,
            alpha: op.deflection_from_kappa(kappa)?,
            gamma: op.shear_from_kappa(kappa)?,
            kappa: kappa.clone(),
        })
    }

    pub fn grid(&self) -> AngularGrid {
        self.grid
    }

    /// β(θ) = θ − ρ(z_S)·α(θ) with bilinear deflection interpolation.
    pub fn beta_at(&self, z_source: f64, theta: [f64; 2]) -> Result<[f64; 2], ObserveError> {
        let rho = self.scene.kappa_rescale(z_source)?;
        let a = self.alpha.bilinear(theta)?;
        Ok([theta[0] - rho * a[0], theta[1] - rho * a[1]])
    }

    /// Bilinear shear at the reference plane, rescaled to z_source.
    pub fn gamma_at(&self, z_source: f64, theta: [f64; 2]) -> Result<[f64; 2], ObserveError> {
        let rho = self.scene.kappa_rescale(z_source)?;
        let g = self.gamma.bilinear(theta)?;
        Ok([rho * g[0], rho * g[1]])
    }

    /// Local lens Jacobian [[a11, a12], [a21, a22]] at θ for a source at
    /// z_source, from interpolated convergence and shear.
    pub fn jacobian_at(&self, z_source: f64, theta: [f64; 2]) -> Result<[f64; 4], ObserveError> {
        let rho = self.scene.kappa_rescale(z_source)?;
        let k = rho * self.kappa.bilinear(theta)?;
        let g = self.gamma.bilinear(theta)?;
        let (g1, g2) = (rho * g[0], rho * g[1]);
        Ok([1.0 - k - g1, -g2, -g2, 1.0 - k + g1])
    }

    /// Signed magnification μ = 1/det A at θ.
    pub fn magnification_at(&self, z_source: f64, theta: [f64; 2]) -> Result<f64, ObserveError> {
        let a = self.jacobian_at(z_source, theta)?;
        Ok(1.0 / (a[0] * a[3] - a[1] * a[2]))
    }

    /// All image positions of a source at `beta_src`: local minima of
    /// |β(θ) − β_src|² over pixel centres, Newton-refined (≤ 10 steps,
    /// clamped to one pixel), accepted at residual < 0.25 px and
    /// |μ| ≥ [`MIN_IMAGE_MAGNIFICATION`], deduplicated within 1 px,
    /// sorted by |θ|.
    pub fn find(&self, z_source: f64, beta_src: [f64; 2]) -> Result<Vec<[f64; 2]>, ObserveError> {
        let rho = self.scene.kappa_rescale(z_source)?;
        let n = self.grid.n_pix();
        let ps = self.grid.pixel_scale();

        // Squared source-plane miss at every pixel centre.
        let mut r2 = vec![0.0; self.grid.len()];
        for iy in 0..n {
            for ix in 0..n {
                let c = self.grid.pixel_center(ix, iy);
                let a = self.alpha.at(ix, iy);
                let b = [c[0] - rho * a[0], c[1] - rho * a[1]];
                r2[self.grid.index(ix, iy)] =
                    (b[0] - beta_src[0]).powi(2) + (b[1] - beta_src[1]).powi(2);
            }
        }

        let mut accepted: Vec<[f64; 2]> = Vec::new();
        for iy in 0..n {
            for ix in 0..n {
                let v = r2[self.grid.index(ix, iy)];
                let mut is_min = true;
                'nbrs: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
                        if jx < 0 || jy < 0 || jx >= n as i64 || jy >= n as i64 {
                            continue;
                        }
                        if r2[self.grid.index(jx as usize, jy as usize)] < v {
                            is_min = false;
                            break 'nbrs;
                        }
                    }
                }
                if !is_min {
                    continue;
                }
                if let Some(theta) = self.refine(z_source, beta_src, ps, ix, iy)? {
                    let mu = self.magnification_at(z_source, theta)?;
                    if mu.abs() >= MIN_IMAGE_MAGNIFICATION {
                        accepted.push(theta);
                    }
                }
            }
        }

        // Deduplicate within one pixel, preferring smaller |θ|.
        accepted.sort_by(|a, b| {
            let (na, nb) = (a[0].hypot(a[1]), b[0].hypot(b[1]));
            na.total_cmp(&nb).then(a[0].total_cmp(&b[0])).then(a[1].total_cmp(&b[1]))
        });
        let mut images: Vec<[f64; 2]> = Vec::new();
        for t in accepted {
            if images.iter().all(|u| (t[0] - u[0]).hypot(t[1] - u[1]) > ps) {
                images.push(t);
            }
        }
        Ok(images)
    }

    /// Newton refinement of one candidate; `None` when the residual does
    /// not reach a quarter pixel.
    fn refine(
        &self,
        z_source: f64,
        beta_src: [f64; 2],
        ps: f64,
        ix: usize,
        iy: usize,
    ) -> Result<Option<[f64; 2]>, ObserveError> {
        let mut theta = self.grid.pixel_center(ix, iy);
        for _ in 0..10 {
            let b = self.beta_at(z_source, theta)?;
            let r = [b[0] - beta_src[0], b[1] - beta_src[1]];
            if r[0].hypot(r[1]) < 1e-9 * ps {
                break;
            }
            let a = self.jacobian_at(z_source, theta)?;
            let det = a[0] * a[3] - a[1] * a[2];
            if det.abs() < 1e-12 {
                break;
            }
            // Solve A·δ = −r.
            let mut step = [(-r[0] * a[3] + r[1] * a[1]) / det, (r[0] * a[2] - r[1] * a[0]) / det];
            let norm = step[0].hypot(step[1]);
            if norm > ps {
                step[0] *= ps / norm;
                step[1] *= ps / norm;
            }
            theta = self
                .grid
                .clamp_to_domain([theta[0] + step[0], theta[1] + step[1]]);
        }
        let b = self.beta_at(z_source, theta)?;
        let miss = (b[0] - beta_src[0]).hypot(b[1] - beta_src[1]);
        Ok(if miss < 0.25 * ps { Some(theta) } else { None })
    }
}

/// One-shot image search (see [`ImageFinder::find`]).
pub fn find_images(
    kappa: &ScalarField,
    scene: &LensScene,
    z_source: f64,
    beta_src: [f64; 2],
) -> Result<Vec<[f64; 2]>, ObserveError> {
    ImageFinder::new(kappa, scene)?.find(z_source, beta_src)
}

// ---------------------------------------------------------------------------
// Strong-lensing systems
// ---------------------------------------------------------------------------

/// Observed Sérsic appearance of one image: the source profile mapped
/// through the local magnification (flux × |μ|, R_e × √|μ|), which
/// preserves the central surface brightness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageAppearance {
    pub theta: [f64; 2],
    pub magnification: f64,
    pub flux: f64,
    pub effective_radius: f64,
}

/// A multiply imaged background source.
///
/// `true_beta` and `appearances` exist only on freshly generated systems
/// (they are generation-side truths, excluded from the serialised
/// inference inputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongLensSystem {
    pub source_id: u32,
    pub z_s: f64,
    /// Image angular positions θ_{i,j} (arcsec).
    pub images: Vec<[f64; 2]>,
    /// Source profile shape; its `center` is fixed at [0, 0] — the source
    /// position is what inference estimates.
    pub sersic: SersicSource,
    #[serde(skip)]
    pub true_beta: [f64; 2],
    #[serde(skip)]
    pub appearances: Vec<ImageAppearance>,
}

impl StrongLensSystem {
    /// Checks the structural invariants: ≥ 2 in-field images and a
    /// source behind the lens.
    pub fn validate(&self, scene: &LensScene, grid: AngularGrid) -> Result<(), ObserveError> {
        if self.images.len() < 2 {
            return Err(ObserveError::InvalidArgument(format!(
                "system {} has {} image(s), need >= 2",
                self.source_id,
                self.images.len()
            )));
        }
        let half = grid.fov_arcsec() / 2.0;
        for t in &self.images {
            if !(t[0].abs() <= half && t[1].abs() <= half) {
                return Err(ObserveError::InvalidArgument(format!(
                    "system {} image {t:?} outside the field",
                    self.source_id
                )));
            }
        }
        if self.z_s <= scene.z_lens {
            return Err(ObserveError::InvalidArgument(format!(
                "system {} source redshift {} not behind lens {}",
                self.source_id, self.z_s, scene.z_lens
            )));
        }
        self.sersic.validate()?;
        Ok(())
    }
}

/// Generates `n_sources` multiply imaged systems by rejection-sampling
/// source positions (uniform over the central half of the field) and
/// redshifts until each slot yields ≥ 2 images.
///
/// Slot streams are keyed (seed, slot), so systems are independent of
/// evaluation order; each slot has a budget of
/// [`STRONG_TRIALS_PER_SOURCE`] trials before an insufficient-lensing
/// error. The paper's regime is 5–20 sources, enforced here.
pub fn gen_strong_systems(
    kappa: &ScalarField,
    scene: &LensScene,
    n_sources: usize,
    seed: u64,
) -> Result<Vec<StrongLensSystem>, ObserveError> {
    if !(5..=20).contains(&n_sources) {
        return Err(ObserveError::InvalidArgument(format!(
            "n_sources = {n_sources} outside the supported range [5, 20]"
        )));
    }
    let finder = ImageFinder::new(kappa, scene)?;
    let sampler = RedshiftSampler::new(Z0_DEFAULT, Z_MAX_DEFAULT)?;
    let z_floor = scene.z_lens + 2.0 * MIN_Z_SEPARATION;
    let fov = kappa.grid().fov_arcsec();

    let mut systems = Vec::with_capacity(n_sources);
    for slot in 0..n_sources {
        let mut rng = stream_rng(seed, &[STREAM_STRONG, slot as u64]);
        let mut found = None;
        for _ in 0..STRONG_TRIALS_PER_SOURCE {
            let beta = [
                rng.gen_range(-0.25 * fov..0.25 * fov),
                rng.gen_range(-0.25 * fov..0.25 * fov),
            ];
            let z_s = sampler.sample_above(&mut rng, z_floor)?;
            let images = finder.find(z_s, beta)?;
            if images.len() >= 2 {
                found = Some((beta, z_s, images));
                break;
            }
        }
        let (beta, z_s, images) = found.ok_or(ObserveError::InsufficientLensing {
            slot,
            trials: STRONG_TRIALS_PER_SOURCE,
        })?;

        // Background-source profile, drawn after acceptance so rejected
        // trials cost no stream divergence across lenses.
        let e_mag: f64 = rng.gen_range(0.0..0.4);
        let e_ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let sersic = SersicSource {
            center: [0.0, 0.0],
            effective_radius: rng.gen_range(0.15..0.45),
            index: rng.gen_range(0.8..2.5),
            ellipticity: [e_mag * e_ang.cos(), e_mag * e_ang.sin()],
            total_flux: rng.gen_range(0.5..2.0),
            band: BANDS[slot % BANDS.len()],
        };
        let appearances = images
            .iter()
            .map(|&t| {
                let mu = finder.magnification_at(z_s, t)?;
                Ok(ImageAppearance {
                    theta: t,
                    magnification: mu,
                    flux: mu.abs() * sersic.total_flux,
                    effective_radius: mu.abs().sqrt() * sersic.effective_radius,
                })
            })
            .collect::<Result<Vec<_>, ObserveError>>()?;

        systems.push(StrongLensSystem {
            source_id: slot as u32,
            z_s,
            images,
            sersic,
            true_beta: beta,
            appearances,
        });
    }
    Ok(systems)
}

/// Stamps the observed Sérsic appearance of every image of every system
/// into the photometry stack (band of the system's source).
pub fn stamp_appearances(
    stack: &mut PhotometryStack,
    systems: &[StrongLensSystem],
) -> Result<(), ObserveError> {
    for sys in systems {
        for app in &sys.appearances {
            let src = SersicSource {
                center: app.theta,
                effective_radius: app.effective_radius,
                index: sys.sersic.index,
                ellipticity: sys.sersic.ellipticity,
                total_flux: app.flux,
                band: sys.sersic.band,
            };
            add_sersic_to_stack(stack, &src)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Weak-lensing catalogs
// ---------------------------------------------------------------------------

/// One weakly lensed galaxy: position, observed shear, redshift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakEntry {
    pub theta: [f64; 2],
    pub gamma: [f64; 2],
    pub z_s: f64,
}

/// A weak-lensing shear catalog with its per-component noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakCatalog {
    pub sigma_w2: f64,
    pub entries: Vec<WeakEntry>,
}

/// Generates a weak-lensing catalog: a Poisson number of galaxies at
/// `density` per arcmin², positions uniform over the field, redshifts
/// from the truncated law conditioned behind the lens, observed shear =
/// bilinear shear at the galaxy (clamped to the pixel-centre hull near
/// edges) rescaled to its redshift, plus Gaussian noise of variance
/// `sigma_w2` per component.
///
/// The galaxy count and each entry use separate keyed streams, so the
/// catalog is deterministic and independent of evaluation order.
pub fn gen_weak_catalog(
    kappa: &ScalarField,
    scene: &LensScene,
    density_per_arcmin2: f64,
    sigma_w2: f64,
    seed: u64,
) -> Result<WeakCatalog, ObserveError> {
    if !(density_per_arcmin2.is_finite() && density_per_arcmin2 > 0.0) {
        return Err(ObserveError::InvalidArgument(format!(
            "density = {density_per_arcmin2} per arcmin^2 (need > 0)"
        )));
    }
    if !(sigma_w2.is_finite() && sigma_w2 >= 0.0) {
        return Err(ObserveError::InvalidArgument(format!("sigma_w2 = {sigma_w2} (need >= 0)")));
    }
    let finder = ImageFinder::new(kappa, scene)?;
    let sampler = RedshiftSampler::new(Z0_DEFAULT, Z_MAX_DEFAULT)?;
    let z_floor = scene.z_lens + 2.0 * MIN_Z_SEPARATION;
    let fov = kappa.grid().fov_arcsec();
    let area_arcmin2 = (fov / 60.0) * (fov / 60.0);

    let mean = density_per_arcmin2 * area_arcmin2;
    let mut count_rng = stream_rng(seed, &[STREAM_WEAK_COUNT]);
    let n: u64 = Poisson::new(mean)
        .map_err(|e| ObserveError::InvalidArgument(format!("Poisson({mean}): {e}")))?
        .sample(&mut count_rng) as u64;

    let sigma_w = sigma_w2.sqrt();
    let mut entries = Vec::with_capacity(n as usize);
    for i in 0..n {
        let mut rng = stream_rng(seed, &[STREAM_WEAK_ENTRY, i]);
        let theta = [
            rng.gen_range(-0.5 * fov..0.5 * fov),
            rng.gen_range(-0.5 * fov..0.5 * fov),
        ];
        let z_s = sampler.sample_above(&mut rng, z_floor)?;
        let g = finder.gamma_at(z_s, kappa.grid().clamp_to_domain(theta))?;
        let n1: f64 = StandardNormal.sample(&mut rng);
        let n2: f64 = StandardNormal.sample(&mut rng);
        entries.push(WeakEntry {
            theta,
            gamma: [g[0] + sigma_w * n1, g[1] + sigma_w * n2],
            z_s,
        });
    }
    Ok(WeakCatalog { sigma_w2, entries })
}
