//! Square angular grids and the field types defined on them.
//!
//! Conventions used by every module:
//!
//! * Grids are square with `n_pix` pixels per side and a physical field of
//!   view of `fov_arcsec` arcseconds; all angles are in arcseconds.
//! * Storage is row-major with index `iy * n_pix + ix`; the first angular
//!   component θ₁ runs along `ix`, θ₂ along `iy`.
//! * Pixel `(ix, iy)` is centred at `((ix + 0.5)·Δ − fov/2, (iy + 0.5)·Δ − fov/2)`
//!   with `Δ = fov / n_pix`, so the field of view is centred on the origin.
//! * Bilinear interpolation is defined on the convex hull of pixel centres
//!   (no extrapolation past the boundary half-pixel).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors for grid and field construction/sampling.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: n_pix={n_pix}, fov_arcsec={fov_arcsec} (need n_pix >= 2 and finite fov > 0)")]
    InvalidGrid { n_pix: usize, fov_arcsec: f64 },
    #[error("value buffer has {got} entries, grid needs {need}")]
    LengthMismatch { need: usize, got: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("negative value {value} at index {index} not allowed for quantity {quantity:?}")]
    NegativeValue { index: usize, value: f64, quantity: Quantity },
    #[error("position ({0}, {1}) arcsec is outside the interpolation domain")]
    OutOfDomain(f64, f64),
    #[error("grids differ: {0}x{0} fov {1} vs {2}x{2} fov {3}")]
    GridMismatch(usize, f64, usize, f64),
    #[error("photometry stack requires band {0:?}")]
    MissingBand(Band),
}

/// Physical interpretation tag attached to scalar rasters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantity {
    /// Untyped values (normalized maps, intermediates).
    Generic,
    /// Lensing convergence κ (dimensionless; may be negative after
    /// mean-free inversions).
    Convergence,
    /// Projected surface mass density in 10¹⁰ M⊙/h per (ckpc/h)²; non-negative.
    SurfaceDensity,
    /// Flux surface density in Jy per pixel; non-negative.
    Photometry,
}

impl Quantity {
    /// Raster-format tag.
    pub fn tag(self) -> u32 {
        match self {
            Quantity::Generic => 0,
            Quantity::Convergence => 1,
            Quantity::SurfaceDensity => 2,
            Quantity::Photometry => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Quantity::Generic),
            1 => Some(Quantity::Convergence),
            2 => Some(Quantity::SurfaceDensity),
            3 => Some(Quantity::Photometry),
            _ => None,
        }
    }

    fn requires_non_negative(self) -> bool {
        matches!(self, Quantity::SurfaceDensity | Quantity::Photometry)
    }
}

/// Photometric band identifiers (F125W, F606W, F814W).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u32", try_from = "u32")]
pub enum Band {
    F125,
    F606,
    F814,
}

/// Stack band order; fixed for every photometry artifact.
pub const BANDS: [Band; 3] = [Band::F125, Band::F606, Band::F814];

impl Band {
    /// Index of the band within a photometry stack.
    pub fn channel(self) -> usize {
        match self {
            Band::F125 => 0,
            Band::F606 => 1,
            Band::F814 => 2,
        }
    }

    /// Numeric identifier used in JSON catalogs (125/606/814).
    pub fn id(self) -> u32 {
        match self {
            Band::F125 => 125,
            Band::F606 => 606,
            Band::F814 => 814,
        }
    }
}

impl From<Band> for u32 {
    fn from(b: Band) -> u32 {
        b.id()
    }
}

impl TryFrom<u32> for Band {
    type Error = String;
    fn try_from(id: u32) -> Result<Self, String> {
        match id {
            125 => Ok(Band::F125),
            606 => Ok(Band::F606),
            814 => Ok(Band::F814),
            other => Err(format!("unknown band id {other} (expected 125, 606 or 814)")),
        }
    }
}

/// A square angular grid centred on the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularGrid {
    n_pix: usize,
    fov_arcsec: f64,
}

impl AngularGrid {
    pub fn new(n_pix: usize, fov_arcsec: f64) -> Result<Self, GridError> {
        if n_pix < 2 || !fov_arcsec.is_finite() || fov_arcsec <= 0.0 {
            return Err(GridError::InvalidGrid { n_pix, fov_arcsec });
        }
        Ok(Self { n_pix, fov_arcsec })
    }

    pub fn n_pix(&self) -> usize {
        self.n_pix
    }

    pub fn fov_arcsec(&self) -> f64 {
        self.fov_arcsec
    }

    /// Pixel side length in arcseconds.
    pub fn pixel_scale(&self) -> f64 {
        self.fov_arcsec / self.n_pix as f64
    }

    /// Pixel area in arcsec².
    pub fn pixel_area(&self) -> f64 {
        let s = self.pixel_scale();
        s * s
    }

    /// Number of pixels in the map.
    pub fn len(&self) -> usize {
        self.n_pix * self.n_pix
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Centre of pixel `(ix, iy)` in arcseconds.
    pub fn pixel_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let s = self.pixel_scale();
        [
            (ix as f64 + 0.5) * s - self.fov_arcsec / 2.0,
            (iy as f64 + 0.5) * s - self.fov_arcsec / 2.0,
        ]
    }

    /// One-dimensional pixel-centre coordinates (shared by both axes).
    pub fn centers_1d(&self) -> Vec<f64> {
        (0..self.n_pix).map(|i| self.pixel_center(i, 0)[0]).collect()
    }

    /// Row-major index of pixel `(ix, iy)`.
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.n_pix && iy < self.n_pix);
        iy * self.n_pix + ix
    }

    /// Pixel containing an angular position under the floor convention,
    /// or `None` when the position lies outside the field of view.
    /// Positions exactly on the upper boundary fall outside.
    pub fn pixel_of(&self, theta: [f64; 2]) -> Option<(usize, usize)> {
        let s = self.pixel_scale();
        let half = self.fov_arcsec / 2.0;
        let fx = ((theta[0] + half) / s).floor();
        let fy = ((theta[1] + half) / s).floor();
        let n = self.n_pix as f64;
        if fx < 0.0 || fy < 0.0 || fx >= n || fy >= n {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    /// Bilinear stencil for an angular position: the four row-major pixel
    /// indices and their weights. Errors outside the convex hull of pixel
    /// centres.
    pub fn bilinear_stencil(&self, theta: [f64; 2]) -> Result<([usize; 4], [f64; 4]), GridError> {
        let s = self.pixel_scale();
        let half = self.fov_arcsec / 2.0;
        // Fractional pixel-centre coordinates: centre i sits at u = i.
        let u = (theta[0] + half) / s - 0.5;
        let v = (theta[1] + half) / s - 0.5;
        let max = (self.n_pix - 1) as f64;
        if !(0.0..=max).contains(&u) || !(0.0..=max).contains(&v) {
            return Err(GridError::OutOfDomain(theta[0], theta[1]));
        }
        let i0 = (u.floor() as usize).min(self.n_pix - 2);
        let j0 = (v.floor() as usize).min(self.n_pix - 2);
        let fx = u - i0 as f64;
        let fy = v - j0 as f64;
        let idx = [
            self.index(i0, j0),
            self.index(i0 + 1, j0),
            self.index(i0, j0 + 1),
            self.index(i0 + 1, j0 + 1),
        ];
        let w = [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ];
        Ok((idx, w))
    }

    /// Clamps an angular position onto the interpolation domain.
    pub fn clamp_to_domain(&self, theta: [f64; 2]) -> [f64; 2] {
        let half = self.fov_arcsec / 2.0;
        let lo = -half + 0.5 * self.pixel_scale();
        let hi = half - 0.5 * self.pixel_scale();
        [theta[0].clamp(lo, hi), theta[1].clamp(lo, hi)]
    }

    fn check_same(&self, other: &AngularGrid) -> Result<(), GridError> {
        if self != other {
            return Err(GridError::GridMismatch(
                self.n_pix,
                self.fov_arcsec,
                other.n_pix,
                other.fov_arcsec,
            ));
        }
        Ok(())
    }
}

fn validate_values(values: &[f64], need: usize, quantity: Quantity) -> Result<(), GridError> {
    if values.len() != need {
        return Err(GridError::LengthMismatch { need, got: values.len() });
    }
    for (index, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(GridError::NonFinite { index });
        }
        if quantity.requires_non_negative() && v < 0.0 {
            return Err(GridError::NegativeValue { index, value: v, quantity });
        }
    }
    Ok(())
}

/// A scalar map on an [`AngularGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: AngularGrid,
    quantity: Quantity,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: AngularGrid, quantity: Quantity, values: Vec<f64>) -> Result<Self, GridError> {
        validate_values(&values, grid.len(), quantity)?;
        Ok(Self { grid, quantity, values })
    }

    pub fn zeros(grid: AngularGrid, quantity: Quantity) -> Self {
        Self { grid, quantity, values: vec![0.0; grid.len()] }
    }

    pub fn grid(&self) -> AngularGrid {
        self.grid
    }

    pub fn quantity(&self) -> Quantity {
        self.quantity
    }

    /// Returns a copy retagged with a different quantity (values unchanged;
    /// the non-negativity rule of the new tag is enforced).
    pub fn retagged(&self, quantity: Quantity) -> Result<Self, GridError> {
        Self::new(self.grid, quantity, self.values.clone())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for numeric kernels. Callers are responsible for
    /// keeping values finite (and non-negative for tagged quantities).
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.grid.index(ix, iy)]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        let i = self.grid.index(ix, iy);
        self.values[i] = v;
    }

    /// Bilinear sample at an angular position.
    pub fn bilinear(&self, theta: [f64; 2]) -> Result<f64, GridError> {
        let (idx, w) = self.grid.bilinear_stencil(theta)?;
        Ok(idx.iter().zip(w.iter()).map(|(&i, &wi)| self.values[i] * wi).sum())
    }

    /// Compensated mean of all pixels.
    pub fn mean(&self) -> f64 {
        crate::numeric::compensated_mean(&self.values)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Checks grid equality against another field.
    pub fn check_same_grid(&self, other: &ScalarField) -> Result<(), GridError> {
        self.grid.check_same(&other.grid)
    }
}

/// A two-component map (deflection, shear, source-plane positions).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: AngularGrid,
    values: Vec<[f64; 2]>,
}

impl VectorField {
    pub fn new(grid: AngularGrid, values: Vec<[f64; 2]>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::LengthMismatch { need: grid.len(), got: values.len() });
        }
        for (index, v) in values.iter().enumerate() {
            if !v[0].is_finite() || !v[1].is_finite() {
                return Err(GridError::NonFinite { index });
            }
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: AngularGrid) -> Self {
        Self { grid, values: vec![[0.0; 2]; grid.len()] }
    }

    pub fn grid(&self) -> AngularGrid {
        self.grid
    }

    pub fn values(&self) -> &[[f64; 2]] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.values
    }

    pub fn at(&self, ix: usize, iy: usize) -> [f64; 2] {
        self.values[self.grid.index(ix, iy)]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: [f64; 2]) {
        let i = self.grid.index(ix, iy);
        self.values[i] = v;
    }

    /// Bilinear sample of both components.
    pub fn bilinear(&self, theta: [f64; 2]) -> Result<[f64; 2], GridError> {
        let (idx, w) = self.grid.bilinear_stencil(theta)?;
        let mut out = [0.0; 2];
        for (&i, &wi) in idx.iter().zip(w.iter()) {
            out[0] += self.values[i][0] * wi;
            out[1] += self.values[i][1] * wi;
        }
        Ok(out)
    }

    /// Adjoint of [`VectorField::bilinear`]: scatters `w` onto the four
    /// stencil pixels. Used by likelihood gradients.
    pub fn splat_bilinear(&mut self, theta: [f64; 2], w: [f64; 2]) -> Result<(), GridError> {
        let (idx, wts) = self.grid.bilinear_stencil(theta)?;
        for (&i, &wi) in idx.iter().zip(wts.iter()) {
            self.values[i][0] += w[0] * wi;
            self.values[i][1] += w[1] * wi;
        }
        Ok(())
    }

    pub fn check_same_grid(&self, other: &VectorField) -> Result<(), GridError> {
        self.grid.check_same(&other.grid)
    }
}

/// Three-band photometry on a grid, channel-interleaved in band order
/// F125, F606, F814. Values are non-negative flux densities (Jy/pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct PhotometryStack {
    grid: AngularGrid,
    values: Vec<[f64; 3]>,
}

impl PhotometryStack {
    pub fn new(grid: AngularGrid, values: Vec<[f64; 3]>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::LengthMismatch { need: grid.len(), got: values.len() });
        }
        for (index, v) in values.iter().enumerate() {
            for c in 0..3 {
                if !v[c].is_finite() {
                    return Err(GridError::NonFinite { index });
                }
                if v[c] < 0.0 {
                    return Err(GridError::NegativeValue {
                        index,
                        value: v[c],
                        quantity: Quantity::Photometry,
                    });
                }
            }
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: AngularGrid) -> Self {
        Self { grid, values: vec![[0.0; 3]; grid.len()] }
    }

    pub fn grid(&self) -> AngularGrid {
        self.grid
    }

    pub fn values(&self) -> &[[f64; 3]] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.values
    }

    /// Extracts one band as a scalar field.
    pub fn band(&self, band: Band) -> ScalarField {
        let c = band.channel();
        let values = self.values.iter().map(|v| v[c]).collect();
        ScalarField { grid: self.grid, quantity: Quantity::Photometry, values }
    }

    /// Bilinear sample of one band.
    pub fn bilinear_band(&self, band: Band, theta: [f64; 2]) -> Result<f64, GridError> {
        let (idx, w) = self.grid.bilinear_stencil(theta)?;
        let c = band.channel();
        Ok(idx.iter().zip(w.iter()).map(|(&i, &wi)| self.values[i][c] * wi).sum())
    }

    /// Total flux per band (compensated sums), in Jy.
    pub fn total_flux(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = crate::numeric::compensated_sum(self.values.iter().map(|v| v[c]));
        }
        out
    }
}
