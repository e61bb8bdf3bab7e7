//! Flat ΛCDM background cosmology and lensing distance ratios.
//!
//! Distances are angular-diameter distances in Mpc. The projected
//! mass-density unit used throughout the crate is 10¹⁰ M⊙/h per (ckpc/h)²,
//! i.e. mass per *comoving* area at the lens plane, which is what the
//! simulation-style mock maps are expressed in. The critical surface
//! density is converted into that unit (the conversion carries a factor
//! (1+z_lens)² from physical to comoving area).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in km/s.
pub const C_KM_S: f64 = 299_792.458;
/// Speed of light in m/s.
pub const C_M_S: f64 = 2.997_924_58e8;
/// Newton's constant in m³ kg⁻¹ s⁻².
pub const G_SI: f64 = 6.674_30e-11;
/// One megaparsec in metres.
pub const MPC_M: f64 = 3.085_677_581_491_367e22;
/// One kiloparsec in metres.
pub const KPC_M: f64 = 3.085_677_581_491_367e19;
/// Solar mass in kg.
pub const MSUN_KG: f64 = 1.988_409_87e30;
/// Arcseconds to radians.
pub const ARCSEC_RAD: f64 = std::f64::consts::PI / (180.0 * 3600.0);

/// Relative tolerance of the adaptive distance quadrature. Chosen well
/// below the 1e-10 additivity requirement on comoving distances.
pub const QUAD_REL_TOL: f64 = 1e-12;

/// Minimum z_source − z_lens accepted by [`LensScene::sigma_crit`]; below
/// this floor D_LS underflows and Σ_cr overflows.
pub const MIN_Z_SEPARATION: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CosmoError {
    #[error("invalid cosmology: h0={h0}, omega_m={omega_m} (need h0 > 0 and 0 < omega_m <= 1)")]
    InvalidCosmology { h0: f64, omega_m: f64 },
    #[error("invalid redshift interval [{z1}, {z2}] (need 0 <= z1 <= z2, finite)")]
    InvalidRedshift { z1: f64, z2: f64 },
    #[error("invalid lens scene: z_lens={z_lens}, z_ref={z_ref} (need 0 < z_lens < z_ref)")]
    InvalidScene { z_lens: f64, z_ref: f64 },
    #[error(
        "source at z={z_source} is too close to the lens at z={z_lens}: \
         z_source - z_lens < {MIN_Z_SEPARATION} makes sigma_crit overflow"
    )]
    SourceTooClose { z_source: f64, z_lens: f64 },
}

/// Flat ΛCDM parameters (`omega_lambda = 1 − omega_m`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cosmology {
    /// Hubble constant in km/s/Mpc.
    pub h0: f64,
    /// Matter density parameter.
    pub omega_m: f64,
}

impl Default for Cosmology {
    fn default() -> Self {
        Self { h0: 67.74, omega_m: 0.3089 }
    }
}

impl Cosmology {
    pub fn new(h0: f64, omega_m: f64) -> Result<Self, CosmoError> {
        let c = Self { h0, omega_m };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CosmoError> {
        if !(self.h0.is_finite() && self.h0 > 0.0)
            || !(self.omega_m.is_finite() && self.omega_m > 0.0 && self.omega_m <= 1.0)
        {
            return Err(CosmoError::InvalidCosmology { h0: self.h0, omega_m: self.omega_m });
        }
        Ok(())
    }

    /// Dimensionless Hubble parameter h = H0 / 100.
    pub fn little_h(&self) -> f64 {
        self.h0 / 100.0
    }

    /// E(z) = H(z)/H0 for a flat universe.
    pub fn e_of_z(&self, z: f64) -> f64 {
        let a = 1.0 + z;
        (self.omega_m * a * a * a + (1.0 - self.omega_m)).sqrt()
    }

    /// Hubble distance c/H0 in Mpc.
    pub fn hubble_distance_mpc(&self) -> f64 {
        C_KM_S / self.h0
    }

    /// Line-of-sight comoving distance between two redshifts, in Mpc.
    ///
    /// Additive over adjacent intervals to the quadrature tolerance.
    pub fn comoving_distance_mpc(&self, z1: f64, z2: f64) -> Result<f64, CosmoError> {
        if !z1.is_finite() || !z2.is_finite() || z1 < 0.0 || z2 < z1 {
            return Err(CosmoError::InvalidRedshift { z1, z2 });
        }
        if z1 == z2 {
            return Ok(0.0);
        }
        let f = |z: f64| 1.0 / self.e_of_z(z);
        let integral = adaptive_simpson(&f, z1, z2, QUAD_REL_TOL);
        Ok(self.hubble_distance_mpc() * integral)
    }

    /// Angular-diameter distance between two redshifts, in Mpc.
    ///
    /// Flat universe: D_A(z1, z2) = χ(z1, z2) / (1 + z2).
    pub fn angular_diameter_distance_mpc(&self, z1: f64, z2: f64) -> Result<f64, CosmoError> {
        Ok(self.comoving_distance_mpc(z1, z2)? / (1.0 + z2))
    }
}

/// A lensing configuration: background cosmology, lens redshift, and the
/// reference source redshift at which convergence maps are stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LensScene {
    pub cosmology: Cosmology,
    pub z_lens: f64,
    /// Reference source plane of stored κ maps.
    pub z_ref: f64,
}

impl Default for LensScene {
    fn default() -> Self {
        Self { cosmology: Cosmology::default(), z_lens: 0.5, z_ref: 2.0 }
    }
}

impl LensScene {
    pub fn new(cosmology: Cosmology, z_lens: f64, z_ref: f64) -> Result<Self, CosmoError> {
        cosmology.validate()?;
        let s = Self { cosmology, z_lens, z_ref };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), CosmoError> {
        self.cosmology.validate()?;
        if !self.z_lens.is_finite()
            || !self.z_ref.is_finite()
            || self.z_lens <= 0.0
            || self.z_ref <= self.z_lens
        {
            return Err(CosmoError::InvalidScene { z_lens: self.z_lens, z_ref: self.z_ref });
        }
        Ok(())
    }

    /// Critical surface density for a source plane, in SI (kg per physical m²):
    /// Σ_cr = c² D_S / (4πG · D_L · D_LS).
    pub fn sigma_crit_si(&self, z_source: f64) -> Result<f64, CosmoError> {
        if !(z_source.is_finite()) || z_source - self.z_lens < MIN_Z_SEPARATION {
            return Err(CosmoError::SourceTooClose { z_source, z_lens: self.z_lens });
        }
        let c = &self.cosmology;
        let d_l = c.angular_diameter_distance_mpc(0.0, self.z_lens)?;
        let d_s = c.angular_diameter_distance_mpc(0.0, z_source)?;
        let d_ls = c.angular_diameter_distance_mpc(self.z_lens, z_source)?;
        Ok(C_M_S * C_M_S / (4.0 * std::f64::consts::PI * G_SI) * d_s / (d_l * d_ls * MPC_M))
    }

    /// Critical surface density in dataset units, 10¹⁰ M⊙/h per (ckpc/h)².
    ///
    /// The dataset measures mass per comoving area at the lens plane, so the
    /// physical SI value picks up KPC² / (10¹⁰ M⊙ h (1+z_lens)²).
    pub fn sigma_crit(&self, z_source: f64) -> Result<f64, CosmoError> {
        let si = self.sigma_crit_si(z_source)?;
        let h = self.cosmology.little_h();
        let zl1 = 1.0 + self.z_lens;
        Ok(si * KPC_M * KPC_M / (1.0e10 * MSUN_KG * h * zl1 * zl1))
    }

    /// Rescaling factor from the stored reference plane to a source plane:
    /// κ(z_source) = factor · κ(z_ref), with
    /// factor = Σ_cr(z_lens, z_ref) / Σ_cr(z_lens, z_source).
    ///
    /// Computed from distance ratios directly (unit factors cancel).
    /// Strictly increasing in `z_source`; tends to 0 as z_source → z_lens
    /// and to 1 at z_source = z_ref.
    pub fn kappa_rescale(&self, z_source: f64) -> Result<f64, CosmoError> {
        if !(z_source.is_finite()) || z_source - self.z_lens < MIN_Z_SEPARATION {
            return Err(CosmoError::SourceTooClose { z_source, z_lens: self.z_lens });
        }
        let c = &self.cosmology;
        let d_s_ref = c.angular_diameter_distance_mpc(0.0, self.z_ref)?;
        let d_ls_ref = c.angular_diameter_distance_mpc(self.z_lens, self.z_ref)?;
        let d_s = c.angular_diameter_distance_mpc(0.0, z_source)?;
        let d_ls = c.angular_diameter_distance_mpc(self.z_lens, z_source)?;
        Ok((d_s_ref * d_ls) / (d_ls_ref * d_s))
    }

    /// Comoving transverse length at the lens plane per arcsecond, in ckpc/h.
    pub fn ckpc_h_per_arcsec(&self) -> Result<f64, CosmoError> {
        let chi_mpc = self.cosmology.comoving_distance_mpc(0.0, self.z_lens)?;
        Ok(chi_mpc * 1.0e3 * self.cosmology.little_h() * ARCSEC_RAD)
    }
}

/// Adaptive Simpson quadrature with a relative tolerance on the whole
/// integral. The integrands here (1/E(z)) are smooth and positive, so the
/// classic Richardson-controlled recursion converges quickly.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        eps: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1)
    }

    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let fb = f(b);
    let whole = simpson(fa, fm, fb, b - a);
    let eps = rel_tol * whole.abs().max(f64::MIN_POSITIVE);
    recurse(f, a, b, fa, fm, fb, whole, eps, 48)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn simpson_integrates_known_functions() {
        let i = adaptive_simpson(&|x: f64| x.sin(), 0.0, std::f64::consts::PI, 1e-12);
        assert_relative_eq!(i, 2.0, max_relative = 1e-11);
        let i = adaptive_simpson(&|x: f64| (-x).exp(), 0.0, 10.0, 1e-12);
        assert_relative_eq!(i, 1.0 - (-10.0f64).exp(), max_relative = 1e-11);
    }

    #[test]
    fn distances_match_independent_trapezoid_oracle() {
        // Oracle: fixed-step trapezoid integration with 2e5 panels.
        let c = Cosmology::default();
        for &(z1, z2) in &[(0.0, 0.5), (0.0, 2.0), (0.5, 2.0), (0.3, 4.7)] {
            let n = 200_000;
            let h = (z2 - z1) / n as f64;
            let mut acc = 0.5 * (1.0 / c.e_of_z(z1) + 1.0 / c.e_of_z(z2));
            for i in 1..n {
                acc += 1.0 / c.e_of_z(z1 + i as f64 * h);
            }
            let oracle = c.hubble_distance_mpc() * acc * h;
            let got = c.comoving_distance_mpc(z1, z2).unwrap();
            assert_relative_eq!(got, oracle, max_relative = 1e-9);
        }
    }

    #[test]
    fn comoving_distance_is_additive() {
        let c = Cosmology::default();
        for &(z1, z2, z3) in &[(0.0, 0.5, 2.0), (0.1, 1.0, 3.5), (0.0, 0.2, 5.0)] {
            let whole = c.comoving_distance_mpc(z1, z3).unwrap();
            let parts =
                c.comoving_distance_mpc(z1, z2).unwrap() + c.comoving_distance_mpc(z2, z3).unwrap();
            assert_relative_eq!(whole, parts, max_relative = 1e-10);
        }
    }

    #[test]
    fn distance_validation() {
        let c = Cosmology::default();
        assert!(c.comoving_distance_mpc(-0.1, 1.0).is_err());
        assert!(c.comoving_distance_mpc(1.0, 0.5).is_err());
        assert!(c.comoving_distance_mpc(0.0, f64::NAN).is_err());
        assert_eq!(c.comoving_distance_mpc(1.3, 1.3).unwrap(), 0.0);
        assert!(Cosmology::new(0.0, 0.3).is_err());
        assert!(Cosmology::new(70.0, 0.0).is_err());
        assert!(Cosmology::new(70.0, 1.5).is_err());
    }

    #[test]
    fn scene_validation_and_sigma_crit_floor() {
        let scene = LensScene::default();
        assert!(LensScene::new(Cosmology::default(), 0.0, 2.0).is_err());
        assert!(LensScene::new(Cosmology::default(), 2.0, 0.5).is_err());
        // Inside the D_LS floor: rejected.
        assert!(matches!(
            scene.sigma_crit(scene.z_lens + 0.5e-4),
            Err(CosmoError::SourceTooClose { .. })
        ));
        assert!(scene.sigma_crit(scene.z_lens + 2e-4).is_ok());
    }

    #[test]
    fn sigma_crit_is_strictly_decreasing_in_z_source() {
        let scene = LensScene::default();
        let mut prev = f64::INFINITY;
        let mut z = scene.z_lens + 0.01;
        while z <= 6.0 {
            let s = scene.sigma_crit(z).unwrap();
            assert!(s < prev, "sigma_crit not decreasing at z={z}");
            prev = s;
            z += 0.05;
        }
    }

    #[test]
    fn kappa_rescale_monotone_and_anchored() {
        let scene = LensScene::default();
        assert_relative_eq!(scene.kappa_rescale(scene.z_ref).unwrap(), 1.0, epsilon = 1e-12);
        // Strictly increasing in z_source.
        let mut prev = 0.0;
        let mut z = scene.z_lens + 0.01;
        while z <= 6.0 {
            let f = scene.kappa_rescale(z).unwrap();
            assert!(f > prev, "kappa_rescale not increasing at z={z}");
            prev = f;
            z += 0.05;
        }
        // Tends to zero toward the lens plane.
        assert!(scene.kappa_rescale(scene.z_lens + 2e-4).unwrap() < 1e-3);
        // Matches the sigma_crit ratio definition.
        let z_s = 3.3;
        let ratio = scene.sigma_crit(scene.z_ref).unwrap() / scene.sigma_crit(z_s).unwrap();
        assert_relative_eq!(scene.kappa_rescale(z_s).unwrap(), ratio, max_relative = 1e-12);
    }

    /// Full constant-by-constant SI recomputation of Σ_cr, then an
    /// independent unit conversion into 10¹⁰ M⊙/h per (ckpc/h)².
    #[test]
    fn sigma_crit_matches_si_oracle() {
        let scene = LensScene::default();
        let z_s = 2.0;

        // Independent distances: trapezoid rule, 2e5 panels.
        let trapezoid = |z1: f64, z2: f64| -> f64 {
            let c = 2.997_924_58e8_f64; // m/s
            let h0 = 67.74 * 1.0e3 / MPC_M; // 1/s
            let om = 0.3089;
            let e = |z: f64| (om * (1.0 + z).powi(3) + (1.0 - om)).sqrt();
            let n = 200_000;
            let h = (z2 - z1) / n as f64;
            let mut acc = 0.5 * (1.0 / e(z1) + 1.0 / e(z2));
            for i in 1..n {
                acc += 1.0 / e(z1 + i as f64 * h);
            }
            c / h0 * acc * h // comoving distance in metres
        };
        let d_l = trapezoid(0.0, 0.5) / 1.5;
        let d_s = trapezoid(0.0, z_s) / (1.0 + z_s);
        let d_ls = (trapezoid(0.0, z_s) - trapezoid(0.0, 0.5)) / (1.0 + z_s);

        let c = 2.997_924_58e8_f64;
        let g = 6.674_30e-11_f64;
        let sigma_si = c * c / (4.0 * std::f64::consts::PI * g) * d_s / (d_l * d_ls); // kg/m²

        // kg/m² (physical) -> 10^10 Msun/h per (ckpc/h)^2 (comoving at lens).
        let h_dimless = 0.6774;
        let kpc = 3.085_677_581_491_367e19_f64;
        let msun = 1.988_409_87e30_f64;
        let oracle = sigma_si * kpc * kpc / (1.0e10 * msun * h_dimless * 1.5 * 1.5);

        let got = scene.sigma_crit(z_s).unwrap();
        assert_relative_eq!(got, oracle, max_relative = 1e-6);
        assert_relative_eq!(scene.sigma_crit_si(z_s).unwrap(), sigma_si, max_relative = 1e-6);
    }

    /// Pins the comoving-plate-scale convention: for the default cosmology a
    /// 100" field at 512 pixels and z_lens = 0.5 gives pixel areas of about
    /// 1.56 (ckpc/h)².
    #[test]
    fn pixel_area_matches_reference_plate_scale() {
        let scene = LensScene::default();
        let per_arcsec = scene.ckpc_h_per_arcsec().unwrap();
        let pix = 100.0 / 512.0 * per_arcsec;
        assert_relative_eq!(pix * pix, 1.56, epsilon = 0.01);
    }
}
