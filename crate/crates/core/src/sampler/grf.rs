//! Stationary Gaussian random-field prior with a power-law spectrum.
//!
//! A desk-scale stand-in for a learned score model: the prior is the
//! zero-mean Gaussian with spectral density `S(k) = amplitude·k^slope`
//! (k in cycles per arcsec, floored at the fundamental mode so the red
//! spectrum stays finite at DC). Because Gaussians are closed under
//! Gaussian smoothing, the score of the σ-noised marginal is exact:
//! in the Fourier domain it is simply `−x̂(k) / (S(k) + σ²)`.

use std::fmt;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::grid::{AngularGrid, PhotometryStack, Quantity, ScalarField};
use crate::sampler::{SamplerError, ScorePrior};

/// Gaussian random-field prior over normalized maps.
pub struct GrfPrior {
    power_slope: f64,
    amplitude: f64,
    plans: Mutex<PlanCache>,
}

struct PlanCache {
    n: usize,
    fwd: Option<Arc<dyn Fft<f64>>>,
    inv: Option<Arc<dyn Fft<f64>>>,
}

impl GrfPrior {
    /// A prior with `S(k) ∝ amplitude·k^power_slope`.
    ///
    /// The slope must be negative: a flat or blue spectrum has divergent
    /// normalization in the continuum limit and does not define a usable
    /// field prior.
    pub fn new(power_slope: f64, amplitude: f64) -> Result<Self, SamplerError> {
        if !power_slope.is_finite() || power_slope >= 0.0 {
            return Err(SamplerError::InvalidArgument(format!(
                "power-law slope must be negative (divergent normalization otherwise), got {power_slope}"
            )));
        }
        if !amplitude.is_finite() || amplitude <= 0.0 {
            return Err(SamplerError::InvalidArgument(format!(
                "spectral amplitude must be finite and positive, got {amplitude}"
            )));
        }
        Ok(Self {
            power_slope,
            amplitude,
            plans: Mutex::new(PlanCache { n: 0, fwd: None, inv: None }),
        })
    }

    pub fn power_slope(&self) -> f64 {
        self.power_slope
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Spectral density per Fourier mode of `grid`, row-major over the
    /// unshifted FFT layout; the DC and sub-fundamental modes are floored
    /// at the fundamental `k = 1/fov`.
    pub fn spectrum(&self, grid: AngularGrid) -> Vec<f64> {
        let n = grid.n_pix();
        let fov = grid.fov_arcsec();
        let k_floor = 1.0 / fov;
        let mut spec = Vec::with_capacity(n * n);
        for iy in 0..n {
            let fy = signed_frequency(iy, n);
            for ix in 0..n {
                let fx = signed_frequency(ix, n);
                let k = (fx * fx + fy * fy).sqrt() / fov;
                spec.push(self.amplitude * k.max(k_floor).powf(self.power_slope));
            }
        }
        spec
    }

    /// Draws one field from the prior by coloring white noise in the
    /// Fourier domain.
    pub fn sample(&self, grid: AngularGrid, rng: &mut impl Rng) -> ScalarField {
        let n = grid.n_pix();
        let mut buf: Vec<Complex<f64>> = (0..n * n)
            .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
            .collect();
        let (fwd, inv) = self.plans_for(n);
        fft2(&mut buf, n, &fwd);
        for (b, s) in buf.iter_mut().zip(self.spectrum(grid)) {
            *b *= s.sqrt();
        }
        fft2(&mut buf, n, &inv);
        let norm = (n * n) as f64;
        let values = buf.iter().map(|c| c.re / norm).collect();
        ScalarField::new(grid, Quantity::Generic, values)
            .expect("sample buffer matches the grid length")
    }

    fn plans_for(&self, n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
        let mut cache = self.plans.lock().expect("FFT plan cache poisoned");
        if cache.n != n || cache.fwd.is_none() {
            let mut planner = FftPlanner::new();
            cache.fwd = Some(planner.plan_fft_forward(n));
            cache.inv = Some(planner.plan_fft_inverse(n));
            cache.n = n;
        }
        (cache.fwd.clone().unwrap(), cache.inv.clone().unwrap())
    }
}

impl fmt::Debug for GrfPrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GrfPrior")
            .field("power_slope", &self.power_slope)
            .field("amplitude", &self.amplitude)
            .finish()
    }
}

impl ScorePrior for GrfPrior {
    fn score(
        &self,
        x: &ScalarField,
        sigma: f64,
        _conditioning: Option<&PhotometryStack>,
    ) -> Result<ScalarField, SamplerError> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(SamplerError::InvalidArgument(format!(
                "noise level must be finite and non-negative, got {sigma}"
            )));
        }
        let grid = x.grid();
        let n = grid.n_pix();
        let mut buf: Vec<Complex<f64>> =
            x.values().iter().map(|&v| Complex::new(v, 0.0)).collect();
        let (fwd, inv) = self.plans_for(n);
        fft2(&mut buf, n, &fwd);
        let s2 = sigma * sigma;
        for (b, s) in buf.iter_mut().zip(self.spectrum(grid)) {
            *b /= -(s + s2);
        }
        fft2(&mut buf, n, &inv);
        let norm = (n * n) as f64;
        let values = buf.iter().map(|c| c.re / norm).collect();
        Ok(ScalarField::new(grid, Quantity::Generic, values)?)
    }

    fn name(&self) -> String {
        format!("grf(slope={}, amplitude={})", self.power_slope, self.amplitude)
    }
}

/// Signed integer frequency for index `i` of an unshifted length-`n` FFT.
fn signed_frequency(i: usize, n: usize) -> f64 {
    let i = i as i64;
    let n = n as i64;
    if i <= n / 2 {
        i as f64
    } else {
        (i - n) as f64
    }
}

/// In-place 2-D FFT of a row-major square buffer (row passes with
/// transposes, matching the lensing operator's convention).
fn fft2(buf: &mut [Complex<f64>], n: usize, fft: &Arc<dyn Fft<f64>>) {
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    for row in buf.chunks_exact_mut(n) {
        fft.process_with_scratch(row, &mut scratch);
    }
    transpose_square(buf, n);
    for row in buf.chunks_exact_mut(n) {
        fft.process_with_scratch(row, &mut scratch);
    }
    transpose_square(buf, n);
}

fn transpose_square(buf: &mut [Complex<f64>], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;

    fn grid16() -> AngularGrid {
        AngularGrid::new(16, 16.0).unwrap()
    }

    fn white_field(grid: AngularGrid, seed: u64) -> ScalarField {
        let mut rng = stream_rng(seed, &[0x47_52_46]);
        let values =
            (0..grid.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        ScalarField::new(grid, Quantity::Generic, values).unwrap()
    }

    /// Direct O(N⁴) 2-D DFT, the independent slow path for oracle checks.
    fn naive_dft2(values: &[Complex<f64>], n: usize, sign: f64) -> Vec<Complex<f64>> {
        let mut out = vec![Complex::new(0.0, 0.0); n * n];
        for v in 0..n {
            for u in 0..n {
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let phase = sign
                            * 2.0
                            * std::f64::consts::PI
                            * ((u * x) as f64 + (v * y) as f64)
                            / n as f64;
                        acc += values[y * n + x] * Complex::new(phase.cos(), phase.sin());
                    }
                }
                out[v * n + u] = acc;
            }
        }
        out
    }

    #[test]
    fn construction_rejects_unnormalizable_spectra() {
        for slope in [0.0, 1.5, f64::NAN, f64::INFINITY] {
            assert!(GrfPrior::new(slope, 1.0).is_err(), "slope {slope} must be rejected");
        }
        for amplitude in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(
                GrfPrior::new(-2.0, amplitude).is_err(),
                "amplitude {amplitude} must be rejected"
            );
        }
        let prior = GrfPrior::new(-2.0, 0.1).unwrap();
        assert_eq!(prior.power_slope(), -2.0);
        assert_eq!(prior.amplitude(), 0.1);
        assert!(prior.name().starts_with("grf("));
    }

    #[test]
    fn spectrum_respects_the_fundamental_floor_and_symmetry() {
        let grid = grid16();
        let prior = GrfPrior::new(-2.0, 0.1).unwrap();
        let spec = prior.spectrum(grid);
        let n = grid.n_pix();

        // DC is floored at the fundamental mode, so it equals S(1/fov).
        let fundamental = 0.1 * (1.0 / 16.0_f64).powf(-2.0);
        assert_relative_eq!(spec[0], fundamental, max_relative = 1e-12);
        assert_relative_eq!(spec[1], fundamental, max_relative = 1e-12);

        // |k| symmetry: S(f) = S(n − f) along both axes.
        for i in 1..n {
            assert_relative_eq!(spec[i], spec[n - i], max_relative = 1e-12);
            assert_relative_eq!(spec[i * n], spec[(n - i) * n], max_relative = 1e-12);
        }

        // A red spectrum decreases with |k| beyond the floor.
        for f in 2..=n / 2 {
            assert!(spec[f] < spec[f - 1], "S must decrease along the axis");
        }
    }

    #[test]
    fn score_is_linear_and_vanishes_at_zero() {
        let grid = grid16();
        let prior = GrfPrior::new(-2.0, 0.1).unwrap();

        let zero = ScalarField::zeros(grid, Quantity::Generic);
        let score = prior.score(&zero, 1.0, None).unwrap();
        assert!(score.values().iter().all(|&v| v.abs() == 0.0));

        let a = white_field(grid, 3);
        let b = white_field(grid, 4);
        let combo_values: Vec<f64> =
            a.values().iter().zip(b.values()).map(|(&x, &y)| x + 2.0 * y).collect();
        let combo = ScalarField::new(grid, Quantity::Generic, combo_values).unwrap();
        let sa = prior.score(&a, 0.7, None).unwrap();
        let sb = prior.score(&b, 0.7, None).unwrap();
        let sc = prior.score(&combo, 0.7, None).unwrap();
        for ((&c, &x), &y) in sc.values().iter().zip(sa.values()).zip(sb.values()) {
            assert_relative_eq!(c, x + 2.0 * y, max_relative = 1e-10, epsilon = 1e-12);
        }

        assert!(prior.score(&a, f64::NAN, None).is_err());
        assert!(prior.score(&a, -0.5, None).is_err());

        // The stationary prior is unconditional: photometry is ignored.
        let stack = PhotometryStack::zeros(grid);
        let conditioned = prior.score(&a, 0.7, Some(&stack)).unwrap();
        assert_eq!(conditioned.values(), sa.values());
    }

    #[test]
    fn score_matches_the_conjugate_gaussian_oracle() {
        let grid = grid16();
        let n = grid.n_pix();
        let fov = grid.fov_arcsec();
        let prior = GrfPrior::new(-2.0, 0.1).unwrap();
        let x = white_field(grid, 11);

        for sigma in [0.0, 0.3, 10.0] {
            let got = prior.score(&x, sigma, None).unwrap();

            // Independent path: slow DFT, exact Gaussian filter, slow
            // inverse. The smoothed marginal of a stationary Gaussian is
            // Gaussian, so its score per mode is −x̂ / (S + σ²).
            let input: Vec<Complex<f64>> =
                x.values().iter().map(|&v| Complex::new(v, 0.0)).collect();
            let mut hat = naive_dft2(&input, n, -1.0);
            for iy in 0..n {
                let fy = if iy <= n / 2 { iy as f64 } else { iy as f64 - n as f64 };
                for ix in 0..n {
                    let fx = if ix <= n / 2 { ix as f64 } else { ix as f64 - n as f64 };
                    let k = ((fx * fx + fy * fy).sqrt() / fov).max(1.0 / fov);
                    let s = 0.1 * k.powf(-2.0);
                    hat[iy * n + ix] /= -(s + sigma * sigma);
                }
            }
            let back = naive_dft2(&hat, n, 1.0);
            for (&g, c) in got.values().iter().zip(&back) {
                assert_relative_eq!(
                    g,
                    c.re / (n * n) as f64,
                    max_relative = 1e-8,
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn samples_follow_the_target_spectrum() {
        let grid = grid16();
        let n = grid.n_pix();
        let prior = GrfPrior::new(-2.0, 0.1).unwrap();
        let draws = 600;

        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let mut power = vec![0.0; n * n];
        let mut rng = stream_rng(23, &[0x53_50_45_43]);
        for _ in 0..draws {
            let field = prior.sample(grid, &mut rng);
            assert!(field.values().iter().all(|v| v.is_finite()));
            let mut buf: Vec<Complex<f64>> =
                field.values().iter().map(|&v| Complex::new(v, 0.0)).collect();
            fft2(&mut buf, n, &fft);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p += c.norm_sqr() / ((n * n) as f64 * draws as f64);
            }
        }

        let target = prior.spectrum(grid);
        let mut got = vec![0.0; 9];
        let mut want = vec![0.0; 9];
        for iy in 0..n {
            let fy = if iy <= n / 2 { iy as f64 } else { iy as f64 - n as f64 };
            for ix in 0..n {
                let fx = if ix <= n / 2 { ix as f64 } else { ix as f64 - n as f64 };
                let ring = (fx * fx + fy * fy).sqrt().round() as usize;
                if ring == 0 || ring > 8 {
                    continue;
                }
                got[ring] += power[iy * n + ix];
                want[ring] += target[iy * n + ix];
            }
        }
        for ring in 1..=8 {
            let rel = (got[ring] - want[ring]).abs() / want[ring];
            assert!(
                rel < 0.10,
                "ring {ring}: sampled power off by {rel:.3} from the spectral density"
            );
        }
    }
}
