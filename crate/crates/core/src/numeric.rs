//! Small numeric building blocks shared across modules: compensated
//! summation, percentiles, an in-place Cholesky solver for small dense
//! symmetric positive-definite systems, and simple linear regression.

/// Kahan–Babuška (Neumaier) compensated sum.
///
/// Used wherever a long reduction feeds a tight tolerance (mass
/// conservation, flux conservation, mean subtraction).
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Arithmetic mean with compensated summation. Returns 0 for empty input.
pub fn compensated_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Linear-interpolation percentile of `values` (q in [0, 1]).
///
/// Sorts a copy; intended for moderate input sizes (catalogs, pixel maps).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] * (1.0 - frac) + sorted[hi] * frac)
}

/// In-place Cholesky factorisation of a row-major `n x n` SPD matrix.
///
/// On success the lower triangle of `a` holds `L` with `A = L Lᵀ`.
/// Returns `false` if a non-positive pivot is encountered.
pub fn cholesky_factor(a: &mut [f64], n: usize) -> bool {
    assert_eq!(a.len(), n * n, "matrix buffer must be n*n");
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let ljj = d.sqrt();
        a[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
    }
    true
}

/// Solves `L Lᵀ x = b` in place given the factor produced by
/// [`cholesky_factor`]; `b` is overwritten with the solution.
pub fn cholesky_solve_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    assert_eq!(l.len(), n * n);
    assert_eq!(b.len(), n);
    // Forward substitution: L y = b.
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    // Back substitution: Lᵀ x = y.
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Natural log of the Gamma function via the Lanczos approximation
/// (g = 7, 9 terms), accurate to ~1e-13 relative for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    assert!(x > 0.0, "ln_gamma requires x > 0, got {x}");
    if x < 0.5 {
        // Reflection formula keeps accuracy for small arguments.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993_f64;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + (i + 1) as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Gamma function for moderate positive arguments.
pub fn gamma(x: f64) -> f64 {
    ln_gamma(x).exp()
}

/// Standard normal CDF Φ(x) via the Zelen–Severo rational approximation
/// (absolute error < 7.5e-8), adequate for hypothesis-test p-values.
pub fn normal_cdf(x: f64) -> f64 {
    const B: [f64; 5] = [0.319381530, -0.356563782, 1.781477937, -1.821255978, 1.330274429];
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.2316419 * z);
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut poly = 0.0;
    for &b in B.iter().rev() {
        poly = (poly + b) * t;
    }
    let upper = pdf * poly;
    if x >= 0.0 {
        1.0 - upper
    } else {
        upper
    }
}

/// Inverse standard normal CDF Φ⁻¹(p) via Acklam's rational approximation
/// (relative error < 1.2e-9 on (0, 1)).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "inverse_normal_cdf requires p in (0, 1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Shapiro–Wilk normality test (Royston's AS R94 approximation).
///
/// Returns `(W, p)` for samples of size 12 ..= 5000, or `None` outside that
/// range or for zero-variance input. The p-value is the upper tail of the
/// normalized `ln(1 - W)` statistic.
pub fn shapiro_wilk(data: &[f64]) -> Option<(f64, f64)> {
    let n = data.len();
    if !(12..=5000).contains(&n) {
        return None;
    }
    let mut x: Vec<f64> = data.to_vec();
    x.sort_by(f64::total_cmp);

    // Expected normal order statistics (Blom scores) and their norm.
    let nf = n as f64;
    let m: Vec<f64> =
        (1..=n).map(|i| inverse_normal_cdf((i as f64 - 0.375) / (nf + 0.25))).collect();
    let ssq_m: f64 = m.iter().map(|v| v * v).sum();

    // Royston's polynomial corrections to the two extreme weights.
    let rsn = 1.0 / nf.sqrt();
    let poly = |c: &[f64], base: f64| -> f64 {
        let mut acc = base;
        let mut pw = 1.0;
        for &coef in c {
            pw *= rsn;
            acc += coef * pw;
        }
        acc
    };
    let c_n = m[n - 1] / ssq_m.sqrt();
    let c_n1 = m[n - 2] / ssq_m.sqrt();
    let a_n = poly(&[0.221157, -0.147981, -2.071190, 4.434685, -2.706056], c_n);
    let a_n1 = poly(&[0.042981, -0.293762, -1.752461, 5.682633, -3.582633], c_n1);
    let phi = (ssq_m - 2.0 * m[n - 1] * m[n - 1] - 2.0 * m[n - 2] * m[n - 2])
        / (1.0 - 2.0 * a_n * a_n - 2.0 * a_n1 * a_n1);
    if phi <= 0.0 {
        return None;
    }
    let mut a = vec![0.0; n];
    a[n - 1] = a_n;
    a[n - 2] = a_n1;
    a[0] = -a_n;
    a[1] = -a_n1;
    for i in 2..n - 2 {
        a[i] = m[i] / phi.sqrt();
    }

    let mean = compensated_mean(&x);
    let ssq: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ssq <= 0.0 || !ssq.is_finite() {
        return None;
    }
    let s: f64 = a.iter().zip(&x).map(|(ai, xi)| ai * xi).sum();
    let w = (s * s / ssq).min(1.0);

    // Normalizing transformation for 12 <= n <= 5000 (Royston 1995).
    let y = (1.0 - w).max(1e-300).ln();
    let ln_n = nf.ln();
    let mu = -1.5861 - 0.31082 * ln_n - 0.083751 * ln_n * ln_n + 0.0038915 * ln_n.powi(3);
    let sd = (-0.4803 - 0.082676 * ln_n + 0.0030302 * ln_n * ln_n).exp();
    let z = (y - mu) / sd;
    Some((w, normal_cdf(-z)))
}

/// Ordinary least-squares fit `y = slope * x + intercept`.
///
/// Returns `(slope, intercept, r_squared)`, or `None` when fewer than two
/// points are given or `x` has zero variance (a degenerate fit).
pub fn linear_fit(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    Some((slope, intercept, r2))
}
