//! Small statistics toolkit: summaries, regression, goodness-of-fit tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_err: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, std_err: f64::NAN, count: 0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_err, count: n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Standard error of the slope (NaN with fewer than three points).
    pub slope_se: f64,
}

/// Ordinary least squares `y = intercept + slope * x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> LineFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_se = if x.len() > 2 { (sse / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    LineFit { slope, intercept, r_squared, slope_se }
}

/// Linear-interpolated quantile of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov-Smirnov test. Sorts both inputs in place.
pub fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> KsResult {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let v = a[i].min(b[j]);
        while i < na && a[i] <= v {
            i += 1;
        }
        while j < nb && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let sq = ne.sqrt();
    KsResult { statistic: d, p_value: kolmogorov_q((sq + 0.12 + 0.11 / sq) * d) }
}

/// Complementary Kolmogorov distribution `Q(l) = 2 sum (-1)^(k-1) exp(-2 k^2 l^2)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Upper-tail probability of a chi-square statistic.
pub fn chi_square_p_value(statistic: f64, dof: usize) -> f64 {
    let dist = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(statistic)
}

/// Log-log slope with its standard error propagated from the standard errors of
/// the means (delta method, points treated as independent).
pub fn loglog_slope(x: &[f64], means: &[f64], std_errs: &[f64]) -> (LineFit, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = means.iter().map(|v| v.ln()).collect();
    let fit = fit_line(&lx, &ly);
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let var: f64 = lx
        .iter()
        .zip(means.iter().zip(std_errs))
        .map(|(a, (m, s))| ((a - mx) / sxx).powi(2) * (s / m).powi(2))
        .sum();
    (fit, var.sqrt())
}

/// Least squares without intercept under nonnegative coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnlsFit {
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
}

/// Exact nonnegative least squares for a handful of regressors: every active
/// set is solved by ordinary least squares and the best feasible one is kept.
pub fn nnls_small(columns: &[Vec<f64>], y: &[f64]) -> NnlsFit {
    let k = columns.len();
    assert!(k <= 12, "nnls_small enumerates active sets");
    let n = y.len();
    let my = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let sse_of = |coef: &[f64]| -> f64 {
        (0..n)
            .map(|i| {
                let pred: f64 = (0..k).map(|j| coef[j] * columns[j][i]).sum();
                (y[i] - pred).powi(2)
            })
            .sum()
    };
    let mut best = (vec![0.0; k], sse_of(&vec![0.0; k]));
    for mask in 1u32..(1 << k) {
        let active: Vec<usize> = (0..k).filter(|j| mask & (1 << j) != 0).collect();
        let a = active.len();
        let mut m = vec![vec![0.0; a + 1]; a];
        for (r, &jr) in active.iter().enumerate() {
            for (c, &jc) in active.iter().enumerate() {
                m[r][c] = (0..n).map(|i| columns[jr][i] * columns[jc][i]).sum();
            }
            m[r][a] = (0..n).map(|i| columns[jr][i] * y[i]).sum();
        }
        let Some(sol) = solve_augmented(m) else { continue };
        if sol.iter().any(|v| *v < 0.0) {
            continue;
        }
        let mut coef = vec![0.0; k];
        active.iter().zip(&sol).for_each(|(&j, &v)| coef[j] = v);
        let sse = sse_of(&coef);
        if sse < best.1 {
            best = (coef, sse);
        }
    }
    let r_squared = if sst > 0.0 { 1.0 - best.1 / sst } else { 1.0 };
    NnlsFit { coefficients: best.0, r_squared }
}

fn solve_augmented(mut m: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let a = m.len();
    for col in 0..a {
        let piv = (col..a).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        for r in 0..a {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..=a {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    Some((0..a).map(|r| m[r][a] / m[r][r]).collect())
}
