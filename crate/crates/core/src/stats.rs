//! Numerical kernels shared by the analyses: covariance, symmetric
//! eigendecomposition, participation ratio, rank correlation and paired
//! t-tests.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};

/// Leading eigenpairs of a covariance matrix.
#[derive(Debug, Clone, Serialize)]
pub struct EigenBasis {
    /// Descending, non-negative.
    pub eigenvalues: Array1<f64>,
    /// `d x K`, orthonormal columns.
    pub eigenvectors: Array2<f64>,
    /// Trace of the full matrix the basis was taken from.
    pub source_trace: f64,
}

impl EigenBasis {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.eigenvectors.nrows()
    }

    /// Keep only the modes at `indices`, preserving order.
    pub fn select(&self, indices: &[usize]) -> EigenBasis {
        EigenBasis {
            eigenvalues: self.eigenvalues.select(Axis(0), indices),
            eigenvectors: self.eigenvectors.select(Axis(1), indices),
            source_trace: self.source_trace,
        }
    }
}

/// Unbiased sample covariance of the rows of `data`.
pub fn covariance(data: &Array2<f64>) -> Result<Array2<f64>> {
    let n = data.nrows();
    if n < 2 {
        return Err(Error::TooFewSamples { required: 2, found: n });
    }
    let mean = data.mean_axis(Axis(0)).expect("nonempty");
    let centered = data - &mean;
    let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    // exact symmetry
    let d = cov.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    Ok(cov)
}

fn max_asymmetry(m: &Array2<f64>) -> (f64, f64) {
    let mut asym = 0.0f64;
    let mut scale = 0.0f64;
    for ((i, j), &v) in m.indexed_iter() {
        asym = asym.max((v - m[[j, i]]).abs());
        scale = scale.max(v.abs());
    }
    (asym, scale)
}

/// Top-`k` eigenpairs of a symmetric positive semidefinite matrix.
///
/// Eigenvalues within `1e-9 * max|λ|` below zero are clamped to zero; more
/// negative values are rejected. Signs and the order of tied eigenvectors are
/// unspecified.
pub fn top_k_eigen(cov: &Array2<f64>, k: usize) -> Result<EigenBasis> {
    let d = cov.nrows();
    if cov.ncols() != d {
        return Err(Error::DimensionMismatch(d, cov.ncols()));
    }
    if k > d {
        return Err(Error::TooManyModes { k, dim: d });
    }
    let (asym, scale) = max_asymmetry(cov);
    if asym > 1e-8 * scale.max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let m = DMatrix::from_fn(d, d, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-9 * top.max(f64::MIN_POSITIVE);
    let mut values = Array1::zeros(k);
    let mut vectors = Array2::zeros((d, k));
    for (slot, &idx) in order.iter().take(k).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda < -tol {
            return Err(Error::NotPositiveSemidefinite(lambda));
        }
        values[slot] = lambda.max(0.0);
        for r in 0..d {
            vectors[[r, slot]] = eig.eigenvectors[(r, idx)];
        }
    }
    Ok(EigenBasis {
        eigenvalues: values,
        eigenvectors: vectors,
        source_trace: cov.diag().sum(),
    })
}

/// `(Σλ)² / Σλ²`.
pub fn participation_ratio(eigenvalues: &[f64]) -> Result<f64> {
    if let Some(&neg) = eigenvalues.iter().find(|&&l| l < 0.0) {
        return Err(Error::NotPositiveSemidefinite(neg));
    }
    let sum: f64 = eigenvalues.iter().sum();
    if sum <= 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    let sq: f64 = eigenvalues.iter().map(|l| l * l).sum();
    Ok(sum * sum / sq)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with a two-sided p-value from the
/// t-approximation on `n - 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(Error::TooFewSamples { required: 3, found: x.len() });
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y)).ok_or(Error::ConstantInput)?;
    let dof = (x.len() - 2) as f64;
    let p = if (1.0 - rho.abs()) < 1e-15 {
        0.0
    } else {
        let t = rho * (dof / (1.0 - rho * rho)).sqrt();
        student_t_two_sided(t, dof)
    };
    Ok((rho, p))
}

/// One-sample t-test of `deltas` against zero.
pub fn paired_t(deltas: &[f64]) -> Result<(f64, f64)> {
    let n = deltas.len();
    if n < 2 {
        return Err(Error::TooFewSamples { required: 2, found: n });
    }
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if var <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    Ok((t, student_t_two_sided(t, (n - 1) as f64)))
}

/// `log Σ exp(x_i)` without overflow.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log softmax(x)_a`, computed as `−log1p(Σ_{k≠a} e^{x_k − x_a})` when
/// `x_a` is the largest logit so probabilities near one keep their digits.
pub fn log_softmax_at(x: &[f64], a: usize) -> f64 {
    let others = x.iter().enumerate().filter(|&(k, _)| k != a).map(|(_, &v)| v);
    let top = others.clone().fold(f64::NEG_INFINITY, f64::max);
    if top <= x[a] {
        -others.map(|v| (v - x[a]).exp()).sum::<f64>().ln_1p()
    } else {
        x[a] - log_sum_exp(x)
    }
}

/// `e_a − softmax(x)`, with the `a` entry summed from the other
/// probabilities instead of `1 − p_a`.
pub fn one_hot_residual(x: &[f64], a: usize) -> Vec<f64> {
    let mut coef: Vec<f64> = softmax(x).into_iter().map(|p| -p).collect();
    coef[a] = 0.0;
    coef[a] = -coef.iter().sum::<f64>();
    coef
}

/// Softmax probabilities of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| (v - lse).exp()).collect()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `P(|T| >= |t|)` for Student-t with `dof` degrees of freedom.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = dof / (dof + t * t);
    regularized_incomplete_beta(x, dof / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` by the modified Lentz continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
