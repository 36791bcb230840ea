//! Unit-root (ADF) and level-stationarity (KPSS) tests over embedding
//! dimensions, and a raw-versus-normalised report built from them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;
use nalgebra::{DMatrix, DVector};
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::decomposition::EmbeddingSequence;
use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::stationarity::normalize;

/// Shortest series either test accepts.
pub const MIN_LEN: usize = 20;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub stat: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdfResult {
    pub stat: f64,
    pub p: f64,
    /// Number of lagged differences chosen by AIC.
    pub lags: usize,
    pub nobs: usize,
}

/// MacKinnon (1994) response-surface p-value for the constant-only
/// Dickey–Fuller t statistic with one series.
pub fn adf_pvalue(stat: f64) -> f64 {
    const TAU_MAX: f64 = 2.74;
    const TAU_MIN: f64 = -18.83;
    const TAU_STAR: f64 = -1.61;
    if stat > TAU_MAX {
        return 1.0;
    }
    if stat < TAU_MIN {
        return 0.0;
    }
    let poly = if stat <= TAU_STAR {
        2.1659 + 1.4412 * stat + 0.038269 * stat * stat
    } else {
        1.7339 + 0.93202 * stat - 0.12745 * stat * stat - 0.010368 * stat * stat * stat
    };
    normal_cdf(poly)
}

/// MacKinnon (2010) finite-sample critical values at 1%, 5% and 10% for
/// the constant-only regression with `nobs` observations.
pub fn adf_critical_values(nobs: usize) -> [(f64, f64); 3] {
    let n = nobs as f64;
    let cv = |b: [f64; 3]| b[0] + b[1] / n + b[2] / (n * n);
    [
        (0.01, cv([-3.43035, -6.5393, -16.786])),
        (0.05, cv([-2.86154, -2.8903, -4.234])),
        (0.10, cv([-2.56677, -1.5384, -2.809])),
    ]
}

/// Least-squares fit returning coefficients, residual sum of squares and
/// the standard error of coefficient `se_of`.
fn ols(x: &DMatrix<f64>, y: &DVector<f64>, se_of: usize) -> Option<(DVector<f64>, f64, f64)> {
    let (n, k) = x.shape();
    if n <= k {
        return None;
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    if !(scale > 0.0) || r.diagonal().iter().any(|d| d.abs() <= 1e-10 * scale) {
        return None;
    }
    let qty = qr.q().transpose() * y;
    let beta = r.solve_upper_triangular(&qty)?;
    let resid = y - x * &beta;
    let ssr = resid.norm_squared();
    let r_inv = r.solve_upper_triangular(&DMatrix::identity(k, k))?;
    let var = r_inv.row(se_of).norm_squared();
    let sigma2 = ssr / (n - k) as f64;
    Some((beta, ssr, (sigma2 * var).sqrt()))
}

/// Regressors `[1, y_{t-1}, Δy_{t-1}, …, Δy_{t-p}]` for `t` in `first..n`.
fn adf_design(y: &[f64], dy: &[f64], p: usize, first: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows = y.len() - first;
    let x = DMatrix::from_fn(rows, 2 + p, |r, c| {
        let t = first + r;
        match c {
            0 => 1.0,
            1 => y[t - 1],
            _ => dy[t - 1 - (c - 1)],
        }
    });
    // dy[i] = y[i+1] - y[i], so Δy_t = dy[t-1].
    let target = DVector::from_fn(rows, |r, _| dy[first + r - 1]);
    (x, target)
}

/// Default maximum lag `⌊12·(n/100)^{1/4}⌋`, capped to keep the regression identified.
pub fn adf_max_lag(n: usize) -> usize {
    let l = (12.0 * (n as f64 / 100.0).powf(0.25)).floor() as usize;
    l.min(n / 2 - 3)
}

/// Augmented Dickey–Fuller test with a constant and no trend. The lag
/// order minimises AIC over `0..=max_lag` on a common sample, then the
/// chosen model is refitted on all available observations.
pub fn adf_test(series: &[f64], max_lag: Option<usize>) -> Result<AdfResult> {
    let n = series.len();
    if n < MIN_LEN {
        bail!(Input, "ADF needs at least {} observations, got {}", MIN_LEN, n);
    }
    if series.iter().any(|v| !v.is_finite()) {
        bail!(Input, "series contains non-finite values");
    }
    let max_lag = max_lag.unwrap_or_else(|| adf_max_lag(n)).min(adf_max_lag(n));
    let dy: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let degenerate = || crate::Error::Degenerate(String::from("ADF regression is singular (constant series?)"));

    let first = max_lag + 1;
    let mut best: Option<(f64, usize)> = None;
    for p in 0..=max_lag {
        let (x, y) = adf_design(series, &dy, p, first);
        let nobs = y.len() as f64;
        let Some((_, ssr, _)) = ols(&x, &y, 1) else {
            continue;
        };
        if ssr <= 0.0 {
            continue;
        }
        let aic = nobs * (ssr / nobs).ln() + 2.0 * (p + 2) as f64;
        if best.is_none_or(|(b, _)| aic < b) {
            best = Some((aic, p));
        }
    }
    let (_, lags) = best.ok_or_else(degenerate)?;
    let (x, y) = adf_design(series, &dy, lags, lags + 1);
    let (beta, ssr, se) = ols(&x, &y, 1).ok_or_else(degenerate)?;
    if !(se > 0.0) || !(ssr > 0.0) {
        return Err(degenerate());
    }
    let stat = beta[1] / se;
    Ok(AdfResult {
        stat,
        p: adf_pvalue(stat),
        lags,
        nobs: y.len(),
    })
}

/// Level-stationarity critical values `(statistic, p)`.
pub const KPSS_TABLE: [(f64, f64); 4] = [(0.347, 0.10), (0.463, 0.05), (0.574, 0.025), (0.739, 0.01)];

/// Linear interpolation in [`KPSS_TABLE`], clamped to `[0.01, 0.10]`.
pub fn kpss_pvalue(stat: f64) -> f64 {
    let (lo, hi) = (KPSS_TABLE[0], KPSS_TABLE[3]);
    if stat <= lo.0 {
        return lo.1;
    }
    if stat >= hi.0 {
        return hi.1;
    }
    for w in KPSS_TABLE.windows(2) {
        let ((s0, p0), (s1, p1)) = (w[0], w[1]);
        if stat <= s1 {
            return p0 + (p1 - p0) * (stat - s0) / (s1 - s0);
        }
    }
    hi.1
}

pub fn kpss_bandwidth(n: usize) -> usize {
    (4.0 * (n as f64 / 100.0).powf(0.25)).floor() as usize
}

/// KPSS level-stationarity test with a Bartlett long-run variance.
pub fn kpss_test(series: &[f64], bandwidth: Option<usize>) -> Result<TestResult> {
    let n = series.len();
    if n < MIN_LEN {
        bail!(Input, "KPSS needs at least {} observations, got {}", MIN_LEN, n);
    }
    if series.iter().any(|v| !v.is_finite()) {
        bail!(Input, "series contains non-finite values");
    }
    let lags = bandwidth.unwrap_or_else(|| kpss_bandwidth(n)).min(n - 1);
    let mean = series.iter().sum::<f64>() / n as f64;
    let e: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let mut lrv = e.iter().map(|v| v * v).sum::<f64>();
    for l in 1..=lags {
        let w = 1.0 - l as f64 / (lags as f64 + 1.0);
        let gamma: f64 = e[l..].iter().zip(&e[..n - l]).map(|(a, b)| a * b).sum();
        lrv += 2.0 * w * gamma;
    }
    lrv /= n as f64;
    let scale = series.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    if !(lrv > 1e-24 * scale * scale) {
        bail!(Degenerate, "KPSS long-run variance is zero (constant series?)");
    }
    let mut partial = 0.0;
    let mut eta = 0.0;
    for v in &e {
        partial += v;
        eta += partial * partial;
    }
    let stat = eta / (n as f64 * n as f64 * lrv);
    Ok(TestResult {
        stat,
        p: kpss_pvalue(stat),
    })
}

/// Two-sided exact sign test on paired samples; ties are discarded.
pub fn sign_test(a: &[f64], b: &[f64]) -> f64 {
    let (mut pos, mut m) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        if x != y {
            m += 1;
            if x > y {
                pos += 1;
            }
        }
    }
    if m == 0 {
        return 1.0;
    }
    let k = pos.min(m - pos);
    // P(X ≤ k) for X ~ Bin(m, 1/2), accumulated in log space.
    let mut ln_c = 0.0;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            ln_c += ((m - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_c - m as f64 * core::f64::consts::LN_2).exp();
    }
    (2.0 * tail).min(1.0)
}

/// How sequences are normalised before testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalizer {
    Identity,
    /// Each sequence with its own statistics, as the model does per clip.
    PerSequence,
    /// Each sequence cut into windows of this length, each window with its
    /// own statistics. A trailing remainder shorter than 2 joins the last window.
    Windowed(usize),
}

impl Normalizer {
    pub fn apply(&self, z: &EmbeddingSequence) -> Result<EmbeddingSequence> {
        match *self {
            Normalizer::Identity => Ok(z.clone()),
            Normalizer::PerSequence => Ok(normalize(z)?.0),
            Normalizer::Windowed(len) => {
                let (n, d) = z.dims2()?;
                if len < 2 {
                    bail!(Config, "normalisation window must be at least 2");
                }
                let mut out = Vec::with_capacity(n * d);
                let mut start = 0;
                while start < n {
                    let mut end = (start + len).min(n);
                    if n - end < 2 {
                        end = n;
                    }
                    if end - start < 2 {
                        out.extend_from_slice(&z.data()[start * d..end * d]);
                    } else {
                        out.extend(normalize(&z.rows(start, end)?)?.0.into_data());
                    }
                    start = end;
                }
                Tensor::new(&[n, d], out)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimensionStats {
    pub adf_stat: f64,
    pub adf_p: f64,
    pub kpss_stat: f64,
    pub kpss_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    pub raw: Vec<DimensionStats>,
    pub normalized: Vec<DimensionStats>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl StationarityReport {
    pub fn median_raw(&self) -> DimensionStats {
        aggregate(&self.raw)
    }

    pub fn median_normalized(&self) -> DimensionStats {
        aggregate(&self.normalized)
    }

    /// Sign-test p-value comparing raw and normalised ADF p-values across dimensions.
    pub fn adf_sign_test(&self) -> f64 {
        let a: Vec<f64> = self.raw.iter().map(|s| s.adf_p).collect();
        let b: Vec<f64> = self.normalized.iter().map(|s| s.adf_p).collect();
        sign_test(&a, &b)
    }

    /// Aligned text table of the medians: one row per statistic, raw and
    /// normalised columns.
    pub fn table(&self) -> String {
        let (r, n) = (self.median_raw(), self.median_normalized());
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>12}{:>12}", "", "raw", "normalized");
        for (label, a, b) in [
            ("ADF statistic", r.adf_stat, n.adf_stat),
            ("ADF p-value", r.adf_p, n.adf_p),
            ("KPSS statistic", r.kpss_stat, n.kpss_stat),
            ("KPSS p-value", r.kpss_p, n.kpss_p),
        ] {
            let _ = writeln!(s, "{label:<16}{a:>12.3}{b:>12.3}");
        }
        s
    }
}

fn aggregate(v: &[DimensionStats]) -> DimensionStats {
    DimensionStats {
        adf_stat: median(v.iter().map(|s| s.adf_stat).collect()),
        adf_p: median(v.iter().map(|s| s.adf_p).collect()),
        kpss_stat: median(v.iter().map(|s| s.kpss_stat).collect()),
        kpss_p: median(v.iter().map(|s| s.kpss_p).collect()),
    }
}

fn dimension_stats(series: &[f64]) -> Result<DimensionStats> {
    let adf = adf_test(series, None)?;
    let kpss = kpss_test(series, None)?;
    Ok(DimensionStats {
        adf_stat: adf.stat,
        adf_p: adf.p,
        kpss_stat: kpss.stat,
        kpss_p: kpss.p,
    })
}

/// Per-dimension columns of the sequences joined end to end in time.
fn concat_columns(seqs: &[EmbeddingSequence]) -> Result<Vec<Vec<f64>>> {
    let d = seqs[0].dims2()?.1;
    let mut cols = vec![Vec::new(); d];
    for z in seqs {
        let (n, dz) = z.dims2()?;
        if dz != d {
            bail!(Dimension, "sequences disagree on dimension ({} vs {})", dz, d);
        }
        for t in 0..n {
            for (c, v) in cols.iter_mut().zip(z.row(t)) {
                c.push(*v);
            }
        }
    }
    Ok(cols)
}

/// Runs both tests on every dimension of the raw and normalised
/// sequences. Sequences are concatenated in time before testing.
pub fn stationarity_report(seqs: &[EmbeddingSequence], normalizer: Normalizer) -> Result<StationarityReport> {
    if seqs.is_empty() {
        bail!(Input, "stationarity report needs at least one sequence");
    }
    let normed = seqs.iter().map(|z| normalizer.apply(z)).collect::<Result<Vec<_>>>()?;
    let stats = |cols: Vec<Vec<f64>>| {
        cols.iter()
            .enumerate()
            .map(|(j, c)| dimension_stats(c).map_err(|e| prefix(e, j)))
            .collect::<Result<Vec<_>>>()
    };
    Ok(StationarityReport {
        raw: stats(concat_columns(seqs)?)?,
        normalized: stats(concat_columns(&normed)?)?,
    })
}

fn prefix(e: crate::Error, dim: usize) -> crate::Error {
    use crate::Error::*;
    match e {
        Degenerate(m) => Degenerate(format!("dimension {dim}: {m}")),
        Input(m) => Input(format!("dimension {dim}: {m}")),
        other => other,
    }
}
