//! Instability statistics for batches of generated images: signal-to-noise
//! ratio, L1/L2 distances, per-image sample statistics and a two-sample
//! variance-ratio F-test.
//!
//! The F distribution is evaluated through the regularized incomplete beta
//! function (Lentz continued fraction, Lanczos log-gamma) and inverted by
//! bisection.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Signal-to-noise ratio in decibels, `10 log10(P_s / P_n)`, where powers
/// are mean squared values and the noise is `noisy - signal`. Zero noise
/// power yields `+inf`.
pub fn snr_db(signal: &[f64], noisy: &[f64]) -> Result<f64> {
    if signal.len() != noisy.len() || signal.is_empty() {
        return Err(Error::shape("snr_db", &[signal.len()], &[noisy.len()]));
    }
    let n = signal.len() as f64;
    let ps = signal.iter().map(|s| s * s).sum::<f64>() / n;
    let pn = signal.iter().zip(noisy).map(|(s, x)| (x - s).powi(2)).sum::<f64>() / n;
    if pn == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (ps / pn).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

pub fn distance(x: &[f64], y: &[f64], norm: Norm) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("distance", &[x.len()], &[y.len()]));
    }
    let diffs = x.iter().zip(y).map(|(a, b)| a - b);
    Ok(match norm {
        Norm::L1 => diffs.map(f64::abs).sum(),
        Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
    })
}

/// Count, mean and sample standard deviation (divisor `n - 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl SampleStats {
    pub fn from_observations(obs: &[f64]) -> Result<Self> {
        let n = obs.len();
        if n < 2 {
            return Err(Error::invalid(format!("sample statistics need n >= 2, got {n}")));
        }
        let mean = obs.iter().sum::<f64>() / n as f64;
        let ss: f64 = obs.iter().map(|x| (x - mean).powi(2)).sum();
        Ok(Self {
            n,
            mean,
            std: (ss / (n - 1) as f64).sqrt(),
        })
    }
}

/// One observation per image: its mean intensity in display range.
pub fn sample_statistics<T: Element>(images: &[Tensor<T>]) -> Result<SampleStats> {
    let obs: Vec<f64> = images.iter().map(|im| im.mean().as_f64()).collect();
    SampleStats::from_observations(&obs)
}

/// `F = s1.std^2 / s2.std^2`.
pub fn f_statistic(s1: &SampleStats, s2: &SampleStats) -> Result<f64> {
    if !(s2.std > 0.0) {
        return Err(Error::invalid("F statistic needs a positive second deviation"));
    }
    Ok(s1.std.powi(2) / s2.std.powi(2))
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Gamma(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + LANCZOS_G + 0.5;
    let series = LANCZOS[1..]
        .iter()
        .enumerate()
        .fold(LANCZOS[0], |acc, (i, &c)| acc + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

const CF_MAX_ITER: usize = 10_000;
const CF_EPS: f64 = 1e-15;
const TINY: f64 = 1e-300;

/// Continued fraction for the incomplete beta, modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let guard = |v: f64| if v.abs() < TINY { TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - qab * x / qap);
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
            return Ok(h);
        }
    }
    Err(Error::NoConvergence {
        what: "incomplete beta continued fraction",
        iterations: CF_MAX_ITER,
    })
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::invalid(format!("incomplete beta needs a, b > 0, got {a}, {b}")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!("incomplete beta needs x in [0, 1], got {x}")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // the fraction converges fast on the side of the mean
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_cf(b, a, 1.0 - x)? / b)
    }
}

fn check_dof(d1: f64, d2: f64) -> Result<()> {
    if !(d1 >= 1.0 && d2 >= 1.0) {
        return Err(Error::invalid(format!("F degrees of freedom must be >= 1, got ({d1}, {d2})")));
    }
    Ok(())
}

/// CDF of the F(d1, d2) distribution.
pub fn f_cdf(x: f64, d1: f64, d2: f64) -> Result<f64> {
    check_dof(d1, d2)?;
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    inc_beta(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))
}

const QUANTILE_TOL: f64 = 1e-10;
const QUANTILE_MAX_ITER: usize = 400;

/// Inverse CDF of F(d1, d2) by bisection to `1e-10` in `x` (relative above
/// 1).
pub fn f_quantile(p: f64, d1: f64, d2: f64) -> Result<f64> {
    check_dof(d1, d2)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("quantile level must lie in (0, 1), got {p}")));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut grow = 0;
    while f_cdf(hi, d1, d2)? < p {
        lo = hi;
        hi *= 2.0;
        grow += 1;
        if grow > 1100 {
            return Err(Error::NoConvergence {
                what: "F quantile bracket",
                iterations: grow,
            });
        }
    }
    for _ in 0..QUANTILE_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if f_cdf(mid, d1, d2)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= QUANTILE_TOL * hi.max(1.0) {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::NoConvergence {
        what: "F quantile bisection",
        iterations: QUANTILE_MAX_ITER,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Tail {
    /// Reject when `F >= F_{1-alpha}`.
    #[default]
    Upper,
    /// Reject when `F <= F_{alpha/2}` or `F >= F_{1-alpha/2}`.
    TwoSided,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FTestResult {
    pub f: f64,
    pub dof: (usize, usize),
    pub alpha: f64,
    pub tail: Tail,
    /// Upper critical value.
    pub critical_value: f64,
    /// Lower critical value, two-sided tests only.
    pub critical_low: Option<f64>,
    pub reject: bool,
    pub note: &'static str,
}

/// Variance-ratio test of `s1` against `s2` with `(n1 - 1, n2 - 1)` degrees
/// of freedom.
pub fn f_test(s1: &SampleStats, s2: &SampleStats, alpha: f64, tail: Tail) -> Result<FTestResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let f = f_statistic(s1, s2)?;
    let dof = (s1.n - 1, s2.n - 1);
    let (d1, d2) = (dof.0 as f64, dof.1 as f64);
    let (critical_value, critical_low, reject, note) = match tail {
        Tail::Upper => {
            let c = f_quantile(1.0 - alpha, d1, d2)?;
            (c, None, f >= c, "upper tail: reject H0 when F >= c")
        }
        Tail::TwoSided => {
            let hi = f_quantile(1.0 - alpha / 2.0, d1, d2)?;
            let lo = f_quantile(alpha / 2.0, d1, d2)?;
            (hi, Some(lo), f >= hi || f <= lo, "two-sided: reject H0 when F <= c_low or F >= c")
        }
    };
    Ok(FTestResult {
        f,
        dof,
        alpha,
        tail,
        critical_value,
        critical_low,
        reject,
        note,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub snr_db: f64,
    pub l1: f64,
    pub l2: f64,
    pub stats_a: SampleStats,
    pub stats_b: SampleStats,
    pub f_test: FTestResult,
}

/// Compares batch `b` against reference batch `a`: `a` is the signal for
/// the SNR and the numerator sample for the F-test. Images are display
/// range `[3, H, W]` tensors; the two batches must match in shape.
pub fn analyze<T: Element>(a: &[Tensor<T>], b: &[Tensor<T>], alpha: f64, tail: Tail) -> Result<AnalysisReport> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("batches differ in size: {} vs {}", a.len(), b.len())));
    }
    let flat = |set: &[Tensor<T>]| -> Vec<f64> { set.iter().flat_map(|t| t.data().iter().map(|v| v.as_f64())).collect() };
    if let Some((x, y)) = a.iter().zip(b).find(|(x, y)| x.shape() != y.shape()) {
        return Err(Error::shape("analyze", x.shape(), y.shape()));
    }
    let (fa, fb) = (flat(a), flat(b));
    let stats_a = sample_statistics(a)?;
    let stats_b = sample_statistics(b)?;
    Ok(AnalysisReport {
        snr_db: snr_db(&fa, &fb)?,
        l1: distance(&fa, &fb, Norm::L1)?,
        l2: distance(&fa, &fb, Norm::L2)?,
        f_test: f_test(&stats_a, &stats_b, alpha, tail)?,
        stats_a,
        stats_b,
    })
}

impl AnalysisReport {
    pub const CSV_HEADER: &'static str =
        "snr_db,l1,l2,n_a,mean_a,std_a,n_b,mean_b,std_b,f,d1,d2,alpha,tail,critical_low,critical_value,reject";

    pub fn decision(&self) -> &'static str {
        if self.f_test.reject {
            "reject"
        } else {
            "retain"
        }
    }

    fn tail_name(&self) -> &'static str {
        match self.f_test.tail {
            Tail::Upper => "upper",
            Tail::TwoSided => "two-sided",
        }
    }

    pub fn to_csv_row(&self) -> String {
        let t = &self.f_test;
        let low = t.critical_low.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.snr_db,
            self.l1,
            self.l2,
            self.stats_a.n,
            self.stats_a.mean,
            self.stats_a.std,
            self.stats_b.n,
            self.stats_b.mean,
            self.stats_b.std,
            t.f,
            t.dof.0,
            t.dof.1,
            t.alpha,
            self.tail_name(),
            low,
            t.critical_value,
            self.decision()
        )
    }
}

impl fmt::Display for AnalysisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.f_test;
        writeln!(f, "snr_db: {}", self.snr_db)?;
        writeln!(f, "l1: {}", self.l1)?;
        writeln!(f, "l2: {}", self.l2)?;
        writeln!(f, "n_a: {}", self.stats_a.n)?;
        writeln!(f, "mean_a: {}", self.stats_a.mean)?;
        writeln!(f, "std_a: {}", self.stats_a.std)?;
        writeln!(f, "n_b: {}", self.stats_b.n)?;
        writeln!(f, "mean_b: {}", self.stats_b.mean)?;
        writeln!(f, "std_b: {}", self.stats_b.std)?;
        writeln!(f, "f: {}", t.f)?;
        writeln!(f, "dof: ({}, {})", t.dof.0, t.dof.1)?;
        writeln!(f, "alpha: {}", t.alpha)?;
        writeln!(f, "tail: {}", self.tail_name())?;
        if let Some(low) = t.critical_low {
            writeln!(f, "critical_low: {low}")?;
        }
        writeln!(f, "critical_value: {}", t.critical_value)?;
        writeln!(f, "decision: {}", self.decision())?;
        write!(f, "note: {}", t.note)
    }
}
