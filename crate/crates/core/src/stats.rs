//! Rank correlation and the two-sample z-test.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationResult {
    pub rho: f64,
    /// Either input was constant; `rho` is then 0.
    pub degenerate: bool,
}

impl CorrelationResult {
    const DEGENERATE: Self = Self {
        rho: 0.0,
        degenerate: true,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZTestResult {
    pub t_stat: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
    pub mean1: f64,
    pub mean2: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    #[default]
    Pooled,
    Unpooled,
}

impl VarianceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VarianceMode::Pooled => "pooled",
            VarianceMode::Unpooled => "unpooled",
        }
    }
}

impl fmt::Display for VarianceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(VarianceMode::Pooled),
            "unpooled" => Ok(VarianceMode::Unpooled),
            other => Err(Error::InvalidParameter(format!(
                "unknown variance mode {other:?}"
            ))),
        }
    }
}

/// 1-based ranks with ties sharing the average of the positions they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end hold equal values; their ranks are start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input"));
    }
    Ok(())
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> CorrelationResult {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return CorrelationResult::DEGENERATE;
    }
    CorrelationResult {
        rho: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Spearman rank correlation: Pearson correlation of the average ranks.
///
/// A constant input has no ordering, so the result is `rho = 0` with the
/// `degenerate` flag set rather than an error.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_pair(x, y)?;
    if is_constant(x) || is_constant(y) {
        return Ok(CorrelationResult::DEGENERATE);
    }
    Ok(pearson_unchecked(&average_ranks(x), &average_ranks(y)))
}

/// Plain Pearson correlation with the same conventions as [`spearman`].
pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_pair(x, y)?;
    if is_constant(x) || is_constant(y) {
        return Ok(CorrelationResult::DEGENERATE);
    }
    Ok(pearson_unchecked(x, y))
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

fn mean_and_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, ss / (n - 1.0))
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Two-sided normal p-value for a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Two-sample z-test of `mean(a) - mean(b)` with n-1 sample variances.
pub fn ztest_two_sample(a: &[f64], b: &[f64], variance: VarianceMode) -> Result<ZTestResult> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: s.len(),
            });
        }
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("z-test input"));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (m1, v1) = mean_and_var(a);
    let (m2, v2) = mean_and_var(b);
    let se = match variance {
        VarianceMode::Pooled => {
            let pooled = ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / (n1 + n2 - 2.0);
            pooled.sqrt() * (1.0 / n1 + 1.0 / n2).sqrt()
        }
        VarianceMode::Unpooled => (v1 / n1 + v2 / n2).sqrt(),
    };
    if se == 0.0 || !se.is_finite() {
        return Err(Error::ZeroStandardError);
    }
    let t = (m1 - m2) / se;
    Ok(ZTestResult {
        t_stat: t,
        p_value: two_sided_p(t),
        n1: a.len(),
        n2: b.len(),
        mean1: m1,
        mean2: m2,
    })
}
