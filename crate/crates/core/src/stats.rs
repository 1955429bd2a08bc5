//! McNemar significance testing and accuracy-delta metrics over the paired
//! contingency table, including the overfit decision rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ContingencyTable;

/// Discordant-pair count below which the exact binomial test replaces the
/// asymptotic chi-squared approximation.
pub const EXACT_METHOD_THRESHOLD: u64 = 25;

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Asymptotic,
    Exact,
}

/// How the significance method is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MethodPolicy {
    /// Exact below [`EXACT_METHOD_THRESHOLD`] discordant pairs, else asymptotic.
    #[default]
    Auto,
    ForceAsymptotic,
    ForceExact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    pub b: u64,
    pub c: u64,
    pub chi2: f64,
    pub p: f64,
    pub method: Method,
    pub alpha: f64,
    pub overfit_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaMetrics {
    pub n: u64,
    pub correct_orig: u64,
    pub correct_pert: u64,
    pub acc_orig: f64,
    pub acc_pert: f64,
    /// Net difference in correct answers; equals b - c.
    pub abs_delta_net: i64,
    /// Relative drop in percent; None when acc_orig is zero.
    pub pct_delta: Option<f64>,
}

/// Combined per-run analysis, mirrored into the `analyze` output JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub table: ContingencyTable,
    pub mcnemar: McNemarResult,
    pub delta: DeltaMetrics,
}

/// The McNemar statistic (b - c)^2 / (b + c), without continuity correction.
pub fn mcnemar_chi2(b: u64, c: u64) -> Result<f64> {
    if b + c == 0 {
        return Err(Error::InvalidArgument(
            "chi-squared statistic undefined with no discordant pairs".into(),
        ));
    }
    let diff = b as f64 - c as f64;
    Ok(diff * diff / (b + c) as f64)
}

/// Survival function of the chi-squared distribution with one degree of
/// freedom: P(X > x) = erfc(sqrt(x / 2)).
pub fn chi2_sf_df1(x: f64) -> f64 {
    assert!(x >= 0.0, "chi-squared statistic must be non-negative");
    statrs::function::erf::erfc((x / 2.0).sqrt())
}

/// Two-sided exact McNemar p-value: with X ~ Binomial(b + c, 1/2),
/// p = min(1, 2 * P(X >= max(b, c))).
pub fn exact_mcnemar_p(b: u64, c: u64) -> Result<f64> {
    let n = b + c;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "exact test undefined with no discordant pairs".into(),
        ));
    }
    let k = b.max(c);
    // Tail sum from j = n downward via the ratio C(n, j-1) = C(n, j) * j / (n - j + 1),
    // accumulating smallest terms first. Terms carry the 2^-n weight up front
    // so the sum never overflows for large n.
    let ln_half_n = n as f64 * std::f64::consts::LN_2;
    let mut term = (-ln_half_n).exp(); // C(n, n) / 2^n
    let mut tail = term;
    let mut j = n;
    while j > k {
        term *= j as f64 / (n - j + 1) as f64;
        tail += term;
        j -= 1;
    }
    Ok((2.0 * tail).min(1.0))
}

/// Runs the full decision rule on a contingency table: pick the method,
/// compute the p-value, and flag overfitting iff the result is significant
/// AND the original side won more discordant pairs (b > c). A table with no
/// discordant pairs yields p = 1 and no flag.
pub fn run_cbod(table: &ContingencyTable, alpha: f64, policy: MethodPolicy) -> Result<McNemarResult> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {} outside (0, 1)", alpha)));
    }
    let (b, c) = (table.b, table.c);
    let discordant = b + c;
    let method = match policy {
        MethodPolicy::ForceAsymptotic => Method::Asymptotic,
        MethodPolicy::ForceExact => Method::Exact,
        MethodPolicy::Auto => {
            if discordant < EXACT_METHOD_THRESHOLD {
                Method::Exact
            } else {
                Method::Asymptotic
            }
        }
    };
    let chi2 = if discordant > 0 { mcnemar_chi2(b, c)? } else { 0.0 };
    let p = if discordant == 0 {
        1.0
    } else {
        match method {
            Method::Asymptotic => chi2_sf_df1(chi2),
            Method::Exact => exact_mcnemar_p(b, c)?,
        }
    };
    Ok(McNemarResult {
        b,
        c,
        chi2,
        p,
        method,
        alpha,
        overfit_flag: p < alpha && b > c,
    })
}

/// Accuracy metrics and deltas from the full contingency table.
pub fn delta_metrics(table: &ContingencyTable) -> Result<DeltaMetrics> {
    if table.n == 0 {
        return Err(Error::InvalidArgument("empty outcome set".into()));
    }
    let correct_orig = table.n11 + table.b;
    let correct_pert = table.n11 + table.c;
    let acc_orig = correct_orig as f64 / table.n as f64;
    let acc_pert = correct_pert as f64 / table.n as f64;
    Ok(DeltaMetrics {
        n: table.n,
        correct_orig,
        correct_pert,
        acc_orig,
        acc_pert,
        abs_delta_net: table.b as i64 - table.c as i64,
        pct_delta: pct_delta(acc_orig, acc_pert),
    })
}

/// Relative performance drop in percent: 100 * (acc_orig - acc_pert) / acc_orig.
/// Undefined (None) when the original accuracy is zero. Accepts accuracies
/// on either the [0, 1] or percentage scale since the ratio cancels units.
pub fn pct_delta(acc_orig: f64, acc_pert: f64) -> Option<f64> {
    (acc_orig > 0.0).then(|| 100.0 * (acc_orig - acc_pert) / acc_orig)
}

/// Full analysis of a contingency table.
pub fn analyze(table: &ContingencyTable, alpha: f64, policy: MethodPolicy) -> Result<AnalysisResult> {
    Ok(AnalysisResult {
        table: *table,
        mcnemar: run_cbod(table, alpha, policy)?,
        delta: delta_metrics(table)?,
    })
}
