//! Result rendering: multi-model tables, per-subject breakdowns, the
//! size-vs-drop logarithmic fit, and scatter data exports for plotting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{contingency, PairedOutcome};
use crate::stats::{AnalysisResult, McNemarResult, MethodPolicy};

/// Which side won, per the significance test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    /// Significant and b > c: the overfit flag.
    Original,
    /// Significant and c > b.
    Perturbed,
    /// p >= alpha.
    NotSig,
}

impl Verdict {
    pub fn from_mcnemar(r: &McNemarResult) -> Verdict {
        if r.p >= r.alpha {
            Verdict::NotSig
        } else if r.b > r.c {
            Verdict::Original
        } else {
            Verdict::Perturbed
        }
    }

    /// Significant verdicts are starred, matching the published table style.
    pub fn render(&self) -> &'static str {
        match self {
            Verdict::Original => "Original*",
            Verdict::Perturbed => "Perturbed*",
            Verdict::NotSig => "Not Sig",
        }
    }
}

/// One model's result at one distortion level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuCell {
    pub mu: f64,
    pub acc_orig: f64,
    pub acc_pert: f64,
    pub pct_delta: Option<f64>,
    pub p: f64,
    pub b: u64,
    pub c: u64,
    pub verdict: Verdict,
}

impl MuCell {
    pub fn from_analysis(mu: f64, a: &AnalysisResult) -> MuCell {
        MuCell {
            mu,
            acc_orig: a.delta.acc_orig * 100.0,
            acc_pert: a.delta.acc_pert * 100.0,
            pct_delta: a.delta.pct_delta,
            p: a.mcnemar.p,
            b: a.mcnemar.b,
            c: a.mcnemar.c,
            verdict: Verdict::from_mcnemar(&a.mcnemar),
        }
    }
}

/// One row of the results table: a model and its per-mu cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter_count: Option<f64>,
    pub cells: Vec<MuCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            other => Err(Error::InvalidArgument(format!(
                "unknown table format `{}` (expected markdown, csv, or json)",
                other
            ))),
        }
    }
}

fn fmt2(x: f64) -> String {
    format!("{:.2}", x)
}

fn fmt_opt2(x: Option<f64>) -> String {
    x.map(fmt2).unwrap_or_else(|| "n/a".to_string())
}

fn fmt_params(p: Option<f64>) -> String {
    match p {
        Some(v) if v.fract() == 0.0 => format!("{}", v as i64),
        Some(v) => format!("{}", v),
        None => "-".to_string(),
    }
}

/// Sorts rows by parameter count ascending; rows without a known size sort
/// after the rest, stable by label.
fn sort_rows(rows: &[ResultRow]) -> Vec<&ResultRow> {
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by(|a, b| match (a.parameter_count, b.parameter_count) {
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap().then_with(|| a.label.cmp(&b.label)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.label.cmp(&b.label),
    });
    sorted
}

fn mu_columns(rows: &[ResultRow]) -> Vec<f64> {
    let mut mus: Vec<f64> = Vec::new();
    for row in rows {
        for cell in &row.cells {
            if !mus.iter().any(|m| m == &cell.mu) {
                mus.push(cell.mu);
            }
        }
    }
    mus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    mus
}

/// Renders the results table with a deterministic column order:
/// model, params, then per-mu accuracy / delta / verdict. Percentages are
/// rendered to two decimals; internals keep full precision.
pub fn render_results_table(rows: &[ResultRow], format: TableFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no result rows to render".into()));
    }
    let sorted = sort_rows(rows);
    let mus = mu_columns(rows);

    let mut header: Vec<String> = vec!["Model".into(), "Params (B)".into(), "Acc D".into()];
    for mu in &mus {
        header.push(format!("Acc D_{}", mu));
        header.push(format!("%Delta_{}", mu));
        header.push(format!("Better_{}", mu));
    }

    let mut body: Vec<Vec<String>> = Vec::new();
    for row in &sorted {
        let acc_orig = row.cells.first().map(|c| fmt2(c.acc_orig)).unwrap_or_else(|| "-".into());
        let mut line = vec![row.label.clone(), fmt_params(row.parameter_count), acc_orig];
        for mu in &mus {
            match row.cells.iter().find(|c| c.mu == *mu) {
                Some(cell) => {
                    line.push(fmt2(cell.acc_pert));
                    line.push(fmt_opt2(cell.pct_delta));
                    line.push(cell.verdict.render().to_string());
                }
                None => line.extend(["-".to_string(), "-".to_string(), "-".to_string()]),
            }
        }
        body.push(line);
    }

    match format {
        TableFormat::Markdown => {
            let mut out = String::new();
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for line in &body {
                out.push_str(&format!("| {} |\n", line.join(" | ")));
            }
            Ok(out)
        }
        TableFormat::Csv => {
            let mut out = String::new();
            out.push_str(&header.join(","));
            out.push('\n');
            for line in &body {
                out.push_str(&line.join(","));
                out.push('\n');
            }
            Ok(out)
        }
        TableFormat::Json => {
            let sorted_owned: Vec<ResultRow> = sorted.into_iter().cloned().collect();
            Ok(serde_json::to_string_pretty(&sorted_owned).expect("serialization") + "\n")
        }
    }
}

/// Least-squares fit of y = slope * ln(x) + intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFit {
    pub slope: f64,
    pub intercept: f64,
    pub rss: f64,
    pub n: usize,
}

/// Closed-form least squares on (ln x, y). Requires at least two points
/// with distinct positive x.
pub fn log_fit(points: &[(f64, f64)]) -> Result<LogFit> {
    let transformed: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, _)| *x > 0.0)
        .map(|&(x, y)| (x.ln(), y))
        .collect();
    let n = transformed.len();
    if n < 2 {
        return Err(Error::InvalidArgument("log fit needs at least 2 points with x > 0".into()));
    }
    let sx: f64 = transformed.iter().map(|(u, _)| u).sum();
    let sy: f64 = transformed.iter().map(|(_, y)| y).sum();
    let sxx: f64 = transformed.iter().map(|(u, _)| u * u).sum();
    let sxy: f64 = transformed.iter().map(|(u, y)| u * y).sum();
    let denom = n as f64 * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return Err(Error::InvalidArgument("log fit needs at least two distinct x values".into()));
    }
    let slope = (n as f64 * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n as f64;
    let rss = transformed
        .iter()
        .map(|(u, y)| {
            let r = y - (slope * u + intercept);
            r * r
        })
        .sum();
    Ok(LogFit { slope, intercept, rss, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScatterX {
    Params,
    AccOrig,
}

impl std::str::FromStr for ScatterX {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "params" => Ok(ScatterX::Params),
            "acc-orig" | "acc_orig" => Ok(ScatterX::AccOrig),
            other => Err(Error::InvalidArgument(format!(
                "unknown scatter x field `{}` (expected params or acc-orig)",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterExport {
    pub csv: String,
    pub skipped: usize,
}

/// Exports (x, pct_delta, label, family) rows at a single mu level for
/// external plotting. The family is the longest matching label prefix in
/// the family map. Rows missing the requested field are skipped and counted.
pub fn scatter_export(
    rows: &[ResultRow],
    mu: f64,
    x_field: ScatterX,
    family_map: &BTreeMap<String, String>,
) -> ScatterExport {
    let mut csv = String::from("x,pct_delta,label,family\n");
    let mut skipped = 0usize;
    for row in sort_rows(rows) {
        let cell = row.cells.iter().find(|c| c.mu == mu);
        let (x, pct) = match (x_field, cell) {
            (ScatterX::Params, Some(c)) => (row.parameter_count, c.pct_delta),
            (ScatterX::AccOrig, Some(c)) => (Some(c.acc_orig), c.pct_delta),
            (_, None) => (None, None),
        };
        match (x, pct) {
            (Some(x), Some(pct)) => {
                let family = family_map
                    .iter()
                    .filter(|(prefix, _)| row.label.starts_with(prefix.as_str()))
                    .max_by_key(|(prefix, _)| prefix.len())
                    .map(|(_, fam)| fam.as_str())
                    .unwrap_or("");
                csv.push_str(&format!("{},{},{},{}\n", x, pct, row.label, family));
            }
            _ => skipped += 1,
        }
    }
    ScatterExport { csv, skipped }
}

/// Per-subject contingency and significance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject: String,
    pub analysis: AnalysisResult,
    /// True when the subject has no discordant pairs (p fixed at 1).
    pub degenerate: bool,
}

/// Splits outcomes by the subject of their sample and analyzes each group.
pub fn per_subject_breakdown(
    outcomes: &[PairedOutcome],
    dataset: &Dataset,
    alpha: f64,
) -> Result<Vec<SubjectRow>> {
    let mut by_subject: BTreeMap<&str, Vec<PairedOutcome>> = BTreeMap::new();
    for o in outcomes {
        let sample = dataset
            .sample_by_id(&o.sample_id)
            .ok_or_else(|| Error::UnknownDecisionId(o.sample_id.clone()))?;
        by_subject.entry(&sample.subject).or_default().push(o.clone());
    }
    let mut rows = Vec::new();
    for (subject, group) in by_subject {
        let table = contingency(&group);
        let analysis = crate::stats::analyze(&table, alpha, MethodPolicy::Auto)?;
        rows.push(SubjectRow {
            subject: subject.to_string(),
            degenerate: table.b + table.c == 0,
            analysis,
        });
    }
    Ok(rows)
}
