//! Plain-text summary tables.
//!
//! Every renderer produces a deterministic fixed-width table from already-
//! computed statistics, so repeated runs on identical inputs emit identical
//! bytes. Four shapes are covered: the variance-measure summary
//! (mean / dispersion / average pairwise covariance per measure), the
//! common-factor variance-explained summary (rolling and full-sample), the
//! sorted-portfolio summary (one column per bucket plus the spread, with
//! mean and alpha rows), and the risk-premium summary (lambda and t per
//! factor with fit diagnostics). Premia and portfolio returns are displayed
//! in percent per month; variance levels stay in natural (annualized
//! variance) units.

use crate::cross_section::PremiumRow;
use crate::factor_extraction::FactorSeries;
use crate::implied_variance::PanelSummary;

/// A fixed-width table: a title line, a header row, and data rows. The
/// first column is left-aligned, all others right-aligned, two spaces
/// between columns.
#[derive(Debug, Clone)]
pub struct TextTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TextTable {
    pub fn render(&self) -> String {
        let n_cols = self.columns.len();
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for row in &self.rows {
            for (j, cell) in row.iter().enumerate().take(n_cols) {
                widths[j] = widths[j].max(cell.chars().count());
            }
        }
        let mut out = String::new();
        out.push_str(&self.title);
        out.push('\n');
        let format_row = |cells: &[String]| -> String {
            let mut line = String::new();
            for (j, cell) in cells.iter().enumerate().take(n_cols) {
                if j > 0 {
                    line.push_str("  ");
                }
                if j == 0 {
                    line.push_str(&format!("{cell:<width$}", width = widths[0]));
                } else {
                    line.push_str(&format!("{cell:>width$}", width = widths[j]));
                }
            }
            line.trim_end().to_string()
        };
        out.push_str(&format_row(&self.columns));
        out.push('\n');
        let rule_len = widths.iter().sum::<usize>() + 2 * (n_cols - 1);
        out.push_str(&"-".repeat(rule_len));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format_row(row));
            out.push('\n');
        }
        out
    }
}

/// Fixed-decimal formatting with a normalized zero: a value that rounds to
/// zero never keeps a negative sign, so tiny sign noise cannot flip a cell.
pub fn fmt_fixed(value: f64, decimals: usize) -> String {
    if value.is_nan() {
        return "nan".to_string();
    }
    if value.is_infinite() {
        return if value > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let s = format!("{value:.decimals$}");
    let negative_zero = s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.');
    if negative_zero {
        s[1..].to_string()
    } else {
        s
    }
}

/// Variance-measure summary: one statistic per row, one measure per column.
pub fn variance_summary_table(summary: &PanelSummary) -> TextTable {
    let r = |label: &str, total: f64, good: f64, bad: f64, decimals: usize| {
        vec![
            label.to_string(),
            fmt_fixed(total, decimals),
            fmt_fixed(good, decimals),
            fmt_fixed(bad, decimals),
        ]
    };
    TextTable {
        title: format!(
            "Implied variance measures ({} firms, {} days)",
            summary.n_firms, summary.n_days
        ),
        columns: ["statistic", "total", "good", "bad"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        rows: vec![
            r(
                "mean",
                summary.total.mean,
                summary.good.mean,
                summary.bad.mean,
                4,
            ),
            r(
                "std",
                summary.total.std,
                summary.good.std,
                summary.bad.std,
                4,
            ),
            r(
                "avg pairwise cov",
                summary.total.avg_pairwise_cov,
                summary.good.avg_pairwise_cov,
                summary.bad.avg_pairwise_cov,
                6,
            ),
        ],
    }
}

/// Variance explained by the common factor: rolling-window distribution and
/// the full-sample estimate, one factor per row.
pub fn variance_explained_table(
    rolling: &[&FactorSeries],
    full_sample: &[(String, f64)],
) -> TextTable {
    let mut rows = Vec::new();
    for series in rolling {
        let shares: Vec<f64> = series
            .variance_explained
            .iter()
            .filter_map(|v| *v)
            .collect();
        let full = full_sample
            .iter()
            .find(|(name, _)| name == series.name.as_str())
            .map(|(_, v)| *v);
        let (mean, min, max) = if shares.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let mean = shares.iter().sum::<f64>() / shares.len() as f64;
            let min = shares.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = shares.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (mean, min, max)
        };
        rows.push(vec![
            series.name.as_str().to_string(),
            fmt_fixed(mean, 4),
            fmt_fixed(min, 4),
            fmt_fixed(max, 4),
            full.map(|v| fmt_fixed(v, 4)).unwrap_or_default(),
        ]);
    }
    TextTable {
        title: "Variance explained by the common factor".to_string(),
        columns: [
            "factor",
            "rolling mean",
            "rolling min",
            "rolling max",
            "full sample",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        rows,
    }
}

/// One labelled row of per-bucket values for the sort table, e.g. an alpha
/// row per factor model.
#[derive(Debug, Clone)]
pub struct BucketRow {
    pub label: String,
    /// One value per bucket column, in percent per month.
    pub values: Vec<f64>,
}

/// Sorted-portfolio summary: buckets (plus the spread) as columns; mean and
/// alpha rows with their t-statistics beneath.
pub fn sort_table(title: &str, bucket_labels: &[String], rows: &[BucketRow]) -> TextTable {
    let mut columns = vec!["".to_string()];
    columns.extend(bucket_labels.iter().cloned());
    let rendered = rows
        .iter()
        .map(|row| {
            let mut cells = vec![row.label.clone()];
            let decimals = if row.label.starts_with("t(") { 2 } else { 4 };
            cells.extend(row.values.iter().map(|v| fmt_fixed(*v, decimals)));
            cells
        })
        .collect();
    TextTable {
        title: title.to_string(),
        columns,
        rows: rendered,
    }
}

/// Risk-premium summary for one estimation: lambda and t per factor, then
/// fit diagnostics. `n_factors` adds the latent-factor count row used by
/// the three-pass estimator.
pub fn premia_table(
    title: &str,
    rows: &[PremiumRow],
    n_factors: Option<usize>,
) -> TextTable {
    let mut out_rows = Vec::new();
    for row in rows {
        out_rows.push(vec![
            row.factor_name.clone(),
            fmt_fixed(row.lambda, 4),
            fmt_fixed(row.t_stat, 2),
        ]);
    }
    if let Some(first) = rows.first() {
        out_rows.push(vec![
            "adj R2".to_string(),
            fmt_fixed(first.adj_r2, 4),
            String::new(),
        ]);
        if let Some(p) = first.wald_p {
            out_rows.push(vec!["Wald p".to_string(), fmt_fixed(p, 4), String::new()]);
        }
        if let Some(k) = n_factors {
            out_rows.push(vec!["No. Factors".to_string(), format!("{k}"), String::new()]);
        }
        out_rows.push(vec![
            "No. Assets".to_string(),
            format!("{}", first.n_assets),
            String::new(),
        ]);
        out_rows.push(vec![
            "No. Months".to_string(),
            format!("{}", first.n_months),
            String::new(),
        ]);
    }
    TextTable {
        title: title.to_string(),
        columns: ["factor", "lambda", "t"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        rows: out_rows,
    }
}
