//! Common-factor extraction from the firm-level variance panel.
//!
//! The cross-section of firm variance measures is summarized by the first
//! principal component of the standardized panel, estimated over rolling
//! windows with an expectation-maximization treatment of missing cells:
//!
//! 1. standardize each firm's in-window series (observed entries only);
//! 2. initialize missing cells to zero (the in-window mean);
//! 3. iterate: compute the leading principal components of the filled
//!    matrix, then refill the missing cells from the rank-k reconstruction,
//!    until the reconstruction's Frobenius change drops below tolerance;
//! 4. orient each component so it correlates non-negatively with the
//!    cross-sectional mean of the standardized panel.
//!
//! Each rolling window emits the factor score at its final date. Adjacent
//! windows are chained: a window whose in-window scores correlate negatively
//! with the already-emitted series over the overlapping dates is flipped, so
//! the emitted level series is sign-continuous. Innovations are first
//! differences of the emitted levels.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg;
use crate::series::{month_end_dates, DatedSeries};

/// Identity of an extracted factor series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorName {
    /// Common fear: total variance panel.
    Cf,
    /// Common good-fear: upside variance panel.
    CfPlus,
    /// Common bad-fear: downside variance panel.
    CfMinus,
    /// Market-index counterparts.
    Mf,
    MfPlus,
    MfMinus,
}

impl FactorName {
    pub fn as_str(self) -> &'static str {
        match self {
            FactorName::Cf => "CF",
            FactorName::CfPlus => "CF_plus",
            FactorName::CfMinus => "CF_minus",
            FactorName::Mf => "MF",
            FactorName::MfPlus => "MF_plus",
            FactorName::MfMinus => "MF_minus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "CF" => Some(FactorName::Cf),
            "CF_plus" => Some(FactorName::CfPlus),
            "CF_minus" => Some(FactorName::CfMinus),
            "MF" => Some(FactorName::Mf),
            "MF_plus" => Some(FactorName::MfPlus),
            "MF_minus" => Some(FactorName::MfMinus),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmPcaConfig {
    pub n_factors: usize,
    /// Frobenius-change convergence threshold on the reconstruction.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for EmPcaConfig {
    fn default() -> Self {
        EmPcaConfig {
            n_factors: 1,
            tolerance: 1e-8,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmPcaResult {
    /// Factor scores of the filled standardized matrix, one column per
    /// component (rows = window dates).
    pub scores: DMatrix<f64>,
    /// Orthonormal loadings over the retained firms.
    pub loadings: DMatrix<f64>,
    /// Share of total variance of the filled standardized matrix captured
    /// by each component.
    pub variance_explained: Vec<f64>,
    /// Column indices of the input panel that entered the decomposition
    /// (zero-variance and sub-coverage firms are dropped).
    pub retained_firms: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("need at least 2 usable firms, got {got}")]
    InsufficientFirms { got: usize },
    #[error("window length {window} exceeds panel length {panel}")]
    WindowTooLong { window: usize, panel: usize },
    #[error("need at least {required} overlapping observations, got {actual}")]
    InsufficientOverlap { required: usize, actual: usize },
}

/// EM-PCA on a dates-by-firms matrix with NaN marking missing cells.
///
/// Firms whose observed in-window series has fewer than two observations or
/// zero variance are dropped before standardization. On a complete matrix
/// the loop converges immediately and the output equals direct PCA of the
/// standardized panel.
pub fn em_pca(panel: &DMatrix<f64>, cfg: &EmPcaConfig) -> Result<EmPcaResult, FactorError> {
    let t = panel.nrows();
    let mut retained: Vec<usize> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut masks: Vec<Vec<bool>> = Vec::new();
    for j in 0..panel.ncols() {
        let col: Vec<f64> = (0..t).map(|i| panel[(i, j)]).collect();
        let observed: Vec<f64> = col.iter().copied().filter(|v| v.is_finite()).collect();
        if observed.len() < 2 {
            continue;
        }
        let mean = linalg::mean(&observed);
        let std = linalg::sample_std(&observed);
        // A numerically-constant series (std at rounding-noise scale) would
        // standardize to amplified garbage; treat it as zero-variance.
        if !(std > 1e-12 * (1.0 + mean.abs())) {
            continue;
        }
        let standardized: Vec<f64> = col
            .iter()
            .map(|v| if v.is_finite() { (v - mean) / std } else { 0.0 })
            .collect();
        masks.push(col.iter().map(|v| !v.is_finite()).collect());
        columns.push(standardized);
        retained.push(j);
    }
    let m = retained.len();
    if m < 2 {
        return Err(FactorError::InsufficientFirms { got: m });
    }
    let k = cfg.n_factors.min(m).min(t).max(1);

    let mut x = DMatrix::<f64>::zeros(t, m);
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    let any_missing = masks.iter().any(|mask| mask.iter().any(|&b| b));

    let mut prev_recon: Option<DMatrix<f64>> = None;
    let mut iterations = 0;
    let mut converged = false;
    let mut eigenvalues: Vec<f64> = Vec::new();
    let mut scores = DMatrix::<f64>::zeros(t, k);
    let mut loadings = DMatrix::<f64>::zeros(m, k);
    while iterations < cfg.max_iterations {
        iterations += 1;
        let (vals, f, v) = linalg::top_principal_components(&x, k);
        let recon = &f * v.transpose();
        eigenvalues = vals;
        scores = f;
        loadings = v;
        let change = match &prev_recon {
            Some(prev) => (&recon - prev).norm(),
            None => f64::INFINITY,
        };
        if !any_missing || change < cfg.tolerance {
            // Refill once more so the reported scores come from the final
            // fill, then stop.
            converged = true;
        }
        for (j, mask) in masks.iter().enumerate() {
            for (i, &missing) in mask.iter().enumerate() {
                if missing {
                    x[(i, j)] = recon[(i, j)];
                }
            }
        }
        prev_recon = Some(recon);
        if converged {
            break;
        }
    }

    // Variance-explained shares of the filled standardized matrix.
    let total_var: f64 = x.iter().map(|v| v * v).sum();
    let variance_explained: Vec<f64> = eigenvalues
        .iter()
        .map(|l| if total_var > 0.0 { l.max(0.0) / total_var } else { 0.0 })
        .collect();

    // Orient each component against the cross-sectional mean of the
    // standardized panel (observed cells only).
    let mut cs_mean = vec![0.0f64; t];
    for i in 0..t {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (j, mask) in masks.iter().enumerate() {
            if !mask[i] {
                sum += x[(i, j)];
                count += 1;
            }
        }
        cs_mean[i] = if count > 0 { sum / count as f64 } else { 0.0 };
    }
    for c in 0..k {
        let col: Vec<f64> = (0..t).map(|i| scores[(i, c)]).collect();
        let corr = linalg::pearson(&col, &cs_mean);
        if corr < 0.0 {
            for i in 0..t {
                scores[(i, c)] = -scores[(i, c)];
            }
            for j in 0..m {
                loadings[(j, c)] = -loadings[(j, c)];
            }
        }
    }

    Ok(EmPcaResult {
        scores,
        loadings,
        variance_explained,
        retained_firms: retained,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct WindowSpec {
    /// Window length in trading days.
    pub length: usize,
    /// Stride between successive window ends.
    pub step: usize,
    /// Minimum fraction of non-missing in-window observations for a firm to
    /// enter the window's decomposition.
    pub min_coverage: f64,
    pub em: EmPcaConfig,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            length: 252,
            step: 1,
            min_coverage: 0.8,
            em: EmPcaConfig::default(),
        }
    }
}

/// A rolling common-factor series: levels are window-end factor scores,
/// innovations are their first differences over adjacent dates.
#[derive(Debug, Clone)]
pub struct FactorSeries {
    pub name: FactorName,
    pub dates: Vec<NaiveDate>,
    pub levels: Vec<Option<f64>>,
    pub innovations: Vec<Option<f64>>,
    pub variance_explained: Vec<Option<f64>>,
    /// Dates whose window hit the EM iteration cap without converging.
    pub unconverged_windows: usize,
}

impl FactorSeries {
    /// Innovation series as (date, value) pairs.
    pub fn innovation_series(&self) -> DatedSeries {
        DatedSeries::from_pairs(
            self.dates
                .iter()
                .zip(&self.innovations)
                .filter_map(|(d, v)| v.map(|v| (*d, v))),
        )
    }

    /// Level series as (date, value) pairs.
    pub fn level_series(&self) -> DatedSeries {
        DatedSeries::from_pairs(
            self.dates
                .iter()
                .zip(&self.levels)
                .filter_map(|(d, v)| v.map(|v| (*d, v))),
        )
    }

    /// Month-end level differences, for the monthly-innovation convention.
    pub fn monthly_innovations(&self) -> DatedSeries {
        let levels = self.level_series();
        let ends = month_end_dates(levels.dates());
        let mut pairs = Vec::new();
        for w in ends.windows(2) {
            let (prev, cur) = (w[0], w[1]);
            if let (Some(a), Some(b)) = (levels.get(prev), levels.get(cur)) {
                pairs.push((cur, b - a));
            }
        }
        DatedSeries::from_pairs(pairs)
    }
}

/// Rolling EM-PCA over a dates-by-firms measure matrix.
///
/// Windows are computed independently (and in parallel); each emits the
/// score at its last date. A sequential chaining pass then flips any window
/// whose in-window scores correlate negatively with the already-emitted
/// levels over the overlap.
pub fn rolling_factor(
    matrix: &DMatrix<f64>,
    dates: &[NaiveDate],
    spec: &WindowSpec,
    name: FactorName,
) -> Result<FactorSeries, FactorError> {
    let t = matrix.nrows();
    assert_eq!(t, dates.len(), "date index must match matrix rows");
    if spec.length > t {
        return Err(FactorError::WindowTooLong {
            window: spec.length,
            panel: t,
        });
    }
    let len = spec.length;
    let n = matrix.ncols();

    struct WindowOutcome {
        end: usize,
        scores: Vec<f64>,
        variance_explained: f64,
        converged: bool,
    }

    let ends: Vec<usize> = (len - 1..t).step_by(spec.step.max(1)).collect();
    let outcomes: Vec<Option<WindowOutcome>> = ends
        .par_iter()
        .map(|&end| {
            let start = end + 1 - len;
            // Firms meeting the coverage requirement inside this window.
            let mut usable_cols: Vec<usize> = Vec::new();
            for j in 0..n {
                let observed = (start..=end)
                    .filter(|&i| matrix[(i, j)].is_finite())
                    .count();
                if observed as f64 >= spec.min_coverage * len as f64 {
                    usable_cols.push(j);
                }
            }
            if usable_cols.len() < 2 {
                return None;
            }
            let window =
                DMatrix::from_fn(len, usable_cols.len(), |i, jj| {
                    matrix[(start + i, usable_cols[jj])]
                });
            match em_pca(&window, &spec.em) {
                Ok(r) => {
                    let scores: Vec<f64> = (0..len).map(|i| r.scores[(i, 0)]).collect();
                    Some(WindowOutcome {
                        end,
                        scores,
                        variance_explained: r.variance_explained[0],
                        converged: r.converged,
                    })
                }
                Err(_) => None,
            }
        })
        .collect();

    let mut levels: Vec<Option<f64>> = vec![None; t];
    let mut variance_explained: Vec<Option<f64>> = vec![None; t];
    let mut unconverged = 0usize;
    for outcome in outcomes.into_iter().flatten() {
        let end = outcome.end;
        let start = end + 1 - len;
        if !outcome.converged {
            unconverged += 1;
        }
        // Overlap correlation with the already-emitted stretch.
        let mut window_vals = Vec::new();
        let mut emitted_vals = Vec::new();
        for i in start..end {
            if let Some(l) = levels[i] {
                window_vals.push(outcome.scores[i - start]);
                emitted_vals.push(l);
            }
        }
        let flip = if window_vals.len() >= 2 {
            linalg::pearson(&window_vals, &emitted_vals) < 0.0
        } else {
            false
        };
        let score = outcome.scores[len - 1];
        levels[end] = Some(if flip { -score } else { score });
        variance_explained[end] = Some(outcome.variance_explained);
    }

    let mut innovations: Vec<Option<f64>> = vec![None; t];
    for i in 1..t {
        if let (Some(a), Some(b)) = (levels[i - 1], levels[i]) {
            innovations[i] = Some(b - a);
        }
    }

    Ok(FactorSeries {
        name,
        dates: dates.to_vec(),
        levels,
        innovations,
        variance_explained,
        unconverged_windows: unconverged,
    })
}

/// Result of orthogonalizing one innovation series against another.
#[derive(Debug, Clone)]
pub struct Orthogonalized {
    /// Residual series on the overlapping dates.
    pub residuals: DatedSeries,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_obs: usize,
}

/// Residuals of an OLS of `target` innovations on a constant plus `control`
/// innovations over their full overlap.
pub fn orthogonalize(
    target: &DatedSeries,
    control: &DatedSeries,
    min_overlap: usize,
) -> Result<Orthogonalized, FactorError> {
    let joint = target.join(control);
    if joint.len() < min_overlap.max(3) {
        return Err(FactorError::InsufficientOverlap {
            required: min_overlap.max(3),
            actual: joint.len(),
        });
    }
    let n = joint.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { joint[i].2 });
    let y = nalgebra::DVector::from_fn(n, |i, _| joint[i].1);
    let fit = linalg::ols(&x, &y).map_err(|_| FactorError::InsufficientFirms { got: 0 })?;
    let residuals = DatedSeries::from_pairs(
        joint
            .iter()
            .enumerate()
            .map(|(i, (d, _, _))| (*d, fit.residuals[i])),
    );
    Ok(Orthogonalized {
        residuals,
        slope: fit.coefficients[1],
        intercept: fit.coefficients[0],
        r_squared: fit.r_squared(),
        n_obs: n,
    })
}

/// Trailing-window Pearson correlation between two series on their joint
/// calendar. Positions with fewer than `min_obs` joint observations in the
/// trailing `window` dates emit `None`.
pub fn rolling_correlation(
    a: &DatedSeries,
    b: &DatedSeries,
    window: usize,
    min_obs: usize,
) -> DatedSeries {
    let joint = a.join(b);
    let mut pairs = Vec::new();
    for i in 0..joint.len() {
        if i + 1 < min_obs {
            continue;
        }
        let start = (i + 1).saturating_sub(window);
        let xs: Vec<f64> = joint[start..=i].iter().map(|(_, x, _)| *x).collect();
        let ys: Vec<f64> = joint[start..=i].iter().map(|(_, _, y)| *y).collect();
        if xs.len() >= min_obs {
            let c = linalg::pearson(&xs, &ys);
            if c.is_finite() {
                pairs.push((joint[i].0, c));
            }
        }
    }
    DatedSeries::from_pairs(pairs)
}

pub const FACTOR_CSV_HEADER: [&str; 5] =
    ["name", "date", "level", "innovation", "variance_explained"];

/// One row of factors.csv: a factor's level at a date, with the innovation
/// and window variance share when defined.
#[derive(Debug, Clone)]
pub struct FactorCsvRow {
    pub name: String,
    pub date: NaiveDate,
    pub level: f64,
    pub innovation: Option<f64>,
    pub variance_explained: Option<f64>,
}

/// Write factor series as CSV, one row per emitted (factor, date) level in
/// series order.
pub fn write_factor_csv(
    series: &[&FactorSeries],
    path: &std::path::Path,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(FACTOR_CSV_HEADER)?;
    for s in series {
        for (i, date) in s.dates.iter().enumerate() {
            let Some(level) = s.levels[i] else { continue };
            w.write_record(&[
                s.name.as_str().to_string(),
                date.to_string(),
                format!("{level}"),
                s.innovations[i].map(|v| format!("{v}")).unwrap_or_default(),
                s.variance_explained[i]
                    .map(|v| format!("{v}"))
                    .unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_factor_csv(
    path: &std::path::Path,
) -> Result<crate::market_data::CsvLoad<FactorCsvRow>, crate::market_data::CsvError> {
    crate::market_data::load_rows(path, &FACTOR_CSV_HEADER, |row| {
        Ok(FactorCsvRow {
            name: row.field("name")?.to_string(),
            date: row.date("date")?,
            level: row.f64_required("level")?,
            innovation: row.f64_optional("innovation")?,
            variance_explained: row.f64_optional("variance_explained")?,
        })
    })
}
