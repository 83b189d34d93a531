//! Cross-sectional pricing of factor exposures.
//!
//! Three estimators share this module:
//!
//! * **Factor-mimicking portfolios** — project a factor's daily innovations
//!   onto a set of base-asset returns; the slopes are portfolio weights, and
//!   the monthly mimicking return is the within-month average of the daily
//!   projection.
//! * **Fama-MacBeth two-pass** — full-sample time-series betas per asset,
//!   then a cross-sectional regression of average excess returns on those
//!   betas. Point estimates come from the single full-sample cross-sectional
//!   fit; t-statistics apply a Bartlett-kernel long-run variance (12 lags)
//!   to the month-by-month cross-sectional estimate series, inflated by the
//!   Shanken errors-in-variables multiplier 1 + λ'Σ_f⁻¹λ.
//! * **Three-pass latent-factor regression** — principal components of the
//!   demeaned test-asset panel recover the factor space; latent premia come
//!   from a cross-sectional fit on the latent loadings; an observable
//!   factor's premium is its latent projection times the latent premia, and
//!   a Wald test on that projection addresses whether the observable is too
//!   weakly spanned by the test assets for its premium to be identified.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

use crate::linalg;
use crate::series::DatedSeries;

pub const PREMIA_CSV_HEADER: [&str; 8] = [
    "spec_id",
    "factor_name",
    "lambda",
    "t_stat",
    "adj_r2",
    "n_assets",
    "n_months",
    "wald_p",
];

#[derive(Debug, Error)]
pub enum CrossSectionError {
    #[error("lag count {lags} must be below series length {length}")]
    LagsExceedLength { lags: usize, length: usize },
    #[error("factor covariance matrix is singular")]
    SingularFactorCovariance,
    #[error("beta matrix is rank deficient (condition number {condition:.3e})")]
    RankDeficientBetas { condition: f64 },
    #[error("need at least {required} overlapping observations, got {actual}")]
    InsufficientOverlap { required: usize, actual: usize },
    #[error("need at least {required} assets, got {actual}")]
    TooFewAssets { required: usize, actual: usize },
    #[error("{context}")]
    DimensionMismatch { context: String },
    #[error("requested {requested} latent factors but the panel has numerical rank {rank}")]
    RankTooLow { requested: usize, rank: usize },
}

/// Bartlett-kernel long-run variance of a series' deviations from its mean,
/// the building block of every t-statistic in this module.
pub fn newey_west_variance(series: &[f64], lags: usize) -> Result<f64, CrossSectionError> {
    if lags >= series.len() {
        return Err(CrossSectionError::LagsExceedLength {
            lags,
            length: series.len(),
        });
    }
    Ok(linalg::newey_west_long_run_variance(series, lags))
}

/// Errors-in-variables inflation factor 1 + λ'Σ_f⁻¹λ applied to
/// cross-sectional standard errors.
pub fn shanken_multiplier(
    lambda: &[f64],
    factor_cov: &DMatrix<f64>,
) -> Result<f64, CrossSectionError> {
    let k = lambda.len();
    if factor_cov.nrows() != k || factor_cov.ncols() != k {
        return Err(CrossSectionError::DimensionMismatch {
            context: format!(
                "lambda has {k} entries but covariance is {}x{}",
                factor_cov.nrows(),
                factor_cov.ncols()
            ),
        });
    }
    let lam = DVector::from_column_slice(lambda);
    let (values, vectors) = linalg::symmetric_eigen_desc(factor_cov);
    let top = values.first().copied().unwrap_or(0.0);
    if values
        .iter()
        .any(|&v| !(v > linalg::RANK_TOL * top.max(1e-300)))
    {
        return Err(CrossSectionError::SingularFactorCovariance);
    }
    // λ'Σ⁻¹λ through the spectral decomposition.
    let quad: f64 = values
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let proj = vectors.column(j).dot(&lam);
            proj * proj / v
        })
        .sum();
    Ok(1.0 + quad)
}

/// One estimated premium with its HAC t-statistic.
#[derive(Debug, Clone)]
pub struct PremiumEstimate {
    pub factor_name: String,
    /// Premium in the return units of the input panel (per month for a
    /// monthly panel).
    pub lambda: f64,
    pub t_stat: f64,
}

/// Fama-MacBeth output: the single cross-sectional fit plus the
/// month-by-month estimate series backing the t-statistics.
#[derive(Debug, Clone)]
pub struct FmbResult {
    pub intercept: PremiumEstimate,
    pub premia: Vec<PremiumEstimate>,
    pub adj_r2: f64,
    pub n_assets: usize,
    pub n_months: usize,
    pub shanken: f64,
    /// Full-sample time-series betas, assets × factors.
    pub betas: DMatrix<f64>,
    /// Month-by-month cross-sectional coefficients, months × (1 + factors).
    pub monthly_estimates: DMatrix<f64>,
}

/// Two-pass cross-sectional regression on a balanced monthly panel.
///
/// `asset_returns` is months × assets of excess returns; `factors` is
/// months × k of factor observations on the same dates.
pub fn fama_macbeth(
    asset_returns: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    factor_names: &[String],
    nw_lags: usize,
) -> Result<FmbResult, CrossSectionError> {
    let t = asset_returns.nrows();
    let n = asset_returns.ncols();
    let k = factors.ncols();
    if factors.nrows() != t {
        return Err(CrossSectionError::DimensionMismatch {
            context: format!(
                "{t} return months vs {} factor months",
                factors.nrows()
            ),
        });
    }
    if factor_names.len() != k {
        return Err(CrossSectionError::DimensionMismatch {
            context: format!("{k} factors vs {} names", factor_names.len()),
        });
    }
    if n < k + 2 {
        return Err(CrossSectionError::TooFewAssets {
            required: k + 2,
            actual: n,
        });
    }
    if nw_lags >= t {
        return Err(CrossSectionError::LagsExceedLength {
            lags: nw_lags,
            length: t,
        });
    }

    // Pass 1: full-sample time-series betas per asset.
    let x_ts = DMatrix::from_fn(t, k + 1, |i, j| if j == 0 { 1.0 } else { factors[(i, j - 1)] });
    let mut betas = DMatrix::<f64>::zeros(n, k);
    for a in 0..n {
        let y = asset_returns.column(a).into_owned();
        let fit = linalg::ols(&x_ts, &y).map_err(map_rank_error)?;
        for j in 0..k {
            betas[(a, j)] = fit.coefficients[j + 1];
        }
    }

    // Pass 2: single cross-sectional regression of average returns.
    let x_cs = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { betas[(i, j - 1)] });
    let avg = DVector::from_fn(n, |i, _| {
        asset_returns.column(i).iter().sum::<f64>() / t as f64
    });
    let cs_fit = linalg::ols(&x_cs, &avg).map_err(map_rank_error)?;
    let lambda: Vec<f64> = (0..k).map(|j| cs_fit.coefficients[j + 1]).collect();

    // Month-by-month cross-sectional estimates with the same fixed betas.
    let pseudo = &cs_fit.xtx_inv * x_cs.transpose(); // (k+1) × n
    let mut monthly = DMatrix::<f64>::zeros(t, k + 1);
    for m in 0..t {
        let r_t = asset_returns.row(m).transpose();
        let coef = &pseudo * r_t;
        for j in 0..=k {
            monthly[(m, j)] = coef[j];
        }
    }

    // Shanken multiplier from the sample factor covariance.
    let factor_cov = sample_covariance_matrix(factors);
    let shanken = shanken_multiplier(&lambda, &factor_cov)?;

    let t_for = |j: usize, point: f64| -> Result<f64, CrossSectionError> {
        let series: Vec<f64> = (0..t).map(|m| monthly[(m, j)]).collect();
        let lrv = newey_west_variance(&series, nw_lags)?;
        let se = (shanken * lrv / t as f64).sqrt();
        Ok(point / se)
    };

    let intercept = PremiumEstimate {
        factor_name: "const".to_string(),
        lambda: cs_fit.coefficients[0],
        t_stat: t_for(0, cs_fit.coefficients[0])?,
    };
    let mut premia = Vec::with_capacity(k);
    for j in 0..k {
        premia.push(PremiumEstimate {
            factor_name: factor_names[j].clone(),
            lambda: lambda[j],
            t_stat: t_for(j + 1, lambda[j])?,
        });
    }

    Ok(FmbResult {
        intercept,
        premia,
        adj_r2: cs_fit.adj_r_squared(),
        n_assets: n,
        n_months: t,
        shanken,
        betas,
        monthly_estimates: monthly,
    })
}

fn map_rank_error(e: linalg::LinalgError) -> CrossSectionError {
    match e {
        linalg::LinalgError::RankDeficient { condition } => {
            CrossSectionError::RankDeficientBetas { condition }
        }
        linalg::LinalgError::DimensionMismatch { context } => {
            CrossSectionError::DimensionMismatch { context }
        }
        other => CrossSectionError::DimensionMismatch {
            context: other.to_string(),
        },
    }
}

/// Sample covariance matrix (divisor n−1) of a months × k matrix.
pub fn sample_covariance_matrix(data: &DMatrix<f64>) -> DMatrix<f64> {
    let t = data.nrows();
    let k = data.ncols();
    let mut centered = data.clone();
    for j in 0..k {
        let mean = data.column(j).iter().sum::<f64>() / t as f64;
        for i in 0..t {
            centered[(i, j)] -= mean;
        }
    }
    centered.tr_mul(&centered) / (t as f64 - 1.0)
}

/// A factor-mimicking portfolio over a set of base assets.
#[derive(Debug, Clone)]
pub struct MimickingPortfolio {
    pub factor_name: String,
    pub base_asset_ids: Vec<String>,
    /// Projection slope per base asset; zero for assets dropped as
    /// collinear.
    pub weights: Vec<f64>,
    /// Base assets dropped by the collinearity sweep.
    pub dropped: Vec<String>,
    pub daily_returns: DatedSeries,
    /// Within-month averages of the daily series, dated at calendar month
    /// ends.
    pub monthly_returns: DatedSeries,
    pub r_squared: f64,
    pub n_days: usize,
}

/// Project daily factor innovations onto base-asset daily returns.
///
/// Only dates where the factor and every base asset are observed enter the
/// regression. Collinear base assets are dropped (earlier ids win) with
/// zero weight.
pub fn mimicking_portfolio(
    factor_name: &str,
    factor_innovations: &DatedSeries,
    base_assets: &BTreeMap<String, DatedSeries>,
    min_overlap: usize,
) -> Result<MimickingPortfolio, CrossSectionError> {
    let ids: Vec<String> = base_assets.keys().cloned().collect();
    if ids.is_empty() {
        return Err(CrossSectionError::TooFewAssets {
            required: 1,
            actual: 0,
        });
    }
    // Joint dates: factor plus all base assets.
    let mut dates: Vec<NaiveDate> = Vec::new();
    'outer: for (d, _) in factor_innovations.iter() {
        for id in &ids {
            if base_assets[id].get(d).is_none() {
                continue 'outer;
            }
        }
        dates.push(d);
    }
    if dates.len() < min_overlap {
        return Err(CrossSectionError::InsufficientOverlap {
            required: min_overlap,
            actual: dates.len(),
        });
    }
    let n = dates.len();
    let k = ids.len();
    let x = DMatrix::from_fn(n, k + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            base_assets[&ids[j - 1]].get(dates[i]).unwrap()
        }
    });
    let y = DVector::from_fn(n, |i, _| factor_innovations.get(dates[i]).unwrap());
    let (fit, kept, dropped_idx) =
        linalg::ols_drop_collinear(&x, &y, linalg::RANK_TOL).map_err(map_rank_error)?;
    let mut weights = vec![0.0; k];
    for (pos, &col) in kept.iter().enumerate() {
        if col >= 1 {
            weights[col - 1] = fit.coefficients[pos];
        }
    }
    let dropped: Vec<String> = dropped_idx
        .iter()
        .filter(|&&c| c >= 1)
        .map(|&c| ids[c - 1].clone())
        .collect();

    let daily_pairs: Vec<(NaiveDate, f64)> = dates
        .iter()
        .map(|d| {
            let r: f64 = ids
                .iter()
                .zip(&weights)
                .map(|(id, w)| w * base_assets[id].get(*d).unwrap())
                .sum();
            (*d, r)
        })
        .collect();
    let daily_returns = DatedSeries::from_pairs(daily_pairs);
    let monthly_returns = DatedSeries::from_pairs(
        daily_returns
            .monthly_mean()
            .into_iter()
            .map(|(ym, v)| (ym.end_date(), v)),
    );

    Ok(MimickingPortfolio {
        factor_name: factor_name.to_string(),
        base_asset_ids: ids,
        weights,
        dropped,
        daily_returns,
        monthly_returns,
        r_squared: fit.r_squared(),
        n_days: n,
    })
}

#[derive(Debug, Clone)]
pub struct ThreePassConfig {
    /// Latent-factor count; `None` selects it by the eigenvalue-ratio test.
    pub n_latent: Option<usize>,
    /// Upper bound for the automatic selection.
    pub max_latent: usize,
    pub nw_lags: usize,
}

impl Default for ThreePassConfig {
    fn default() -> Self {
        ThreePassConfig {
            n_latent: None,
            max_latent: 8,
            nw_lags: 12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ThreePassResult {
    /// Premium of the observable factor at the panel's return frequency.
    pub lambda: f64,
    pub t_stat: f64,
    /// p-value of the Wald test whose null is "the observable factor has no
    /// loading on the latent space" (a weak factor).
    pub weak_factor_p: f64,
    pub lambda_market: f64,
    pub t_market: f64,
    pub lambda_intercept: f64,
    pub adj_r2: f64,
    pub n_latent_factors: usize,
    /// Loadings of the observable factor on the latent factors.
    pub eta: Vec<f64>,
    /// Share of the observable factor's variance explained by the latent
    /// factors (the pass-3 R²).
    pub observable_r2: f64,
    pub n_assets: usize,
    pub n_months: usize,
}

/// Three-pass latent-factor premium estimation.
///
/// Pass 1 extracts latent factors from the demeaned test-asset panel by
/// principal components; pass 2 prices the latent loadings cross-
/// sectionally; pass 3 projects the observable factor (and the market
/// factor) onto the latent space, mapping latent premia into observable
/// premia. t-statistics apply the Bartlett long-run variance to the
/// month-by-month mapped estimate series.
pub fn three_pass(
    asset_returns: &DMatrix<f64>,
    observable: &[f64],
    market: &[f64],
    cfg: &ThreePassConfig,
) -> Result<ThreePassResult, CrossSectionError> {
    let t = asset_returns.nrows();
    let n = asset_returns.ncols();
    if observable.len() != t || market.len() != t {
        return Err(CrossSectionError::DimensionMismatch {
            context: format!(
                "panel has {t} months, observable {} and market {}",
                observable.len(),
                market.len()
            ),
        });
    }

    // Demean each asset's series over time.
    let mut demeaned = asset_returns.clone();
    for j in 0..n {
        let mean = asset_returns.column(j).iter().sum::<f64>() / t as f64;
        for i in 0..t {
            demeaned[(i, j)] -= mean;
        }
    }

    // Numerical rank bound and latent-count selection.
    let pmax_data = n.saturating_sub(1).min(t.saturating_sub(1));
    let gram = if t <= n {
        &demeaned * demeaned.transpose()
    } else {
        demeaned.tr_mul(&demeaned)
    };
    let (eigenvalues, _) = linalg::symmetric_eigen_desc(&gram);
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    let rank = eigenvalues
        .iter()
        .filter(|&&v| v > 1e-12 * top.max(1e-300))
        .count();
    let p = match cfg.n_latent {
        Some(p) => {
            if p > rank {
                return Err(CrossSectionError::RankTooLow { requested: p, rank });
            }
            p
        }
        None => {
            let cap = cfg.max_latent.min(pmax_data).min(rank).max(1);
            eigenvalue_ratio_count(&eigenvalues, cap, rank)
        }
    };
    if n < p + 2 {
        return Err(CrossSectionError::TooFewAssets {
            required: p + 2,
            actual: n,
        });
    }

    // Pass 1: latent factors (scores) and loadings.
    let (_, scores, loadings) = linalg::top_principal_components(&demeaned, p);

    // Pass 2: cross-sectional pricing of the latent loadings.
    let avg = DVector::from_fn(n, |i, _| {
        asset_returns.column(i).iter().sum::<f64>() / t as f64
    });
    let x_cs = DMatrix::from_fn(n, p + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            loadings[(i, j - 1)]
        }
    });
    let cs_fit = linalg::ols(&x_cs, &avg).map_err(map_rank_error)?;
    let latent_premia = DVector::from_fn(p, |j, _| cs_fit.coefficients[j + 1]);

    // Month-by-month latent premia for inference.
    let pseudo = &cs_fit.xtx_inv * x_cs.transpose();
    let mut monthly_latent = DMatrix::<f64>::zeros(t, p);
    for m in 0..t {
        let coef = &pseudo * asset_returns.row(m).transpose();
        for j in 0..p {
            monthly_latent[(m, j)] = coef[j + 1];
        }
    }

    // Pass 3: observable factors on the latent factors.
    let x_ts = DMatrix::from_fn(t, p + 1, |i, j| if j == 0 { 1.0 } else { scores[(i, j - 1)] });
    let project = |series: &[f64]| -> Result<(Vec<f64>, linalg::OlsFit), CrossSectionError> {
        let y = DVector::from_column_slice(series);
        let fit = linalg::ols(&x_ts, &y).map_err(map_rank_error)?;
        let eta: Vec<f64> = (1..=p).map(|j| fit.coefficients[j]).collect();
        Ok((eta, fit))
    };
    let (eta, obs_fit) = project(observable)?;
    let (eta_market, _) = project(market)?;

    let mapped = |eta: &[f64]| -> f64 {
        eta.iter()
            .zip(latent_premia.iter())
            .map(|(a, b)| a * b)
            .sum()
    };
    let lambda = mapped(&eta);
    let lambda_market = mapped(&eta_market);

    let t_for = |eta: &[f64], point: f64| -> Result<f64, CrossSectionError> {
        let series: Vec<f64> = (0..t)
            .map(|m| {
                eta.iter()
                    .enumerate()
                    .map(|(j, e)| e * monthly_latent[(m, j)])
                    .sum()
            })
            .collect();
        let lrv = newey_west_variance(&series, cfg.nw_lags)?;
        Ok(point / (lrv / t as f64).sqrt())
    };

    // Wald test of eta = 0 with the homoskedastic OLS covariance.
    let dof = t.saturating_sub(p + 1);
    let sigma2 = if dof > 0 {
        obs_fit.rss / dof as f64
    } else {
        f64::NAN
    };
    let weak_factor_p = if sigma2 > 1e-300 {
        let cov_eta = (&obs_fit.xtx_inv * sigma2).view((1, 1), (p, p)).into_owned();
        let eta_vec = DVector::from_column_slice(&eta);
        match cov_eta.cholesky() {
            Some(chol) => {
                let wald = eta_vec.dot(&chol.solve(&eta_vec));
                let chi = ChiSquared::new(p as f64).expect("positive dof");
                1.0 - chi.cdf(wald)
            }
            None => f64::NAN,
        }
    } else {
        // Perfect fit: the observable is exactly spanned, maximally strong.
        0.0
    };

    Ok(ThreePassResult {
        lambda,
        t_stat: t_for(&eta, lambda)?,
        weak_factor_p,
        lambda_market,
        t_market: t_for(&eta_market, lambda_market)?,
        lambda_intercept: cs_fit.coefficients[0],
        adj_r2: cs_fit.adj_r_squared(),
        n_latent_factors: p,
        eta,
        observable_r2: obs_fit.r_squared(),
        n_assets: n,
        n_months: t,
    })
}

/// Eigenvalue-ratio selection: the latent count maximizing μ_j / μ_{j+1}
/// over 1 ≤ j ≤ cap. Ratios against below-rank (numerically zero)
/// eigenvalues dominate, so an exactly low-rank panel picks its rank.
fn eigenvalue_ratio_count(eigenvalues: &[f64], cap: usize, rank: usize) -> usize {
    let floor = 1e-300;
    let mut best_j = 1;
    let mut best_ratio = 0.0f64;
    for j in 1..=cap.min(rank).min(eigenvalues.len().saturating_sub(1)) {
        let denom = eigenvalues[j].max(floor);
        let ratio = eigenvalues[j - 1] / denom;
        if ratio > best_ratio {
            best_ratio = ratio;
            best_j = j;
        }
    }
    best_j
}

/// One output row of premia.csv.
#[derive(Debug, Clone)]
pub struct PremiumRow {
    pub spec_id: String,
    pub factor_name: String,
    pub lambda: f64,
    pub t_stat: f64,
    pub adj_r2: f64,
    pub n_assets: usize,
    pub n_months: usize,
    /// Present only for three-pass rows.
    pub wald_p: Option<f64>,
}

pub fn write_premia_csv(rows: &[PremiumRow], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PREMIA_CSV_HEADER)?;
    for r in rows {
        w.write_record(&[
            r.spec_id.clone(),
            r.factor_name.clone(),
            format!("{}", r.lambda),
            format!("{}", r.t_stat),
            format!("{}", r.adj_r2),
            format!("{}", r.n_assets),
            format!("{}", r.n_months),
            r.wald_p.map(|p| format!("{p}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_premia_csv(
    path: &Path,
) -> Result<crate::market_data::CsvLoad<PremiumRow>, crate::market_data::CsvError> {
    crate::market_data::load_rows(path, &PREMIA_CSV_HEADER, |row| {
        Ok(PremiumRow {
            spec_id: row.field("spec_id")?.to_string(),
            factor_name: row.field("factor_name")?.to_string(),
            lambda: row.f64_required("lambda")?,
            t_stat: row.f64_required("t_stat")?,
            adj_r2: row.f64_required("adj_r2")?,
            n_assets: row.u64_required("n_assets")? as usize,
            n_months: row.u64_required("n_months")? as usize,
            wald_p: row.f64_optional("wald_p")?,
        })
    })
}

/// Wide date-by-asset matrix CSV: header `date,<id>,<id>,…`, one row per
/// date, complete panel required.
pub fn write_wide_csv(
    dates: &[NaiveDate],
    names: &[String],
    matrix: &DMatrix<f64>,
    path: &Path,
) -> Result<(), csv::Error> {
    assert_eq!(matrix.nrows(), dates.len(), "row count mismatch");
    assert_eq!(matrix.ncols(), names.len(), "column count mismatch");
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, d) in dates.iter().enumerate() {
        let mut record = vec![d.to_string()];
        for j in 0..names.len() {
            record.push(format!("{}", matrix[(i, j)]));
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_wide_csv(
    path: &Path,
) -> Result<(Vec<NaiveDate>, Vec<String>, DMatrix<f64>), crate::market_data::CsvError> {
    use crate::market_data::CsvError;
    let io_err = |msg: String| CsvError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(msg),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| io_err(e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| io_err(e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.first().map(String::as_str) != Some("date") {
        return Err(CsvError::Header {
            path: path.display().to_string(),
            expected: "date,<asset ids>".to_string(),
            found: header.join(","),
        });
    }
    let names: Vec<String> = header[1..].to_vec();
    let mut dates = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io_err(e.to_string()))?;
        let line = i + 2;
        let date_str = record.get(0).unwrap_or_default();
        let date: NaiveDate = date_str
            .trim()
            .parse()
            .map_err(|_| io_err(format!("line {line}: invalid date '{date_str}'")))?;
        dates.push(date);
        for j in 1..header.len() {
            let cell = record.get(j).unwrap_or_default().trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| io_err(format!("line {line}: invalid number '{cell}'")))?;
            values.push(v);
        }
    }
    let matrix = DMatrix::from_fn(dates.len(), names.len(), |i, j| values[i * names.len() + j]);
    Ok((dates, names, matrix))
}
