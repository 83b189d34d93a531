//! Rolling stock-level factor loadings.
//!
//! Each stock's daily excess return is regressed on a constant, the
//! common-fear innovation series, and one control series (market-fear
//! innovations, VIX innovations, market excess return, or a characteristic
//! proxy) over a trailing one-year window. Loadings are re-estimated at
//! every month-end of the factor calendar, and feed the portfolio sorts one
//! month ahead.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::path::Path;

use crate::linalg;
use crate::market_data::{CsvError, CsvLoad, StockPanel};
use crate::series::{month_end_dates, DatedSeries};

pub const BETA_CSV_HEADER: [&str; 8] = [
    "stock_id",
    "as_of_month",
    "factor_name",
    "control_name",
    "beta_cf",
    "beta_control",
    "intercept",
    "n_obs",
];

/// Placeholder control name when the regression runs without a control.
pub const NO_CONTROL: &str = "none";

#[derive(Debug, Clone)]
pub struct BetaConfig {
    /// Trailing window length in factor-calendar days.
    pub window: usize,
    /// Minimum joint observations inside the window.
    pub min_obs: usize,
}

impl Default for BetaConfig {
    fn default() -> Self {
        BetaConfig {
            window: 252,
            min_obs: 200,
        }
    }
}

/// One estimated loading: a (stock, month-end) row of betas.csv.
#[derive(Debug, Clone)]
pub struct BetaObservation {
    pub stock_id: String,
    /// Last factor-calendar date of the estimation month.
    pub as_of_month: NaiveDate,
    pub factor_name: String,
    pub control_name: String,
    pub beta_cf: f64,
    /// Missing when the regression ran without a control.
    pub beta_control: Option<f64>,
    pub intercept: f64,
    pub n_obs: usize,
}

/// Reasons a (stock, month) cell emitted nothing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipDiagnostics {
    /// Fewer joint observations than the floor.
    pub below_min_obs: usize,
    /// Design matrix numerically rank-deficient (e.g. constant factor
    /// inside the window).
    pub singular_design: usize,
    /// The stock's own in-window returns carry no variation.
    pub degenerate_returns: usize,
}

#[derive(Debug, Clone)]
pub struct BetaEstimates {
    /// Rows sorted by (stock_id, as_of_month).
    pub observations: Vec<BetaObservation>,
    pub skips: SkipDiagnostics,
}

/// Estimate rolling loadings for every stock at every month-end of the
/// factor calendar.
///
/// The window at month-end `t` is the trailing `cfg.window` factor-calendar
/// dates ending at `t` (months before a full window has accumulated emit
/// nothing). Within the window, only dates where the stock return, the
/// factor, and the control (when present) are all observed enter the
/// regression.
pub fn estimate_betas(
    stocks: &StockPanel,
    factor: &DatedSeries,
    factor_name: &str,
    control: Option<(&str, &DatedSeries)>,
    cfg: &BetaConfig,
) -> BetaEstimates {
    let calendar = factor.dates();
    let month_ends = month_end_dates(calendar);
    // Index of each month-end within the factor calendar.
    let end_indices: Vec<usize> = month_ends
        .iter()
        .filter_map(|d| calendar.binary_search(d).ok())
        .filter(|&i| i + 1 >= cfg.window)
        .collect();
    let control_name = control.map(|(n, _)| n).unwrap_or(NO_CONTROL);

    let ids: Vec<&String> = stocks.stocks.keys().collect();
    let per_stock: Vec<(Vec<BetaObservation>, SkipDiagnostics)> = ids
        .par_iter()
        .map(|id| {
            let history = &stocks.stocks[*id];
            let mut rows = Vec::new();
            let mut skips = SkipDiagnostics::default();
            for &end in &end_indices {
                let start = end + 1 - cfg.window;
                let mut y_vals = Vec::new();
                let mut f_vals = Vec::new();
                let mut c_vals = Vec::new();
                for &date in &calendar[start..=end] {
                    let (Some(r), Some(f)) = (history.returns.get(date), factor.get(date)) else {
                        continue;
                    };
                    match control {
                        Some((_, c_series)) => {
                            if let Some(c) = c_series.get(date) {
                                y_vals.push(r);
                                f_vals.push(f);
                                c_vals.push(c);
                            }
                        }
                        None => {
                            y_vals.push(r);
                            f_vals.push(f);
                        }
                    }
                }
                let n = y_vals.len();
                if n < cfg.min_obs {
                    skips.below_min_obs += 1;
                    continue;
                }
                let y_spread = linalg::sample_std(&y_vals);
                if y_spread <= 1e-12 * (1.0 + linalg::mean(&y_vals).abs()) {
                    skips.degenerate_returns += 1;
                    continue;
                }
                let k = if control.is_some() { 3 } else { 2 };
                let x = DMatrix::from_fn(n, k, |i, j| match j {
                    0 => 1.0,
                    1 => f_vals[i],
                    _ => c_vals[i],
                });
                let y = DVector::from_vec(y_vals);
                match linalg::ols(&x, &y) {
                    Ok(fit) => rows.push(BetaObservation {
                        stock_id: (*id).clone(),
                        as_of_month: calendar[end],
                        factor_name: factor_name.to_string(),
                        control_name: control_name.to_string(),
                        beta_cf: fit.coefficients[1],
                        beta_control: control.is_some().then(|| fit.coefficients[2]),
                        intercept: fit.coefficients[0],
                        n_obs: n,
                    }),
                    Err(_) => skips.singular_design += 1,
                }
            }
            (rows, skips)
        })
        .collect();

    let mut observations = Vec::new();
    let mut skips = SkipDiagnostics::default();
    for (rows, s) in per_stock {
        observations.extend(rows);
        skips.below_min_obs += s.below_min_obs;
        skips.singular_design += s.singular_design;
        skips.degenerate_returns += s.degenerate_returns;
    }
    BetaEstimates {
        observations,
        skips,
    }
}

/// Loadings of one (factor, control) pair keyed for the sort stage:
/// month-end → stock → beta.
pub fn betas_by_month(
    observations: &[BetaObservation],
) -> std::collections::BTreeMap<NaiveDate, std::collections::BTreeMap<String, f64>> {
    let mut map: std::collections::BTreeMap<NaiveDate, std::collections::BTreeMap<String, f64>> =
        std::collections::BTreeMap::new();
    for o in observations {
        map.entry(o.as_of_month)
            .or_default()
            .insert(o.stock_id.clone(), o.beta_cf);
    }
    map
}

pub fn write_beta_csv(rows: &[BetaObservation], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(BETA_CSV_HEADER)?;
    for r in rows {
        w.write_record(&[
            r.stock_id.clone(),
            r.as_of_month.to_string(),
            r.factor_name.clone(),
            r.control_name.clone(),
            format!("{}", r.beta_cf),
            r.beta_control.map(|b| format!("{b}")).unwrap_or_default(),
            format!("{}", r.intercept),
            format!("{}", r.n_obs),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_beta_csv(path: &Path) -> Result<CsvLoad<BetaObservation>, CsvError> {
    crate::market_data::load_rows(path, &BETA_CSV_HEADER, |row| {
        Ok(BetaObservation {
            stock_id: row.field("stock_id")?.to_string(),
            as_of_month: row.date("as_of_month")?,
            factor_name: row.field("factor_name")?.to_string(),
            control_name: row.field("control_name")?.to_string(),
            beta_cf: row.f64_required("beta_cf")?,
            beta_control: row.f64_optional("beta_control")?,
            intercept: row.f64_required("intercept")?,
            n_obs: row.u64_required("n_obs")? as usize,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::StockRow;
    use crate::synth::{weekday_calendar, StreamRng};
    use approx::assert_relative_eq;

    fn calendar(n: usize) -> Vec<NaiveDate> {
        weekday_calendar(NaiveDate::from_ymd_opt(2018, 1, 2).unwrap(), n)
    }

    fn panel_from(rows: Vec<StockRow>) -> StockPanel {
        StockPanel::from_rows(rows)
    }

    fn stock_rows(id: &str, dates: &[NaiveDate], returns: &[f64]) -> Vec<StockRow> {
        dates
            .iter()
            .zip(returns)
            .map(|(d, r)| StockRow {
                stock_id: id.to_string(),
                date: *d,
                excess_return: Some(*r),
                price: Some(10.0),
                market_cap: Some(1.0e9),
                volume: None,
            })
            .collect()
    }

    #[test]
    fn exact_linear_model_recovers_coefficients() {
        let dates = calendar(300);
        let mut rng = StreamRng::new(3, 0);
        let f: Vec<f64> = (0..300).map(|_| rng.gaussian()).collect();
        let c: Vec<f64> = (0..300).map(|_| rng.gaussian()).collect();
        let r: Vec<f64> = f.iter().map(|v| 2.0 * v + 0.001).collect();
        let stocks = panel_from(stock_rows("A", &dates, &r));
        let factor = DatedSeries::from_pairs(dates.iter().copied().zip(f.iter().copied()));
        let control = DatedSeries::from_pairs(dates.iter().copied().zip(c.iter().copied()));
        let est = estimate_betas(
            &stocks,
            &factor,
            "CF_minus",
            Some(("MF_minus", &control)),
            &BetaConfig::default(),
        );
        assert!(!est.observations.is_empty());
        for o in &est.observations {
            assert_relative_eq!(o.beta_cf, 2.0, epsilon = 1e-10);
            assert_relative_eq!(o.intercept, 0.001, epsilon = 1e-10);
            assert!(o.beta_control.unwrap().abs() < 1e-10);
            assert_eq!(o.n_obs, 252);
            assert_eq!(o.factor_name, "CF_minus");
            assert_eq!(o.control_name, "MF_minus");
        }
    }

    #[test]
    fn noisy_model_estimates_near_truth() {
        let dates = calendar(600);
        let mut rng = StreamRng::new(5, 0);
        let f: Vec<f64> = (0..600).map(|_| 0.01 * rng.gaussian()).collect();
        let c: Vec<f64> = (0..600).map(|_| 0.01 * rng.gaussian()).collect();
        let r: Vec<f64> = f
            .iter()
            .zip(&c)
            .map(|(fv, cv)| -0.5 * fv + 1.2 * cv + 0.002 * rng.gaussian())
            .collect();
        let stocks = panel_from(stock_rows("A", &dates, &r));
        let factor = DatedSeries::from_pairs(dates.iter().copied().zip(f.iter().copied()));
        let control = DatedSeries::from_pairs(dates.iter().copied().zip(c.iter().copied()));
        let est = estimate_betas(
            &stocks,
            &factor,
            "CF",
            Some(("MF", &control)),
            &BetaConfig::default(),
        );
        // Noise SE on beta is roughly sigma_e / (sigma_f sqrt(n)) ≈
        // 0.002/(0.01*sqrt(252)) ≈ 0.0126; allow 3 SE.
        for o in &est.observations {
            assert!((o.beta_cf - (-0.5)).abs() < 0.05, "beta_cf {}", o.beta_cf);
            assert!(
                (o.beta_control.unwrap() - 1.2).abs() < 0.05,
                "beta_control {:?}",
                o.beta_control
            );
        }
    }

    #[test]
    fn matches_brute_force_normal_equations() {
        let dates = calendar(300);
        let mut rng = StreamRng::new(7, 0);
        let f: Vec<f64> = (0..300).map(|_| rng.gaussian()).collect();
        let c: Vec<f64> = (0..300).map(|_| rng.gaussian()).collect();
        let r: Vec<f64> = f
            .iter()
            .zip(&c)
            .map(|(fv, cv)| 0.3 * fv - 0.7 * cv + 0.01 * rng.gaussian())
            .collect();
        let stocks = panel_from(stock_rows("A", &dates, &r));
        let factor = DatedSeries::from_pairs(dates.iter().copied().zip(f.iter().copied()));
        let control = DatedSeries::from_pairs(dates.iter().copied().zip(c.iter().copied()));
        let est = estimate_betas(
            &stocks,
            &factor,
            "CF",
            Some(("MF", &control)),
            &BetaConfig::default(),
        );
        let last = est.observations.last().unwrap();
        // Re-derive via explicit (X'X)^{-1} X'y on the same window.
        let calendar_dates = factor.dates();
        let end = calendar_dates
            .binary_search(&last.as_of_month)
            .expect("month-end on calendar");
        let start = end + 1 - 252;
        let window = &calendar_dates[start..=end];
        let n = window.len();
        let x = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => factor.get(window[i]).unwrap(),
            _ => control.get(window[i]).unwrap(),
        });
        let history = &stocks.stocks["A"];
        let y = DVector::from_fn(n, |i, _| history.returns.get(window[i]).unwrap());
        let xtx = x.tr_mul(&x);
        let xty = x.tr_mul(&y);
        let solution = xtx.lu().solve(&xty).unwrap();
        assert_relative_eq!(last.beta_cf, solution[1], epsilon = 1e-9);
        assert_relative_eq!(last.beta_control.unwrap(), solution[2], epsilon = 1e-9);
        assert_relative_eq!(last.intercept, solution[0], epsilon = 1e-9);
    }

    #[test]
    fn scaling_factor_inversely_scales_beta() {
        let dates = calendar(300);
        let mut rng = StreamRng::new(11, 0);
        let f: Vec<f64> = (0..300).map(|_| rng.gaussian()).collect();
        let r: Vec<f64> = f.iter().map(|v| 0.8 * v + 0.005 * rng.gaussian()).collect();
        let stocks = panel_from(stock_rows("A", &dates, &r));
        let factor = DatedSeries::from_pairs(dates.iter().copied().zip(f.iter().copied()));
        let base = estimate_betas(&stocks, &factor, "CF", None, &BetaConfig::default());
        for scale in [0.5, 10.0] {
            let scaled_series = DatedSeries::from_pairs(
                dates.iter().copied().zip(f.iter().map(|v| v * scale)),
            );
            let scaled = estimate_betas(&stocks, &scaled_series, "CF", None, &BetaConfig::default());
            for (a, b) in base.observations.iter().zip(&scaled.observations) {
                assert_relative_eq!(a.beta_cf, b.beta_cf * scale, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn observations_outside_window_do_not_matter() {
        let dates = calendar(600);
        let mut rng = StreamRng::new(13, 0);
        let f: Vec<f64> = (0..600).map(|_| rng.gaussian()).collect();
        let r: Vec<f64> = f.iter().map(|v| 0.4 * v + 0.01 * rng.gaussian()).collect();
        let factor = DatedSeries::from_pairs(dates.iter().copied().zip(f.iter().copied()));
        let full = estimate_betas(
            &panel_from(stock_rows("A", &dates, &r)),
            &factor,
            "CF",
            None,
            &BetaConfig::default(),
        );
        // Tamper with the stock's returns strictly before one window.
        let target = full.observations.last().unwrap().clone();
        let end = dates.binary_search(&target.as_of_month).unwrap();
        let start = end + 1 - 252;
        let mut tampered = r.clone();
        for v in tampered.iter_mut().take(start) {
            *v = 99.0;
        }
        let redone = estimate_betas(
            &panel_from(stock_rows("A", &dates, &tampered)),
            &factor,
            "CF",
            None,
            &BetaConfig::default(),
        );
        let redone_target = redone
            .observations
            .iter()
            .find(|o| o.as_of_month == target.as_of_month)
            .unwrap();
        assert_eq!(target.beta_cf.to_bits(), redone_target.beta_cf.to_bits());
    }

    #[test]
    fn below_min_obs_emits_nothing() {
        let dates = calendar(300);
        let mut rng = StreamRng::new(17, 0);
        let f: Vec<f64> = (0..300).map(|_| rng.gaussian()).collect();
        // Stock observed on only 100 of the dates.
        let sparse_dates: Vec<NaiveDate> = dates.iter().copied().take(100).collect();
        let r: Vec<f64> = (0..100).map(|_| rng.gaussian() * 0.01).collect();
        let stocks = panel_from(stock_rows("A", &sparse_dates, &r));
        let factor = DatedSeries::from_pairs(dates.iter().copied().zip(f.iter().copied()));
        let est = estimate_betas(&stocks, &factor, "CF", None, &BetaConfig::default());
        assert!(est.observations.is_empty());
        assert!(est.skips.below_min_obs > 0);
    }

    #[test]
    fn constant_returns_skip_with_diagnostic() {
        let dates = calendar(300);
        let mut rng = StreamRng::new(19, 0);
        let f: Vec<f64> = (0..300).map(|_| rng.gaussian()).collect();
        let r = vec![0.01; 300];
        let stocks = panel_from(stock_rows("A", &dates, &r));
        let factor = DatedSeries::from_pairs(dates.iter().copied().zip(f.iter().copied()));
        let est = estimate_betas(&stocks, &factor, "CF", None, &BetaConfig::default());
        assert!(est.observations.is_empty());
        assert!(est.skips.degenerate_returns > 0);
    }

    #[test]
    fn constant_factor_is_singular() {
        let dates = calendar(300);
        let mut rng = StreamRng::new(23, 0);
        let r: Vec<f64> = (0..300).map(|_| 0.01 * rng.gaussian()).collect();
        let stocks = panel_from(stock_rows("A", &dates, &r));
        let factor = DatedSeries::from_pairs(dates.iter().copied().zip(std::iter::repeat(3.0)));
        let est = estimate_betas(&stocks, &factor, "CF", None, &BetaConfig::default());
        assert!(est.observations.is_empty());
        assert!(est.skips.singular_design > 0);
    }

    #[test]
    fn csv_roundtrip_preserves_bits() {
        let dates = calendar(300);
        let mut rng = StreamRng::new(29, 0);
        let f: Vec<f64> = (0..300).map(|_| rng.gaussian()).collect();
        let r: Vec<f64> = f.iter().map(|v| 0.4 * v + 0.01 * rng.gaussian()).collect();
        let stocks = panel_from(stock_rows("A", &dates, &r));
        let factor = DatedSeries::from_pairs(dates.iter().copied().zip(f.iter().copied()));
        let est = estimate_betas(&stocks, &factor, "CF", None, &BetaConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("betas.csv");
        write_beta_csv(&est.observations, &path).unwrap();
        let loaded = read_beta_csv(&path).unwrap();
        assert!(loaded.row_errors.is_empty());
        assert_eq!(loaded.records.len(), est.observations.len());
        for (a, b) in est.observations.iter().zip(&loaded.records) {
            assert_eq!(a.beta_cf.to_bits(), b.beta_cf.to_bits());
            assert_eq!(a.beta_control.is_none(), b.beta_control.is_none());
            assert_eq!(a.n_obs, b.n_obs);
        }
    }
}
