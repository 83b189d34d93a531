//! Quantile portfolio formation and performance measurement.
//!
//! Loadings estimated at month-end t sort stocks into quantile buckets that
//! are held, value-weighted by month-t capitalization, through month t+1.
//! Eligibility screens run before the sort: the bottom 30% of the
//! capitalization cross-section, stocks below $5, and the top and bottom 5%
//! of month-t returns are removed, in that order. The spread portfolio is
//! long the top bucket and short the bottom one; its raw mean and its
//! intercept on benchmark factor models (with heteroskedasticity- and
//! autocorrelation-consistent t-statistics) are the headline outputs.
//!
//! Four sorting schemes share the machinery: a single sort on the loading; a
//! characteristic-controlled sort that averages the loading-quantile cells
//! across control quantiles; and conditional / unconditional double sorts
//! that report the full grid with margins and per-row/column spreads.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

use crate::linalg;
use crate::market_data::{CsvError, CsvLoad, StockPanel};
use crate::series::{DatedSeries, YearMonth};

pub const PORTFOLIO_CSV_HEADER: [&str; 5] = ["scheme", "bucket", "date", "return", "n_stocks"];
pub const FF_CSV_HEADER: [&str; 8] =
    ["date", "mkt_rf", "smb", "hml", "rmw", "cma", "mom", "rf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Value,
    Equal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortScheme {
    Single,
    /// Control-then-loading sort whose reported loading-quantile return is
    /// the equal average over control cells (characteristic neutralization).
    Controlled,
    /// Control-then-loading sort reported as the full grid.
    ConditionalDouble,
    /// Independent breakpoints on control and loading.
    UnconditionalDouble,
}

impl SortScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            SortScheme::Single => "single",
            SortScheme::Controlled => "controlled",
            SortScheme::ConditionalDouble => "conditional_double",
            SortScheme::UnconditionalDouble => "unconditional_double",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" => Some(SortScheme::Single),
            "controlled" => Some(SortScheme::Controlled),
            "conditional_double" => Some(SortScheme::ConditionalDouble),
            "unconditional_double" => Some(SortScheme::UnconditionalDouble),
            _ => None,
        }
    }

    pub fn needs_control(self) -> bool {
        !matches!(self, SortScheme::Single)
    }
}

/// Universe screens applied at the formation month, in order.
#[derive(Debug, Clone)]
pub struct EligibilityConfig {
    /// Fraction of the capitalization cross-section removed from the bottom.
    pub small_cap_fraction: f64,
    /// Minimum month-end price.
    pub min_price: f64,
    /// Fraction removed from each tail of the month-return cross-section.
    pub return_tail_fraction: f64,
}

impl Default for EligibilityConfig {
    fn default() -> Self {
        EligibilityConfig {
            small_cap_fraction: 0.30,
            min_price: 5.0,
            return_tail_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SortConfig {
    pub n_quantiles: usize,
    pub weighting: Weighting,
    pub scheme: SortScheme,
    pub eligibility: EligibilityConfig,
}

impl Default for SortConfig {
    fn default() -> Self {
        SortConfig {
            n_quantiles: 5,
            weighting: Weighting::Value,
            scheme: SortScheme::Single,
            eligibility: EligibilityConfig::default(),
        }
    }
}

/// One (bucket, month) performance record.
#[derive(Debug, Clone)]
pub struct PortfolioRecord {
    pub scheme: String,
    pub bucket: String,
    /// Calendar end of the holding month.
    pub date: NaiveDate,
    pub ret: f64,
    pub n_stocks: usize,
}

/// Monthly and daily bucket returns plus formation-time memberships.
#[derive(Debug, Clone)]
pub struct PortfolioReturnPanel {
    pub scheme: SortScheme,
    /// Sorted by (date, bucket label order as emitted).
    pub records: Vec<PortfolioRecord>,
    /// Bucket label → monthly return series dated at calendar month ends.
    pub monthly: BTreeMap<String, DatedSeries>,
    /// Bucket label → daily return series over the holding months.
    pub daily: BTreeMap<String, DatedSeries>,
    /// Formation month-end → stock → bucket label.
    pub memberships: BTreeMap<NaiveDate, BTreeMap<String, String>>,
    /// Months skipped because the eligible set was smaller than the grid.
    pub skipped_months: usize,
}

impl PortfolioReturnPanel {
    /// Label of the long-short spread portfolio.
    pub fn spread_label(n_quantiles: usize) -> String {
        format!("{n_quantiles}-1")
    }
}

#[derive(Debug, Error)]
pub enum PortfolioError {
    #[error("need at least {required} overlapping months, got {actual}")]
    InsufficientOverlap { required: usize, actual: usize },
    #[error("sort produced no months")]
    EmptyPanel,
    #[error("control series required for scheme {scheme}")]
    MissingControl { scheme: String },
}

/// Month-level stock attributes derived from the daily panel.
struct MonthlyView {
    /// month → stock → compounded month return.
    returns: BTreeMap<YearMonth, BTreeMap<String, f64>>,
    /// month → stock → last observed price in the month.
    prices: BTreeMap<YearMonth, BTreeMap<String, f64>>,
    /// month → stock → last observed capitalization in the month.
    caps: BTreeMap<YearMonth, BTreeMap<String, f64>>,
}

fn monthly_view(stocks: &StockPanel) -> MonthlyView {
    let mut view = MonthlyView {
        returns: BTreeMap::new(),
        prices: BTreeMap::new(),
        caps: BTreeMap::new(),
    };
    for (id, history) in &stocks.stocks {
        for (month, value) in history.returns.monthly_compound() {
            view.returns
                .entry(month)
                .or_default()
                .insert(id.clone(), value);
        }
        for (date, value) in history.prices.dates().iter().zip(history.prices.values()) {
            view.prices
                .entry(YearMonth::of(*date))
                .or_default()
                .insert(id.clone(), *value);
        }
        for (date, value) in history
            .market_caps
            .dates()
            .iter()
            .zip(history.market_caps.values())
        {
            view.caps
                .entry(YearMonth::of(*date))
                .or_default()
                .insert(id.clone(), *value);
        }
    }
    view
}

/// Apply the three eligibility screens for formation month `month`.
/// Survivors are returned sorted by id.
pub fn eligible_universe(
    stocks: &StockPanel,
    month: YearMonth,
    cfg: &EligibilityConfig,
) -> Vec<String> {
    let view = monthly_view(stocks);
    eligible_from_view(&view, month, cfg)
}

fn eligible_from_view(view: &MonthlyView, month: YearMonth, cfg: &EligibilityConfig) -> Vec<String> {
    let (Some(rets), Some(prices), Some(caps)) = (
        view.returns.get(&month),
        view.prices.get(&month),
        view.caps.get(&month),
    ) else {
        return Vec::new();
    };
    // Stage 0: a stock must expose all three attributes this month.
    let mut universe: Vec<&String> = rets
        .keys()
        .filter(|id| prices.contains_key(*id) && caps.contains_key(*id))
        .collect();
    universe.sort();

    // Stage 1: drop the bottom fraction of the capitalization distribution,
    // ties broken by id so the cut is reproducible.
    let drop_n = (cfg.small_cap_fraction * universe.len() as f64).floor() as usize;
    let mut by_cap: Vec<&String> = universe.clone();
    by_cap.sort_by(|a, b| caps[*a].total_cmp(&caps[*b]).then_with(|| a.cmp(b)));
    let dropped_small: BTreeSet<&String> = by_cap.into_iter().take(drop_n).collect();
    universe.retain(|id| !dropped_small.contains(id));

    // Stage 2: minimum price.
    universe.retain(|id| prices[*id] >= cfg.min_price);

    // Stage 3: remove both tails of the month-return distribution.
    let tail_n = (cfg.return_tail_fraction * universe.len() as f64).floor() as usize;
    if tail_n > 0 {
        let mut by_ret: Vec<&String> = universe.clone();
        by_ret.sort_by(|a, b| rets[*a].total_cmp(&rets[*b]).then_with(|| a.cmp(b)));
        let dropped_tails: BTreeSet<&String> = by_ret
            .iter()
            .take(tail_n)
            .chain(by_ret.iter().rev().take(tail_n))
            .copied()
            .collect();
        universe.retain(|id| !dropped_tails.contains(id));
    }
    universe.into_iter().cloned().collect()
}

/// Equal-count quantile assignment over `(signal, id)`-sorted members.
/// Returns bucket index (0-based) per member, aligned to the input order.
/// The first `n mod q` buckets receive the extra member when `n` does not
/// divide evenly.
pub fn quantile_ranks(signals: &[(String, f64)], q: usize) -> Vec<usize> {
    let n = signals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        signals[a]
            .1
            .total_cmp(&signals[b].1)
            .then_with(|| signals[a].0.cmp(&signals[b].0))
    });
    let base = n / q;
    let extra = n % q;
    let mut ranks = vec![0usize; n];
    let mut cursor = 0usize;
    for bucket in 0..q {
        let size = base + usize::from(bucket < extra);
        for _ in 0..size {
            if cursor < n {
                ranks[order[cursor]] = bucket;
                cursor += 1;
            }
        }
    }
    ranks
}

/// A formed bucket for one holding month: members and formation weights.
struct FormedBucket {
    label: String,
    members: Vec<(String, f64)>, // (stock, weight)
}

fn weighted_return(
    members: &[(String, f64)],
    month_returns: &BTreeMap<String, f64>,
) -> Option<(f64, usize)> {
    let mut total_weight = 0.0;
    let mut total = 0.0;
    let mut count = 0usize;
    for (id, w) in members {
        if let Some(r) = month_returns.get(id) {
            total += w * r;
            total_weight += w;
            count += 1;
        }
    }
    (total_weight > 0.0).then(|| (total / total_weight, count))
}

fn weighted_daily_returns(
    members: &[(String, f64)],
    stocks: &StockPanel,
    month: YearMonth,
) -> Vec<(NaiveDate, f64)> {
    let mut per_day: BTreeMap<NaiveDate, (f64, f64)> = BTreeMap::new();
    for (id, w) in members {
        let Some(history) = stocks.stocks.get(id) else {
            continue;
        };
        let series = &history.returns;
        for (date, value) in series.dates().iter().zip(series.values()) {
            if YearMonth::of(*date) == month {
                let cell = per_day.entry(*date).or_insert((0.0, 0.0));
                cell.0 += w * value;
                cell.1 += w;
            }
        }
    }
    per_day
        .into_iter()
        .filter(|(_, (_, w))| *w > 0.0)
        .map(|(d, (num, den))| (d, num / den))
        .collect()
}

/// Form quantile portfolios for every formation month in `signals`.
///
/// `signals` maps each formation month-end date to the per-stock sorting
/// loadings; `controls` supplies the control values for the two-variable
/// schemes. Holding-month returns are compounded daily returns; a member
/// with no holding-month return drops out and the bucket reweights over the
/// survivors.
pub fn sort_portfolios(
    stocks: &StockPanel,
    signals: &BTreeMap<NaiveDate, BTreeMap<String, f64>>,
    controls: Option<&BTreeMap<NaiveDate, BTreeMap<String, f64>>>,
    cfg: &SortConfig,
) -> Result<PortfolioReturnPanel, PortfolioError> {
    assert!(cfg.n_quantiles >= 2, "need at least two quantiles");
    if cfg.scheme.needs_control() && controls.is_none() {
        return Err(PortfolioError::MissingControl {
            scheme: cfg.scheme.as_str().to_string(),
        });
    }
    let view = monthly_view(stocks);
    let q = cfg.n_quantiles;
    let mut records = Vec::new();
    let mut monthly: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    let mut daily: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    let mut memberships = BTreeMap::new();
    let mut skipped = 0usize;

    for (formation_date, stock_signals) in signals {
        let formation_month = YearMonth::of(*formation_date);
        let holding_month = formation_month.next();
        let Some(holding_returns) = view.returns.get(&holding_month) else {
            continue;
        };
        let eligible = eligible_from_view(&view, formation_month, &cfg.eligibility);
        let caps = &view.caps[&formation_month];
        let month_controls = controls.and_then(|c| c.get(formation_date));
        let members: Vec<(String, f64)> = eligible
            .into_iter()
            .filter(|id| stock_signals.contains_key(id))
            .filter(|id| {
                month_controls.map_or(!cfg.scheme.needs_control(), |c| c.contains_key(id))
            })
            .map(|id| {
                let s = stock_signals[&id];
                (id, s)
            })
            .collect();
        let needed = if cfg.scheme.needs_control() { q * q } else { q };
        if members.len() < needed {
            skipped += 1;
            continue;
        }

        // Assign buckets by scheme.
        let grid: Vec<FormedBucket> = match cfg.scheme {
            SortScheme::Single => {
                let ranks = quantile_ranks(&members, q);
                let mut buckets: Vec<Vec<(String, f64)>> = vec![Vec::new(); q];
                for (i, (id, _)) in members.iter().enumerate() {
                    let weight = bucket_weight(cfg.weighting, caps, id);
                    buckets[ranks[i]].push((id.clone(), weight));
                }
                buckets
                    .into_iter()
                    .enumerate()
                    .map(|(b, members)| FormedBucket {
                        label: format!("{}", b + 1),
                        members,
                    })
                    .collect()
            }
            SortScheme::Controlled | SortScheme::ConditionalDouble => {
                let ctrl = month_controls.expect("control presence checked");
                conditional_grid(&members, ctrl, caps, q, cfg.weighting)
            }
            SortScheme::UnconditionalDouble => {
                let ctrl = month_controls.expect("control presence checked");
                let control_members: Vec<(String, f64)> = members
                    .iter()
                    .map(|(id, _)| (id.clone(), ctrl[id]))
                    .collect();
                let control_ranks = quantile_ranks(&control_members, q);
                let signal_ranks = quantile_ranks(&members, q);
                let mut cells: BTreeMap<(usize, usize), Vec<(String, f64)>> = BTreeMap::new();
                for (i, (id, _)) in members.iter().enumerate() {
                    let weight = bucket_weight(cfg.weighting, caps, id);
                    cells
                        .entry((control_ranks[i], signal_ranks[i]))
                        .or_default()
                        .push((id.clone(), weight));
                }
                cells
                    .into_iter()
                    .map(|((ci, sj), members)| FormedBucket {
                        label: format!("{}_{}", ci + 1, sj + 1),
                        members,
                    })
                    .collect()
            }
        };

        // Membership dump for audit.
        let mut month_membership = BTreeMap::new();
        for bucket in &grid {
            for (id, _) in &bucket.members {
                month_membership.insert(id.clone(), bucket.label.clone());
            }
        }
        memberships.insert(*formation_date, month_membership);

        // Realized returns per cell.
        let eom = holding_month.end_date();
        let mut cell_monthly: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for bucket in &grid {
            if let Some((r, n)) = weighted_return(&bucket.members, holding_returns) {
                cell_monthly.insert(bucket.label.clone(), (r, n));
                for (d, r) in weighted_daily_returns(&bucket.members, stocks, holding_month) {
                    daily.entry(bucket.label.clone()).or_default().push((d, r));
                }
            }
        }

        // Scheme-specific aggregation into emitted records.
        let emitted: Vec<(String, f64, usize)> = match cfg.scheme {
            SortScheme::Single => {
                let mut out: Vec<(String, f64, usize)> = Vec::new();
                for b in 1..=q {
                    let label = format!("{b}");
                    if let Some((r, n)) = cell_monthly.get(&label) {
                        out.push((label, *r, *n));
                    }
                }
                push_spread(&mut out, q);
                out
            }
            SortScheme::Controlled => {
                // Loading-quantile return: equal average over control cells.
                let mut out: Vec<(String, f64, usize)> = Vec::new();
                for b in 1..=q {
                    let mut total = 0.0;
                    let mut cells = 0usize;
                    let mut n_total = 0usize;
                    for c in 1..=q {
                        if let Some((r, n)) = cell_monthly.get(&format!("{c}_{b}")) {
                            total += r;
                            cells += 1;
                            n_total += n;
                        }
                    }
                    if cells > 0 {
                        out.push((format!("{b}"), total / cells as f64, n_total));
                    }
                }
                push_spread(&mut out, q);
                out
            }
            SortScheme::ConditionalDouble | SortScheme::UnconditionalDouble => {
                grid_records(&cell_monthly, q)
            }
        };

        for (label, r, n) in emitted {
            monthly.entry(label.clone()).or_default().push((eom, r));
            records.push(PortfolioRecord {
                scheme: cfg.scheme.as_str().to_string(),
                bucket: label,
                date: eom,
                ret: r,
                n_stocks: n,
            });
        }
        // Daily spread series for single/controlled schemes.
        if matches!(cfg.scheme, SortScheme::Single) {
            let top_days = weighted_daily_returns(
                &grid[q - 1].members,
                stocks,
                holding_month,
            );
            let bottom_days: BTreeMap<NaiveDate, f64> =
                weighted_daily_returns(&grid[0].members, stocks, holding_month)
                    .into_iter()
                    .collect();
            let spread_label = PortfolioReturnPanel::spread_label(q);
            for (d, top) in top_days {
                if let Some(bottom) = bottom_days.get(&d) {
                    daily
                        .entry(spread_label.clone())
                        .or_default()
                        .push((d, top - bottom));
                }
            }
        }
    }

    if records.is_empty() {
        return Err(PortfolioError::EmptyPanel);
    }
    records.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.bucket.cmp(&b.bucket)));
    Ok(PortfolioReturnPanel {
        scheme: cfg.scheme,
        records,
        monthly: monthly
            .into_iter()
            .map(|(k, v)| (k, DatedSeries::from_pairs(v)))
            .collect(),
        daily: daily
            .into_iter()
            .map(|(k, v)| (k, DatedSeries::from_pairs(v)))
            .collect(),
        memberships,
        skipped_months: skipped,
    })
}

fn bucket_weight(weighting: Weighting, caps: &BTreeMap<String, f64>, id: &str) -> f64 {
    match weighting {
        Weighting::Value => caps[id],
        Weighting::Equal => 1.0,
    }
}

/// Control-conditional grid: sort by control into q buckets, then by
/// loading within each control bucket.
fn conditional_grid(
    members: &[(String, f64)],
    controls: &BTreeMap<String, f64>,
    caps: &BTreeMap<String, f64>,
    q: usize,
    weighting: Weighting,
) -> Vec<FormedBucket> {
    let control_members: Vec<(String, f64)> = members
        .iter()
        .map(|(id, _)| (id.clone(), controls[id]))
        .collect();
    let control_ranks = quantile_ranks(&control_members, q);
    let mut rows: Vec<Vec<(String, f64)>> = vec![Vec::new(); q];
    for (i, (id, signal)) in members.iter().enumerate() {
        rows[control_ranks[i]].push((id.clone(), *signal));
    }
    let mut cells = Vec::new();
    for (ci, row) in rows.iter().enumerate() {
        let ranks = quantile_ranks(row, q);
        let mut row_cells: Vec<Vec<(String, f64)>> = vec![Vec::new(); q];
        for (i, (id, _)) in row.iter().enumerate() {
            let weight = bucket_weight(weighting, caps, id);
            row_cells[ranks[i]].push((id.clone(), weight));
        }
        for (sj, members) in row_cells.into_iter().enumerate() {
            cells.push(FormedBucket {
                label: format!("{}_{}", ci + 1, sj + 1),
                members,
            });
        }
    }
    cells
}

fn push_spread(out: &mut Vec<(String, f64, usize)>, q: usize) {
    let top = out.iter().find(|(l, _, _)| l == &format!("{q}"));
    let bottom = out.iter().find(|(l, _, _)| l == "1");
    if let (Some((_, rt, nt)), Some((_, rb, nb))) = (top, bottom) {
        let spread = rt - rb;
        let n = nt + nb;
        out.push((PortfolioReturnPanel::spread_label(q), spread, n));
    }
}

/// Grid emission: cells, row/column margins, row/column spreads.
fn grid_records(
    cell_monthly: &BTreeMap<String, (f64, usize)>,
    q: usize,
) -> Vec<(String, f64, usize)> {
    let mut out = Vec::new();
    for c in 1..=q {
        for b in 1..=q {
            if let Some((r, n)) = cell_monthly.get(&format!("{c}_{b}")) {
                out.push((format!("{c}_{b}"), *r, *n));
            }
        }
    }
    // Row margins and spreads (within a control row, across loadings).
    for c in 1..=q {
        let row: Vec<(f64, usize)> = (1..=q)
            .filter_map(|b| cell_monthly.get(&format!("{c}_{b}")).copied())
            .collect();
        if !row.is_empty() {
            let mean = row.iter().map(|(r, _)| r).sum::<f64>() / row.len() as f64;
            let n: usize = row.iter().map(|(_, n)| n).sum();
            out.push((format!("{c}_all"), mean, n));
        }
        if let (Some((hi, nh)), Some((lo, nl))) = (
            cell_monthly.get(&format!("{c}_{q}")),
            cell_monthly.get(&format!("{c}_1")),
        ) {
            out.push((format!("{c}_spread"), hi - lo, nh + nl));
        }
    }
    // Column margins and spreads (within a loading column, across controls).
    for b in 1..=q {
        let col: Vec<(f64, usize)> = (1..=q)
            .filter_map(|c| cell_monthly.get(&format!("{c}_{b}")).copied())
            .collect();
        if !col.is_empty() {
            let mean = col.iter().map(|(r, _)| r).sum::<f64>() / col.len() as f64;
            let n: usize = col.iter().map(|(_, n)| n).sum();
            out.push((format!("all_{b}"), mean, n));
        }
        if let (Some((hi, nh)), Some((lo, nl))) = (
            cell_monthly.get(&format!("{q}_{b}")),
            cell_monthly.get(&format!("1_{b}")),
        ) {
            out.push((format!("spread_{b}"), hi - lo, nh + nl));
        }
    }
    out
}

/// Benchmark factor model for risk adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorModel {
    Ff5,
    Ff5Mom,
}

impl FactorModel {
    pub fn factor_names(self) -> &'static [&'static str] {
        match self {
            FactorModel::Ff5 => &["mkt_rf", "smb", "hml", "rmw", "cma"],
            FactorModel::Ff5Mom => &["mkt_rf", "smb", "hml", "rmw", "cma", "mom"],
        }
    }
}

/// One month of benchmark factor returns (decimal fractions).
#[derive(Debug, Clone)]
pub struct FfRow {
    pub date: NaiveDate,
    pub mkt_rf: f64,
    pub smb: f64,
    pub hml: f64,
    pub rmw: f64,
    pub cma: f64,
    pub mom: f64,
    pub rf: f64,
}

impl FfRow {
    fn value(&self, name: &str) -> f64 {
        match name {
            "mkt_rf" => self.mkt_rf,
            "smb" => self.smb,
            "hml" => self.hml,
            "rmw" => self.rmw,
            "cma" => self.cma,
            "mom" => self.mom,
            "rf" => self.rf,
            other => panic!("unknown factor column {other}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlphaEstimate {
    pub alpha: f64,
    pub t_alpha: f64,
    /// (factor name, slope) in model order.
    pub betas: Vec<(String, f64)>,
    pub n_obs: usize,
    pub r_squared: f64,
}

/// Time-series regression of a monthly portfolio return on a benchmark
/// factor model; the intercept's t-statistic is HAC with `nw_lags` lags.
/// Portfolio and factor months are matched by calendar month.
pub fn alpha_regression(
    portfolio: &DatedSeries,
    factors: &[FfRow],
    model: FactorModel,
    nw_lags: usize,
    min_overlap: usize,
) -> Result<AlphaEstimate, PortfolioError> {
    let by_month: BTreeMap<YearMonth, &FfRow> = factors
        .iter()
        .map(|row| (YearMonth::of(row.date), row))
        .collect();
    let names = model.factor_names();
    let mut y_vals = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    for (date, value) in portfolio.dates().iter().zip(portfolio.values()) {
        if let Some(row) = by_month.get(&YearMonth::of(*date)) {
            y_vals.push(*value);
            x_rows.push(names.iter().map(|n| row.value(n)).collect());
        }
    }
    let n = y_vals.len();
    if n < min_overlap {
        return Err(PortfolioError::InsufficientOverlap {
            required: min_overlap,
            actual: n,
        });
    }
    let k = names.len() + 1;
    let x = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { x_rows[i][j - 1] });
    let y = DVector::from_vec(y_vals);
    let fit = linalg::ols(&x, &y).map_err(|_| PortfolioError::EmptyPanel)?;
    let hac = linalg::hac_ols_covariance(&x, &fit.residuals, &fit.xtx_inv, nw_lags);
    let alpha = fit.coefficients[0];
    let t_alpha = alpha / hac[(0, 0)].sqrt();
    Ok(AlphaEstimate {
        alpha,
        t_alpha,
        betas: names
            .iter()
            .enumerate()
            .map(|(j, name)| (name.to_string(), fit.coefficients[j + 1]))
            .collect(),
        n_obs: n,
        r_squared: fit.r_squared(),
    })
}

/// Mean and HAC t-statistic of a bucket's monthly return series.
pub fn mean_with_t(series: &DatedSeries, nw_lags: usize) -> (f64, f64) {
    linalg::hac_mean_t(series.values(), nw_lags)
}

pub fn write_portfolio_csv(records: &[PortfolioRecord], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PORTFOLIO_CSV_HEADER)?;
    for r in records {
        w.write_record(&[
            r.scheme.clone(),
            r.bucket.clone(),
            r.date.to_string(),
            format!("{}", r.ret),
            format!("{}", r.n_stocks),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_portfolio_csv(path: &Path) -> Result<CsvLoad<PortfolioRecord>, CsvError> {
    crate::market_data::load_rows(path, &PORTFOLIO_CSV_HEADER, |row| {
        Ok(PortfolioRecord {
            scheme: row.field("scheme")?.to_string(),
            bucket: row.field("bucket")?.to_string(),
            date: row.date("date")?,
            ret: row.f64_required("return")?,
            n_stocks: row.u64_required("n_stocks")? as usize,
        })
    })
}

pub fn write_ff_csv(rows: &[FfRow], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(FF_CSV_HEADER)?;
    for r in rows {
        w.write_record(&[
            r.date.to_string(),
            format!("{}", r.mkt_rf),
            format!("{}", r.smb),
            format!("{}", r.hml),
            format!("{}", r.rmw),
            format!("{}", r.cma),
            format!("{}", r.mom),
            format!("{}", r.rf),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ff_csv(path: &Path) -> Result<CsvLoad<FfRow>, CsvError> {
    crate::market_data::load_rows(path, &FF_CSV_HEADER, |row| {
        Ok(FfRow {
            date: row.date("date")?,
            mkt_rf: row.f64_required("mkt_rf")?,
            smb: row.f64_required("smb")?,
            hml: row.f64_required("hml")?,
            rmw: row.f64_required("rmw")?,
            cma: row.f64_required("cma")?,
            mom: row.f64_required("mom")?,
            rf: row.f64_required("rf")?,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::StockRow;
    use crate::synth::{weekday_calendar, StreamRng};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    /// Builds a stock panel with one row per (stock, day).
    struct PanelBuilder {
        rows: Vec<StockRow>,
    }

    impl PanelBuilder {
        fn new() -> Self {
            PanelBuilder { rows: Vec::new() }
        }

        fn push(&mut self, id: &str, date: NaiveDate, ret: f64, price: f64, cap: f64) {
            self.rows.push(StockRow {
                stock_id: id.to_string(),
                date,
                excess_return: Some(ret),
                price: Some(price),
                market_cap: Some(cap),
                volume: None,
            });
        }

        fn build(self) -> StockPanel {
            StockPanel::from_rows(self.rows)
        }
    }

    fn ym(year: i32, month: u32) -> YearMonth {
        YearMonth { year, month }
    }

    /// Two months of daily data for `n` stocks with given formation-month
    /// attributes and holding-month daily returns.
    fn two_month_panel(
        formation_rets: &[f64],
        prices: &[f64],
        caps: &[f64],
        holding_rets: &[f64],
    ) -> (StockPanel, Vec<String>) {
        let n = formation_rets.len();
        let mut builder = PanelBuilder::new();
        let ids: Vec<String> = (0..n).map(|i| format!("S{i:02}")).collect();
        let formation_days =
            weekday_calendar(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), 5);
        let holding_days = weekday_calendar(NaiveDate::from_ymd_opt(2020, 2, 3).unwrap(), 5);
        for (i, id) in ids.iter().enumerate() {
            // Formation month: the monthly return lands entirely on day one.
            for (d, day) in formation_days.iter().enumerate() {
                let r = if d == 0 { formation_rets[i] } else { 0.0 };
                builder.push(id, *day, r, prices[i], caps[i]);
            }
            for (d, day) in holding_days.iter().enumerate() {
                let r = if d == 0 { holding_rets[i] } else { 0.0 };
                builder.push(id, *day, r, prices[i], caps[i]);
            }
        }
        (builder.build(), ids)
    }

    fn signals_at(
        date: NaiveDate,
        ids: &[String],
        values: &[f64],
    ) -> BTreeMap<NaiveDate, BTreeMap<String, f64>> {
        let mut inner = BTreeMap::new();
        for (id, v) in ids.iter().zip(values) {
            inner.insert(id.clone(), *v);
        }
        let mut map = BTreeMap::new();
        map.insert(date, inner);
        map
    }

    #[test]
    fn eligibility_screens_apply_in_order() {
        // 20 stocks; check the surviving set by hand.
        // Caps 1..=20 → bottom floor(0.3*20)=6 by cap (S00..S05) dropped.
        // Prices: S06, S07 below $5 → dropped (12 left).
        // Returns ascending by index → floor(0.05*12)=0 tail drops.
        let n = 20;
        let rets: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        let prices: Vec<f64> = (0..n).map(|i| if i == 6 || i == 7 { 4.0 } else { 50.0 }).collect();
        let caps: Vec<f64> = (0..n).map(|i| (i + 1) as f64 * 1e6).collect();
        let (panel, ids) = two_month_panel(&rets, &prices, &caps, &vec![0.0; n]);
        let survivors = eligible_universe(&panel, ym(2020, 1), &EligibilityConfig::default());
        let expected: Vec<String> = ids[8..].to_vec();
        assert_eq!(survivors, expected);
    }

    #[test]
    fn eligibility_tail_removal_counts() {
        // 40 identical-cap, high-price stocks: floor(0.3*40)=12 small-cap
        // drops (ties by id → S00..S11), leaving 28; tail floor(0.05*28)=1
        // from each end of the return ordering.
        let n = 40;
        let rets: Vec<f64> = (0..n).map(|i| i as f64 * 0.001).collect();
        let prices = vec![10.0; n];
        let caps = vec![1e7; n];
        let (panel, ids) = two_month_panel(&rets, &prices, &caps, &vec![0.0; n]);
        let survivors = eligible_universe(&panel, ym(2020, 1), &EligibilityConfig::default());
        // S00..S11 dropped by the cap stage (tie-break by id); of the
        // remaining S12..S39 the lowest return is S12 and the highest S39.
        let expected: Vec<String> = ids[13..39].to_vec();
        assert_eq!(survivors, expected);
    }

    #[test]
    fn quantile_ranks_distribute_extras_to_early_buckets() {
        let signals: Vec<(String, f64)> = (0..12)
            .map(|i| (format!("S{i:02}"), i as f64))
            .collect();
        let ranks = quantile_ranks(&signals, 5);
        // 12 = 5*2 + 2 → buckets sized 3,3,2,2,2.
        let sizes: Vec<usize> = (0..5)
            .map(|b| ranks.iter().filter(|r| **r == b).count())
            .collect();
        assert_eq!(sizes, vec![3, 3, 2, 2, 2]);
        // Sorted input → ranks are monotone.
        assert_eq!(ranks, vec![0, 0, 0, 1, 1, 1, 2, 2, 3, 3, 4, 4]);
    }

    #[test]
    fn quantile_ranks_tie_break_by_id() {
        let signals: Vec<(String, f64)> = (0..4)
            .map(|i| (format!("S{i}"), 1.0))
            .collect();
        let ranks = quantile_ranks(&signals, 2);
        assert_eq!(ranks, vec![0, 0, 1, 1]);
    }

    #[test]
    fn hand_sorted_quintiles_and_spread() {
        // 10 stocks, betas 1..10, equal caps; holding returns rise with
        // index so the spread is computable by hand.
        let n = 10;
        let rets = vec![0.0; n];
        let prices = vec![50.0; n];
        let caps = vec![1e7; n];
        let holding: Vec<f64> = (0..n).map(|i| 0.01 * (i as f64 + 1.0)).collect();
        let (panel, ids) = two_month_panel(&rets, &prices, &caps, &holding);
        // Disable eligibility screens, since the hand case wants all 10.
        let cfg = SortConfig {
            eligibility: EligibilityConfig {
                small_cap_fraction: 0.0,
                min_price: 0.0,
                return_tail_fraction: 0.0,
            },
            ..SortConfig::default()
        };
        let betas: Vec<f64> = (0..n).map(|i| (i + 1) as f64).collect();
        let formation = NaiveDate::from_ymd_opt(2020, 1, 31).unwrap();
        let signals = signals_at(formation, &ids, &betas);
        let result = sort_portfolios(&panel, &signals, None, &cfg).unwrap();
        let eom = NaiveDate::from_ymd_opt(2020, 2, 29).unwrap();
        let q1 = result.monthly["1"].get(eom).unwrap();
        let q5 = result.monthly["5"].get(eom).unwrap();
        let spread = result.monthly["5-1"].get(eom).unwrap();
        assert_relative_eq!(q1, 0.5 * (0.01 + 0.02), epsilon = 1e-12);
        assert_relative_eq!(q5, 0.5 * (0.09 + 0.10), epsilon = 1e-12);
        assert_relative_eq!(spread, q5 - q1, epsilon = 1e-15);
        // Memberships recorded at the formation date.
        assert_eq!(result.memberships[&formation]["S00"], "1");
        assert_eq!(result.memberships[&formation]["S09"], "5");
    }

    #[test]
    fn monotone_transform_leaves_buckets_unchanged() {
        let n = 15;
        let mut rng = StreamRng::new(3, 0);
        let betas: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let rets = vec![0.0; n];
        let prices = vec![50.0; n];
        let caps: Vec<f64> = (0..n).map(|_| 1e7 * (1.0 + rng.uniform())).collect();
        let holding: Vec<f64> = (0..n).map(|_| 0.02 * rng.gaussian()).collect();
        let (panel, ids) = two_month_panel(&rets, &prices, &caps, &holding);
        let cfg = SortConfig {
            eligibility: EligibilityConfig {
                small_cap_fraction: 0.0,
                min_price: 0.0,
                return_tail_fraction: 0.0,
            },
            ..SortConfig::default()
        };
        let formation = NaiveDate::from_ymd_opt(2020, 1, 31).unwrap();
        let base = sort_portfolios(&panel, &signals_at(formation, &ids, &betas), None, &cfg)
            .unwrap();
        let transformed: Vec<f64> = betas.iter().map(|b| (3.0 * b).exp()).collect();
        let redo =
            sort_portfolios(&panel, &signals_at(formation, &ids, &transformed), None, &cfg)
                .unwrap();
        assert_eq!(base.memberships, redo.memberships);
    }

    #[test]
    fn value_weights_invariant_to_cap_scaling() {
        let n = 12;
        let mut rng = StreamRng::new(5, 0);
        let betas: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let rets = vec![0.0; n];
        let prices = vec![50.0; n];
        let caps: Vec<f64> = (0..n).map(|_| 1e7 * (1.0 + rng.uniform())).collect();
        let holding: Vec<f64> = (0..n).map(|_| 0.02 * rng.gaussian()).collect();
        let cfg = SortConfig {
            eligibility: EligibilityConfig {
                small_cap_fraction: 0.0,
                min_price: 0.0,
                return_tail_fraction: 0.0,
            },
            ..SortConfig::default()
        };
        let formation = NaiveDate::from_ymd_opt(2020, 1, 31).unwrap();
        let (panel, ids) = two_month_panel(&rets, &prices, &caps, &holding);
        let base =
            sort_portfolios(&panel, &signals_at(formation, &ids, &betas), None, &cfg).unwrap();
        let scaled_caps: Vec<f64> = caps.iter().map(|c| c * 7.0).collect();
        let (scaled_panel, _) = two_month_panel(&rets, &prices, &scaled_caps, &holding);
        let redo = sort_portfolios(&scaled_panel, &signals_at(formation, &ids, &betas), None, &cfg)
            .unwrap();
        for (label, series) in &base.monthly {
            let other = &redo.monthly[label];
            for (a, b) in series.values().iter().zip(other.values()) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bucket_weighted_returns_aggregate_to_universe_return() {
        let n = 23;
        let mut rng = StreamRng::new(7, 0);
        let betas: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let rets = vec![0.0; n];
        let prices = vec![50.0; n];
        let caps: Vec<f64> = (0..n).map(|_| 1e7 * (1.0 + rng.uniform())).collect();
        let holding: Vec<f64> = (0..n).map(|_| 0.02 * rng.gaussian()).collect();
        let (panel, ids) = two_month_panel(&rets, &prices, &caps, &holding);
        let cfg = SortConfig {
            eligibility: EligibilityConfig {
                small_cap_fraction: 0.0,
                min_price: 0.0,
                return_tail_fraction: 0.0,
            },
            ..SortConfig::default()
        };
        let formation = NaiveDate::from_ymd_opt(2020, 1, 31).unwrap();
        let result =
            sort_portfolios(&panel, &signals_at(formation, &ids, &betas), None, &cfg).unwrap();
        let eom = NaiveDate::from_ymd_opt(2020, 2, 29).unwrap();
        // Universe value-weighted return over all members.
        let monthly_ret: Vec<f64> = holding.clone();
        let total_cap: f64 = caps.iter().sum();
        let universe: f64 = caps
            .iter()
            .zip(&monthly_ret)
            .map(|(c, r)| c * r)
            .sum::<f64>()
            / total_cap;
        // Aggregate bucket returns weighted by bucket cap share.
        let mut acc = 0.0;
        for b in 1..=5 {
            let label = format!("{b}");
            let members: Vec<usize> = result.memberships[&formation]
                .iter()
                .filter(|(_, l)| **l == label)
                .map(|(id, _)| ids.iter().position(|x| x == id).unwrap())
                .collect();
            let bucket_cap: f64 = members.iter().map(|&i| caps[i]).sum();
            acc += bucket_cap / total_cap * result.monthly[&label].get(eom).unwrap();
        }
        assert_relative_eq!(acc, universe, epsilon = 1e-12);
    }

    #[test]
    fn missing_holding_return_drops_member_and_renormalizes() {
        // Three stocks in one bucket; one has no holding-month data.
        let mut builder = PanelBuilder::new();
        let formation_days = weekday_calendar(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), 5);
        let holding_days = weekday_calendar(NaiveDate::from_ymd_opt(2020, 2, 3).unwrap(), 5);
        for id in ["S00", "S01", "S02"] {
            for day in &formation_days {
                builder.push(id, *day, 0.0, 50.0, 1e7);
            }
        }
        // Only S00 and S01 trade in February.
        for (id, r) in [("S00", 0.04), ("S01", 0.08)] {
            for (d, day) in holding_days.iter().enumerate() {
                builder.push(id, *day, if d == 0 { r } else { 0.0 }, 50.0, 1e7);
            }
        }
        let panel = builder.build();
        let cfg = SortConfig {
            n_quantiles: 2,
            eligibility: EligibilityConfig {
                small_cap_fraction: 0.0,
                min_price: 0.0,
                return_tail_fraction: 0.0,
            },
            ..SortConfig::default()
        };
        let formation = NaiveDate::from_ymd_opt(2020, 1, 31).unwrap();
        let ids: Vec<String> = vec!["S00".into(), "S01".into(), "S02".into()];
        // S00 and S02 share the bottom bucket; S02 vanishes in February.
        let result = sort_portfolios(
            &panel,
            &signals_at(formation, &ids, &[1.0, 5.0, 2.0]),
            None,
            &cfg,
        )
        .unwrap();
        let eom = NaiveDate::from_ymd_opt(2020, 2, 29).unwrap();
        // Bottom bucket = {S00, S02} → only S00 has a return.
        assert_relative_eq!(result.monthly["1"].get(eom).unwrap(), 0.04, epsilon = 1e-12);
        let rec = result
            .records
            .iter()
            .find(|r| r.bucket == "1")
            .unwrap();
        assert_eq!(rec.n_stocks, 1);
    }

    #[test]
    fn controlled_sort_equals_average_of_conditional_cells() {
        let n = 75;
        let mut rng = StreamRng::new(11, 0);
        let betas: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let controls: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let rets = vec![0.0; n];
        let prices = vec![50.0; n];
        let caps: Vec<f64> = (0..n).map(|_| 1e7 * (1.0 + rng.uniform())).collect();
        let holding: Vec<f64> = (0..n).map(|_| 0.02 * rng.gaussian()).collect();
        let (panel, ids) = two_month_panel(&rets, &prices, &caps, &holding);
        let formation = NaiveDate::from_ymd_opt(2020, 1, 31).unwrap();
        let signal_map = signals_at(formation, &ids, &betas);
        let control_map = signals_at(formation, &ids, &controls);
        let free_screens = EligibilityConfig {
            small_cap_fraction: 0.0,
            min_price: 0.0,
            return_tail_fraction: 0.0,
        };
        let controlled = sort_portfolios(
            &panel,
            &signal_map,
            Some(&control_map),
            &SortConfig {
                scheme: SortScheme::Controlled,
                eligibility: free_screens.clone(),
                ..SortConfig::default()
            },
        )
        .unwrap();
        let grid = sort_portfolios(
            &panel,
            &signal_map,
            Some(&control_map),
            &SortConfig {
                scheme: SortScheme::ConditionalDouble,
                eligibility: free_screens,
                ..SortConfig::default()
            },
        )
        .unwrap();
        let eom = NaiveDate::from_ymd_opt(2020, 2, 29).unwrap();
        for b in 1..=5 {
            let mut total = 0.0;
            for c in 1..=5 {
                total += grid.monthly[&format!("{c}_{b}")].get(eom).unwrap();
            }
            assert_relative_eq!(
                controlled.monthly[&format!("{b}")].get(eom).unwrap(),
                total / 5.0,
                epsilon = 1e-12
            );
            // The grid's column margin states the same identity.
            assert_relative_eq!(
                grid.monthly[&format!("all_{b}")].get(eom).unwrap(),
                total / 5.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn unconditional_double_reports_missing_intersections() {
        // Perfectly dependent control and signal: with independent
        // breakpoints only the diagonal cells populate.
        let n = 25;
        let betas: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let controls = betas.clone();
        let rets = vec![0.0; n];
        let prices = vec![50.0; n];
        let caps = vec![1e7; n];
        let holding: Vec<f64> = (0..n).map(|i| 0.001 * i as f64).collect();
        let (panel, ids) = two_month_panel(&rets, &prices, &caps, &holding);
        let formation = NaiveDate::from_ymd_opt(2020, 1, 31).unwrap();
        let result = sort_portfolios(
            &panel,
            &signals_at(formation, &ids, &betas),
            Some(&signals_at(formation, &ids, &controls)),
            &SortConfig {
                scheme: SortScheme::UnconditionalDouble,
                eligibility: EligibilityConfig {
                    small_cap_fraction: 0.0,
                    min_price: 0.0,
                    return_tail_fraction: 0.0,
                },
                ..SortConfig::default()
            },
        )
        .unwrap();
        for c in 1..=5 {
            for b in 1..=5 {
                let present = result.monthly.contains_key(&format!("{c}_{b}"));
                assert_eq!(present, c == b, "cell {c}_{b}");
            }
        }
    }

    #[test]
    fn too_few_members_skips_month() {
        let n = 3;
        let (panel, ids) = two_month_panel(
            &vec![0.0; n],
            &vec![50.0; n],
            &vec![1e7; n],
            &vec![0.01; n],
        );
        let formation = NaiveDate::from_ymd_opt(2020, 1, 31).unwrap();
        let result = sort_portfolios(
            &panel,
            &signals_at(formation, &ids, &[1.0, 2.0, 3.0]),
            None,
            &SortConfig {
                eligibility: EligibilityConfig {
                    small_cap_fraction: 0.0,
                    min_price: 0.0,
                    return_tail_fraction: 0.0,
                },
                ..SortConfig::default()
            },
        );
        assert!(matches!(result, Err(PortfolioError::EmptyPanel)));
    }

    #[test]
    fn spanned_portfolio_has_zero_alpha() {
        let mut rng = StreamRng::new(13, 0);
        let months: Vec<NaiveDate> = (0..60)
            .map(|i| {
                YearMonth {
                    year: 2015 + i / 12,
                    month: (i % 12 + 1) as u32,
                }
                .end_date()
            })
            .collect();
        let ff: Vec<FfRow> = months
            .iter()
            .map(|d| FfRow {
                date: *d,
                mkt_rf: 0.01 * rng.gaussian(),
                smb: 0.005 * rng.gaussian(),
                hml: 0.005 * rng.gaussian(),
                rmw: 0.004 * rng.gaussian(),
                cma: 0.004 * rng.gaussian(),
                mom: 0.006 * rng.gaussian(),
                rf: 0.0002,
            })
            .collect();
        let portfolio = DatedSeries::from_pairs(ff.iter().map(|r| (r.date, r.mkt_rf)));
        let est = alpha_regression(&portfolio, &ff, FactorModel::Ff5, 12, 36).unwrap();
        assert_abs_diff_eq!(est.alpha, 0.0, epsilon = 1e-10);
        let mkt = est.betas.iter().find(|(n, _)| n == "mkt_rf").unwrap().1;
        assert_relative_eq!(mkt, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn injected_alpha_is_recovered() {
        let mut rng = StreamRng::new(17, 0);
        let months: Vec<NaiveDate> = (0..240)
            .map(|i| {
                YearMonth {
                    year: 2000 + i / 12,
                    month: (i % 12 + 1) as u32,
                }
                .end_date()
            })
            .collect();
        let ff: Vec<FfRow> = months
            .iter()
            .map(|d| FfRow {
                date: *d,
                mkt_rf: 0.04 * rng.gaussian(),
                smb: 0.02 * rng.gaussian(),
                hml: 0.02 * rng.gaussian(),
                rmw: 0.02 * rng.gaussian(),
                cma: 0.02 * rng.gaussian(),
                mom: 0.03 * rng.gaussian(),
                rf: 0.0002,
            })
            .collect();
        let injected = 0.0030;
        let portfolio = DatedSeries::from_pairs(ff.iter().map(|r| {
            (
                r.date,
                injected + 0.8 * r.mkt_rf + 0.3 * r.hml + 0.001 * rng.gaussian(),
            )
        }));
        let est = alpha_regression(&portfolio, &ff, FactorModel::Ff5Mom, 12, 36).unwrap();
        // SE ≈ 0.001/sqrt(240) ≈ 6.5e-5; give 2 SE.
        assert!((est.alpha - injected).abs() < 1.5e-4, "alpha {}", est.alpha);
        assert!(est.t_alpha > 2.0);
    }

    #[test]
    fn alpha_overlap_floor_enforced() {
        let months: Vec<NaiveDate> = (0..20)
            .map(|i| {
                YearMonth {
                    year: 2015,
                    month: (i % 12 + 1) as u32,
                }
                .end_date()
            })
            .collect();
        let ff: Vec<FfRow> = months
            .iter()
            .map(|d| FfRow {
                date: *d,
                mkt_rf: 0.01,
                smb: 0.0,
                hml: 0.0,
                rmw: 0.0,
                cma: 0.0,
                mom: 0.0,
                rf: 0.0,
            })
            .collect();
        let portfolio = DatedSeries::from_pairs(ff.iter().map(|r| (r.date, 0.01)));
        assert!(matches!(
            alpha_regression(&portfolio, &ff, FactorModel::Ff5, 12, 36),
            Err(PortfolioError::InsufficientOverlap { required: 36, .. })
        ));
    }

    #[test]
    fn portfolio_csv_roundtrip() {
        let records = vec![
            PortfolioRecord {
                scheme: "single".into(),
                bucket: "1".into(),
                date: NaiveDate::from_ymd_opt(2020, 2, 29).unwrap(),
                ret: 0.0123456789012345,
                n_stocks: 17,
            },
            PortfolioRecord {
                scheme: "single".into(),
                bucket: "5-1".into(),
                date: NaiveDate::from_ymd_opt(2020, 2, 29).unwrap(),
                ret: -0.004,
                n_stocks: 34,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("portfolios.csv");
        write_portfolio_csv(&records, &path).unwrap();
        let loaded = read_portfolio_csv(&path).unwrap();
        assert!(loaded.row_errors.is_empty());
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.records[0].ret.to_bits(), records[0].ret.to_bits());
        assert_eq!(loaded.records[1].bucket, "5-1");
    }
}
