//! Stage implementations behind the subcommands.
//!
//! Every stage follows the same discipline: validate inputs eagerly, load
//! them strictly (any malformed row aborts the run), compute, write all
//! outputs through a staging area that renames into place only on success,
//! and finally record a manifest with input/output digests. Failed runs
//! therefore never leave partial artifacts behind, and reruns on identical
//! inputs reproduce identical bytes — manifests alone carry the clock.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use nalgebra::DMatrix;

use fearfactor::cross_section::{self, CrossSectionError, PremiumRow, ThreePassConfig};
use fearfactor::exposures::{self, BetaConfig};
use fearfactor::factor_extraction::{self, FactorName, WindowSpec};
use fearfactor::implied_variance::{self, Measure, VariancePanel};
use fearfactor::market_data::{
    self, ChainSkip, CsvLoad, FilterConfig, OptionQuote, OptionRight, RateCurve, StockPanel,
    StockRow,
};
use fearfactor::portfolio::{self, FactorModel, FfRow, PortfolioRecord, SortConfig, SortScheme};
use fearfactor::report::{self, BucketRow};
use fearfactor::series::{DatedSeries, YearMonth};
use fearfactor::synth::{self, SyntheticSpec};

use crate::artifacts::{Manifest, Staging};
use crate::config::RunConfig;
use crate::errors::{runtime, validation, CliError};

/// Scale from decimal returns to the percent-per-month display convention.
const PCT: f64 = 100.0;
/// Daily observations required to fit a mimicking portfolio.
const MIMICKING_MIN_OVERLAP: usize = 252;
/// Months required before an alpha regression is attempted.
const ALPHA_MIN_OVERLAP: usize = 24;
/// Maximum latent factors considered by the three-pass estimator.
const MAX_LATENT: usize = 8;

// ---------------------------------------------------------------------------
// Shared loading and error-mapping helpers
// ---------------------------------------------------------------------------

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(validation(format!(
            "missing input file {}",
            path.display()
        )))
    }
}

/// Unwrap a CSV load, rejecting the run when any row failed to parse.
fn strict<T>(
    loaded: Result<CsvLoad<T>, market_data::CsvError>,
    path: &Path,
) -> Result<Vec<T>, CliError> {
    let loaded = loaded.map_err(|e| validation(e.to_string()))?;
    if !loaded.row_errors.is_empty() {
        let shown: Vec<String> = loaded
            .row_errors
            .iter()
            .take(5)
            .map(|e| format!("{}: {e}", path.display()))
            .collect();
        let more = loaded.row_errors.len().saturating_sub(shown.len());
        let suffix = if more > 0 {
            format!("\n  ... and {more} more")
        } else {
            String::new()
        };
        return Err(validation(format!(
            "malformed rows:\n  {}{suffix}",
            shown.join("\n  ")
        )));
    }
    Ok(loaded.records)
}

/// Load option quotes from a single CSV or from every `*.csv` in a
/// directory (concatenated in file-name order).
fn load_options(path: &Path) -> Result<Vec<OptionQuote>, CliError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(validation(format!(
                "no .csv files in directory {}",
                path.display()
            )));
        }
        let mut all = Vec::new();
        for file in &files {
            all.extend(strict(market_data::load_option_csv(file), file)?);
        }
        Ok(all)
    } else {
        require_file(path)?;
        strict(market_data::load_option_csv(path), path)
    }
}

fn load_stocks(path: &Path) -> Result<Vec<StockRow>, CliError> {
    require_file(path)?;
    strict(market_data::load_stock_csv(path), path)
}

fn load_rates(path: &Path) -> Result<RateCurve, CliError> {
    require_file(path)?;
    let mut curves = strict(market_data::load_rate_csv(path), path)?;
    Ok(curves.pop().unwrap_or_default())
}

fn load_ff(path: &Path) -> Result<Vec<FfRow>, CliError> {
    require_file(path)?;
    strict(portfolio::read_ff_csv(path), path)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| runtime(format!("write {}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| runtime(format!("write {}: {e}", path.display())))
}

fn map_cs_err(e: CrossSectionError) -> CliError {
    match e {
        CrossSectionError::LagsExceedLength { .. }
        | CrossSectionError::InsufficientOverlap { .. }
        | CrossSectionError::TooFewAssets { .. }
        | CrossSectionError::RankTooLow { .. } => validation(e.to_string()),
        CrossSectionError::SingularFactorCovariance
        | CrossSectionError::RankDeficientBetas { .. }
        | CrossSectionError::DimensionMismatch { .. } => runtime(e.to_string()),
    }
}

fn quantile_labels(q: usize) -> Vec<String> {
    (1..=q).map(|i| i.to_string()).collect()
}

fn measure_for(name: FactorName) -> Measure {
    match name {
        FactorName::Cf | FactorName::Mf => Measure::Total,
        FactorName::CfPlus | FactorName::MfPlus => Measure::Good,
        FactorName::CfMinus | FactorName::MfMinus => Measure::Bad,
    }
}

/// Merge a freshly estimated premium block into the rows already on disk,
/// replacing any previous block with the same spec id. Groups are emitted
/// in spec-id order, so reruns are idempotent byte-for-byte.
fn merge_premia(
    path: &Path,
    spec_id: &str,
    rows: Vec<PremiumRow>,
) -> Result<Vec<PremiumRow>, CliError> {
    let mut groups: BTreeMap<String, Vec<PremiumRow>> = BTreeMap::new();
    if path.is_file() {
        for row in strict(cross_section::read_premia_csv(path), path)? {
            groups.entry(row.spec_id.clone()).or_default().push(row);
        }
    }
    groups.insert(spec_id.to_string(), rows);
    Ok(groups.into_values().flatten().collect())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn run_synth(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.n_firms == 0 || cfg.n_stocks == 0 {
        return Err(validation("n_firms and n_stocks must be positive"));
    }
    if cfg.n_days < 2 {
        return Err(validation("n_days must be at least 2"));
    }
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| runtime(format!("create {}: {e}", cfg.out.display())))?;

    let spec = SyntheticSpec {
        seed: cfg.seed,
        n_option_firms: cfg.n_firms,
        n_stocks: cfg.n_stocks,
        n_days: cfg.n_days,
        premium_pct_month: cfg.premium,
        ..SyntheticSpec::default()
    };
    let market = synth::generate_market(&spec);

    let quotes: Vec<OptionQuote> = market
        .chains
        .iter()
        .flat_map(|gc| gc.chain.quotes.iter().cloned())
        .collect();

    let mut stock_rows = market.stocks.rows.clone();
    stock_rows.extend(market.spots.iter().map(|(firm, date, spot)| StockRow {
        stock_id: firm.clone(),
        date: *date,
        excess_return: None,
        price: Some(*spot),
        market_cap: None,
        volume: None,
    }));
    stock_rows.sort_by(|a, b| a.stock_id.cmp(&b.stock_id).then(a.date.cmp(&b.date)));

    let mut curve = RateCurve::default();
    for date in &market.dates {
        curve.rates.insert(*date, market.rate);
    }

    let ff_rows = synth::monthly_style_factors(&market);

    let mut staging = Staging::default();
    let tmp_options = staging.stage(&cfg.options)?;
    let tmp_stocks = staging.stage(&cfg.stocks)?;
    let tmp_rates = staging.stage(&cfg.rates)?;
    let tmp_ff = staging.stage(&cfg.ff)?;
    market_data::write_option_csv(&quotes, &tmp_options).map_err(csv_err(&cfg.options))?;
    market_data::write_stock_csv(&stock_rows, &tmp_stocks).map_err(csv_err(&cfg.stocks))?;
    market_data::write_rate_csv(&curve, &tmp_rates).map_err(csv_err(&cfg.rates))?;
    portfolio::write_ff_csv(&ff_rows, &tmp_ff).map_err(csv_err(&cfg.ff))?;
    staging.commit()?;

    let mut manifest = Manifest::new("synth", cfg);
    manifest.note("n_chains", market.chains.len());
    manifest.note("n_quotes", quotes.len());
    manifest.note("n_stock_rows", stock_rows.len());
    manifest.note("n_dates", market.dates.len());
    manifest.note("n_factor_months", ff_rows.len());
    manifest.output("options", &cfg.options)?;
    manifest.output("stocks", &cfg.stocks)?;
    manifest.output("rates", &cfg.rates)?;
    manifest.output("ff", &cfg.ff)?;
    manifest.write(&cfg.out)?;

    println!(
        "[synth] seed {}: {} chains, {} quotes, {} stock rows, {} trading days",
        cfg.seed,
        market.chains.len(),
        quotes.len(),
        stock_rows.len(),
        market.dates.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

pub fn run_ingest(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| runtime(format!("create {}: {e}", cfg.out.display())))?;

    let mut manifest = Manifest::new("ingest", cfg);
    if cfg.options.is_file() {
        manifest.input("options", &cfg.options)?;
    }
    if cfg.stocks.is_file() {
        manifest.input("stocks", &cfg.stocks)?;
    }
    if cfg.rates.is_file() {
        manifest.input("rates", &cfg.rates)?;
    }

    let mut quotes = load_options(&cfg.options)?;
    let right_rank = |r: OptionRight| match r {
        OptionRight::Call => 0u8,
        OptionRight::Put => 1u8,
    };
    quotes.sort_by(|a, b| {
        a.underlying_id
            .cmp(&b.underlying_id)
            .then(a.quote_date.cmp(&b.quote_date))
            .then(a.expiry_date.cmp(&b.expiry_date))
            .then(a.strike.total_cmp(&b.strike))
            .then(right_rank(a.right).cmp(&right_rank(b.right)))
    });
    let mut stock_rows = load_stocks(&cfg.stocks)?;
    stock_rows.sort_by(|a, b| a.stock_id.cmp(&b.stock_id).then(a.date.cmp(&b.date)));
    let curve = load_rates(&cfg.rates)?;
    let ff_rows = if cfg.ff.is_file() {
        manifest.input("ff", &cfg.ff)?;
        let mut rows = load_ff(&cfg.ff)?;
        rows.sort_by_key(|r| r.date);
        Some(rows)
    } else {
        None
    };

    let out_options = cfg.out.join("options.csv");
    let out_stocks = cfg.out.join("stocks.csv");
    let out_rates = cfg.out.join("rates.csv");
    let out_ff = cfg.out.join("ff_factors.csv");

    let mut staging = Staging::default();
    let tmp_options = staging.stage(&out_options)?;
    let tmp_stocks = staging.stage(&out_stocks)?;
    let tmp_rates = staging.stage(&out_rates)?;
    market_data::write_option_csv(&quotes, &tmp_options).map_err(csv_err(&out_options))?;
    market_data::write_stock_csv(&stock_rows, &tmp_stocks).map_err(csv_err(&out_stocks))?;
    market_data::write_rate_csv(&curve, &tmp_rates).map_err(csv_err(&out_rates))?;
    if let Some(rows) = &ff_rows {
        let tmp_ff = staging.stage(&out_ff)?;
        portfolio::write_ff_csv(rows, &tmp_ff).map_err(csv_err(&out_ff))?;
    }
    staging.commit()?;

    manifest.note("n_quotes", quotes.len());
    manifest.note("n_stock_rows", stock_rows.len());
    manifest.note("n_rate_dates", curve.rates.len());
    manifest.output("options", &out_options)?;
    manifest.output("stocks", &out_stocks)?;
    manifest.output("rates", &out_rates)?;
    if ff_rows.is_some() {
        manifest.output("ff", &out_ff)?;
    }
    manifest.write(&cfg.out)?;

    println!(
        "[ingest] normalized {} quotes, {} stock rows, {} rate dates into {}",
        quotes.len(),
        stock_rows.len(),
        curve.rates.len(),
        cfg.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// iv
// ---------------------------------------------------------------------------

pub fn run_iv(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| runtime(format!("create {}: {e}", cfg.out.display())))?;
    let mut manifest = Manifest::new("iv", cfg);
    if cfg.options.is_file() {
        manifest.input("options", &cfg.options)?;
    }
    manifest.input("stocks", {
        require_file(&cfg.stocks)?;
        &cfg.stocks
    })?;
    manifest.input("rates", {
        require_file(&cfg.rates)?;
        &cfg.rates
    })?;

    let quotes = load_options(&cfg.options)?;
    let panel = StockPanel::from_rows(load_stocks(&cfg.stocks)?);
    let curve = load_rates(&cfg.rates)?;
    let filter = FilterConfig {
        min_maturity_days: cfg.maturity_min,
        max_maturity_days: cfg.maturity_max,
        target_maturity_days: cfg.maturity_target,
        min_quotes: cfg.min_quotes,
    };

    let built = market_data::build_chains(quotes, &panel, &curve, &filter);
    let (mut no_expiry, mut no_spot, mut no_rate, mut rejected) = (0usize, 0usize, 0usize, 0usize);
    for (_, _, skip) in &built.skips {
        match skip {
            ChainSkip::NoExpiryInWindow => no_expiry += 1,
            ChainSkip::NoSpot => no_spot += 1,
            ChainSkip::NoRate => no_rate += 1,
            ChainSkip::Rejected(_) => rejected += 1,
        }
    }

    let mut observations = Vec::new();
    let mut variance_errors = 0usize;
    for chain in &built.chains {
        match implied_variance::compute_variance_filtered(chain) {
            Ok(obs) => observations.push(obs),
            Err(_) => variance_errors += 1,
        }
    }
    if observations.is_empty() {
        return Err(runtime(
            "no option chain survived filtering; nothing to compute",
        ));
    }
    let n_chains = built.chains.len();
    let variance_panel = VariancePanel::from_observations(observations);
    let summary = implied_variance::panel_summary(&variance_panel);
    let table = report::variance_summary_table(&summary).render();

    let panel_path = cfg.variance_panel_path();
    let table_path = cfg.tables_dir().join("variance_summary.txt");
    let mut staging = Staging::default();
    let tmp_panel = staging.stage(&panel_path)?;
    let tmp_table = staging.stage(&table_path)?;
    implied_variance::write_variance_csv(&variance_panel, &tmp_panel)
        .map_err(csv_err(&panel_path))?;
    write_text(&tmp_table, &table)?;
    staging.commit()?;

    manifest.note("n_chains", n_chains);
    manifest.note("n_observations", variance_panel.observations().count());
    manifest.note("n_firms", variance_panel.n_firms());
    manifest.note("n_dates", variance_panel.n_dates());
    manifest.note("skip_no_expiry_in_window", no_expiry);
    manifest.note("skip_no_spot", no_spot);
    manifest.note("skip_no_rate", no_rate);
    manifest.note("skip_rejected", rejected);
    manifest.note("variance_errors", variance_errors);
    manifest.note("duplicates_overwritten", variance_panel.duplicates_overwritten);
    manifest.output("variance_panel", &panel_path)?;
    manifest.output("variance_summary", &table_path)?;
    manifest.write(&cfg.out)?;

    println!(
        "[iv] {} firms x {} dates from {} chains ({} skipped, {} variance errors)",
        variance_panel.n_firms(),
        variance_panel.n_dates(),
        n_chains,
        built.skips.len(),
        variance_errors
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// factors
// ---------------------------------------------------------------------------

pub fn run_factors(cfg: &RunConfig) -> Result<(), CliError> {
    let panel_path = cfg.variance_panel_path();
    require_file(&panel_path)?;
    let mut manifest = Manifest::new("factors", cfg);
    manifest.input("variance_panel", &panel_path)?;

    let observations = strict(implied_variance::read_variance_csv(&panel_path), &panel_path)?;
    let panel = VariancePanel::from_observations(observations);
    let dates = panel.dates.clone();

    let members: Vec<FactorName> = cfg
        .family_members()
        .iter()
        .map(|name| FactorName::parse(name).expect("validated at config time"))
        .collect();
    if members.is_empty() {
        return Err(validation("family must name at least one factor"));
    }

    let spec = WindowSpec {
        length: cfg.factor_window,
        step: cfg.step,
        min_coverage: cfg.min_coverage,
        em: factor_extraction::EmPcaConfig::default(),
    };

    let mut series_list = Vec::new();
    let mut full_sample = Vec::new();
    for name in members {
        let matrix = panel.measure_matrix(measure_for(name), true);
        let series = factor_extraction::rolling_factor(&matrix, &dates, &spec, name)
            .map_err(|e| validation(e.to_string()))?;
        if let Ok(full) = factor_extraction::em_pca(&matrix, &spec.em) {
            full_sample.push((name.as_str().to_string(), full.variance_explained[0]));
        }
        series_list.push(series);
    }

    let series_refs: Vec<&factor_extraction::FactorSeries> = series_list.iter().collect();
    let table = report::variance_explained_table(&series_refs, &full_sample).render();

    let factors_path = cfg.factors_path();
    let table_path = cfg.tables_dir().join("variance_explained.txt");
    let mut staging = Staging::default();
    let tmp_factors = staging.stage(&factors_path)?;
    let tmp_table = staging.stage(&table_path)?;
    factor_extraction::write_factor_csv(&series_refs, &tmp_factors)
        .map_err(csv_err(&factors_path))?;
    write_text(&tmp_table, &table)?;
    staging.commit()?;

    for series in &series_list {
        manifest.note(
            &format!("unconverged_windows_{}", series.name.as_str()),
            series.unconverged_windows,
        );
        let n_levels = series.levels.iter().filter(|v| v.is_some()).count();
        manifest.note(&format!("n_levels_{}", series.name.as_str()), n_levels);
    }
    manifest.output("factors", &factors_path)?;
    manifest.output("variance_explained", &table_path)?;
    manifest.write(&cfg.out)?;

    println!(
        "[factors] extracted {} series over {} dates",
        series_list.len(),
        dates.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// betas
// ---------------------------------------------------------------------------

/// Daily innovation series of one named factor out of factors.csv.
fn factor_innovations(
    factors_path: &Path,
    factor: &str,
) -> Result<DatedSeries, CliError> {
    require_file(factors_path)?;
    let rows = strict(factor_extraction::read_factor_csv(factors_path), factors_path)?;
    let series = DatedSeries::from_pairs(
        rows.iter()
            .filter(|r| r.name == factor)
            .filter_map(|r| r.innovation.map(|v| (r.date, v))),
    );
    if series.is_empty() {
        return Err(validation(format!(
            "factor '{factor}' has no innovations in {}; run the factors stage first",
            factors_path.display()
        )));
    }
    Ok(series)
}

pub fn run_betas(cfg: &RunConfig) -> Result<(), CliError> {
    let factors_path = cfg.factors_path();
    require_file(&factors_path)?;
    require_file(&cfg.stocks)?;
    let mut manifest = Manifest::new("betas", cfg);
    manifest.input("factors", &factors_path)?;
    manifest.input("stocks", &cfg.stocks)?;

    let panel = StockPanel::from_rows(load_stocks(&cfg.stocks)?);
    let innovations = factor_innovations(&factors_path, &cfg.factor)?;
    let market = panel.value_weighted_excess();
    let control = match cfg.control.as_str() {
        "market" => Some(("MKT", &market)),
        _ => None,
    };

    let beta_cfg = BetaConfig {
        window: cfg.beta_window,
        min_obs: cfg.min_obs,
    };
    let estimates = exposures::estimate_betas(&panel, &innovations, &cfg.factor, control, &beta_cfg);
    if estimates.observations.is_empty() {
        return Err(runtime(format!(
            "no beta observations: the factor calendar has {} days, the window needs {}",
            innovations.len(),
            cfg.beta_window
        )));
    }

    let betas_path = cfg.betas_path();
    let mut staging = Staging::default();
    let tmp = staging.stage(&betas_path)?;
    exposures::write_beta_csv(&estimates.observations, &tmp).map_err(csv_err(&betas_path))?;
    staging.commit()?;

    manifest.note("n_observations", estimates.observations.len());
    manifest.note("skip_below_min_obs", estimates.skips.below_min_obs);
    manifest.note("skip_singular_design", estimates.skips.singular_design);
    manifest.note("skip_degenerate_returns", estimates.skips.degenerate_returns);
    manifest.output("betas", &betas_path)?;
    manifest.write(&cfg.out)?;

    println!(
        "[betas] {} stock-month loadings ({} skipped)",
        estimates.observations.len(),
        estimates.skips.below_min_obs
            + estimates.skips.singular_design
            + estimates.skips.degenerate_returns
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sort
// ---------------------------------------------------------------------------

pub fn run_sort(cfg: &RunConfig) -> Result<(), CliError> {
    let betas_path = cfg.betas_path();
    require_file(&betas_path)?;
    require_file(&cfg.stocks)?;
    let mut manifest = Manifest::new("sort", cfg);
    manifest.input("betas", &betas_path)?;
    manifest.input("stocks", &cfg.stocks)?;

    let panel = StockPanel::from_rows(load_stocks(&cfg.stocks)?);
    let beta_rows: Vec<_> = strict(exposures::read_beta_csv(&betas_path), &betas_path)?
        .into_iter()
        .filter(|r| r.factor_name == cfg.factor)
        .collect();
    if beta_rows.is_empty() {
        return Err(validation(format!(
            "no loadings for factor '{}' in {}",
            cfg.factor,
            betas_path.display()
        )));
    }
    let signals = exposures::betas_by_month(&beta_rows);

    let scheme = cfg.scheme_kind();
    let controls: Option<BTreeMap<NaiveDate, BTreeMap<String, f64>>> = if scheme.needs_control() {
        let mut map: BTreeMap<NaiveDate, BTreeMap<String, f64>> = BTreeMap::new();
        for row in &beta_rows {
            if let Some(control) = row.beta_control {
                map.entry(row.as_of_month)
                    .or_default()
                    .insert(row.stock_id.clone(), control);
            }
        }
        if map.is_empty() {
            return Err(validation(format!(
                "scheme '{}' needs control loadings, but betas.csv has none; \
                 re-run betas with control=market",
                cfg.scheme
            )));
        }
        Some(map)
    } else {
        None
    };

    let sort_cfg = SortConfig {
        n_quantiles: cfg.n_quantiles,
        weighting: cfg.weighting_kind(),
        scheme,
        eligibility: portfolio::EligibilityConfig::default(),
    };
    let result = portfolio::sort_portfolios(&panel, &signals, controls.as_ref(), &sort_cfg)
        .map_err(|e| match e {
            portfolio::PortfolioError::MissingControl { .. } => validation(e.to_string()),
            _ => runtime(e.to_string()),
        })?;

    // Daily bucket rows reuse the monthly record's membership count.
    let monthly_counts: BTreeMap<(String, YearMonth), usize> = result
        .records
        .iter()
        .map(|r| ((r.bucket.clone(), YearMonth::of(r.date)), r.n_stocks))
        .collect();
    let mut daily_records = Vec::new();
    for (label, series) in &result.daily {
        for (date, ret) in series.iter() {
            let n_stocks = monthly_counts
                .get(&(label.clone(), YearMonth::of(date)))
                .copied()
                .unwrap_or(0);
            daily_records.push(PortfolioRecord {
                scheme: cfg.scheme.clone(),
                bucket: label.clone(),
                date,
                ret,
                n_stocks,
            });
        }
    }
    daily_records.sort_by_key(|r| r.date);

    // Performance table: one column per loading bucket plus the spread.
    let mut table_text = None;
    let mut alpha_notes = Vec::new();
    if matches!(scheme, SortScheme::Single | SortScheme::Controlled) {
        let mut labels = quantile_labels(cfg.n_quantiles);
        labels.push(portfolio::PortfolioReturnPanel::spread_label(cfg.n_quantiles));
        let series: Vec<&DatedSeries> = labels
            .iter()
            .map(|label| {
                result.monthly.get(label).ok_or_else(|| {
                    runtime(format!("sort produced no series for bucket {label}"))
                })
            })
            .collect::<Result<_, _>>()?;
        let mut rows = Vec::new();
        let stats: Vec<(f64, f64)> = series
            .iter()
            .map(|s| portfolio::mean_with_t(s, cfg.nw_lags))
            .collect();
        rows.push(BucketRow {
            label: "mean".into(),
            values: stats.iter().map(|(m, _)| m * PCT).collect(),
        });
        rows.push(BucketRow {
            label: "t(mean)".into(),
            values: stats.iter().map(|(_, t)| *t).collect(),
        });
        if cfg.ff.is_file() {
            let ff_rows = load_ff(&cfg.ff)?;
            for (model, name) in [(FactorModel::Ff5, "FF5"), (FactorModel::Ff5Mom, "FF5+Mom")] {
                let alphas: Result<Vec<_>, _> = series
                    .iter()
                    .map(|s| {
                        portfolio::alpha_regression(s, &ff_rows, model, cfg.nw_lags, ALPHA_MIN_OVERLAP)
                    })
                    .collect();
                match alphas {
                    Ok(estimates) => {
                        rows.push(BucketRow {
                            label: format!("{name} alpha"),
                            values: estimates.iter().map(|a| a.alpha * PCT).collect(),
                        });
                        rows.push(BucketRow {
                            label: format!("t({name} alpha)"),
                            values: estimates.iter().map(|a| a.t_alpha).collect(),
                        });
                    }
                    Err(e) => alpha_notes.push(format!("alpha_{name}_skipped={e}")),
                }
            }
        }
        let title = format!(
            "Portfolios sorted on downside-fear loadings ({}, {}-weighted, monthly %)",
            cfg.scheme, cfg.weighting
        );
        table_text = Some(report::sort_table(&title, &labels, &rows).render());
    }

    let portfolios_path = cfg.portfolios_path();
    let daily_path = cfg.portfolios_daily_path();
    let table_path = cfg.tables_dir().join(format!("sorts_{}.txt", cfg.scheme));
    let mut staging = Staging::default();
    let tmp_monthly = staging.stage(&portfolios_path)?;
    let tmp_daily = staging.stage(&daily_path)?;
    portfolio::write_portfolio_csv(&result.records, &tmp_monthly)
        .map_err(csv_err(&portfolios_path))?;
    portfolio::write_portfolio_csv(&daily_records, &tmp_daily).map_err(csv_err(&daily_path))?;
    if let Some(text) = &table_text {
        let tmp_table = staging.stage(&table_path)?;
        write_text(&tmp_table, text)?;
    }
    staging.commit()?;

    manifest.note("n_monthly_records", result.records.len());
    manifest.note("n_daily_records", daily_records.len());
    manifest.note("skipped_months", result.skipped_months);
    for note in &alpha_notes {
        let (key, value) = note.split_once('=').unwrap_or((note.as_str(), ""));
        manifest.note(key, value);
    }
    manifest.output("portfolios", &portfolios_path)?;
    manifest.output("portfolios_daily", &daily_path)?;
    if table_text.is_some() {
        manifest.output("sort_table", &table_path)?;
    }
    manifest.write(&cfg.out)?;

    println!(
        "[sort] {} bucket-months, {} bucket-days under scheme {}",
        result.records.len(),
        daily_records.len(),
        cfg.scheme
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared pricing-panel assembly for fmb and threepass
// ---------------------------------------------------------------------------

/// Monthly pricing inputs assembled from pipeline artifacts: the quantile
/// portfolios as test assets, the factor's mimicking-portfolio return, and
/// the market return, all aligned on common calendar month-ends.
struct PricingPanels {
    months: Vec<NaiveDate>,
    assets: DMatrix<f64>,
    factor: Vec<f64>,
    market: Vec<f64>,
    mimicking: cross_section::MimickingPortfolio,
}

fn build_pricing_panels(cfg: &RunConfig) -> Result<PricingPanels, CliError> {
    let scheme = cfg.scheme_kind();
    if !matches!(scheme, SortScheme::Single | SortScheme::Controlled) {
        return Err(validation(format!(
            "pricing stages need a loading-quantile ladder; run sort with \
             scheme=single or controlled (got '{}')",
            cfg.scheme
        )));
    }
    let portfolios_path = cfg.portfolios_path();
    let daily_path = cfg.portfolios_daily_path();
    let factors_path = cfg.factors_path();
    require_file(&portfolios_path)?;
    require_file(&daily_path)?;
    require_file(&cfg.stocks)?;

    let labels = quantile_labels(cfg.n_quantiles);

    // Monthly test assets: months where every quantile bucket reported.
    let monthly_records = strict(portfolio::read_portfolio_csv(&portfolios_path), &portfolios_path)?;
    let mut by_month: BTreeMap<NaiveDate, BTreeMap<String, f64>> = BTreeMap::new();
    for record in monthly_records
        .iter()
        .filter(|r| r.scheme == cfg.scheme && labels.contains(&r.bucket))
    {
        by_month
            .entry(record.date)
            .or_default()
            .insert(record.bucket.clone(), record.ret);
    }

    // Daily bucket series for the mimicking regression. Under the single
    // sort these are the bucket series themselves; under the controlled
    // sort each loading bucket is the equal average of its control cells,
    // matching the monthly aggregation.
    let daily_records = strict(portfolio::read_portfolio_csv(&daily_path), &daily_path)?;
    let loading_label = |bucket: &str| -> Option<String> {
        match scheme {
            SortScheme::Single => labels.contains(&bucket.to_string()).then(|| bucket.to_string()),
            SortScheme::Controlled => bucket.split_once('_').and_then(|(control, loading)| {
                let control_ok = control
                    .parse::<usize>()
                    .is_ok_and(|c| (1..=cfg.n_quantiles).contains(&c));
                let loading_ok = labels.iter().any(|l| l == loading);
                (control_ok && loading_ok).then(|| loading.to_string())
            }),
            _ => None,
        }
    };
    let mut daily_sums: BTreeMap<String, BTreeMap<NaiveDate, (f64, usize)>> = BTreeMap::new();
    for record in daily_records.into_iter().filter(|r| r.scheme == cfg.scheme) {
        if let Some(label) = loading_label(&record.bucket) {
            let cell = daily_sums
                .entry(label)
                .or_default()
                .entry(record.date)
                .or_insert((0.0, 0));
            cell.0 += record.ret;
            cell.1 += 1;
        }
    }
    let base_assets: BTreeMap<String, DatedSeries> = daily_sums
        .into_iter()
        .map(|(label, by_date)| {
            (
                label,
                DatedSeries::from_pairs(
                    by_date
                        .into_iter()
                        .map(|(date, (sum, n))| (date, sum / n as f64)),
                ),
            )
        })
        .collect();
    if base_assets.len() != labels.len() {
        return Err(validation(format!(
            "portfolios_daily.csv covers {} of {} buckets for scheme '{}'",
            base_assets.len(),
            labels.len(),
            cfg.scheme
        )));
    }

    let innovations = factor_innovations(&factors_path, &cfg.factor)?;
    let mimicking = cross_section::mimicking_portfolio(
        &cfg.factor,
        &innovations,
        &base_assets,
        MIMICKING_MIN_OVERLAP,
    )
    .map_err(map_cs_err)?;

    let panel = StockPanel::from_rows(load_stocks(&cfg.stocks)?);
    let market_monthly: BTreeMap<NaiveDate, f64> = panel.value_weighted_excess()
        .monthly_compound()
        .into_iter()
        .map(|(ym, ret)| (ym.end_date(), ret))
        .collect();

    let months: Vec<NaiveDate> = by_month
        .iter()
        .filter(|(_, buckets)| buckets.len() == labels.len())
        .map(|(date, _)| *date)
        .filter(|date| mimicking.monthly_returns.get(*date).is_some())
        .filter(|date| market_monthly.contains_key(date))
        .collect();
    if months.len() < cfg.nw_lags + 2 {
        return Err(validation(format!(
            "only {} aligned months for pricing; need at least {}",
            months.len(),
            cfg.nw_lags + 2
        )));
    }

    let assets = DMatrix::from_fn(months.len(), labels.len(), |i, j| {
        by_month[&months[i]][&labels[j]]
    });
    let factor: Vec<f64> = months
        .iter()
        .map(|d| mimicking.monthly_returns.get(*d).unwrap())
        .collect();
    let market: Vec<f64> = months.iter().map(|d| market_monthly[d]).collect();

    Ok(PricingPanels {
        months,
        assets,
        factor,
        market,
        mimicking,
    })
}

/// Month-aligned benchmark factors for the generic cross-section mode.
fn align_ff_factors(
    dates: &[NaiveDate],
    ff_rows: &[FfRow],
    model: FactorModel,
) -> Result<(DMatrix<f64>, Vec<String>), CliError> {
    let by_month: BTreeMap<YearMonth, &FfRow> = ff_rows
        .iter()
        .map(|row| (YearMonth::of(row.date), row))
        .collect();
    let names = model.factor_names();
    let mut matrix = DMatrix::zeros(dates.len(), names.len());
    for (i, date) in dates.iter().enumerate() {
        let Some(row) = by_month.get(&YearMonth::of(*date)) else {
            return Err(validation(format!(
                "factor file has no row for month {}",
                YearMonth::of(*date).end_date()
            )));
        };
        for (j, name) in names.iter().enumerate() {
            matrix[(i, j)] = match *name {
                "mkt_rf" => row.mkt_rf,
                "smb" => row.smb,
                "hml" => row.hml,
                "rmw" => row.rmw,
                "cma" => row.cma,
                "mom" => row.mom,
                other => return Err(runtime(format!("unknown factor column {other}"))),
            };
        }
    }
    Ok((matrix, names.iter().map(|s| s.to_string()).collect()))
}

// ---------------------------------------------------------------------------
// fmb
// ---------------------------------------------------------------------------

pub fn run_fmb(cfg: &RunConfig) -> Result<(), CliError> {
    let mut manifest = Manifest::new("fmb", cfg);

    let (result, n_factors_note) = if let Some(assets_path) = &cfg.assets {
        // Generic mode: a wide CSV of test assets priced on benchmark factors.
        require_file(assets_path)?;
        let factors_path = cfg
            .factors_csv
            .as_ref()
            .ok_or_else(|| validation("generic mode needs --factors-csv with --assets"))?;
        require_file(factors_path)?;
        manifest.input("assets", assets_path)?;
        manifest.input("factors_csv", factors_path)?;
        let (dates, _names, matrix) =
            cross_section::read_wide_csv(assets_path).map_err(|e| validation(e.to_string()))?;
        let ff_rows = load_ff(factors_path)?;
        let (factor_matrix, factor_names) = align_ff_factors(&dates, &ff_rows, cfg.model_kind())?;
        let result =
            cross_section::fama_macbeth(&matrix, &factor_matrix, &factor_names, cfg.nw_lags)
                .map_err(map_cs_err)?;
        (result, format!("model={}", cfg.model))
    } else {
        // Pipeline mode: quantile portfolios priced on the factor's
        // mimicking portfolio and the market.
        let panels = build_pricing_panels(cfg)?;
        manifest.input("portfolios", &cfg.portfolios_path())?;
        manifest.input("portfolios_daily", &cfg.portfolios_daily_path())?;
        manifest.input("factors", &cfg.factors_path())?;
        manifest.input("stocks", &cfg.stocks)?;
        let t = panels.months.len();
        let factor_matrix = DMatrix::from_fn(t, 2, |i, j| {
            if j == 0 {
                panels.factor[i]
            } else {
                panels.market[i]
            }
        });
        let names = vec![cfg.factor.clone(), "MKT".to_string()];
        let result =
            cross_section::fama_macbeth(&panels.assets, &factor_matrix, &names, cfg.nw_lags)
                .map_err(map_cs_err)?;
        manifest.note("mimicking_r2", format!("{:.6}", panels.mimicking.r_squared));
        manifest.note("mimicking_n_days", panels.mimicking.n_days);
        manifest.note(
            "mimicking_dropped",
            if panels.mimicking.dropped.is_empty() {
                "none".to_string()
            } else {
                panels.mimicking.dropped.join(",")
            },
        );
        (result, format!("factor={}", cfg.factor))
    };

    let mut rows = vec![PremiumRow {
        spec_id: "fmb".into(),
        factor_name: result.intercept.factor_name.clone(),
        lambda: result.intercept.lambda * PCT,
        t_stat: result.intercept.t_stat,
        adj_r2: result.adj_r2,
        n_assets: result.n_assets,
        n_months: result.n_months,
        wald_p: None,
    }];
    for premium in &result.premia {
        rows.push(PremiumRow {
            spec_id: "fmb".into(),
            factor_name: premium.factor_name.clone(),
            lambda: premium.lambda * PCT,
            t_stat: premium.t_stat,
            adj_r2: result.adj_r2,
            n_assets: result.n_assets,
            n_months: result.n_months,
            wald_p: None,
        });
    }
    let table = report::premia_table(
        "Cross-sectional risk premia (two-pass, % per month)",
        &rows,
        None,
    )
    .render();

    let premia_path = cfg.premia_path();
    let merged = merge_premia(&premia_path, "fmb", rows)?;
    let table_path = cfg.tables_dir().join("premia_fmb.txt");
    let mut staging = Staging::default();
    let tmp_premia = staging.stage(&premia_path)?;
    let tmp_table = staging.stage(&table_path)?;
    cross_section::write_premia_csv(&merged, &tmp_premia).map_err(csv_err(&premia_path))?;
    write_text(&tmp_table, &table)?;
    staging.commit()?;

    manifest.note("mode", n_factors_note);
    manifest.note("shanken_multiplier", format!("{:.6}", result.shanken));
    manifest.note("n_assets", result.n_assets);
    manifest.note("n_months", result.n_months);
    manifest.output("premia", &premia_path)?;
    manifest.output("premia_table", &table_path)?;
    manifest.write(&cfg.out)?;

    let lead = result
        .premia
        .first()
        .map(|p| format!("{} lambda {:.4}%/mo (t {:.2})", p.factor_name, p.lambda * PCT, p.t_stat))
        .unwrap_or_default();
    println!(
        "[fmb] {} assets x {} months: {}",
        result.n_assets, result.n_months, lead
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// threepass
// ---------------------------------------------------------------------------

pub fn run_threepass(cfg: &RunConfig) -> Result<(), CliError> {
    let mut manifest = Manifest::new("threepass", cfg);
    let tp_cfg = ThreePassConfig {
        n_latent: cfg.n_latent,
        max_latent: MAX_LATENT,
        nw_lags: cfg.nw_lags,
    };

    let (result, factor_label) = if let Some(assets_path) = &cfg.assets {
        // Generic mode: wide CSVs for assets, the observable factor, and
        // the market factor, all on an identical date grid.
        require_file(assets_path)?;
        let observable_path = cfg
            .observable
            .as_ref()
            .ok_or_else(|| validation("generic mode needs --observable with --assets"))?;
        let market_path = cfg
            .market
            .as_ref()
            .ok_or_else(|| validation("generic mode needs --market with --assets"))?;
        require_file(observable_path)?;
        require_file(market_path)?;
        manifest.input("assets", assets_path)?;
        manifest.input("observable", observable_path)?;
        manifest.input("market", market_path)?;
        let (dates, _names, assets) =
            cross_section::read_wide_csv(assets_path).map_err(|e| validation(e.to_string()))?;
        let (obs_dates, obs_names, obs) =
            cross_section::read_wide_csv(observable_path).map_err(|e| validation(e.to_string()))?;
        let (mkt_dates, _mkt_names, mkt) =
            cross_section::read_wide_csv(market_path).map_err(|e| validation(e.to_string()))?;
        if obs_dates != dates || mkt_dates != dates {
            return Err(validation(
                "assets, observable, and market files must share identical dates",
            ));
        }
        let observable: Vec<f64> = obs.column(0).iter().copied().collect();
        let market: Vec<f64> = mkt.column(0).iter().copied().collect();
        let result = cross_section::three_pass(&assets, &observable, &market, &tp_cfg)
            .map_err(map_cs_err)?;
        let label = obs_names
            .first()
            .cloned()
            .unwrap_or_else(|| cfg.factor.clone());
        (result, label)
    } else {
        let panels = build_pricing_panels(cfg)?;
        manifest.input("portfolios", &cfg.portfolios_path())?;
        manifest.input("portfolios_daily", &cfg.portfolios_daily_path())?;
        manifest.input("factors", &cfg.factors_path())?;
        manifest.input("stocks", &cfg.stocks)?;
        let result =
            cross_section::three_pass(&panels.assets, &panels.factor, &panels.market, &tp_cfg)
                .map_err(map_cs_err)?;
        (result, cfg.factor.clone())
    };

    let rows = vec![
        PremiumRow {
            spec_id: "three_pass".into(),
            factor_name: factor_label.clone(),
            lambda: result.lambda * PCT,
            t_stat: result.t_stat,
            adj_r2: result.adj_r2,
            n_assets: result.n_assets,
            n_months: result.n_months,
            wald_p: Some(result.weak_factor_p),
        },
        PremiumRow {
            spec_id: "three_pass".into(),
            factor_name: "MKT".into(),
            lambda: result.lambda_market * PCT,
            t_stat: result.t_market,
            adj_r2: result.adj_r2,
            n_assets: result.n_assets,
            n_months: result.n_months,
            wald_p: Some(result.weak_factor_p),
        },
    ];
    let table = report::premia_table(
        "Cross-sectional risk premia (latent-factor three-pass, % per month)",
        &rows,
        Some(result.n_latent_factors),
    )
    .render();

    let premia_path = cfg.premia_path();
    let merged = merge_premia(&premia_path, "three_pass", rows)?;
    let table_path = cfg.tables_dir().join("premia_three_pass.txt");
    let mut staging = Staging::default();
    let tmp_premia = staging.stage(&premia_path)?;
    let tmp_table = staging.stage(&table_path)?;
    cross_section::write_premia_csv(&merged, &tmp_premia).map_err(csv_err(&premia_path))?;
    write_text(&tmp_table, &table)?;
    staging.commit()?;

    manifest.note("n_latent_factors", result.n_latent_factors);
    manifest.note("observable_r2", format!("{:.6}", result.observable_r2));
    manifest.note("weak_factor_p", format!("{:.6}", result.weak_factor_p));
    manifest.note("n_assets", result.n_assets);
    manifest.note("n_months", result.n_months);
    manifest.output("premia", &premia_path)?;
    manifest.output("premia_table", &table_path)?;
    manifest.write(&cfg.out)?;

    println!(
        "[threepass] {} latent factors: {} lambda {:.4}%/mo (t {:.2}), weak-factor p {:.4}",
        result.n_latent_factors,
        factor_label,
        result.lambda * PCT,
        result.t_stat,
        result.weak_factor_p
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

pub fn run_pipeline(cfg: &RunConfig) -> Result<(), CliError> {
    run_ingest(cfg)?;
    // Downstream stages read the normalized artifacts, exactly as the
    // equivalent subcommand sequence with default paths would.
    let mut normalized = cfg.clone();
    normalized.options = cfg.out.join("options.csv");
    normalized.stocks = cfg.out.join("stocks.csv");
    normalized.rates = cfg.out.join("rates.csv");
    if cfg.out.join("ff_factors.csv").is_file() {
        normalized.ff = cfg.out.join("ff_factors.csv");
    }
    run_iv(&normalized)?;
    run_factors(&normalized)?;
    run_betas(&normalized)?;
    run_sort(&normalized)?;
    run_fmb(&normalized)?;
    run_threepass(&normalized)?;

    let mut manifest = Manifest::new("pipeline", cfg);
    manifest.note("stages", "ingest,iv,factors,betas,sort,fmb,threepass");
    manifest.write(&cfg.out)?;
    println!("[pipeline] complete: artifacts in {}", cfg.out.display());
    Ok(())
}
