//! Synthetic market generator with known ground truth.
//!
//! Every verification path in this crate runs against data produced here:
//! Black-Scholes option chains whose implied variance is known in closed
//! form, low-rank variance panels with a known common factor, and stock
//! cross-sections with known betas and an embedded factor premium.
//!
//! # Random number generation
//!
//! All randomness flows through [`StreamRng`], built on the ChaCha12 stream
//! cipher (`rand_chacha`'s `ChaCha12Rng`). The generator is seeded with
//! `seed_from_u64(seed)` and split into independent substreams with
//! `set_stream(stream)`, so parallel per-firm generation is deterministic
//! and independent of scheduling. Stream ids are allocated by convention:
//!
//! * stream `0` — market-level paths (the common factor, market returns);
//! * stream `1` — auxiliary market-level noise;
//! * streams `2`–`6` — monthly placebo style factors, one per style;
//! * stream `1000 + i` — option-underlying firm `i`;
//! * stream `500_000 + j` — stock `j`.
//!
//! Uniform variates are `(next_u64() >> 11) as f64 * 2^-53` (53 random
//! mantissa bits in `[0, 1)`); Gaussians come from the Box-Muller transform
//! of consecutive uniforms, with the second variate of each pair cached.
//! These constructions are written out so the byte streams can be
//! reproduced exactly in another language from this comment alone.

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use nalgebra::DMatrix;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use statrs::function::erf::erf;

use crate::market_data::{ChainMeta, OptionChain, OptionQuote, OptionRight, StockRow};

/// Stream ids for market-wide paths.
pub const STREAM_MARKET: u64 = 0;
pub const STREAM_FACTOR_NOISE: u64 = 1;
/// Base stream id for option-underlying firms.
pub const STREAM_OPTION_FIRMS: u64 = 1000;
/// Base stream id for stocks in the priced cross-section.
pub const STREAM_STOCKS: u64 = 500_000;

/// Deterministic substream generator: ChaCha12 keyed by a master seed with
/// one cipher stream per logical entity. See the module docs for the exact
/// uniform/Gaussian constructions.
pub struct StreamRng {
    rng: ChaCha12Rng,
    cached_gaussian: Option<f64>,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        StreamRng {
            rng,
            cached_gaussian: None,
        }
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller on consecutive uniforms.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.cached_gaussian.take() {
            return z;
        }
        // Reject u1 = 0 so ln(u1) is finite.
        let mut u1 = self.uniform();
        while u1 == 0.0 {
            u1 = self.uniform();
        }
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.cached_gaussian = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Black-Scholes price of a European option.
pub fn bs_price(spot: f64, strike: f64, rate: f64, vol: f64, maturity: f64, right: OptionRight) -> f64 {
    let discounted_strike = strike * (-rate * maturity).exp();
    if vol <= 0.0 || maturity <= 0.0 {
        return match right {
            OptionRight::Call => (spot - discounted_strike).max(0.0),
            OptionRight::Put => (discounted_strike - spot).max(0.0),
        };
    }
    let sig_sqrt_t = vol * maturity.sqrt();
    let d1 = ((spot / strike).ln() + (rate + 0.5 * vol * vol) * maturity) / sig_sqrt_t;
    let d2 = d1 - sig_sqrt_t;
    match right {
        OptionRight::Call => spot * normal_cdf(d1) - discounted_strike * normal_cdf(d2),
        OptionRight::Put => discounted_strike * normal_cdf(-d2) - spot * normal_cdf(-d1),
    }
}

/// Black-Scholes delta.
pub fn bs_delta(spot: f64, strike: f64, rate: f64, vol: f64, maturity: f64, right: OptionRight) -> f64 {
    if vol <= 0.0 || maturity <= 0.0 {
        let intrinsic = spot - strike * (-rate * maturity).exp();
        return match right {
            OptionRight::Call => {
                if intrinsic > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            OptionRight::Put => {
                if intrinsic < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        };
    }
    let sig_sqrt_t = vol * maturity.sqrt();
    let d1 = ((spot / strike).ln() + (rate + 0.5 * vol * vol) * maturity) / sig_sqrt_t;
    match right {
        OptionRight::Call => normal_cdf(d1),
        OptionRight::Put => normal_cdf(d1) - 1.0,
    }
}

/// Quote-grid controls for [`bs_chain`].
#[derive(Debug, Clone)]
pub struct ChainStyle {
    /// Half-spread as a fraction of mid.
    pub relative_half_spread: f64,
    /// Minimum half-spread (one tick).
    pub tick: f64,
    /// Sentinel volume written on every quote.
    pub volume: u64,
    /// Sentinel open interest written on every quote.
    pub open_interest: u64,
}

impl Default for ChainStyle {
    fn default() -> Self {
        ChainStyle {
            relative_half_spread: 0.01,
            tick: 0.01,
            volume: 100,
            open_interest: 500,
        }
    }
}

/// Flat-vol Black-Scholes chain: call and put quotes at every strike on the
/// grid, bid/ask symmetric around the model mid, sentinel activity fields.
#[allow(clippy::too_many_arguments)]
pub fn bs_chain(
    underlying_id: &str,
    quote_date: NaiveDate,
    spot: f64,
    rate: f64,
    vol: f64,
    days_to_expiry: i64,
    strike_lo: f64,
    strike_hi: f64,
    step: f64,
    style: &ChainStyle,
) -> Result<OptionChain, ChainGenError> {
    assert!(vol > 0.0, "vol must be positive");
    assert!(step > 0.0, "strike step must be positive");
    let n = ((strike_hi - strike_lo) / step).floor() as usize + 1;
    if n < 4 {
        return Err(ChainGenError::GridTooSparse { strikes: n });
    }
    let maturity = days_to_expiry as f64 / 365.0;
    let expiry_date = quote_date + Duration::days(days_to_expiry);
    let mut quotes = Vec::with_capacity(2 * n);
    for i in 0..n {
        let strike = strike_lo + i as f64 * step;
        for right in [OptionRight::Call, OptionRight::Put] {
            let mid = bs_price(spot, strike, rate, vol, maturity, right);
            let half = (style.relative_half_spread * mid).max(style.tick);
            let bid = (mid - half).max(style.tick * 0.5);
            let ask = mid + half;
            quotes.push(OptionQuote {
                underlying_id: underlying_id.to_string(),
                quote_date,
                expiry_date,
                strike,
                right,
                bid,
                ask,
                volume: style.volume,
                open_interest: style.open_interest,
                implied_vol: Some(vol),
                delta: Some(bs_delta(spot, strike, rate, vol, maturity, right)),
            });
        }
    }
    let meta = ChainMeta {
        underlying_id: underlying_id.to_string(),
        quote_date,
        expiry_date,
        spot,
        rate,
    };
    Ok(OptionChain::new(meta, quotes))
}

#[derive(Debug, thiserror::Error)]
pub enum ChainGenError {
    #[error("strike grid has only {strikes} strikes, need at least 4")]
    GridTooSparse { strikes: usize },
}

/// Specification of a synthetic factor panel.
#[derive(Debug, Clone)]
pub struct FactorPanelSpec {
    pub seed: u64,
    pub n_firms: usize,
    pub n_days: usize,
    /// AR(1) persistence of the common factor.
    pub persistence: f64,
    /// Idiosyncratic noise scale relative to the factor's standard deviation.
    pub noise_scale: f64,
    /// Probability that a cell is masked missing.
    pub missing_rate: f64,
}

impl Default for FactorPanelSpec {
    fn default() -> Self {
        FactorPanelSpec {
            seed: 1,
            n_firms: 50,
            n_days: 504,
            persistence: 0.97,
            noise_scale: 0.1,
            missing_rate: 0.0,
        }
    }
}

/// A generated rank-one panel together with its generating factor.
pub struct GeneratedPanel {
    /// dates-by-firms matrix, NaN = missing.
    pub panel: DMatrix<f64>,
    pub true_factor: Vec<f64>,
    pub loadings: Vec<f64>,
}

/// Draw a stationary AR(1) path with unit marginal variance.
pub fn ar1_path(rng: &mut StreamRng, n: usize, persistence: f64) -> Vec<f64> {
    let innovation_scale = (1.0 - persistence * persistence).max(0.0).sqrt();
    let mut path = Vec::with_capacity(n);
    let mut state = rng.gaussian();
    path.push(state);
    for _ in 1..n {
        state = persistence * state + innovation_scale * rng.gaussian();
        path.push(state);
    }
    path
}

/// Rank-one panel xᵢₜ = λᵢ·fₜ + σ_ε·εᵢₜ with an AR(1) factor and optional
/// missing-cell mask. Per-firm streams make the panel reproducible cell by
/// cell regardless of generation order.
pub fn factor_panel(spec: &FactorPanelSpec) -> GeneratedPanel {
    assert!(spec.n_firms >= 2, "need at least 2 firms");
    let mut market_rng = StreamRng::new(spec.seed, STREAM_MARKET);
    let factor = ar1_path(&mut market_rng, spec.n_days, spec.persistence);
    let factor_std = crate::linalg::sample_std(&factor);
    let noise_std = spec.noise_scale * factor_std;
    let mut panel = DMatrix::<f64>::zeros(spec.n_days, spec.n_firms);
    let mut loadings = Vec::with_capacity(spec.n_firms);
    for j in 0..spec.n_firms {
        let mut rng = StreamRng::new(spec.seed, STREAM_OPTION_FIRMS + j as u64);
        let loading = 0.5 + rng.uniform();
        loadings.push(loading);
        for i in 0..spec.n_days {
            let noise = noise_std * rng.gaussian();
            let masked = spec.missing_rate > 0.0 && rng.uniform() < spec.missing_rate;
            panel[(i, j)] = if masked {
                f64::NAN
            } else {
                loading * factor[i] + noise
            };
        }
    }
    GeneratedPanel {
        panel,
        true_factor: factor,
        loadings,
    }
}

/// Specification of a synthetic priced cross-section of stocks.
#[derive(Debug, Clone)]
pub struct CrossSectionSpec {
    pub seed: u64,
    pub n_stocks: usize,
    pub n_days: usize,
    /// Embedded factor premium, percent per month (e.g. -0.40).
    pub premium_pct_month: f64,
    /// Dispersion of factor betas across stocks (betas uniform in ±this).
    pub beta_dispersion: f64,
    /// Daily idiosyncratic volatility.
    pub idio_vol: f64,
    /// Daily market-factor volatility.
    pub market_vol: f64,
    /// Converts the unit-variance factor innovations into return units: a
    /// unit-beta stock moves `factor_return_scale` per unit innovation.
    /// Keeping this scale small relative to the premium is what makes the
    /// embedded premium detectable over a few years of data.
    pub factor_return_scale: f64,
}

impl Default for CrossSectionSpec {
    fn default() -> Self {
        CrossSectionSpec {
            seed: 1,
            n_stocks: 150,
            n_days: 1260,
            premium_pct_month: -0.40,
            beta_dispersion: 1.5,
            idio_vol: 0.004,
            market_vol: 0.01,
            factor_return_scale: 0.004,
        }
    }
}

/// A generated stock cross-section with its ground truth.
pub struct GeneratedCrossSection {
    pub rows: Vec<StockRow>,
    pub dates: Vec<NaiveDate>,
    pub true_betas: Vec<f64>,
    /// Daily factor-innovation path the betas load on, already converted to
    /// return units (`factor_return_scale` times the raw innovations).
    pub factor_innovations: Vec<f64>,
    /// Daily market return path.
    pub market_returns: Vec<f64>,
    pub stock_ids: Vec<String>,
}

const TRADING_DAYS_PER_MONTH: f64 = 21.0;

/// Weekday calendar of `n` trading days starting at `start`.
pub fn weekday_calendar(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut dates = Vec::with_capacity(n);
    let mut d = start;
    while dates.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            dates.push(d);
        }
        d += Duration::days(1);
    }
    dates
}

/// Daily stock returns rⱼₜ = αⱼ + b_m·mktₜ + βⱼ·gₜ + εⱼₜ where g is the
/// factor-innovation path in return units and the premium enters through
/// the per-stock drift αⱼ = βⱼ·(premium/21): a stock's expected return is
/// proportional to its factor exposure, which is what the pricing
/// estimators must recover.
pub fn priced_cross_section(
    spec: &CrossSectionSpec,
    factor_innovations: &[f64],
    start: NaiveDate,
) -> GeneratedCrossSection {
    let n_days = spec.n_days.min(factor_innovations.len());
    let dates = weekday_calendar(start, n_days);
    let return_innovations: Vec<f64> = factor_innovations[..n_days]
        .iter()
        .map(|v| spec.factor_return_scale * v)
        .collect();
    let mut market_rng = StreamRng::new(spec.seed, STREAM_FACTOR_NOISE);
    let market_returns: Vec<f64> = (0..n_days)
        .map(|_| spec.market_vol * market_rng.gaussian())
        .collect();
    let premium_daily = spec.premium_pct_month / 100.0 / TRADING_DAYS_PER_MONTH;
    let mut rows = Vec::with_capacity(spec.n_stocks * n_days);
    let mut true_betas = Vec::with_capacity(spec.n_stocks);
    let mut stock_ids = Vec::with_capacity(spec.n_stocks);
    for j in 0..spec.n_stocks {
        let mut rng = StreamRng::new(spec.seed, STREAM_STOCKS + j as u64);
        let beta = spec.beta_dispersion * (2.0 * rng.uniform() - 1.0);
        let market_beta = 0.8 + 0.4 * rng.uniform();
        // Price and size levels spread across the cross-section so the
        // eligibility screens have something to remove.
        let base_price = 3.0 + 60.0 * rng.uniform();
        let base_cap = 1.0e8 * (1.0 + 50.0 * rng.uniform());
        let alpha = beta * premium_daily;
        true_betas.push(beta);
        let id = format!("S{j:04}");
        stock_ids.push(id.clone());
        let mut price = base_price;
        let mut cap = base_cap;
        for (i, date) in dates.iter().enumerate() {
            let ret = alpha
                + market_beta * market_returns[i]
                + beta * return_innovations[i]
                + spec.idio_vol * rng.gaussian();
            price *= 1.0 + ret;
            cap *= 1.0 + ret;
            rows.push(StockRow {
                stock_id: id.clone(),
                date: *date,
                excess_return: Some(ret),
                price: Some(price),
                market_cap: Some(cap),
                volume: Some(1.0e6 * (0.5 + rng.uniform())),
            });
        }
    }
    GeneratedCrossSection {
        rows,
        dates,
        true_betas,
        factor_innovations: return_innovations,
        market_returns,
        stock_ids,
    }
}

/// Full synthetic-market specification: option underlyings whose implied
/// variances load on a common AR(1) fear factor, plus a priced stock
/// cross-section whose returns load on that factor's innovations.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Option-underlying firms (variance-panel columns).
    pub n_option_firms: usize,
    pub n_stocks: usize,
    pub n_days: usize,
    pub start_date: NaiveDate,
    /// Persistence of the common fear factor.
    pub persistence: f64,
    /// Baseline flat volatility per firm-day.
    pub base_vol: f64,
    /// Sensitivity of log firm volatility to the common factor.
    pub vol_loading_scale: f64,
    /// Idiosyncratic log-vol noise scale.
    pub vol_noise: f64,
    /// Probability a firm-day chain is not generated (missing panel cell).
    pub chain_missing_rate: f64,
    /// Constant risk-free rate.
    pub rate: f64,
    /// Embedded premium on the bad-fear factor, percent per month.
    pub premium_pct_month: f64,
    pub beta_dispersion: f64,
    pub idio_vol: f64,
    pub market_vol: f64,
    /// Return-units scale of the factor innovations in stock returns.
    pub factor_return_scale: f64,
    /// Strike grid spacing as a fraction of spot.
    pub strike_step_frac: f64,
    /// Strike grid half-width in units of σ√T.
    pub strike_width_sigmas: f64,
    pub days_to_expiry: i64,
    pub chain_style: ChainStyle,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 1,
            n_option_firms: 30,
            n_stocks: 150,
            n_days: 1260,
            start_date: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
            persistence: 0.97,
            base_vol: 0.25,
            vol_loading_scale: 0.35,
            vol_noise: 0.05,
            chain_missing_rate: 0.05,
            rate: 0.02,
            premium_pct_month: -0.40,
            beta_dispersion: 1.5,
            idio_vol: 0.004,
            market_vol: 0.01,
            factor_return_scale: 0.004,
            strike_step_frac: 0.02,
            strike_width_sigmas: 6.0,
            days_to_expiry: 30,
            chain_style: ChainStyle::default(),
        }
    }
}

/// One underlying's generated chain plus the flat vol that produced it.
pub struct GeneratedChain {
    pub chain: OptionChain,
    pub spot: f64,
    pub flat_vol: f64,
}

/// The full synthetic market: chains, spots, stock rows, and ground truth.
pub struct GeneratedMarket {
    pub chains: Vec<GeneratedChain>,
    /// (firm, date, spot) triples for every generated chain.
    pub spots: Vec<(String, NaiveDate, f64)>,
    pub stocks: GeneratedCrossSection,
    pub dates: Vec<NaiveDate>,
    pub option_firm_ids: Vec<String>,
    /// The common fear-factor path (levels).
    pub true_factor: Vec<f64>,
    /// Its first differences, which stock returns load on.
    pub true_innovations: Vec<f64>,
    pub rate: f64,
    pub seed: u64,
}

/// Generate the full market. Firm-level chains are driven by per-firm
/// streams, so the expensive per-firm loops can run in any order without
/// touching the output.
pub fn generate_market(spec: &SyntheticSpec) -> GeneratedMarket {
    let dates = weekday_calendar(spec.start_date, spec.n_days);
    let mut market_rng = StreamRng::new(spec.seed, STREAM_MARKET);
    let factor = ar1_path(&mut market_rng, spec.n_days, spec.persistence);
    let mut innovations = vec![0.0; spec.n_days];
    for i in 1..spec.n_days {
        innovations[i] = factor[i] - factor[i - 1];
    }

    let maturity = spec.days_to_expiry as f64 / 365.0;
    let mut chains = Vec::new();
    let mut spots = Vec::new();
    let mut option_firm_ids = Vec::with_capacity(spec.n_option_firms);
    for f in 0..spec.n_option_firms {
        let id = format!("F{f:03}");
        option_firm_ids.push(id.clone());
        let mut rng = StreamRng::new(spec.seed, STREAM_OPTION_FIRMS + f as u64);
        let loading = spec.vol_loading_scale * (0.6 + 0.8 * rng.uniform());
        let spot0 = 20.0 + 180.0 * rng.uniform();
        for (i, date) in dates.iter().enumerate() {
            let missing = spec.chain_missing_rate > 0.0 && rng.uniform() < spec.chain_missing_rate;
            let vol_noise = spec.vol_noise * rng.gaussian();
            if missing {
                continue;
            }
            let vol = spec.base_vol * (loading * factor[i] + vol_noise).exp();
            let vol = vol.clamp(0.05, 2.0);
            let spot = spot0;
            let width = spec.strike_width_sigmas * vol * maturity.sqrt();
            let lo = spot * (-width).exp();
            let hi = spot * width.exp();
            let step = spec.strike_step_frac * spot;
            let chain = bs_chain(
                &id,
                *date,
                spot,
                spec.rate,
                vol,
                spec.days_to_expiry,
                lo,
                hi,
                step,
                &spec.chain_style,
            )
            .expect("generated grid is dense");
            spots.push((id.clone(), *date, spot));
            chains.push(GeneratedChain {
                chain,
                spot,
                flat_vol: vol,
            });
        }
    }

    let cs_spec = CrossSectionSpec {
        seed: spec.seed,
        n_stocks: spec.n_stocks,
        n_days: spec.n_days,
        premium_pct_month: spec.premium_pct_month,
        beta_dispersion: spec.beta_dispersion,
        idio_vol: spec.idio_vol,
        market_vol: spec.market_vol,
        factor_return_scale: spec.factor_return_scale,
    };
    let stocks = priced_cross_section(&cs_spec, &innovations, spec.start_date);

    GeneratedMarket {
        chains,
        spots,
        stocks,
        dates,
        option_firm_ids,
        true_factor: factor,
        true_innovations: innovations,
        rate: spec.rate,
        seed: spec.seed,
    }
}

/// Base stream id for the placebo style-factor series (one stream per
/// style, in column order).
pub const STREAM_STYLES: u64 = 2;

/// Monthly style-factor rows for the generated market.
///
/// The market excess return is the capitalization-weighted average of the
/// stock cross-section's daily excess returns, compounded within each
/// month. The non-market styles are zero-premium Gaussian placebo series
/// (0.6% monthly scale) so downstream factor regressions have a full
/// right-hand side with known-null premia; the risk-free column converts
/// the flat annual rate to monthly.
pub fn monthly_style_factors(market: &GeneratedMarket) -> Vec<crate::portfolio::FfRow> {
    use crate::market_data::StockPanel;

    let panel = StockPanel::from_rows(market.stocks.rows.clone());
    let monthly_mkt = panel.value_weighted_excess().monthly_compound();
    let months: Vec<_> = monthly_mkt.keys().cloned().collect();

    let mut style_rngs: Vec<StreamRng> = (0..5)
        .map(|s| StreamRng::new(market.seed, STREAM_STYLES + s))
        .collect();
    let rf_month = (market.rate / 12.0).exp() - 1.0;
    months
        .iter()
        .map(|ym| {
            let styles: Vec<f64> = style_rngs.iter_mut().map(|r| 0.006 * r.gaussian()).collect();
            crate::portfolio::FfRow {
                date: ym.end_date(),
                mkt_rf: monthly_mkt[ym],
                smb: styles[0],
                hml: styles[1],
                rmw: styles[2],
                cma: styles[3],
                mom: styles[4],
                rf: rf_month,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{filter_chain, FilterConfig};
    use approx::assert_abs_diff_eq;

    #[test]
    fn stream_rng_is_reproducible_and_stream_separated() {
        let mut a = StreamRng::new(42, 7);
        let mut b = StreamRng::new(42, 7);
        for _ in 0..100 {
            assert_eq!(a.rng.next_u64(), b.rng.next_u64());
        }
        let mut c = StreamRng::new(42, 8);
        let mut d = StreamRng::new(42, 7);
        let overlap = (0..100).filter(|_| c.rng.next_u64() == d.rng.next_u64()).count();
        assert!(overlap < 3);
    }

    #[test]
    fn uniform_and_gaussian_moments() {
        let mut rng = StreamRng::new(5, 0);
        let n = 100_000;
        let uniforms: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let mean = crate::linalg::mean(&uniforms);
        assert!((mean - 0.5).abs() < 0.005, "uniform mean {mean}");
        assert!(uniforms.iter().all(|u| (0.0..1.0).contains(u)));
        let gaussians: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let gm = crate::linalg::mean(&gaussians);
        let gv = crate::linalg::sample_variance(&gaussians);
        assert!(gm.abs() < 0.02, "gaussian mean {gm}");
        assert!((gv - 1.0).abs() < 0.02, "gaussian variance {gv}");
    }

    #[test]
    fn bs_reference_value() {
        // At-the-money, r = 0, sigma = 0.2, T = 0.25: an independently
        // tabulated Black-Scholes value.
        let c = bs_price(100.0, 100.0, 0.0, 0.2, 0.25, OptionRight::Call);
        assert_abs_diff_eq!(c, 3.9878, epsilon = 1e-4);
    }

    #[test]
    fn bs_put_call_parity() {
        for strike in [70.0, 90.0, 100.0, 115.0, 140.0] {
            let c = bs_price(100.0, strike, 0.03, 0.3, 0.5, OptionRight::Call);
            let p = bs_price(100.0, strike, 0.03, 0.3, 0.5, OptionRight::Put);
            let forward_leg = 100.0 - strike * (-0.03f64 * 0.5).exp();
            assert_abs_diff_eq!(c - p, forward_leg, epsilon = 1e-12);
        }
    }

    #[test]
    fn bs_zero_vol_limit() {
        let c = bs_price(100.0, 90.0, 0.02, 1e-12, 0.25, OptionRight::Call);
        let intrinsic = 100.0 - 90.0 * (-0.02f64 * 0.25).exp();
        assert_abs_diff_eq!(c, intrinsic, epsilon = 1e-8);
        let p = bs_price(100.0, 90.0, 0.02, 1e-12, 0.25, OptionRight::Put);
        assert_abs_diff_eq!(p, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn chain_grid_too_sparse_errors() {
        let d: NaiveDate = "2020-06-01".parse().unwrap();
        let result = bs_chain("X", d, 100.0, 0.0, 0.2, 30, 99.0, 101.0, 1.0, &ChainStyle::default());
        assert!(matches!(result, Err(ChainGenError::GridTooSparse { strikes: 3 })));
    }

    #[test]
    fn generated_chains_pass_filters() {
        let d: NaiveDate = "2020-06-01".parse().unwrap();
        let chain = bs_chain(
            "X",
            d,
            100.0,
            0.02,
            0.3,
            30,
            60.0,
            160.0,
            1.0,
            &ChainStyle::default(),
        )
        .unwrap();
        let filtered =
            filter_chain(chain.quotes.clone(), chain.meta.clone(), &FilterConfig::default())
                .unwrap();
        assert!(filtered.chain.quotes.len() >= 4);
        // Forward should sit near the cost-of-carry value.
        let expected_forward = 100.0 * (0.02f64 * 30.0 / 365.0).exp();
        assert!((filtered.forward - expected_forward).abs() < 0.5);
    }

    #[test]
    fn ar1_path_is_stationary_unit_variance() {
        let mut rng = StreamRng::new(9, 0);
        let path = ar1_path(&mut rng, 200_000, 0.97);
        let v = crate::linalg::sample_variance(&path);
        assert!((v - 1.0).abs() < 0.15, "variance {v}");
        // Lag-1 autocorrelation near the persistence parameter.
        let a: Vec<f64> = path[..path.len() - 1].to_vec();
        let b: Vec<f64> = path[1..].to_vec();
        let rho = crate::linalg::pearson(&a, &b);
        assert!((rho - 0.97).abs() < 0.01, "rho {rho}");
    }

    #[test]
    fn factor_panel_rank_one_when_noiseless() {
        let spec = FactorPanelSpec {
            noise_scale: 0.0,
            n_firms: 5,
            n_days: 50,
            ..FactorPanelSpec::default()
        };
        let generated = factor_panel(&spec);
        // Every column is an exact multiple of the factor.
        for j in 0..5 {
            for i in 0..50 {
                let expected = generated.loadings[j] * generated.true_factor[i];
                assert_abs_diff_eq!(generated.panel[(i, j)], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cross_section_embeds_premium_through_drift() {
        let spec = CrossSectionSpec {
            n_stocks: 4,
            n_days: 40,
            idio_vol: 0.0,
            market_vol: 0.0,
            ..CrossSectionSpec::default()
        };
        let innovations = vec![0.0; 40];
        let start = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
        let generated = priced_cross_section(&spec, &innovations, start);
        // With all shocks off, each stock's return is exactly its drift
        // beta * premium/21 every day.
        for (j, id) in generated.stock_ids.iter().enumerate() {
            let beta = generated.true_betas[j];
            let expected = beta * (-0.40 / 100.0) / 21.0;
            for row in generated.rows.iter().filter(|r| &r.stock_id == id) {
                assert_abs_diff_eq!(row.excess_return.unwrap(), expected, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn weekday_calendar_skips_weekends() {
        let start = NaiveDate::from_ymd_opt(2020, 1, 3).unwrap(); // a Friday
        let cal = weekday_calendar(start, 5);
        let days: Vec<Weekday> = cal.iter().map(|d| d.weekday()).collect();
        assert_eq!(
            days,
            vec![
                Weekday::Fri,
                Weekday::Mon,
                Weekday::Tue,
                Weekday::Wed,
                Weekday::Thu
            ]
        );
    }

    #[test]
    fn generate_market_is_deterministic() {
        let spec = SyntheticSpec {
            n_option_firms: 3,
            n_stocks: 5,
            n_days: 30,
            ..SyntheticSpec::default()
        };
        let a = generate_market(&spec);
        let b = generate_market(&spec);
        assert_eq!(a.chains.len(), b.chains.len());
        for (x, y) in a.chains.iter().zip(&b.chains) {
            assert_eq!(x.flat_vol.to_bits(), y.flat_vol.to_bits());
            for (qx, qy) in x.chain.quotes.iter().zip(&y.chain.quotes) {
                assert_eq!(qx.bid.to_bits(), qy.bid.to_bits());
                assert_eq!(qx.ask.to_bits(), qy.ask.to_bits());
            }
        }
        for (rx, ry) in a.stocks.rows.iter().zip(&b.stocks.rows) {
            assert_eq!(rx.excess_return.unwrap().to_bits(), ry.excess_return.unwrap().to_bits());
        }
    }

    #[test]
    fn style_factors_cover_every_month_with_weighted_market() {
        let spec = SyntheticSpec {
            n_option_firms: 2,
            n_stocks: 6,
            n_days: 70,
            ..SyntheticSpec::default()
        };
        let market = generate_market(&spec);
        let rows = monthly_style_factors(&market);
        let months: std::collections::BTreeSet<(i32, u32)> = market
            .stocks
            .dates
            .iter()
            .map(|d| (d.year(), d.month()))
            .collect();
        assert_eq!(rows.len(), months.len());

        // The first month's market return equals a direct cap-weighted
        // compound over that month's days.
        let first_month = *months.iter().next().unwrap();
        let panel = crate::market_data::StockPanel::from_rows(market.stocks.rows.clone());
        let mut compounded = 1.0;
        for date in market
            .stocks
            .dates
            .iter()
            .filter(|d| (d.year(), d.month()) == first_month)
        {
            let mut wsum = 0.0;
            let mut cap_sum = 0.0;
            for history in panel.stocks.values() {
                if let (Some(r), Some(c)) =
                    (history.returns.get(*date), history.market_caps.get(*date))
                {
                    wsum += c * r;
                    cap_sum += c;
                }
            }
            compounded *= 1.0 + wsum / cap_sum;
        }
        assert_abs_diff_eq!(rows[0].mkt_rf, compounded - 1.0, epsilon = 1e-12);

        // Placebo styles are reproducible and not all identical.
        let again = monthly_style_factors(&market);
        for (x, y) in rows.iter().zip(&again) {
            assert_eq!(x.smb.to_bits(), y.smb.to_bits());
            assert_eq!(x.mom.to_bits(), y.mom.to_bits());
        }
        assert!(rows.iter().any(|r| r.smb != rows[0].smb));
    }
}
