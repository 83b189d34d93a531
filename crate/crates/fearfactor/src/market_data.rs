//! Raw market data: option chains, underlying prices, and risk-free rates.
//!
//! An option chain is the set of quotes for one underlying, one quote date,
//! and one expiry. Chains pass through a fixed sequence of screens before
//! any variance is computed:
//!
//! 1. quote-level screens — missing delta or implied volatility, zero bid,
//!    zero volume, zero open interest, crossed markets (ask < bid);
//! 2. static-arbitrage screens — a call mid above spot, a put mid above the
//!    discounted strike, and mid prices that are not monotone in strike in
//!    the admissible direction;
//! 3. forward computation via put-call parity at the strike where call and
//!    put mids are closest;
//! 4. removal of in-the-money quotes relative to the reference strike `K0`
//!    (the largest strike at or below the forward);
//! 5. chain-level acceptance: maturity inside a fixed day window and a
//!    minimum number of surviving quotes.
//!
//! Every screen is deterministic and idempotent: filtering an already
//! filtered chain changes nothing.

use chrono::NaiveDate;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

use crate::series::DatedSeries;

pub const OPTION_CSV_HEADER: [&str; 11] = [
    "underlying_id",
    "quote_date",
    "expiry_date",
    "strike",
    "right",
    "bid",
    "ask",
    "volume",
    "open_interest",
    "implied_vol",
    "delta",
];

pub const STOCK_CSV_HEADER: [&str; 6] =
    ["stock_id", "date", "return", "price", "market_cap", "volume"];

pub const RATE_CSV_HEADER: [&str; 2] = ["date", "rate"];

/// Days-per-year convention used to annualize option maturities.
pub const DAYS_PER_YEAR: f64 = 365.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OptionRight {
    Call,
    Put,
}

impl OptionRight {
    pub fn as_str(self) -> &'static str {
        match self {
            OptionRight::Call => "C",
            OptionRight::Put => "P",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "C" => Some(OptionRight::Call),
            "P" => Some(OptionRight::Put),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptionQuote {
    pub underlying_id: String,
    pub quote_date: NaiveDate,
    pub expiry_date: NaiveDate,
    pub strike: f64,
    pub right: OptionRight,
    pub bid: f64,
    pub ask: f64,
    pub volume: u64,
    pub open_interest: u64,
    pub implied_vol: Option<f64>,
    pub delta: Option<f64>,
}

impl OptionQuote {
    /// Quote mid price, the pricing input for everything downstream.
    pub fn mid(&self) -> f64 {
        0.5 * (self.bid + self.ask)
    }
}

/// Chain-level context: the underlying spot and the risk-free rate on the
/// quote date.
#[derive(Debug, Clone)]
pub struct ChainMeta {
    pub underlying_id: String,
    pub quote_date: NaiveDate,
    pub expiry_date: NaiveDate,
    pub spot: f64,
    pub rate: f64,
}

impl ChainMeta {
    pub fn maturity_days(&self) -> i64 {
        (self.expiry_date - self.quote_date).num_days()
    }

    /// Maturity as a calendar-day year fraction.
    pub fn year_fraction(&self) -> f64 {
        self.maturity_days() as f64 / DAYS_PER_YEAR
    }
}

/// Quotes for one (underlying, quote date, expiry), sorted by strike with
/// calls before puts at equal strikes, at most one quote per (strike, right).
#[derive(Debug, Clone)]
pub struct OptionChain {
    pub meta: ChainMeta,
    pub quotes: Vec<OptionQuote>,
}

impl OptionChain {
    pub fn new(meta: ChainMeta, mut quotes: Vec<OptionQuote>) -> Self {
        sort_quotes(&mut quotes);
        OptionChain { meta, quotes }
    }
}

fn sort_quotes(quotes: &mut [OptionQuote]) {
    quotes.sort_by(|a, b| {
        a.strike
            .total_cmp(&b.strike)
            .then(a.right.cmp(&b.right))
    });
}

/// Forward level implied by put-call parity.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub forward: f64,
    /// Largest strike at or below the forward (falls back to the lowest
    /// strike when the forward sits below the whole grid).
    pub k0: f64,
    /// Strike at which parity was evaluated.
    pub parity_strike: f64,
}

/// A chain that survived all screens, with its forward level attached.
#[derive(Debug, Clone)]
pub struct FilteredChain {
    pub chain: OptionChain,
    pub forward: f64,
    pub k0: f64,
    pub diagnostics: FilterDiagnostics,
}

/// Per-chain counts of quotes dropped by each screen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterDiagnostics {
    pub missing_delta: usize,
    pub missing_implied_vol: usize,
    pub zero_bid: usize,
    pub zero_volume: usize,
    pub zero_open_interest: usize,
    pub crossed_market: usize,
    pub duplicate_quote: usize,
    pub bound_violation: usize,
    pub non_monotone: usize,
    pub in_the_money: usize,
    pub kept: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("no strike quotes both a call and a put")]
    NoStraddle,
    #[error("maturity of {days} days is outside [{lo}, {hi}]")]
    MaturityOutOfRange { days: i64, lo: i64, hi: i64 },
    #[error("{survivors} quotes survive filtering, {required} required")]
    TooFewQuotes { survivors: usize, required: usize },
}

/// A rejected chain, with whatever screen counts were accumulated before the
/// rejection fired.
#[derive(Debug, Clone)]
pub struct ChainRejection {
    pub reason: ChainError,
    pub diagnostics: FilterDiagnostics,
}

impl fmt::Display for ChainRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.reason)
    }
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub min_maturity_days: i64,
    pub max_maturity_days: i64,
    pub target_maturity_days: i64,
    pub min_quotes: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_maturity_days: 23,
            max_maturity_days: 37,
            target_maturity_days: 30,
            min_quotes: 4,
        }
    }
}

/// Forward via put-call parity: `F = e^{rT} (C - P) + K*` evaluated at the
/// strike `K*` minimizing `|C - P|` (ties resolve to the lower strike), then
/// `K0` = largest strike at or below `F`.
pub fn compute_forward(chain: &OptionChain) -> Result<Forward, ChainError> {
    // Collect per-strike call/put mids; quotes are strike-sorted.
    let mut strikes: Vec<(f64, Option<f64>, Option<f64>)> = Vec::new();
    for q in &chain.quotes {
        match strikes.last_mut() {
            Some(entry) if entry.0 == q.strike => match q.right {
                OptionRight::Call => entry.1 = Some(q.mid()),
                OptionRight::Put => entry.2 = Some(q.mid()),
            },
            _ => {
                let (c, p) = match q.right {
                    OptionRight::Call => (Some(q.mid()), None),
                    OptionRight::Put => (None, Some(q.mid())),
                };
                strikes.push((q.strike, c, p));
            }
        }
    }
    let mut best: Option<(f64, f64)> = None; // (|C-P|, strike)
    let mut parity_gap = 0.0;
    for &(k, c, p) in &strikes {
        if let (Some(c), Some(p)) = (c, p) {
            let gap = (c - p).abs();
            let better = match best {
                None => true,
                // Strict improvement only: ascending scan keeps the lowest
                // strike on ties.
                Some((best_gap, _)) => gap < best_gap,
            };
            if better {
                best = Some((gap, k));
                parity_gap = c - p;
            }
        }
    }
    let (_, parity_strike) = best.ok_or(ChainError::NoStraddle)?;
    let growth = (chain.meta.rate * chain.meta.year_fraction()).exp();
    let forward = growth * parity_gap + parity_strike;
    let mut k0 = None;
    for &(k, _, _) in &strikes {
        if k <= forward {
            k0 = Some(k);
        }
    }
    let k0 = k0.unwrap_or(strikes[0].0);
    Ok(Forward {
        forward,
        k0,
        parity_strike,
    })
}

/// Apply the full screen sequence to one chain's raw quotes.
pub fn filter_chain(
    quotes: Vec<OptionQuote>,
    meta: ChainMeta,
    cfg: &FilterConfig,
) -> Result<FilteredChain, ChainRejection> {
    let mut diag = FilterDiagnostics::default();
    let days = meta.maturity_days();
    if days < cfg.min_maturity_days || days > cfg.max_maturity_days {
        return Err(ChainRejection {
            reason: ChainError::MaturityOutOfRange {
                days,
                lo: cfg.min_maturity_days,
                hi: cfg.max_maturity_days,
            },
            diagnostics: diag,
        });
    }

    // Quote-level screens; the first failing rule is the one counted.
    let mut survivors: Vec<OptionQuote> = Vec::with_capacity(quotes.len());
    for q in quotes {
        if q.delta.is_none() {
            diag.missing_delta += 1;
        } else if q.implied_vol.is_none() {
            diag.missing_implied_vol += 1;
        } else if q.bid <= 0.0 {
            diag.zero_bid += 1;
        } else if q.volume == 0 {
            diag.zero_volume += 1;
        } else if q.open_interest == 0 {
            diag.zero_open_interest += 1;
        } else if q.ask < q.bid {
            diag.crossed_market += 1;
        } else {
            survivors.push(q);
        }
    }

    // One quote per (strike, right); the last occurrence in input order wins.
    sort_quotes(&mut survivors);
    let mut deduped: Vec<OptionQuote> = Vec::with_capacity(survivors.len());
    // Stable sort preserved input order within equal keys, so scanning and
    // replacing keeps the last occurrence.
    for q in survivors {
        match deduped.last_mut() {
            Some(prev) if prev.strike == q.strike && prev.right == q.right => {
                *prev = q;
                diag.duplicate_quote += 1;
            }
            _ => deduped.push(q),
        }
    }

    // Static-arbitrage price bounds.
    let discount = (-meta.rate * meta.year_fraction()).exp();
    let mut bounded: Vec<OptionQuote> = Vec::with_capacity(deduped.len());
    for q in deduped {
        let violates = match q.right {
            OptionRight::Call => q.mid() > meta.spot,
            OptionRight::Put => q.mid() > q.strike * discount,
        };
        if violates {
            diag.bound_violation += 1;
        } else {
            bounded.push(q);
        }
    }

    // Monotonicity sweep per right: call mids non-increasing in strike, put
    // mids non-decreasing. A forward sweep keeps the first quote and then
    // each quote consistent with the last kept one, which makes the screen
    // idempotent.
    let mut kept: Vec<OptionQuote> = Vec::with_capacity(bounded.len());
    let mut last_call_mid: Option<f64> = None;
    let mut last_put_mid: Option<f64> = None;
    for q in bounded {
        let ok = match q.right {
            OptionRight::Call => last_call_mid.is_none_or(|m| q.mid() <= m),
            OptionRight::Put => last_put_mid.is_none_or(|m| q.mid() >= m),
        };
        if ok {
            match q.right {
                OptionRight::Call => last_call_mid = Some(q.mid()),
                OptionRight::Put => last_put_mid = Some(q.mid()),
            }
            kept.push(q);
        } else {
            diag.non_monotone += 1;
        }
    }

    let pre_itm = OptionChain::new(meta, kept);
    let forward = compute_forward(&pre_itm).map_err(|reason| ChainRejection {
        reason,
        diagnostics: diag,
    })?;

    // In-the-money removal relative to K0. Both rights survive at K0 itself.
    let meta = pre_itm.meta;
    let mut otm: Vec<OptionQuote> = Vec::with_capacity(pre_itm.quotes.len());
    for q in pre_itm.quotes {
        let itm = match q.right {
            OptionRight::Call => q.strike < forward.k0,
            OptionRight::Put => q.strike > forward.k0,
        };
        if itm {
            diag.in_the_money += 1;
        } else {
            otm.push(q);
        }
    }

    if otm.len() < cfg.min_quotes {
        return Err(ChainRejection {
            reason: ChainError::TooFewQuotes {
                survivors: otm.len(),
                required: cfg.min_quotes,
            },
            diagnostics: diag,
        });
    }
    diag.kept = otm.len();
    Ok(FilteredChain {
        chain: OptionChain::new(meta, otm),
        forward: forward.forward,
        k0: forward.k0,
        diagnostics: diag,
    })
}

/// Group raw quotes by (underlying, quote date) and then by expiry.
pub fn group_quotes(
    quotes: Vec<OptionQuote>,
) -> BTreeMap<(String, NaiveDate), BTreeMap<NaiveDate, Vec<OptionQuote>>> {
    let mut out: BTreeMap<(String, NaiveDate), BTreeMap<NaiveDate, Vec<OptionQuote>>> =
        BTreeMap::new();
    for q in quotes {
        out.entry((q.underlying_id.clone(), q.quote_date))
            .or_default()
            .entry(q.expiry_date)
            .or_default()
            .push(q);
    }
    out
}

/// Pick the expiry closest to the target maturity among those inside the
/// accepted window; ties prefer the longer expiry.
pub fn select_expiry(
    quote_date: NaiveDate,
    expiries: &BTreeMap<NaiveDate, Vec<OptionQuote>>,
    cfg: &FilterConfig,
) -> Option<NaiveDate> {
    let mut best: Option<(i64, i64, NaiveDate)> = None; // (|d - target|, -d, expiry)
    for expiry in expiries.keys() {
        let days = (*expiry - quote_date).num_days();
        if days < cfg.min_maturity_days || days > cfg.max_maturity_days {
            continue;
        }
        let key = ((days - cfg.target_maturity_days).abs(), -days);
        let better = match best {
            None => true,
            Some((gap, neg_days, _)) => key < (gap, neg_days),
        };
        if better {
            best = Some((key.0, key.1, *expiry));
        }
    }
    best.map(|(_, _, e)| e)
}

/// Risk-free rates keyed by date. Lookups require an exact date match.
#[derive(Debug, Clone, Default)]
pub struct RateCurve {
    pub rates: BTreeMap<NaiveDate, f64>,
}

impl RateCurve {
    pub fn at(&self, date: NaiveDate) -> Option<f64> {
        self.rates.get(&date).copied()
    }
}

/// One line of stocks.csv after parsing. Optional fields arrive empty in the
/// file when unknown.
#[derive(Debug, Clone)]
pub struct StockRow {
    pub stock_id: String,
    pub date: NaiveDate,
    pub excess_return: Option<f64>,
    pub price: Option<f64>,
    pub market_cap: Option<f64>,
    pub volume: Option<f64>,
}

/// Per-stock daily history split into aligned series.
#[derive(Debug, Clone, Default)]
pub struct StockHistory {
    pub returns: DatedSeries,
    pub prices: DatedSeries,
    pub market_caps: DatedSeries,
}

/// All stocks, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct StockPanel {
    pub stocks: BTreeMap<String, StockHistory>,
}

impl StockPanel {
    pub fn from_rows(rows: Vec<StockRow>) -> Self {
        let mut returns: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
        let mut prices: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
        let mut caps: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
        for row in rows {
            if let Some(r) = row.excess_return {
                returns
                    .entry(row.stock_id.clone())
                    .or_default()
                    .push((row.date, r));
            }
            if let Some(p) = row.price {
                prices
                    .entry(row.stock_id.clone())
                    .or_default()
                    .push((row.date, p));
            }
            if let Some(c) = row.market_cap {
                caps.entry(row.stock_id.clone())
                    .or_default()
                    .push((row.date, c));
            }
        }
        let mut stocks: BTreeMap<String, StockHistory> = BTreeMap::new();
        for (id, pairs) in returns {
            stocks.entry(id).or_default().returns = DatedSeries::from_pairs(pairs);
        }
        for (id, pairs) in prices {
            stocks.entry(id).or_default().prices = DatedSeries::from_pairs(pairs);
        }
        for (id, pairs) in caps {
            stocks.entry(id).or_default().market_caps = DatedSeries::from_pairs(pairs);
        }
        StockPanel { stocks }
    }

    /// Spot price of `id` on `date`, if recorded.
    pub fn spot(&self, id: &str, date: NaiveDate) -> Option<f64> {
        self.stocks.get(id).and_then(|h| h.prices.get(date))
    }

    /// Capitalization-weighted daily excess return over the whole panel.
    /// Each date weights same-date capitalizations; dates where no stock
    /// reports both a return and a positive capitalization are skipped.
    pub fn value_weighted_excess(&self) -> DatedSeries {
        let mut sums: BTreeMap<NaiveDate, (f64, f64)> = BTreeMap::new();
        for history in self.stocks.values() {
            for (date, ret) in history.returns.iter() {
                if let Some(cap) = history.market_caps.get(date) {
                    if cap > 0.0 {
                        let entry = sums.entry(date).or_insert((0.0, 0.0));
                        entry.0 += cap * ret;
                        entry.1 += cap;
                    }
                }
            }
        }
        DatedSeries::from_pairs(
            sums.into_iter()
                .filter(|(_, (_, cap))| *cap > 0.0)
                .map(|(date, (weighted, cap))| (date, weighted / cap)),
        )
    }
}

/// A row that failed to parse; the rest of the file still loads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub column: String,
    pub reason: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {} column {}: {}", self.line, self.column, self.reason)
    }
}

/// A parsed file plus per-row diagnostics.
#[derive(Debug)]
pub struct CsvLoad<T> {
    pub records: Vec<T>,
    pub row_errors: Vec<RowError>,
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: expected header '{expected}', found '{found}'")]
    Header {
        path: String,
        expected: String,
        found: String,
    },
}

pub(crate) struct RowCursor<'a> {
    record: &'a csv::StringRecord,
    header: &'a [&'a str],
    line: u64,
}

impl<'a> RowCursor<'a> {
    pub(crate) fn field(&self, col: &str) -> Result<&'a str, RowError> {
        let idx = self.header.iter().position(|h| *h == col).expect("known column");
        self.record.get(idx).ok_or_else(|| RowError {
            line: self.line,
            column: col.to_string(),
            reason: "missing field".to_string(),
        })
    }

    pub(crate) fn date(&self, col: &str) -> Result<NaiveDate, RowError> {
        let s = self.field(col)?;
        s.parse().map_err(|_| RowError {
            line: self.line,
            column: col.to_string(),
            reason: format!("invalid date '{s}'"),
        })
    }

    pub(crate) fn f64_required(&self, col: &str) -> Result<f64, RowError> {
        let s = self.field(col)?;
        let v: f64 = s.parse().map_err(|_| RowError {
            line: self.line,
            column: col.to_string(),
            reason: format!("invalid number '{s}'"),
        })?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(RowError {
                line: self.line,
                column: col.to_string(),
                reason: format!("non-finite number '{s}'"),
            })
        }
    }

    /// Empty or non-finite optional numerics load as missing.
    pub(crate) fn f64_optional(&self, col: &str) -> Result<Option<f64>, RowError> {
        let s = self.field(col)?;
        if s.is_empty() {
            return Ok(None);
        }
        let v: f64 = s.parse().map_err(|_| RowError {
            line: self.line,
            column: col.to_string(),
            reason: format!("invalid number '{s}'"),
        })?;
        Ok(v.is_finite().then_some(v))
    }

    pub(crate) fn u64_required(&self, col: &str) -> Result<u64, RowError> {
        let s = self.field(col)?;
        s.parse().map_err(|_| RowError {
            line: self.line,
            column: col.to_string(),
            reason: format!("invalid count '{s}'"),
        })
    }
}

fn open_reader(path: &Path, expected: &[&str]) -> Result<csv::Reader<std::fs::File>, CsvError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => CsvError::Io {
                path: path.display().to_string(),
                source,
            },
            other => CsvError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(format!("{other:?}")),
            },
        })?;
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| CsvError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if found != expected {
        return Err(CsvError::Header {
            path: path.display().to_string(),
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(reader)
}

pub(crate) fn load_rows<T>(
    path: &Path,
    header: &[&str],
    parse: impl Fn(&RowCursor) -> Result<T, RowError>,
) -> Result<CsvLoad<T>, CsvError> {
    let mut reader = open_reader(path, header)?;
    let mut records = Vec::new();
    let mut row_errors = Vec::new();
    for (i, result) in reader.records().enumerate() {
        // Header occupies line 1; data starts on line 2.
        let line = i as u64 + 2;
        match result {
            Err(e) => row_errors.push(RowError {
                line,
                column: "-".to_string(),
                reason: e.to_string(),
            }),
            Ok(record) => {
                if record.len() != header.len() {
                    row_errors.push(RowError {
                        line,
                        column: "-".to_string(),
                        reason: format!("expected {} fields, found {}", header.len(), record.len()),
                    });
                    continue;
                }
                let cursor = RowCursor {
                    record: &record,
                    header,
                    line,
                };
                match parse(&cursor) {
                    Ok(t) => records.push(t),
                    Err(e) => row_errors.push(e),
                }
            }
        }
    }
    Ok(CsvLoad {
        records,
        row_errors,
    })
}

/// Load options.csv. Bad rows are reported, not fatal; a missing file or a
/// wrong header is fatal.
pub fn load_option_csv(path: &Path) -> Result<CsvLoad<OptionQuote>, CsvError> {
    load_rows(path, &OPTION_CSV_HEADER, |row| {
        let strike = row.f64_required("strike")?;
        if strike <= 0.0 {
            return Err(RowError {
                line: row.line,
                column: "strike".to_string(),
                reason: format!("strike must be positive, got {strike}"),
            });
        }
        let right_str = row.field("right")?;
        let right = OptionRight::parse(right_str).ok_or_else(|| RowError {
            line: row.line,
            column: "right".to_string(),
            reason: format!("expected C or P, got '{right_str}'"),
        })?;
        let bid = row.f64_required("bid")?;
        let ask = row.f64_required("ask")?;
        if bid < 0.0 || ask < 0.0 {
            return Err(RowError {
                line: row.line,
                column: "bid".to_string(),
                reason: "negative quote".to_string(),
            });
        }
        Ok(OptionQuote {
            underlying_id: row.field("underlying_id")?.to_string(),
            quote_date: row.date("quote_date")?,
            expiry_date: row.date("expiry_date")?,
            strike,
            right,
            bid,
            ask,
            volume: row.u64_required("volume")?,
            open_interest: row.u64_required("open_interest")?,
            implied_vol: row.f64_optional("implied_vol")?,
            delta: row.f64_optional("delta")?,
        })
    })
}

/// Load stocks.csv (daily excess returns, prices, market caps).
pub fn load_stock_csv(path: &Path) -> Result<CsvLoad<StockRow>, CsvError> {
    load_rows(path, &STOCK_CSV_HEADER, |row| {
        Ok(StockRow {
            stock_id: row.field("stock_id")?.to_string(),
            date: row.date("date")?,
            excess_return: row.f64_optional("return")?,
            price: row.f64_optional("price")?,
            market_cap: row.f64_optional("market_cap")?,
            volume: row.f64_optional("volume")?,
        })
    })
}

/// Load rates.csv into an exact-date rate curve.
pub fn load_rate_csv(path: &Path) -> Result<CsvLoad<RateCurve>, CsvError> {
    let loaded = load_rows(path, &RATE_CSV_HEADER, |row| {
        Ok((row.date("date")?, row.f64_required("rate")?))
    })?;
    let mut curve = RateCurve::default();
    for (d, r) in loaded.records {
        curve.rates.insert(d, r);
    }
    Ok(CsvLoad {
        records: vec![curve],
        row_errors: loaded.row_errors,
    })
}

fn optional_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Write option quotes in the options.csv schema, in slice order.
pub fn write_option_csv(quotes: &[OptionQuote], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(OPTION_CSV_HEADER)?;
    for q in quotes {
        w.write_record(&[
            q.underlying_id.clone(),
            q.quote_date.to_string(),
            q.expiry_date.to_string(),
            format!("{}", q.strike),
            q.right.as_str().to_string(),
            format!("{}", q.bid),
            format!("{}", q.ask),
            format!("{}", q.volume),
            format!("{}", q.open_interest),
            optional_cell(q.implied_vol),
            optional_cell(q.delta),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write stock rows in the stocks.csv schema, in slice order. Optional
/// fields emit as empty cells.
pub fn write_stock_csv(rows: &[StockRow], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(STOCK_CSV_HEADER)?;
    for r in rows {
        w.write_record(&[
            r.stock_id.clone(),
            r.date.to_string(),
            optional_cell(r.excess_return),
            optional_cell(r.price),
            optional_cell(r.market_cap),
            optional_cell(r.volume),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write a rate curve in the rates.csv schema, sorted by date.
pub fn write_rate_csv(curve: &RateCurve, path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RATE_CSV_HEADER)?;
    for (d, r) in &curve.rates {
        w.write_record(&[d.to_string(), format!("{r}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Why a (firm, day) produced no filtered chain.
#[derive(Debug, Clone)]
pub enum ChainSkip {
    NoExpiryInWindow,
    NoSpot,
    NoRate,
    Rejected(ChainRejection),
}

impl fmt::Display for ChainSkip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainSkip::NoExpiryInWindow => write!(f, "no expiry inside maturity window"),
            ChainSkip::NoSpot => write!(f, "no spot price for quote date"),
            ChainSkip::NoRate => write!(f, "no risk-free rate for quote date"),
            ChainSkip::Rejected(r) => write!(f, "{r}"),
        }
    }
}

/// Outcome of assembling chains for a whole options file.
#[derive(Debug, Default)]
pub struct ChainBuildResult {
    pub chains: Vec<FilteredChain>,
    pub skips: Vec<(String, NaiveDate, ChainSkip)>,
}

/// Assemble one filtered chain per (firm, day): group quotes, select the
/// expiry closest to the target maturity, attach spot and rate, and filter.
pub fn build_chains(
    quotes: Vec<OptionQuote>,
    spots: &StockPanel,
    rates: &RateCurve,
    cfg: &FilterConfig,
) -> ChainBuildResult {
    use rayon::prelude::*;

    let grouped: Vec<_> = group_quotes(quotes).into_iter().collect();
    let outcomes: Vec<_> = grouped
        .into_par_iter()
        .map(|((id, day), expiries)| {
            let Some(expiry) = select_expiry(day, &expiries, cfg) else {
                return ((id, day), Err(ChainSkip::NoExpiryInWindow));
            };
            let Some(spot) = spots.spot(&id, day) else {
                return ((id, day), Err(ChainSkip::NoSpot));
            };
            let Some(rate) = rates.at(day) else {
                return ((id, day), Err(ChainSkip::NoRate));
            };
            let meta = ChainMeta {
                underlying_id: id.clone(),
                quote_date: day,
                expiry_date: expiry,
                spot,
                rate,
            };
            let chain_quotes = expiries.into_iter().find(|(e, _)| *e == expiry).unwrap().1;
            match filter_chain(chain_quotes, meta, cfg) {
                Ok(fc) => ((id, day), Ok(fc)),
                Err(rej) => ((id, day), Err(ChainSkip::Rejected(rej))),
            }
        })
        .collect();

    let mut result = ChainBuildResult::default();
    for ((id, day), outcome) in outcomes {
        match outcome {
            Ok(fc) => result.chains.push(fc),
            Err(skip) => result.skips.push((id, day, skip)),
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn quote(strike: f64, right: OptionRight, bid: f64, ask: f64) -> OptionQuote {
        OptionQuote {
            underlying_id: "AAA".to_string(),
            quote_date: d("2020-06-01"),
            expiry_date: d("2020-07-01"),
            strike,
            right,
            bid,
            ask,
            volume: 10,
            open_interest: 10,
            implied_vol: Some(0.2),
            delta: Some(0.5),
        }
    }

    fn meta(spot: f64, rate: f64) -> ChainMeta {
        ChainMeta {
            underlying_id: "AAA".to_string(),
            quote_date: d("2020-06-01"),
            expiry_date: d("2020-07-01"),
            spot,
            rate,
        }
    }

    #[test]
    fn forward_from_parity() {
        // C - P = 0.5 at the parity strike 100, r = 2%, T = 30/365.
        let chain = OptionChain::new(
            meta(100.0, 0.02),
            vec![
                quote(95.0, OptionRight::Put, 1.0, 1.2),
                quote(100.0, OptionRight::Call, 2.4, 2.6),
                quote(100.0, OptionRight::Put, 1.9, 2.1),
                quote(105.0, OptionRight::Call, 0.9, 1.1),
            ],
        );
        let f = compute_forward(&chain).unwrap();
        let t = 30.0 / 365.0;
        assert_relative_eq!(f.forward, (0.02f64 * t).exp() * 0.5 + 100.0, epsilon = 1e-12);
        assert_eq!(f.parity_strike, 100.0);
        assert_eq!(f.k0, 100.0);
    }

    #[test]
    fn forward_tie_prefers_lower_strike() {
        // |C - P| identical at strikes 95 and 105.
        let chain = OptionChain::new(
            meta(100.0, 0.0),
            vec![
                quote(95.0, OptionRight::Call, 2.0, 2.0),
                quote(95.0, OptionRight::Put, 1.0, 1.0),
                quote(105.0, OptionRight::Call, 1.0, 1.0),
                quote(105.0, OptionRight::Put, 2.0, 2.0),
            ],
        );
        let f = compute_forward(&chain).unwrap();
        assert_eq!(f.parity_strike, 95.0);
        assert_relative_eq!(f.forward, 96.0, epsilon = 1e-12);
        assert_eq!(f.k0, 95.0);
    }

    #[test]
    fn forward_without_straddle_errors() {
        let chain = OptionChain::new(
            meta(100.0, 0.0),
            vec![
                quote(95.0, OptionRight::Put, 1.0, 1.2),
                quote(105.0, OptionRight::Call, 1.0, 1.2),
            ],
        );
        assert!(matches!(compute_forward(&chain), Err(ChainError::NoStraddle)));
    }

    #[test]
    fn forward_ignores_duplicate_quotes_at_other_strikes() {
        let base = vec![
            quote(95.0, OptionRight::Put, 1.0, 1.2),
            quote(100.0, OptionRight::Call, 2.4, 2.6),
            quote(100.0, OptionRight::Put, 1.9, 2.1),
            quote(105.0, OptionRight::Call, 0.9, 1.1),
        ];
        let chain = OptionChain::new(meta(100.0, 0.02), base.clone());
        let f1 = compute_forward(&chain).unwrap();
        let mut dup = base;
        dup.push(quote(95.0, OptionRight::Put, 1.0, 1.2));
        dup.push(quote(105.0, OptionRight::Call, 0.9, 1.1));
        let chain2 = OptionChain::new(meta(100.0, 0.02), dup);
        let f2 = compute_forward(&chain2).unwrap();
        assert_eq!(f1.forward, f2.forward);
        assert_eq!(f1.k0, f2.k0);
    }

    fn full_chain() -> Vec<OptionQuote> {
        let mut quotes = Vec::new();
        // Puts below 100, straddle at 100, calls above; all clean.
        for (k, bid, ask) in [(90.0, 0.5, 0.7), (95.0, 1.0, 1.2)] {
            quotes.push(quote(k, OptionRight::Put, bid, ask));
        }
        quotes.push(quote(100.0, OptionRight::Put, 2.0, 2.2));
        quotes.push(quote(100.0, OptionRight::Call, 2.4, 2.6));
        for (k, bid, ask) in [(105.0, 1.0, 1.2), (110.0, 0.4, 0.6)] {
            quotes.push(quote(k, OptionRight::Call, bid, ask));
        }
        quotes
    }

    #[test]
    fn filter_keeps_clean_chain_and_removes_itm() {
        let mut quotes = full_chain();
        // In-the-money additions that must be removed (call below K0 needs a
        // mid consistent with monotonicity to reach the ITM screen).
        quotes.push(quote(95.0, OptionRight::Call, 5.0, 5.2));
        quotes.push(quote(105.0, OptionRight::Put, 5.5, 5.7));
        let fc = filter_chain(quotes, meta(100.0, 0.0), &FilterConfig::default()).unwrap();
        assert_eq!(fc.k0, 100.0);
        assert_eq!(fc.diagnostics.in_the_money, 2);
        assert_eq!(fc.chain.quotes.len(), 6);
        // Both rights survive at K0.
        let at_k0: Vec<_> = fc.chain.quotes.iter().filter(|q| q.strike == 100.0).collect();
        assert_eq!(at_k0.len(), 2);
    }

    #[test]
    fn filter_counts_quote_level_screens() {
        let mut quotes = full_chain();
        let mut bad = quote(98.0, OptionRight::Put, 1.5, 1.7);
        bad.delta = None;
        quotes.push(bad);
        let mut bad = quote(98.5, OptionRight::Put, 1.5, 1.7);
        bad.implied_vol = None;
        quotes.push(bad);
        let mut bad = quote(99.0, OptionRight::Put, 0.0, 0.2);
        bad.bid = 0.0;
        quotes.push(bad);
        let mut bad = quote(99.2, OptionRight::Put, 1.6, 1.8);
        bad.volume = 0;
        quotes.push(bad);
        let mut bad = quote(99.4, OptionRight::Put, 1.6, 1.8);
        bad.open_interest = 0;
        quotes.push(bad);
        quotes.push(quote(99.6, OptionRight::Put, 1.8, 1.6)); // crossed
        let fc = filter_chain(quotes, meta(100.0, 0.0), &FilterConfig::default()).unwrap();
        let d = &fc.diagnostics;
        assert_eq!(
            (
                d.missing_delta,
                d.missing_implied_vol,
                d.zero_bid,
                d.zero_volume,
                d.zero_open_interest,
                d.crossed_market
            ),
            (1, 1, 1, 1, 1, 1)
        );
    }

    #[test]
    fn filter_removes_non_monotone_and_bound_violations() {
        let mut quotes = full_chain();
        // Put mid decreasing in strike between 95 and 96 violates
        // monotonicity; 96 is the later quote so it is dropped.
        quotes.push(quote(96.0, OptionRight::Put, 0.6, 0.8));
        // Call mid above spot violates the price bound.
        quotes.push(quote(101.0, OptionRight::Call, 101.0, 102.0));
        let fc = filter_chain(quotes, meta(100.0, 0.0), &FilterConfig::default()).unwrap();
        assert_eq!(fc.diagnostics.non_monotone, 1);
        assert_eq!(fc.diagnostics.bound_violation, 1);
    }

    #[test]
    fn filter_is_idempotent() {
        let mut quotes = full_chain();
        quotes.push(quote(96.0, OptionRight::Put, 0.6, 0.8));
        quotes.push(quote(95.0, OptionRight::Call, 5.0, 5.2));
        let cfg = FilterConfig::default();
        let once = filter_chain(quotes, meta(100.0, 0.0), &cfg).unwrap();
        let again = filter_chain(once.chain.quotes.clone(), once.chain.meta.clone(), &cfg).unwrap();
        assert_eq!(once.chain.quotes.len(), again.chain.quotes.len());
        assert_eq!(once.forward, again.forward);
        assert_eq!(once.k0, again.k0);
        for (a, b) in once.chain.quotes.iter().zip(&again.chain.quotes) {
            assert_eq!(a.strike, b.strike);
            assert_eq!(a.right, b.right);
            assert_eq!(a.bid, b.bid);
        }
    }

    #[test]
    fn maturity_window_rejects() {
        let quotes = full_chain();
        let mut m = meta(100.0, 0.0);
        m.expiry_date = d("2020-06-10"); // 9 days
        let err = filter_chain(quotes, m, &FilterConfig::default()).unwrap_err();
        assert!(matches!(
            err.reason,
            ChainError::MaturityOutOfRange { days: 9, .. }
        ));
    }

    #[test]
    fn too_few_quotes_rejects() {
        let quotes = vec![
            quote(100.0, OptionRight::Call, 2.4, 2.6),
            quote(100.0, OptionRight::Put, 2.0, 2.2),
            quote(105.0, OptionRight::Call, 1.0, 1.2),
        ];
        let err = filter_chain(quotes, meta(100.0, 0.0), &FilterConfig::default()).unwrap_err();
        assert!(matches!(
            err.reason,
            ChainError::TooFewQuotes {
                survivors: 3,
                required: 4
            }
        ));
    }

    #[test]
    fn expiry_selection_prefers_target_then_longer() {
        let q = |expiry: &str| {
            let mut q = quote(100.0, OptionRight::Call, 1.0, 1.2);
            q.expiry_date = d(expiry);
            q
        };
        let mut expiries: BTreeMap<NaiveDate, Vec<OptionQuote>> = BTreeMap::new();
        for e in ["2020-06-25", "2020-06-29", "2020-07-03", "2020-08-15"] {
            expiries.insert(d(e), vec![q(e)]);
        }
        let cfg = FilterConfig::default();
        // 2020-06-29 is 28 days out, 2020-07-03 is 32: both 2 days from the
        // 30-day target, so the longer one wins. 2020-08-15 is out of window.
        let chosen = select_expiry(d("2020-06-01"), &expiries, &cfg).unwrap();
        assert_eq!(chosen, d("2020-07-03"));
    }

    #[test]
    fn option_csv_roundtrip_with_crlf_and_bad_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("options.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        write!(
            f,
            "underlying_id,quote_date,expiry_date,strike,right,bid,ask,volume,open_interest,implied_vol,delta\r\n\
             AAA,2020-06-01,2020-07-01,100,C,2.4,2.6,10,12,0.2,0.5\r\n\
             AAA,2020-06-01,2020-07-01,100,X,2.0,2.2,10,12,0.2,-0.5\r\n\
             AAA,2020-06-01,2020-07-01,95,P,1.0,1.2,10,12,,\r\n"
        )
        .unwrap();
        let loaded = load_option_csv(&path).unwrap();
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.row_errors.len(), 1);
        assert_eq!(loaded.row_errors[0].line, 3);
        assert_eq!(loaded.row_errors[0].column, "right");
        assert!(loaded.records[1].implied_vol.is_none());
        assert!(loaded.records[1].delta.is_none());
    }

    #[test]
    fn header_mismatch_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("options.csv");
        std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        assert!(matches!(
            load_option_csv(&path),
            Err(CsvError::Header { .. })
        ));
    }
}
