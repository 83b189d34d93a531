//! Model-free implied variance per firm-day, decomposed into an upside
//! ("good") and a downside ("bad") leg.
//!
//! For a filtered chain with forward `F`, reference strike `K0`, maturity
//! year-fraction `T`, and rate `r`, the discretized total variance is
//!
//! ```text
//! total = (2/T) * sum_i (dK_i / K_i^2) * e^{rT} * Q(K_i)
//!         - (1/T) * (F/K0 - 1)^2
//! ```
//!
//! where `Q(K)` is the out-of-the-money mid quote at strike `K` (the average
//! of the call and put mids at `K0` itself), `dK_i` is the half-distance
//! between neighbouring strikes (one-sided at the grid edges), and the sum
//! runs over the strikes carrying a usable quote.
//!
//! The decomposition assigns strikes above `K0` to the good leg and strikes
//! below to the bad leg; the `K0` term and the correction term are split
//! half-and-half, so `good + bad` reproduces `total` exactly by
//! construction.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

use crate::linalg;
use crate::market_data::{
    CsvError, CsvLoad, FilteredChain, OptionChain, OptionRight,
};

pub const VARIANCE_CSV_HEADER: [&str; 9] = [
    "firm_id", "date", "total", "good", "bad", "n_calls", "n_puts", "forward", "k0",
];

/// Which leg of the decomposition to read from a panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Total,
    Good,
    Bad,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Total, Measure::Good, Measure::Bad];

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Total => "total",
            Measure::Good => "good",
            Measure::Bad => "bad",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ObservationFlags {
    /// All usable strikes sit on one side of `K0`.
    pub one_sided: bool,
    /// The discretization produced a negative total (kept, but excluded from
    /// factor extraction by default).
    pub negative_total: bool,
}

#[derive(Debug, Clone)]
pub struct VarianceObservation {
    pub firm_id: String,
    pub date: NaiveDate,
    pub total: f64,
    pub good: f64,
    pub bad: f64,
    pub n_calls: u32,
    pub n_puts: u32,
    pub forward: f64,
    pub k0: f64,
    pub flags: ObservationFlags,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VarianceError {
    #[error("need at least 2 strikes with usable quotes, got {got}")]
    TooFewStrikes { got: usize },
    #[error("maturity must be positive")]
    NonPositiveMaturity,
}

/// Compute the variance decomposition for a chain given its forward and
/// reference strike (usually from [`crate::market_data::filter_chain`]).
pub fn compute_variance(
    chain: &OptionChain,
    forward: f64,
    k0: f64,
) -> Result<VarianceObservation, VarianceError> {
    let t = chain.meta.year_fraction();
    if t <= 0.0 {
        return Err(VarianceError::NonPositiveMaturity);
    }

    // Per-strike usable quote: puts below K0, calls above, the average of the
    // two mids at K0. Strikes without a usable quote drop out before strike
    // spacings are formed.
    let mut per_strike: Vec<(f64, Option<f64>, Option<f64>)> = Vec::new();
    for q in &chain.quotes {
        match per_strike.last_mut() {
            Some(entry) if entry.0 == q.strike => match q.right {
                OptionRight::Call => entry.1 = Some(q.mid()),
                OptionRight::Put => entry.2 = Some(q.mid()),
            },
            _ => {
                let (c, p) = match q.right {
                    OptionRight::Call => (Some(q.mid()), None),
                    OptionRight::Put => (None, Some(q.mid())),
                };
                per_strike.push((q.strike, c, p));
            }
        }
    }

    #[derive(PartialEq)]
    enum Side {
        Below,
        At,
        Above,
    }
    let mut usable: Vec<(f64, f64, Side)> = Vec::new();
    let mut n_calls = 0u32;
    let mut n_puts = 0u32;
    for (k, call, put) in per_strike {
        if k < k0 {
            if let Some(p) = put {
                usable.push((k, p, Side::Below));
                n_puts += 1;
            }
        } else if k > k0 {
            if let Some(c) = call {
                usable.push((k, c, Side::Above));
                n_calls += 1;
            }
        } else {
            let q = match (call, put) {
                (Some(c), Some(p)) => {
                    n_calls += 1;
                    n_puts += 1;
                    Some(0.5 * (c + p))
                }
                (Some(c), None) => {
                    n_calls += 1;
                    Some(c)
                }
                (None, Some(p)) => {
                    n_puts += 1;
                    Some(p)
                }
                (None, None) => None,
            };
            if let Some(q) = q {
                usable.push((k, q, Side::At));
            }
        }
    }

    if usable.len() < 2 {
        return Err(VarianceError::TooFewStrikes { got: usable.len() });
    }

    let growth = (chain.meta.rate * t).exp();
    let scale = 2.0 / t;
    let n = usable.len();
    let term = |i: usize| -> f64 {
        let dk = if i == 0 {
            usable[1].0 - usable[0].0
        } else if i == n - 1 {
            usable[n - 1].0 - usable[n - 2].0
        } else {
            0.5 * (usable[i + 1].0 - usable[i - 1].0)
        };
        let k = usable[i].0;
        scale * dk / (k * k) * growth * usable[i].1
    };

    let correction = (forward / k0 - 1.0).powi(2) / t;
    let mut good = -0.5 * correction;
    let mut bad = -0.5 * correction;
    let mut seen_below = false;
    let mut seen_above = false;
    for i in 0..n {
        let v = term(i);
        match usable[i].2 {
            Side::Below => {
                bad += v;
                seen_below = true;
            }
            Side::Above => {
                good += v;
                seen_above = true;
            }
            Side::At => {
                good += 0.5 * v;
                bad += 0.5 * v;
            }
        }
    }
    let total = good + bad;

    Ok(VarianceObservation {
        firm_id: chain.meta.underlying_id.clone(),
        date: chain.meta.quote_date,
        total,
        good,
        bad,
        n_calls,
        n_puts,
        forward,
        k0,
        flags: ObservationFlags {
            one_sided: !(seen_below && seen_above),
            negative_total: total < 0.0,
        },
    })
}

/// Convenience wrapper taking the output of chain filtering.
pub fn compute_variance_filtered(fc: &FilteredChain) -> Result<VarianceObservation, VarianceError> {
    compute_variance(&fc.chain, fc.forward, fc.k0)
}

/// One panel cell; firm and date are implied by position.
#[derive(Debug, Clone, Copy)]
pub struct PanelCell {
    pub total: f64,
    pub good: f64,
    pub bad: f64,
    pub n_calls: u32,
    pub n_puts: u32,
    pub forward: f64,
    pub k0: f64,
    pub flags: ObservationFlags,
}

/// Firm-by-date panel of variance observations. Firms and dates are sorted;
/// duplicate (firm, date) observations overwrite (last wins) and are counted.
#[derive(Debug, Clone)]
pub struct VariancePanel {
    pub firms: Vec<String>,
    pub dates: Vec<NaiveDate>,
    cells: Vec<Option<PanelCell>>,
    pub duplicates_overwritten: usize,
}

impl VariancePanel {
    pub fn from_observations(observations: Vec<VarianceObservation>) -> Self {
        let mut firm_set: Vec<&str> = observations.iter().map(|o| o.firm_id.as_str()).collect();
        firm_set.sort_unstable();
        firm_set.dedup();
        let firms: Vec<String> = firm_set.into_iter().map(String::from).collect();
        let mut date_set: Vec<NaiveDate> = observations.iter().map(|o| o.date).collect();
        date_set.sort_unstable();
        date_set.dedup();
        let dates = date_set;
        let firm_index: BTreeMap<&str, usize> = firms
            .iter()
            .enumerate()
            .map(|(i, f)| (f.as_str(), i))
            .collect();
        let date_index: BTreeMap<NaiveDate, usize> =
            dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        let mut cells: Vec<Option<PanelCell>> = vec![None; firms.len() * dates.len()];
        let mut duplicates = 0;
        for o in &observations {
            let fi = firm_index[o.firm_id.as_str()];
            let di = date_index[&o.date];
            let slot = &mut cells[di * firms.len() + fi];
            if slot.is_some() {
                duplicates += 1;
            }
            *slot = Some(PanelCell {
                total: o.total,
                good: o.good,
                bad: o.bad,
                n_calls: o.n_calls,
                n_puts: o.n_puts,
                forward: o.forward,
                k0: o.k0,
                flags: o.flags,
            });
        }
        VariancePanel {
            firms,
            dates,
            cells,
            duplicates_overwritten: duplicates,
        }
    }

    pub fn n_firms(&self) -> usize {
        self.firms.len()
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn cell(&self, date_idx: usize, firm_idx: usize) -> Option<&PanelCell> {
        self.cells[date_idx * self.firms.len() + firm_idx].as_ref()
    }

    /// Dates-by-firms matrix of one measure with NaN for missing cells.
    /// Cells with a negative total are masked out when
    /// `exclude_negative_total` is set (the default for factor extraction).
    pub fn measure_matrix(&self, measure: Measure, exclude_negative_total: bool) -> DMatrix<f64> {
        DMatrix::from_fn(self.dates.len(), self.firms.len(), |di, fi| {
            match self.cell(di, fi) {
                Some(c) if !(exclude_negative_total && c.flags.negative_total) => match measure {
                    Measure::Total => c.total,
                    Measure::Good => c.good,
                    Measure::Bad => c.bad,
                },
                _ => f64::NAN,
            }
        })
    }

    /// Iterate present observations in (date, firm) order.
    pub fn observations(&self) -> impl Iterator<Item = VarianceObservation> + '_ {
        (0..self.dates.len()).flat_map(move |di| {
            (0..self.firms.len()).filter_map(move |fi| {
                self.cell(di, fi).map(|c| VarianceObservation {
                    firm_id: self.firms[fi].clone(),
                    date: self.dates[di],
                    total: c.total,
                    good: c.good,
                    bad: c.bad,
                    n_calls: c.n_calls,
                    n_puts: c.n_puts,
                    forward: c.forward,
                    k0: c.k0,
                    flags: c.flags,
                })
            })
        })
    }
}

/// Cross-sectional summary of a panel measure: time-series averages of the
/// daily cross-sectional mean and standard deviation, plus the average
/// pairwise covariance across firms (pairwise-complete).
#[derive(Debug, Clone, Copy)]
pub struct MeasureSummary {
    pub mean: f64,
    pub std: f64,
    pub avg_pairwise_cov: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PanelSummary {
    pub total: MeasureSummary,
    pub good: MeasureSummary,
    pub bad: MeasureSummary,
    pub n_firms: usize,
    pub n_days: usize,
}

pub fn panel_summary(panel: &VariancePanel) -> PanelSummary {
    let summarize = |measure: Measure| -> MeasureSummary {
        let matrix = panel.measure_matrix(measure, false);
        let (t, n) = (matrix.nrows(), matrix.ncols());
        let mut day_means = Vec::new();
        let mut day_stds = Vec::new();
        for di in 0..t {
            let row: Vec<f64> = (0..n)
                .map(|fi| matrix[(di, fi)])
                .filter(|v| v.is_finite())
                .collect();
            if !row.is_empty() {
                day_means.push(linalg::mean(&row));
            }
            if row.len() >= 2 {
                day_stds.push(linalg::sample_std(&row));
            }
        }
        let mut pair_covs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let mut a = Vec::new();
                let mut b = Vec::new();
                for di in 0..t {
                    let x = matrix[(di, i)];
                    let y = matrix[(di, j)];
                    if x.is_finite() && y.is_finite() {
                        a.push(x);
                        b.push(y);
                    }
                }
                if a.len() >= 2 {
                    pair_covs.push(linalg::sample_covariance(&a, &b));
                }
            }
        }
        MeasureSummary {
            mean: linalg::mean(&day_means),
            std: linalg::mean(&day_stds),
            avg_pairwise_cov: linalg::mean(&pair_covs),
        }
    };
    PanelSummary {
        total: summarize(Measure::Total),
        good: summarize(Measure::Good),
        bad: summarize(Measure::Bad),
        n_firms: panel.n_firms(),
        n_days: panel.n_dates(),
    }
}

/// Write a panel to CSV in (date, firm) order with shortest round-trip
/// float formatting.
pub fn write_variance_csv(panel: &VariancePanel, path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(VARIANCE_CSV_HEADER)?;
    for o in panel.observations() {
        w.write_record(&[
            o.firm_id.clone(),
            o.date.to_string(),
            format!("{}", o.total),
            format!("{}", o.good),
            format!("{}", o.bad),
            format!("{}", o.n_calls),
            format!("{}", o.n_puts),
            format!("{}", o.forward),
            format!("{}", o.k0),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read a panel back from CSV. Flags are reconstructed from the stored
/// values (one-sidedness from the leg counts, negativity from the total).
pub fn read_variance_csv(path: &Path) -> Result<CsvLoad<VarianceObservation>, CsvError> {
    crate::market_data::load_rows(path, &VARIANCE_CSV_HEADER, |row| {
        let total = row.f64_required("total")?;
        let n_calls = row.u64_required("n_calls")? as u32;
        let n_puts = row.u64_required("n_puts")? as u32;
        Ok(VarianceObservation {
            firm_id: row.field("firm_id")?.to_string(),
            date: row.date("date")?,
            total,
            good: row.f64_required("good")?,
            bad: row.f64_required("bad")?,
            n_calls,
            n_puts,
            forward: row.f64_required("forward")?,
            k0: row.f64_required("k0")?,
            flags: ObservationFlags {
                one_sided: n_calls == 0 || n_puts == 0,
                negative_total: total < 0.0,
            },
        })
    })
}

// RowError is exposed through market_data; re-exported here for callers of
// the reader above.
pub use crate::market_data::RowError as VarianceRowError;
