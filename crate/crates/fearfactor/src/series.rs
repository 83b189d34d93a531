//! Dated series containers and calendar helpers.
//!
//! Estimation modules exchange daily and monthly observations keyed by
//! `chrono::NaiveDate`. A [`DatedSeries`] is a dense, strictly-increasing
//! date index with one value per date; monthly quantities are keyed by
//! [`YearMonth`] and dated on output by the calendar end of month.

use chrono::{Datelike, Duration, NaiveDate};
use std::collections::BTreeMap;

/// Calendar month key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn of(date: NaiveDate) -> Self {
        YearMonth {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn next(self) -> Self {
        if self.month == 12 {
            YearMonth {
                year: self.year + 1,
                month: 1,
            }
        } else {
            YearMonth {
                year: self.year,
                month: self.month + 1,
            }
        }
    }

    /// Last calendar day of the month; used to date monthly records.
    pub fn end_date(self) -> NaiveDate {
        let first_next = NaiveDate::from_ymd_opt(self.next().year, self.next().month, 1).unwrap();
        first_next - Duration::days(1)
    }
}

/// A series of values on a strictly increasing date index.
#[derive(Debug, Clone, Default)]
pub struct DatedSeries {
    dates: Vec<NaiveDate>,
    values: Vec<f64>,
}

impl DatedSeries {
    /// Build from (date, value) pairs. Input is sorted; duplicate dates keep
    /// the last value in input order.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (NaiveDate, f64)>) -> Self {
        let mut map = BTreeMap::new();
        for (d, v) in pairs {
            map.insert(d, v);
        }
        let (dates, values) = map.into_iter().unzip();
        DatedSeries { dates, values }
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, date: NaiveDate) -> Option<f64> {
        self.dates
            .binary_search(&date)
            .ok()
            .map(|i| self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (NaiveDate, f64)> + '_ {
        self.dates.iter().copied().zip(self.values.iter().copied())
    }

    /// Values at the joint dates of `self` and `other`, in date order.
    pub fn join(&self, other: &DatedSeries) -> Vec<(NaiveDate, f64, f64)> {
        let mut out = Vec::new();
        let mut i = 0;
        let mut j = 0;
        while i < self.len() && j < other.len() {
            match self.dates[i].cmp(&other.dates[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    out.push((self.dates[i], self.values[i], other.values[j]));
                    i += 1;
                    j += 1;
                }
            }
        }
        out
    }

    /// Compound the values within each month: `prod(1 + v) - 1`.
    /// Months are keyed by calendar month of the dates present.
    pub fn monthly_compound(&self) -> BTreeMap<YearMonth, f64> {
        let mut out: BTreeMap<YearMonth, f64> = BTreeMap::new();
        for (d, v) in self.iter() {
            let g = out.entry(YearMonth::of(d)).or_insert(1.0);
            *g *= 1.0 + v;
        }
        out.into_iter().map(|(k, g)| (k, g - 1.0)).collect()
    }

    /// Average of the values within each month.
    pub fn monthly_mean(&self) -> BTreeMap<YearMonth, f64> {
        let mut sums: BTreeMap<YearMonth, (f64, usize)> = BTreeMap::new();
        for (d, v) in self.iter() {
            let e = sums.entry(YearMonth::of(d)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect()
    }
}

/// The last date of each calendar month present in `dates`.
/// `dates` must be sorted ascending.
pub fn month_end_dates(dates: &[NaiveDate]) -> Vec<NaiveDate> {
    let mut out: Vec<NaiveDate> = Vec::new();
    for (i, d) in dates.iter().enumerate() {
        let is_last = match dates.get(i + 1) {
            Some(next) => YearMonth::of(*next) != YearMonth::of(*d),
            None => true,
        };
        if is_last {
            out.push(*d);
        }
    }
    out
}
