//! Monthly aggregation, zero-order-hold imputation, min-max scaling,
//! chronological splitting and sliding windows.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

use crate::catalog::{CatalogEvent, RegionId};
use crate::error::{Error, Result};

/// Calendar month.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    /// 1..=12
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Domain(format!("month {month} outside 1..=12")));
        }
        Ok(YearMonth { year, month })
    }

    pub fn of(t: &DateTime<Utc>) -> Self {
        YearMonth {
            year: t.year(),
            month: t.month(),
        }
    }

    fn ordinal(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    fn from_ordinal(o: i64) -> Self {
        YearMonth {
            year: o.div_euclid(12) as i32,
            month: (o.rem_euclid(12) + 1) as u32,
        }
    }

    pub fn add_months(self, n: i64) -> Self {
        Self::from_ordinal(self.ordinal() + n)
    }

    /// Months from `self` to `other`, counting both ends.
    pub fn months_through(self, other: YearMonth) -> usize {
        (other.ordinal() - self.ordinal() + 1).max(0) as usize
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Domain(format!("expected YYYY-MM, got `{s}`"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        YearMonth::new(y.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?)
    }
}

impl Serialize for YearMonth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive month span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonthRange {
    pub start: YearMonth,
    pub end: YearMonth,
}

impl MonthRange {
    pub fn new(start: YearMonth, end: YearMonth) -> Result<Self> {
        if end < start {
            return Err(Error::Domain(format!("month range {start}..{end} is reversed")));
        }
        Ok(MonthRange { start, end })
    }

    /// January 1966 through May 2021.
    pub fn study_period() -> Self {
        MonthRange {
            start: YearMonth { year: 1966, month: 1 },
            end: YearMonth { year: 2021, month: 5 },
        }
    }

    pub fn len(&self) -> usize {
        self.start.months_through(self.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, m: YearMonth) -> Option<usize> {
        (self.start <= m && m <= self.end).then(|| self.start.months_through(m) - 1)
    }

    pub fn months(&self) -> impl Iterator<Item = YearMonth> + '_ {
        (0..self.len() as i64).map(|i| self.start.add_months(i))
    }
}

/// Which monthly quantity is forecast.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    /// Number of events per month.
    Count,
    /// Largest magnitude per month (0 for quiet months).
    #[serde(rename = "maxmag")]
    MaxMagnitude,
}

impl Case {
    pub fn as_str(self) -> &'static str {
        match self {
            Case::Count => "count",
            Case::MaxMagnitude => "maxmag",
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Case {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(Case::Count),
            "maxmag" => Ok(Case::MaxMagnitude),
            other => Err(Error::Config(format!("unknown case `{other}` (expected count|maxmag)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthlySeries {
    pub region: RegionId,
    pub case: Case,
    pub start_month: YearMonth,
    pub values: Vec<f64>,
}

impl MonthlySeries {
    pub fn months(&self) -> impl Iterator<Item = YearMonth> + '_ {
        (0..self.values.len() as i64).map(|i| self.start_month.add_months(i))
    }
}

/// One value per calendar month of `range`. Events outside the range are
/// ignored.
pub fn aggregate_monthly(events: &[CatalogEvent], region: RegionId, case: Case, range: &MonthRange) -> MonthlySeries {
    let mut values = vec![0.0; range.len()];
    for e in events {
        let Some(i) = range.index_of(YearMonth::of(&e.time)) else { continue };
        match case {
            Case::Count => values[i] += 1.0,
            Case::MaxMagnitude => values[i] = f64::max(values[i], e.magnitude),
        }
    }
    MonthlySeries {
        region,
        case,
        start_month: range.start,
        values,
    }
}

/// Replaces each zero with the most recent preceding non-zero value.
/// Leading zeros stay zero.
pub fn zoh_impute(values: &[f64]) -> Vec<f64> {
    let mut last = None;
    values
        .iter()
        .map(|&v| {
            if v != 0.0 {
                last = Some(v);
                v
            } else {
                last.unwrap_or(0.0)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: f64,
    pub max: f64,
}

impl ScalerParams {
    pub fn apply(&self, x: f64) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            (x - self.min) / span
        } else {
            0.0
        }
    }

    pub fn invert(&self, y: f64) -> f64 {
        self.min + y * (self.max - self.min)
    }
}

pub fn fit_scaler(train: &[f64]) -> Result<ScalerParams> {
    if train.len() < 2 {
        return Err(Error::Domain(format!(
            "scaler needs at least 2 values, got {}",
            train.len()
        )));
    }
    let min = train.iter().copied().fold(f64::INFINITY, f64::min);
    let max = train.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::Domain("scaler input contains non-finite values".into()));
    }
    Ok(ScalerParams { min, max })
}

pub fn apply_scaler(values: &[f64], p: &ScalerParams) -> Vec<f64> {
    values.iter().map(|&x| p.apply(x)).collect()
}

pub fn invert_scaler(values: &[f64], p: &ScalerParams) -> Vec<f64> {
    values.iter().map(|&y| p.invert(y)).collect()
}

/// Number of leading months assigned to training.
pub fn train_len(total: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    Ok((ratio * total as f64).floor() as usize)
}

/// Chronological split: the first `⌊ratio·T⌋` values train, the rest test.
/// Each side must hold at least `window + 1` values.
pub fn split_train_test(values: &[f64], ratio: f64, window: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = train_len(values.len(), ratio)?;
    let (train, test) = values.split_at(n);
    if train.len() <= window || test.len() <= window {
        return Err(Error::Config(format!(
            "split {ratio} of {} months leaves {}/{} train/test months; window {window} needs at least {} on each side",
            values.len(),
            train.len(),
            test.len(),
            window + 1
        )));
    }
    Ok((train.to_vec(), test.to_vec()))
}

/// Stride-1 sliding windows; each target is the value right after its window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub window: usize,
    /// Row-major `(n, window)`.
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.window..(i + 1) * self.window]
    }

    /// Gathers the given samples into flat `(inputs, targets)` buffers.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(indices.len() * self.window);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.input(i));
            y.push(self.targets[i]);
        }
        (x, y)
    }
}

pub fn make_windows(values: &[f64], window: usize) -> Result<WindowedDataset> {
    if window == 0 || values.len() <= window {
        return Err(Error::Domain(format!(
            "series of length {} cannot form windows of {window}",
            values.len()
        )));
    }
    let n = values.len() - window;
    let mut inputs = Vec::with_capacity(n * window);
    for i in 0..n {
        inputs.extend_from_slice(&values[i..i + window]);
    }
    Ok(WindowedDataset {
        window,
        inputs,
        targets: values[window..].to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One month of a prepared series, as persisted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedRow {
    pub month: YearMonth,
    pub raw: f64,
    pub imputed: f64,
    pub scaled: f64,
    pub split: Split,
}

/// Sidecar metadata for a prepared series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedMeta {
    pub region: RegionId,
    pub case: Case,
    pub start_month: YearMonth,
    pub months: usize,
    pub train_months: usize,
    pub window: usize,
    pub split_ratio: f64,
    pub scaler: ScalerParams,
}

/// A region/case series ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub meta: PreparedMeta,
    pub rows: Vec<PreparedRow>,
    pub train: WindowedDataset,
    pub test: WindowedDataset,
}

impl PreparedDataset {
    /// Month of each test target, in sample order.
    pub fn test_target_months(&self) -> Vec<YearMonth> {
        let first = self.meta.train_months + self.meta.window;
        self.rows[first..].iter().map(|r| r.month).collect()
    }
}

/// Split → impute the training part → fit the scaler on it → scale both
/// parts with those parameters → window each part separately.
///
/// Test months are never imputed.
pub fn prepare(series: &MonthlySeries, ratio: f64, window: usize) -> Result<PreparedDataset> {
    let (train_raw, test_raw) = split_train_test(&series.values, ratio, window)?;
    let train_imputed = zoh_impute(&train_raw);
    let scaler = fit_scaler(&train_imputed)?;
    let train_scaled = apply_scaler(&train_imputed, &scaler);
    let test_scaled = apply_scaler(&test_raw, &scaler);

    let mut rows = Vec::with_capacity(series.values.len());
    let months: Vec<YearMonth> = series.months().collect();
    for (i, (&raw, &imputed)) in train_raw.iter().zip(&train_imputed).enumerate() {
        rows.push(PreparedRow {
            month: months[i],
            raw,
            imputed,
            scaled: train_scaled[i],
            split: Split::Train,
        });
    }
    for (j, &raw) in test_raw.iter().enumerate() {
        rows.push(PreparedRow {
            month: months[train_raw.len() + j],
            raw,
            imputed: raw,
            scaled: test_scaled[j],
            split: Split::Test,
        });
    }
    Ok(PreparedDataset {
        meta: PreparedMeta {
            region: series.region,
            case: series.case,
            start_month: series.start_month,
            months: series.values.len(),
            train_months: train_raw.len(),
            window,
            split_ratio: ratio,
            scaler,
        },
        train: make_windows(&train_scaled, window)?,
        test: make_windows(&test_scaled, window)?,
        rows,
    })
}

impl PreparedDataset {
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<prepared csv>", e))?;
        Ok(())
    }

    /// Rebuilds a dataset from its persisted CSV rows and JSON sidecar.
    pub fn from_parts<R: Read>(csv_source: R, meta: PreparedMeta) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(csv_source);
        let rows = reader
            .deserialize::<PreparedRow>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if rows.len() != meta.months {
            return Err(Error::Config(format!(
                "prepared series holds {} rows, sidecar declares {}",
                rows.len(),
                meta.months
            )));
        }
        let n_train = rows.iter().take_while(|r| r.split == Split::Train).count();
        if n_train != meta.train_months || rows[n_train..].iter().any(|r| r.split != Split::Test) {
            return Err(Error::Config("prepared series split column is inconsistent with its sidecar".into()));
        }
        let scaled: Vec<f64> = rows.iter().map(|r| r.scaled).collect();
        let (train, test) = scaled.split_at(n_train);
        Ok(PreparedDataset {
            train: make_windows(train, meta.window)?,
            test: make_windows(test, meta.window)?,
            meta,
            rows,
        })
    }
}
