//! Shared domain vocabulary: zones, plant kinds, hour-resolution timestamps,
//! hourly series, aligned sample matrices and forecast runs.
//!
//! Timestamps are UTC and period-ending: the value stamped `13:00` is the
//! average over 12:00–13:00. Calendar fields (month, day, hour) always refer
//! to the label itself.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of hourly lead times in one forecast run (15 days).
pub const HORIZON_HOURS: usize = 360;
pub const HOURS_PER_DAY: usize = 24;
pub const HORIZON_DAYS: usize = HORIZON_HOURS / HOURS_PER_DAY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ZoneId {
    #[serde(rename = "NORD")]
    Nord,
    #[serde(rename = "CNOR")]
    Cnor,
    #[serde(rename = "CSUD")]
    Csud,
    #[serde(rename = "SUD")]
    Sud,
    #[serde(rename = "SICI")]
    Sici,
    #[serde(rename = "SARD")]
    Sard,
}

impl ZoneId {
    pub const ALL: [ZoneId; 6] = [
        ZoneId::Nord,
        ZoneId::Cnor,
        ZoneId::Csud,
        ZoneId::Sud,
        ZoneId::Sici,
        ZoneId::Sard,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ZoneId::Nord => "NORD",
            ZoneId::Cnor => "CNOR",
            ZoneId::Csud => "CSUD",
            ZoneId::Sud => "SUD",
            ZoneId::Sici => "SICI",
            ZoneId::Sard => "SARD",
        }
    }
}

impl fmt::Display for ZoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ZoneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ZoneId::ALL
            .into_iter()
            .find(|z| z.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown zone {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PlantKind {
    #[serde(rename = "PV")]
    Pv,
    #[serde(rename = "WD")]
    Wd,
}

impl PlantKind {
    pub const ALL: [PlantKind; 2] = [PlantKind::Pv, PlantKind::Wd];

    pub fn as_str(self) -> &'static str {
        match self {
            PlantKind::Pv => "PV",
            PlantKind::Wd => "WD",
        }
    }
}

impl fmt::Display for PlantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PV" => Ok(PlantKind::Pv),
            "WD" => Ok(PlantKind::Wd),
            _ => Err(Error::InvalidArgument(format!("unknown plant kind {s:?}"))),
        }
    }
}

/// Meteorological predictor variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetVariable {
    /// Global horizontal irradiance, W/m².
    #[serde(rename = "GHI")]
    Ghi,
    /// Clear-sky global horizontal irradiance, W/m².
    #[serde(rename = "GHI_CS")]
    GhiCs,
    /// West-to-east wind component, m/s.
    #[serde(rename = "UGRD")]
    Ugrd,
    /// South-to-north wind component, m/s.
    #[serde(rename = "VGRD")]
    Vgrd,
}

impl MetVariable {
    pub const ALL: [MetVariable; 4] = [
        MetVariable::Ghi,
        MetVariable::GhiCs,
        MetVariable::Ugrd,
        MetVariable::Vgrd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetVariable::Ghi => "GHI",
            MetVariable::GhiCs => "GHI_CS",
            MetVariable::Ugrd => "UGRD",
            MetVariable::Vgrd => "VGRD",
        }
    }
}

impl fmt::Display for MetVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetVariable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetVariable::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variable {s:?}")))
    }
}

/// What an [`HourlySeries`] measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quantity {
    /// Average generated power over the hour, MW.
    Power,
    Met(MetVariable),
}

impl Quantity {
    /// Whether interpolated values must be clipped at zero.
    pub fn is_nonnegative(self) -> bool {
        matches!(
            self,
            Quantity::Power | Quantity::Met(MetVariable::Ghi) | Quantity::Met(MetVariable::GhiCs)
        )
    }
}

/// A UTC instant at hour resolution, stored as whole hours since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HourlyTimestamp(i64);

impl HourlyTimestamp {
    const FORMAT: &'static str = "%Y-%m-%dT%H:00:00Z";

    pub fn from_hours(hours_since_epoch: i64) -> Self {
        HourlyTimestamp(hours_since_epoch)
    }

    pub fn hours_since_epoch(self) -> i64 {
        self.0
    }

    pub fn from_ymdh(year: i32, month: u32, day: u32, hour: u32) -> Result<Self> {
        let dt = NaiveDate::from_ymd_opt(year, month, day)
            .and_then(|d| d.and_hms_opt(hour, 0, 0))
            .ok_or_else(|| {
                Error::InvalidArgument(format!("invalid date {year}-{month}-{day} {hour}h"))
            })?;
        Self::from_naive(dt)
    }

    /// Midnight (00:00) of `date`.
    pub fn start_of(date: NaiveDate) -> Self {
        let secs = date.and_time(chrono::NaiveTime::MIN).and_utc().timestamp();
        HourlyTimestamp(secs.div_euclid(3600))
    }

    pub fn from_naive(dt: NaiveDateTime) -> Result<Self> {
        if dt.minute() != 0 || dt.second() != 0 || dt.nanosecond() != 0 {
            return Err(Error::InvalidArgument(format!(
                "timestamp {dt} is not on an hour boundary"
            )));
        }
        Ok(HourlyTimestamp(dt.and_utc().timestamp().div_euclid(3600)))
    }

    pub fn to_naive(self) -> NaiveDateTime {
        DateTime::from_timestamp(self.0 * 3600, 0)
            .expect("hour timestamp within chrono range")
            .naive_utc()
    }

    pub fn year(self) -> i32 {
        self.to_naive().year()
    }

    /// Calendar month, 1–12.
    pub fn month(self) -> u32 {
        self.to_naive().month()
    }

    pub fn day(self) -> u32 {
        self.to_naive().day()
    }

    /// Hour of day, 0–23.
    pub fn hour(self) -> u32 {
        self.0.rem_euclid(24) as u32
    }

    pub fn date(self) -> NaiveDate {
        self.to_naive().date()
    }

    pub fn plus_hours(self, hours: i64) -> Self {
        HourlyTimestamp(self.0 + hours)
    }

    /// Signed number of hours from `earlier` to `self`.
    pub fn hours_since(self, earlier: HourlyTimestamp) -> i64 {
        self.0 - earlier.0
    }
}

impl fmt::Display for HourlyTimestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_naive().format(Self::FORMAT))
    }
}

impl FromStr for HourlyTimestamp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dt = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%SZ")
            .map_err(|e| Error::InvalidArgument(format!("bad timestamp {s:?}: {e}")))?;
        Self::from_naive(dt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub ts: HourlyTimestamp,
    /// `None` marks a missing observation.
    pub value: Option<f64>,
}

impl SeriesPoint {
    pub fn present(ts: HourlyTimestamp, value: f64) -> Self {
        SeriesPoint {
            ts,
            value: Some(value),
        }
    }

    pub fn missing(ts: HourlyTimestamp) -> Self {
        SeriesPoint { ts, value: None }
    }
}

/// Timestamped hourly values for one stream (a zone's power or a province's
/// met variable). Construction does not enforce the ordering invariants; use
/// [`validate_hourly_series`] to check them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlySeries {
    pub quantity: Quantity,
    pub points: Vec<SeriesPoint>,
}

impl HourlySeries {
    pub fn new(quantity: Quantity, points: Vec<SeriesPoint>) -> Self {
        HourlySeries { quantity, points }
    }

    /// A contiguous series starting at `start`, one value per hour.
    pub fn contiguous(quantity: Quantity, start: HourlyTimestamp, values: &[Option<f64>]) -> Self {
        let points = values
            .iter()
            .enumerate()
            .map(|(i, v)| SeriesPoint {
                ts: start.plus_hours(i as i64),
                value: *v,
            })
            .collect();
        HourlySeries { quantity, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first_ts(&self) -> Option<HourlyTimestamp> {
        self.points.first().map(|p| p.ts)
    }

    pub fn last_ts(&self) -> Option<HourlyTimestamp> {
        self.points.last().map(|p| p.ts)
    }

    /// Iterator over the non-missing points.
    pub fn present(&self) -> impl Iterator<Item = (HourlyTimestamp, f64)> + '_ {
        self.points
            .iter()
            .filter_map(|p| p.value.map(|v| (p.ts, v)))
    }

    pub fn present_count(&self) -> usize {
        self.points.iter().filter(|p| p.value.is_some()).count()
    }

    /// Value at `ts`, `None` if absent or missing. Requires sorted points.
    pub fn get(&self, ts: HourlyTimestamp) -> Option<f64> {
        self.points
            .binary_search_by_key(&ts, |p| p.ts)
            .ok()
            .and_then(|i| self.points[i].value)
    }

    /// Inserts explicit missing points for every absent hour between the
    /// first and last timestamp. Requires sorted, duplicate-free points.
    pub fn regularized(&self) -> HourlySeries {
        let (Some(first), Some(last)) = (self.first_ts(), self.last_ts()) else {
            return self.clone();
        };
        let span = last.hours_since(first) as usize + 1;
        if span == self.points.len() {
            return self.clone();
        }
        let mut points = Vec::with_capacity(span);
        let mut src = self.points.iter().peekable();
        for h in 0..span {
            let ts = first.plus_hours(h as i64);
            match src.peek() {
                Some(p) if p.ts == ts => {
                    points.push(**p);
                    src.next();
                }
                _ => points.push(SeriesPoint::missing(ts)),
            }
        }
        HourlySeries::new(self.quantity, points)
    }

    /// Points with `from < ts <= to`.
    pub fn window(&self, from: HourlyTimestamp, to: HourlyTimestamp) -> HourlySeries {
        let lo = self.points.partition_point(|p| p.ts <= from);
        let hi = self.points.partition_point(|p| p.ts <= to);
        HourlySeries::new(self.quantity, self.points[lo..hi.max(lo)].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    DuplicateTimestamp,
    NotIncreasing,
    NegativePower,
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let reason = match self.kind {
            ViolationKind::DuplicateTimestamp => "duplicate timestamp",
            ViolationKind::NotIncreasing => "timestamp not increasing",
            ViolationKind::NegativePower => "negative power value",
            ViolationKind::NonFinite => "non-finite value",
        };
        write!(f, "index {}: {reason}", self.index)
    }
}

/// Lists every breach of the [`HourlySeries`] invariants; empty when the
/// series is valid.
pub fn validate_hourly_series(s: &HourlySeries) -> Vec<Violation> {
    let mut out = Vec::new();
    for (index, p) in s.points.iter().enumerate() {
        if index > 0 {
            let prev = s.points[index - 1].ts;
            if p.ts == prev {
                out.push(Violation {
                    index,
                    kind: ViolationKind::DuplicateTimestamp,
                });
            } else if p.ts < prev {
                out.push(Violation {
                    index,
                    kind: ViolationKind::NotIncreasing,
                });
            }
        }
        if let Some(v) = p.value {
            if !v.is_finite() {
                out.push(Violation {
                    index,
                    kind: ViolationKind::NonFinite,
                });
            } else if s.quantity == Quantity::Power && v < 0.0 {
                out.push(Violation {
                    index,
                    kind: ViolationKind::NegativePower,
                });
            }
        }
    }
    out
}

/// Aligned (timestamp, feature vector, target) rows for one zone and kind.
/// Features are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMatrix {
    pub zone: ZoneId,
    pub kind: PlantKind,
    feature_names: Vec<String>,
    timestamps: Vec<HourlyTimestamp>,
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(
        zone: ZoneId,
        kind: PlantKind,
        feature_names: Vec<String>,
        timestamps: Vec<HourlyTimestamp>,
        features: Vec<f64>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let width = feature_names.len();
        if width == 0 {
            return Err(Error::InvalidArgument(
                "sample matrix needs at least one feature".into(),
            ));
        }
        if timestamps.len() != targets.len() || features.len() != targets.len() * width {
            return Err(Error::InvalidArgument(format!(
                "sample matrix shape mismatch: {} timestamps, {} targets, {} feature values for width {width}",
                timestamps.len(),
                targets.len(),
                features.len()
            )));
        }
        if features.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "sample matrix contains non-finite values".into(),
            ));
        }
        Ok(SampleMatrix {
            zone,
            kind,
            feature_names,
            timestamps,
            features,
            targets,
        })
    }

    pub fn empty(zone: ZoneId, kind: PlantKind, feature_names: Vec<String>) -> Self {
        SampleMatrix {
            zone,
            kind,
            feature_names,
            timestamps: Vec::new(),
            features: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn width(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn timestamps(&self) -> &[HourlyTimestamp] {
        &self.timestamps
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.features[i * w..(i + 1) * w]
    }

    /// Keeps the rows for which `keep` returns true.
    pub fn filter_rows(&self, mut keep: impl FnMut(usize) -> bool) -> SampleMatrix {
        let mut out = SampleMatrix::empty(self.zone, self.kind, self.feature_names.clone());
        for i in 0..self.len() {
            if keep(i) {
                out.timestamps.push(self.timestamps[i]);
                out.features.extend_from_slice(self.row(i));
                out.targets.push(self.targets[i]);
            }
        }
        out
    }

    /// Rows with `from < ts <= to`. Requires rows sorted by timestamp.
    pub fn window(&self, from: HourlyTimestamp, to: HourlyTimestamp) -> SampleMatrix {
        let lo = self.timestamps.partition_point(|t| *t <= from);
        let hi = self.timestamps.partition_point(|t| *t <= to).max(lo);
        let w = self.width();
        SampleMatrix {
            zone: self.zone,
            kind: self.kind,
            feature_names: self.feature_names.clone(),
            timestamps: self.timestamps[lo..hi].to_vec(),
            features: self.features[lo * w..hi * w].to_vec(),
            targets: self.targets[lo..hi].to_vec(),
        }
    }
}

/// One forecast issued at 00:00 of `run_date`: lead hour `h` (1-based) is
/// stamped `run_date 00:00 + h hours`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRun {
    pub run_date: NaiveDate,
    pub zone: ZoneId,
    pub kind: PlantKind,
    values: Vec<f64>,
    persistence_flag: Vec<bool>,
}

impl ForecastRun {
    pub fn new(
        run_date: NaiveDate,
        zone: ZoneId,
        kind: PlantKind,
        values: Vec<f64>,
        persistence_flag: Vec<bool>,
    ) -> Result<Self> {
        if values.len() != HORIZON_HOURS || persistence_flag.len() != HORIZON_HOURS {
            return Err(Error::InvalidArgument(format!(
                "forecast run needs exactly {HORIZON_HOURS} values and flags, got {} and {}",
                values.len(),
                persistence_flag.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "forecast values must be finite and non-negative, got {v}"
            )));
        }
        Ok(ForecastRun {
            run_date,
            zone,
            kind,
            values,
            persistence_flag,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn persistence_flag(&self) -> &[bool] {
        &self.persistence_flag
    }

    pub fn origin(&self) -> HourlyTimestamp {
        HourlyTimestamp::start_of(self.run_date)
    }

    /// Timestamp of 1-based `lead_hour`.
    pub fn lead_timestamp(&self, lead_hour: usize) -> HourlyTimestamp {
        self.origin().plus_hours(lead_hour as i64)
    }

    /// Same run with every value multiplied by `factor` (> 0).
    pub fn scaled(&self, factor: f64) -> ForecastRun {
        ForecastRun {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// 1-based lead day of a 1-based lead hour.
pub fn lead_day(lead_hour: usize) -> usize {
    (lead_hour - 1) / HOURS_PER_DAY + 1
}

/// Distance between two positions on a cycle of length `modulus`, e.g.
/// months on a 12-cycle or hours on a 24-cycle.
pub fn circular_distance(a: i64, b: i64, modulus: i64) -> Result<i64> {
    if modulus < 2 {
        return Err(Error::InvalidArgument(format!(
            "circular modulus must be at least 2, got {modulus}"
        )));
    }
    let d = (a - b).abs().rem_euclid(modulus);
    Ok(d.min(modulus - d))
}
