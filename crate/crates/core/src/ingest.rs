//! CSV readers and writers for the engine's input files, raster-to-province
//! aggregation, and the (predictors, power) join.
//!
//! File formats (all UTF-8, comma separated, one header line):
//!
//! | file            | header                                          |
//! |-----------------|-------------------------------------------------|
//! | power           | `timestamp,zone,kind,power_mw`                  |
//! | met             | `timestamp,province_id,variable,value`          |
//! | monthly totals  | `year,month,kind,energy_mwh`                    |
//! | grid field      | `lat,lon,value`                                 |
//! | province mask   | `lat,lon,province_id`                           |
//! | zone map        | `province_id,zone`                              |
//! | met forecasts   | `run_date,lead_hour,province_id,variable,value` |
//!
//! Timestamps are `YYYY-MM-DDTHH:00:00Z`; an empty value field marks a
//! missing observation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowError};
use crate::numeric::CompensatedSum;
use crate::types::{
    HourlySeries, HourlyTimestamp, MetVariable, PlantKind, Quantity, SampleMatrix, SeriesPoint,
    ZoneId,
};

pub const POWER_HEADER: [&str; 4] = ["timestamp", "zone", "kind", "power_mw"];
pub const MET_HEADER: [&str; 4] = ["timestamp", "province_id", "variable", "value"];
pub const TOTALS_HEADER: [&str; 4] = ["year", "month", "kind", "energy_mwh"];
pub const GRID_HEADER: [&str; 3] = ["lat", "lon", "value"];
pub const MASK_HEADER: [&str; 3] = ["lat", "lon", "province_id"];
pub const ZONE_MAP_HEADER: [&str; 2] = ["province_id", "zone"];
pub const FORECAST_HEADER: [&str; 5] =
    ["run_date", "lead_hour", "province_id", "variable", "value"];

/// Number of Italian provinces.
pub const PROVINCE_COUNT: u16 = 110;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub struct ProvinceId(u16);

impl ProvinceId {
    pub fn new(id: u16) -> Result<Self> {
        if (1..=PROVINCE_COUNT).contains(&id) {
            Ok(ProvinceId(id))
        } else {
            Err(Error::InvalidArgument(format!(
                "province id {id} outside 1..={PROVINCE_COUNT}"
            )))
        }
    }

    pub fn get(self) -> u16 {
        self.0
    }
}

impl TryFrom<u16> for ProvinceId {
    type Error = Error;

    fn try_from(v: u16) -> Result<Self> {
        ProvinceId::new(v)
    }
}

impl From<ProvinceId> for u16 {
    fn from(p: ProvinceId) -> u16 {
        p.0
    }
}

impl fmt::Display for ProvinceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for ProvinceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id: u16 = s
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad province id {s:?}")))?;
        ProvinceId::new(id)
    }
}

pub type PowerData = BTreeMap<(ZoneId, PlantKind), HourlySeries>;
pub type MetData = BTreeMap<(ProvinceId, MetVariable), HourlySeries>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonthlyNationalTotal {
    pub year: i32,
    pub month: u32,
    pub kind: PlantKind,
    pub energy_mwh: f64,
}

/// Which provinces make up each bidding zone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZoneMap {
    zones: BTreeMap<ZoneId, Vec<ProvinceId>>,
}

impl ZoneMap {
    pub fn new(assignments: impl IntoIterator<Item = (ProvinceId, ZoneId)>) -> Result<Self> {
        let mut seen: BTreeMap<ProvinceId, ZoneId> = BTreeMap::new();
        for (p, z) in assignments {
            if let Some(prev) = seen.insert(p, z) {
                if prev != z {
                    return Err(Error::Config(format!(
                        "province {p} assigned to both {prev} and {z}"
                    )));
                }
            }
        }
        let mut zones: BTreeMap<ZoneId, Vec<ProvinceId>> = BTreeMap::new();
        for (p, z) in seen {
            zones.entry(z).or_default().push(p);
        }
        Ok(ZoneMap { zones })
    }

    pub fn provinces(&self, zone: ZoneId) -> &[ProvinceId] {
        self.zones.get(&zone).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn zones(&self) -> impl Iterator<Item = ZoneId> + '_ {
        self.zones.keys().copied()
    }

    pub fn assignments(&self) -> impl Iterator<Item = (ProvinceId, ZoneId)> + '_ {
        self.zones
            .iter()
            .flat_map(|(z, ps)| ps.iter().map(move |p| (*p, *z)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub lat: f64,
    pub lon: f64,
    pub value: f64,
}

/// One raster snapshot of a met variable.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub timestamp: HourlyTimestamp,
    pub variable: MetVariable,
    points: Vec<GridPoint>,
}

fn coord_key(lat: f64, lon: f64) -> (u64, u64) {
    // +0.0 folds -0.0 onto 0.0
    ((lat + 0.0).to_bits(), (lon + 0.0).to_bits())
}

impl GridField {
    pub fn new(
        timestamp: HourlyTimestamp,
        variable: MetVariable,
        points: Vec<GridPoint>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &points {
            if !seen.insert(coord_key(p.lat, p.lon)) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate grid point ({}, {})",
                    p.lat, p.lon
                )));
            }
        }
        Ok(GridField {
            timestamp,
            variable,
            points,
        })
    }

    pub fn points(&self) -> &[GridPoint] {
        &self.points
    }
}

/// Point-to-province assignment for a raster grid.
#[derive(Debug, Clone, Default)]
pub struct ProvinceMask {
    cells: HashMap<(u64, u64), ProvinceId>,
}

impl ProvinceMask {
    pub fn new(assignments: impl IntoIterator<Item = (f64, f64, ProvinceId)>) -> Result<Self> {
        let mut cells = HashMap::new();
        for (lat, lon, p) in assignments {
            if let Some(prev) = cells.insert(coord_key(lat, lon), p) {
                if prev != p {
                    return Err(Error::InvalidArgument(format!(
                        "grid point ({lat}, {lon}) assigned to provinces {prev} and {p}"
                    )));
                }
            }
        }
        Ok(ProvinceMask { cells })
    }

    pub fn province_of(&self, lat: f64, lon: f64) -> Option<ProvinceId> {
        self.cells.get(&coord_key(lat, lon)).copied()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridAggregate {
    pub means: BTreeMap<ProvinceId, f64>,
    /// Grid points with no province in the mask.
    pub unmatched: usize,
}

/// Mean of the grid values assigned to each province.
pub fn aggregate_grid_to_provinces(field: &GridField, mask: &ProvinceMask) -> GridAggregate {
    struct Acc {
        sum: CompensatedSum,
        n: usize,
        min: f64,
        max: f64,
    }
    let mut acc: BTreeMap<ProvinceId, Acc> = BTreeMap::new();
    let mut unmatched = 0;
    for p in field.points() {
        let Some(province) = mask.province_of(p.lat, p.lon) else {
            unmatched += 1;
            continue;
        };
        let a = acc.entry(province).or_insert(Acc {
            sum: CompensatedSum::new(),
            n: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        });
        a.sum.add(p.value);
        a.n += 1;
        a.min = a.min.min(p.value);
        a.max = a.max.max(p.value);
    }
    if unmatched > 0 {
        log::warn!(
            "{unmatched} grid point(s) of {} at {} are outside the province mask",
            field.variable,
            field.timestamp
        );
    }
    let means = acc
        .into_iter()
        .map(|(p, a)| (p, (a.sum.value() / a.n as f64).clamp(a.min, a.max)))
        .collect();
    GridAggregate { means, unmatched }
}

/// Joins one zone's power series with the listed province predictors. Rows
/// exist for every hour where power and all predictors are present.
pub fn join_samples(
    power: &HourlySeries,
    met: &MetData,
    feature_spec: &[(ProvinceId, MetVariable)],
    zone: ZoneId,
    kind: PlantKind,
) -> Result<SampleMatrix> {
    if feature_spec.is_empty() {
        return Err(Error::InvalidArgument("feature spec is empty".into()));
    }
    let columns = feature_spec
        .iter()
        .map(|key| {
            met.get(key).ok_or_else(|| {
                Error::Config(format!("no met series for province {} {}", key.0, key.1))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let names = feature_spec
        .iter()
        .map(|(p, v)| format!("P{p}:{v}"))
        .collect();

    let mut timestamps = Vec::new();
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut row = Vec::with_capacity(columns.len());
    for (ts, y) in power.present() {
        row.clear();
        for c in &columns {
            match c.get(ts) {
                Some(v) => row.push(v),
                None => break,
            }
        }
        if row.len() == columns.len() {
            timestamps.push(ts);
            features.extend_from_slice(&row);
            targets.push(y);
        }
    }
    SampleMatrix::new(zone, kind, names, timestamps, features, targets)
}

// ---------------------------------------------------------------------------
// CSV plumbing

struct CsvRows<R: Read> {
    reader: csv::Reader<R>,
}

impl<R: Read> CsvRows<R> {
    fn open(input: R, expected: &[&str]) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let header = reader
            .headers()
            .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
        if header.iter().ne(expected.iter().copied()) {
            return Err(Error::Format(format!(
                "expected header {:?}, found {:?}",
                expected.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        Ok(CsvRows { reader })
    }

    /// Calls `f` for every record, collecting row errors instead of stopping.
    fn for_each(
        mut self,
        mut f: impl FnMut(usize, &csv::StringRecord) -> std::result::Result<(), String>,
    ) -> Result<()> {
        let mut errors = Vec::new();
        let mut record = csv::StringRecord::new();
        loop {
            let line = self.reader.position().line() as usize;
            match self.reader.read_record(&mut record) {
                Ok(false) => break,
                Ok(true) => {
                    let line = record.position().map_or(line, |p| p.line() as usize);
                    if let Err(message) = f(line, &record) {
                        errors.push(RowError { line, message });
                    }
                }
                Err(e) => errors.push(RowError {
                    line,
                    message: e.to_string(),
                }),
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Rows(errors))
        }
    }
}

fn field<'a>(
    rec: &'a csv::StringRecord,
    i: usize,
    name: &str,
) -> std::result::Result<&'a str, String> {
    rec.get(i).ok_or_else(|| format!("missing field {name}"))
}

fn parse_field<T: FromStr>(
    rec: &csv::StringRecord,
    i: usize,
    name: &str,
) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    let raw = field(rec, i, name)?;
    raw.parse::<T>().map_err(|e| format!("{name}: {e}"))
}

fn parse_optional_value(raw: &str, name: &str) -> std::result::Result<Option<f64>, String> {
    if raw.is_empty() {
        return Ok(None);
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| format!("{name}: not a number: {raw:?}"))?;
    if !v.is_finite() {
        return Err(format!("{name}: non-finite value {raw:?}"));
    }
    Ok(Some(v))
}

fn check_width(rec: &csv::StringRecord, n: usize) -> std::result::Result<(), String> {
    if rec.len() == n {
        Ok(())
    } else {
        Err(format!("expected {n} fields, found {}", rec.len()))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Collects keyed points into sorted series, reporting duplicate timestamps.
struct SeriesBuilder<K: Ord> {
    points: BTreeMap<K, BTreeMap<HourlyTimestamp, (usize, Option<f64>)>>,
}

impl<K: Ord + Copy + fmt::Debug> SeriesBuilder<K> {
    fn new() -> Self {
        SeriesBuilder {
            points: BTreeMap::new(),
        }
    }

    fn insert(
        &mut self,
        key: K,
        ts: HourlyTimestamp,
        value: Option<f64>,
        line: usize,
        describe: impl FnOnce() -> String,
    ) -> std::result::Result<(), String> {
        let series = self.points.entry(key).or_default();
        if let Some((first_line, _)) = series.get(&ts) {
            return Err(format!(
                "duplicate {} at {ts} (first seen on line {first_line})",
                describe()
            ));
        }
        series.insert(ts, (line, value));
        Ok(())
    }

    fn finish(self, quantity: impl Fn(&K) -> Quantity) -> BTreeMap<K, HourlySeries> {
        self.points
            .into_iter()
            .map(|(k, pts)| {
                let points = pts
                    .into_iter()
                    .map(|(ts, (_, value))| SeriesPoint { ts, value })
                    .collect();
                let q = quantity(&k);
                (k, HourlySeries::new(q, points))
            })
            .collect()
    }
}

pub fn parse_power_csv<R: Read>(input: R) -> Result<PowerData> {
    let rows = CsvRows::open(input, &POWER_HEADER)?;
    let mut builder = SeriesBuilder::new();
    rows.for_each(|line, rec| {
        check_width(rec, 4)?;
        let ts: HourlyTimestamp = parse_field(rec, 0, "timestamp")?;
        let zone: ZoneId = parse_field(rec, 1, "zone")?;
        let kind: PlantKind = parse_field(rec, 2, "kind")?;
        let value = parse_optional_value(field(rec, 3, "power_mw")?, "power_mw")?;
        if value.is_some_and(|v| v < 0.0) {
            return Err(format!("power_mw: negative value {}", value.unwrap()));
        }
        builder.insert((zone, kind), ts, value, line, || {
            format!("{zone}/{kind} power")
        })
    })?;
    Ok(builder.finish(|_| Quantity::Power))
}

pub fn write_power_csv<W: Write>(out: W, data: &PowerData) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(POWER_HEADER)?;
    for ((zone, kind), series) in data {
        for p in &series.points {
            w.write_record([
                p.ts.to_string(),
                zone.to_string(),
                kind.to_string(),
                fmt_opt(p.value),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn parse_met_csv<R: Read>(input: R) -> Result<MetData> {
    let rows = CsvRows::open(input, &MET_HEADER)?;
    let mut builder = SeriesBuilder::new();
    rows.for_each(|line, rec| {
        check_width(rec, 4)?;
        let ts: HourlyTimestamp = parse_field(rec, 0, "timestamp")?;
        let province: ProvinceId = parse_field(rec, 1, "province_id")?;
        let variable: MetVariable = parse_field(rec, 2, "variable")?;
        let value = parse_optional_value(field(rec, 3, "value")?, "value")?;
        builder.insert((province, variable), ts, value, line, || {
            format!("province {province} {variable}")
        })
    })?;
    Ok(builder.finish(|(_, v)| Quantity::Met(*v)))
}

pub fn write_met_csv<W: Write>(out: W, data: &MetData) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MET_HEADER)?;
    for ((province, variable), series) in data {
        for p in &series.points {
            w.write_record([
                p.ts.to_string(),
                province.to_string(),
                variable.to_string(),
                fmt_opt(p.value),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn parse_totals_csv<R: Read>(input: R) -> Result<Vec<MonthlyNationalTotal>> {
    let rows = CsvRows::open(input, &TOTALS_HEADER)?;
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    rows.for_each(|line, rec| {
        check_width(rec, 4)?;
        let year: i32 = parse_field(rec, 0, "year")?;
        let month: u32 = parse_field(rec, 1, "month")?;
        if !(1..=12).contains(&month) {
            return Err(format!("month {month} outside 1..=12"));
        }
        let kind: PlantKind = parse_field(rec, 2, "kind")?;
        let energy_mwh: f64 = parse_field(rec, 3, "energy_mwh")?;
        if !energy_mwh.is_finite() || energy_mwh < 0.0 {
            return Err(format!(
                "energy_mwh must be finite and >= 0, got {energy_mwh}"
            ));
        }
        if let Some(first) = seen.insert((year, month, kind), line) {
            return Err(format!(
                "duplicate total for {year}-{month:02} {kind} (first seen on line {first})"
            ));
        }
        out.push(MonthlyNationalTotal {
            year,
            month,
            kind,
            energy_mwh,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_totals_csv<W: Write>(out: W, totals: &[MonthlyNationalTotal]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TOTALS_HEADER)?;
    for t in totals {
        w.write_record([
            t.year.to_string(),
            t.month.to_string(),
            t.kind.to_string(),
            t.energy_mwh.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_grid_csv<R: Read>(
    input: R,
    timestamp: HourlyTimestamp,
    variable: MetVariable,
) -> Result<GridField> {
    let rows = CsvRows::open(input, &GRID_HEADER)?;
    let mut points = Vec::new();
    rows.for_each(|_, rec| {
        check_width(rec, 3)?;
        let lat: f64 = parse_field(rec, 0, "lat")?;
        let lon: f64 = parse_field(rec, 1, "lon")?;
        let value: f64 = parse_field(rec, 2, "value")?;
        if !(lat.is_finite() && lon.is_finite() && value.is_finite()) {
            return Err("non-finite coordinate or value".into());
        }
        points.push(GridPoint { lat, lon, value });
        Ok(())
    })?;
    GridField::new(timestamp, variable, points)
}

pub fn parse_mask_csv<R: Read>(input: R) -> Result<ProvinceMask> {
    let rows = CsvRows::open(input, &MASK_HEADER)?;
    let mut cells = Vec::new();
    rows.for_each(|_, rec| {
        check_width(rec, 3)?;
        let lat: f64 = parse_field(rec, 0, "lat")?;
        let lon: f64 = parse_field(rec, 1, "lon")?;
        let province: ProvinceId = parse_field(rec, 2, "province_id")?;
        cells.push((lat, lon, province));
        Ok(())
    })?;
    ProvinceMask::new(cells)
}

pub fn parse_zone_map_csv<R: Read>(input: R) -> Result<ZoneMap> {
    let rows = CsvRows::open(input, &ZONE_MAP_HEADER)?;
    let mut pairs = Vec::new();
    rows.for_each(|_, rec| {
        check_width(rec, 2)?;
        let province: ProvinceId = parse_field(rec, 0, "province_id")?;
        let zone: ZoneId = parse_field(rec, 1, "zone")?;
        pairs.push((province, zone));
        Ok(())
    })?;
    ZoneMap::new(pairs)
}

pub fn write_zone_map_csv<W: Write>(out: W, map: &ZoneMap) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ZONE_MAP_HEADER)?;
    for (p, z) in map.assignments() {
        w.write_record([p.to_string(), z.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Met forecast issued at 00:00 of `run_date`, indexed by lead hour: element
/// `h - 1` of each series is lead hour `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetForecast {
    pub run_date: NaiveDate,
    pub series: BTreeMap<(ProvinceId, MetVariable), Vec<f64>>,
}

impl MetForecast {
    /// Common number of lead hours of all series (0 when empty).
    pub fn horizon(&self) -> usize {
        self.series.values().map(Vec::len).next().unwrap_or(0)
    }
}

pub type ForecastArchive = BTreeMap<NaiveDate, MetForecast>;

pub fn parse_forecast_csv<R: Read>(input: R) -> Result<ForecastArchive> {
    let rows = CsvRows::open(input, &FORECAST_HEADER)?;
    type Key = (NaiveDate, ProvinceId, MetVariable);
    let mut raw: BTreeMap<Key, BTreeMap<usize, (usize, f64)>> = BTreeMap::new();
    rows.for_each(|line, rec| {
        check_width(rec, 5)?;
        let run_date: NaiveDate = parse_field(rec, 0, "run_date")?;
        let lead: usize = parse_field(rec, 1, "lead_hour")?;
        if lead == 0 {
            return Err("lead_hour must be >= 1".into());
        }
        let province: ProvinceId = parse_field(rec, 2, "province_id")?;
        let variable: MetVariable = parse_field(rec, 3, "variable")?;
        let value = parse_optional_value(field(rec, 4, "value")?, "value")?
            .ok_or_else(|| "forecast value must not be empty".to_string())?;
        let series = raw.entry((run_date, province, variable)).or_default();
        if let Some((first, _)) = series.insert(lead, (line, value)) {
            return Err(format!(
                "duplicate forecast {run_date} lead {lead} province {province} {variable} (first seen on line {first})"
            ));
        }
        Ok(())
    })?;

    let mut archive = ForecastArchive::new();
    for ((run_date, province, variable), leads) in raw {
        let n = leads.len();
        if leads.keys().copied().ne(1..=n) {
            return Err(Error::Format(format!(
                "forecast {run_date} province {province} {variable}: lead hours are not contiguous from 1"
            )));
        }
        let values = leads.into_values().map(|(_, v)| v).collect::<Vec<_>>();
        let fc = archive.entry(run_date).or_insert_with(|| MetForecast {
            run_date,
            series: BTreeMap::new(),
        });
        if let Some(h) = fc.series.values().next().map(Vec::len) {
            if h != n {
                return Err(Error::Format(format!(
                    "forecast {run_date}: series have differing horizons ({h} and {n})"
                )));
            }
        }
        fc.series.insert((province, variable), values);
    }
    Ok(archive)
}

pub fn write_forecast_csv<W: Write>(out: W, archive: &ForecastArchive) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FORECAST_HEADER)?;
    for (date, fc) in archive {
        let date = date.to_string();
        for ((province, variable), values) in &fc.series {
            let (p, v) = (province.to_string(), variable.to_string());
            for (i, value) in values.iter().enumerate() {
                w.write_record([&date, &(i + 1).to_string(), &p, &v, &value.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
