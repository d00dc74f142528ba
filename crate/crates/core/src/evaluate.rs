//! Backtesting with a semi-moving window and NMBE/NRMSE scoring.
//!
//! Every test month is forecast with models fitted on `(train_start, month
//! start]`: the window start is fixed and its end advances with the test
//! month. One run is issued per day of the month; errors are pooled per lead
//! day over all runs of the month, so a lead day scores `days × 24` hours,
//! and also over all lead days (`lead_day = 0` in the CSV).
//!
//! Errors are normalized by `M_m`, the largest measured power of the test
//! month's calendar month in the training window. The national (`ITALY`)
//! series is the sum of the zonal series and has its own `M_m`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result, StageExt};
use crate::numeric::CompensatedSum;
use crate::pipeline::{
    postprocess_tail, run_forecast, train_zone, zone_training_data, PipelineParams,
};
use crate::svg::{LineChart, Series};
use crate::types::{
    ForecastRun, HourlySeries, HourlyTimestamp, PlantKind, Quantity, SeriesPoint, ZoneId,
    HORIZON_DAYS, HORIZON_HOURS, HOURS_PER_DAY,
};

pub const METRICS_HEADER: [&str; 9] = [
    "year",
    "month",
    "zone",
    "kind",
    "lead_day",
    "nmbe",
    "nrmse",
    "n_samples",
    "m_norm",
];

fn check_inputs(pred: &[f64], actual: &[f64], m_norm: f64) -> Result<()> {
    if pred.len() != actual.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction and actual lengths differ ({} vs {})",
            pred.len(),
            actual.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument(
            "metrics need at least one pair".into(),
        ));
    }
    if !(m_norm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "normalizer must be > 0, got {m_norm}"
        )));
    }
    Ok(())
}

/// Normalized mean bias error; positive when `pred` overestimates.
pub fn nmbe(pred: &[f64], actual: &[f64], m_norm: f64) -> Result<f64> {
    check_inputs(pred, actual, m_norm)?;
    let mut sum = CompensatedSum::new();
    for (p, a) in pred.iter().zip(actual) {
        sum.add((p - a) / m_norm);
    }
    Ok(sum.value() / pred.len() as f64)
}

/// Normalized root mean squared error.
pub fn nrmse(pred: &[f64], actual: &[f64], m_norm: f64) -> Result<f64> {
    check_inputs(pred, actual, m_norm)?;
    let mut sum = CompensatedSum::new();
    for (p, a) in pred.iter().zip(actual) {
        let e = (p - a) / m_norm;
        sum.add(e * e);
    }
    Ok((sum.value() / pred.len() as f64).sqrt())
}

/// Largest present value over every occurrence of calendar `month`.
pub fn monthly_norm(measured: &HourlySeries, month: u32) -> Result<f64> {
    measured
        .present()
        .filter(|(ts, _)| ts.month() == month)
        .map(|(_, v)| v)
        .reduce(f64::max)
        .filter(|m| *m > 0.0)
        .ok_or_else(|| {
            Error::InsufficientData(format!(
                "no positive measured power for calendar month {month}"
            ))
        })
}

/// A bidding zone or the national aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Area {
    Zone(ZoneId),
    Italy,
}

impl fmt::Display for Area {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Area::Zone(z) => f.write_str(z.as_str()),
            Area::Italy => f.write_str("ITALY"),
        }
    }
}

impl FromStr for Area {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ITALY" {
            Ok(Area::Italy)
        } else {
            Ok(Area::Zone(s.parse()?))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub year: i32,
    pub month: u32,
    pub area: Area,
    pub kind: PlantKind,
    /// 1..=15, or 0 for all lead days pooled.
    pub lead_day: u32,
    pub nmbe: f64,
    pub nrmse: f64,
    pub n_samples: usize,
    pub m_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestConfig {
    pub train_start: NaiveDate,
    /// `(year, month)` in increasing order.
    pub test_months: Vec<(i32, u32)>,
    pub kinds: Vec<PlantKind>,
    /// Zones to score; `None` takes every zone with power of the kind.
    pub zones: Option<Vec<ZoneId>>,
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.test_months.is_empty() {
            return Err(Error::Config("backtest.test_months is empty".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("backtest.kinds is empty".into()));
        }
        for &(y, m) in &self.test_months {
            let start = NaiveDate::from_ymd_opt(y, m, 1)
                .ok_or_else(|| Error::Config(format!("invalid test month {y}-{m}")))?;
            if start <= self.train_start {
                return Err(Error::Config(format!(
                    "test month {y}-{m:02} does not start after train_start {}",
                    self.train_start
                )));
            }
        }
        if self.test_months.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "backtest.test_months must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub records: Vec<MetricRecord>,
    pub runs: Vec<ForecastRun>,
    /// Runs whose PV post-processing was skipped.
    pub postprocess_skips: usize,
}

fn month_dates(year: i32, month: u32) -> Vec<NaiveDate> {
    let first = NaiveDate::from_ymd_opt(year, month, 1).expect("validated month");
    first
        .iter_days()
        .take_while(|d| d.month() == month)
        .collect()
}

/// Collapses sorted timestamps into `first..=last` ranges for messages.
fn describe_ranges(ts: &[HourlyTimestamp]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < ts.len() {
        let mut j = i;
        while j + 1 < ts.len() && ts[j + 1].hours_since(ts[j]) == 1 {
            j += 1;
        }
        parts.push(if i == j {
            ts[i].to_string()
        } else {
            format!("{}..{}", ts[i], ts[j])
        });
        i = j + 1;
    }
    let more = parts.len().saturating_sub(10);
    parts.truncate(10);
    if more > 0 {
        parts.push(format!("and {more} more ranges"));
    }
    parts.join(", ")
}

/// Measured values for every hour in `(from, to]`, or a coverage error.
pub(crate) fn required_actuals(
    series: &HourlySeries,
    from: HourlyTimestamp,
    to: HourlyTimestamp,
    what: &str,
) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(to.hours_since(from) as usize);
    let mut gaps = Vec::new();
    for h in 1..=to.hours_since(from) {
        let ts = from.plus_hours(h);
        match series.get(ts) {
            Some(v) => values.push(v),
            None => gaps.push(ts),
        }
    }
    if gaps.is_empty() {
        Ok(values)
    } else {
        Err(Error::Coverage(format!(
            "{what}: {} hour(s) without measured power: {}",
            gaps.len(),
            describe_ranges(&gaps)
        )))
    }
}

/// Per-hour sum of several series at hours where all are present.
fn sum_series(series: &[&HourlySeries]) -> HourlySeries {
    let first = series[0];
    let points = first
        .points
        .iter()
        .map(|p| {
            let mut total = p.value;
            for s in &series[1..] {
                total = match (total, s.get(p.ts)) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                };
            }
            SeriesPoint {
                ts: p.ts,
                value: total,
            }
        })
        .collect();
    HourlySeries::new(Quantity::Power, points)
}

/// Scores one area's runs: `forecasts[r]` and `actuals[r]` hold the 360
/// lead hours of run `r`.
fn score(
    (year, month): (i32, u32),
    area: Area,
    kind: PlantKind,
    forecasts: &[Vec<f64>],
    actuals: &[Vec<f64>],
    m_norm: f64,
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::with_capacity(HORIZON_DAYS + 1);
    let mut push = |lead_day: u32, hours: std::ops::Range<usize>| -> Result<()> {
        let mut pred = Vec::new();
        let mut act = Vec::new();
        for (f, a) in forecasts.iter().zip(actuals) {
            pred.extend_from_slice(&f[hours.clone()]);
            act.extend_from_slice(&a[hours.clone()]);
        }
        records.push(MetricRecord {
            year,
            month,
            area,
            kind,
            lead_day,
            nmbe: nmbe(&pred, &act, m_norm)?,
            nrmse: nrmse(&pred, &act, m_norm)?,
            n_samples: pred.len(),
            m_norm,
        });
        Ok(())
    };
    push(0, 0..HORIZON_HOURS)?;
    for d in 0..HORIZON_DAYS {
        push(d as u32 + 1, d * HOURS_PER_DAY..(d + 1) * HOURS_PER_DAY)?;
    }
    Ok(records)
}

struct ZoneMonth {
    runs: Vec<ForecastRun>,
    actuals: Vec<Vec<f64>>,
    m_norm: f64,
    skips: usize,
}

fn zone_month(
    ds: &Dataset,
    zone: ZoneId,
    kind: PlantKind,
    train_from: HourlyTimestamp,
    dates: &[NaiveDate],
    params: &PipelineParams,
) -> Result<ZoneMonth> {
    let month_start = HourlyTimestamp::start_of(dates[0]);
    let power = ds.power_series(zone, kind)?;
    let actual_all = required_actuals(
        power,
        month_start,
        HourlyTimestamp::start_of(*dates.last().expect("non-empty month"))
            .plus_hours(HORIZON_HOURS as i64),
        &format!("{zone} {kind}"),
    )?;
    let m_norm = monthly_norm(&power.window(train_from, month_start), dates[0].month())
        .stage("normalizer")?;
    let (knn_data, qrf_data) = zone_training_data(
        power,
        &ds.met,
        &ds.zone_map,
        zone,
        kind,
        train_from,
        month_start,
    )
    .stage("training data")?;
    let models = train_zone(&knn_data, &qrf_data, params)?;

    let mut runs = Vec::with_capacity(dates.len());
    let mut actuals = Vec::with_capacity(dates.len());
    let mut skips = 0;
    for (r, date) in dates.iter().enumerate() {
        let fc = &ds.forecasts[date];
        let tail = if kind == PlantKind::Pv && params.postprocess.enabled {
            Some(
                postprocess_tail(
                    power,
                    &ds.met,
                    &ds.zone_map,
                    zone,
                    *date,
                    params.postprocess.n_weeks,
                )
                .stage("postprocess tail")?,
            )
        } else {
            None
        };
        let out = run_forecast(&models, fc, &ds.zone_map, tail.as_ref(), params)?;
        skips += usize::from(!out.warnings.is_empty());
        runs.push(out.run);
        let offset = r * HOURS_PER_DAY;
        actuals.push(actual_all[offset..offset + HORIZON_HOURS].to_vec());
    }
    Ok(ZoneMonth {
        runs,
        actuals,
        m_norm,
        skips,
    })
}

/// Runs the semi-moving-window protocol over every test month and kind.
/// `ds` should already be preprocessed.
pub fn backtest(
    ds: &Dataset,
    cfg: &BacktestConfig,
    params: &PipelineParams,
) -> Result<BacktestResult> {
    cfg.validate()?;
    params.validate()?;
    let train_from = HourlyTimestamp::start_of(cfg.train_start);
    let mut result = BacktestResult {
        records: Vec::new(),
        runs: Vec::new(),
        postprocess_skips: 0,
    };
    for &kind in &cfg.kinds {
        let zones = match &cfg.zones {
            Some(z) => z.clone(),
            None => ds.zones(kind),
        };
        if zones.is_empty() {
            return Err(Error::Config(format!(
                "no zones with {kind} power to evaluate"
            )));
        }
        for &(year, month) in &cfg.test_months {
            let dates = month_dates(year, month);
            let missing: Vec<String> = dates
                .iter()
                .filter(|d| !ds.forecasts.contains_key(d))
                .map(|d| d.to_string())
                .collect();
            if !missing.is_empty() {
                return Err(Error::Coverage(format!(
                    "no met forecast for run date(s) {}",
                    missing.join(", ")
                ))
                .in_stage("backtest"));
            }
            log::info!(
                "backtest {kind} {year}-{month:02}: {} zones, {} runs",
                zones.len(),
                dates.len()
            );
            let per_zone = zones
                .par_iter()
                .map(|&zone| zone_month(ds, zone, kind, train_from, &dates, params))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage("backtest"))?;

            for (zone, zm) in zones.iter().zip(&per_zone) {
                let forecasts: Vec<Vec<f64>> =
                    zm.runs.iter().map(|r| r.values().to_vec()).collect();
                result.records.extend(
                    score(
                        (year, month),
                        Area::Zone(*zone),
                        kind,
                        &forecasts,
                        &zm.actuals,
                        zm.m_norm,
                    )
                    .stage("score")?,
                );
            }

            let month_start = HourlyTimestamp::start_of(dates[0]);
            let zone_series = zones
                .iter()
                .map(|z| ds.power_series(*z, kind))
                .collect::<Result<Vec<_>>>()?;
            let national = sum_series(&zone_series);
            let national_norm = monthly_norm(&national.window(train_from, month_start), month)
                .stage("normalizer")?;
            let sum_runs = |pick: &dyn Fn(&ZoneMonth, usize) -> Vec<f64>| -> Vec<Vec<f64>> {
                (0..dates.len())
                    .map(|r| {
                        let mut total = vec![0.0; HORIZON_HOURS];
                        for zm in &per_zone {
                            for (t, v) in total.iter_mut().zip(pick(zm, r)) {
                                *t += v;
                            }
                        }
                        total
                    })
                    .collect()
            };
            let forecasts = sum_runs(&|zm, r| zm.runs[r].values().to_vec());
            let actuals = sum_runs(&|zm, r| zm.actuals[r].clone());
            result.records.extend(
                score(
                    (year, month),
                    Area::Italy,
                    kind,
                    &forecasts,
                    &actuals,
                    national_norm,
                )
                .stage("score")?,
            );

            for zm in per_zone {
                result.postprocess_skips += zm.skips;
                result.runs.extend(zm.runs);
            }
        }
    }
    Ok(result)
}

pub fn write_metrics_csv<W: Write>(out: W, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.write_record([
            r.year.to_string(),
            r.month.to_string(),
            r.area.to_string(),
            r.kind.to_string(),
            r.lead_day.to_string(),
            r.nmbe.to_string(),
            r.nrmse.to_string(),
            r.n_samples.to_string(),
            r.m_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Format(format!(
            "unexpected metrics header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| -> Result<&str> {
            rec.get(j).ok_or_else(|| {
                Error::Format(format!(
                    "metrics line {}: missing column {}",
                    i + 2,
                    METRICS_HEADER[j]
                ))
            })
        };
        let bad =
            |j: usize| Error::Format(format!("metrics line {}: bad {}", i + 2, METRICS_HEADER[j]));
        records.push(MetricRecord {
            year: field(0)?.parse().map_err(|_| bad(0))?,
            month: field(1)?.parse().map_err(|_| bad(1))?,
            area: field(2)?.parse().map_err(|_| bad(2))?,
            kind: field(3)?.parse().map_err(|_| bad(3))?,
            lead_day: field(4)?.parse().map_err(|_| bad(4))?,
            nmbe: field(5)?.parse().map_err(|_| bad(5))?,
            nrmse: field(6)?.parse().map_err(|_| bad(6))?,
            n_samples: field(7)?.parse().map_err(|_| bad(7))?,
            m_norm: field(8)?.parse().map_err(|_| bad(8))?,
        });
    }
    Ok(records)
}

/// A run to draw against measured power in the report.
pub struct RunChart<'a> {
    pub run: &'a ForecastRun,
    pub measured: &'a HourlySeries,
}

/// Writes `metrics.csv`, a lead-day chart per kind and test month
/// (`leadday_{KIND}_{YYYY-MM}.svg`), a per-zone monthly NRMSE chart per kind
/// (`zones_{KIND}.svg`) and, if given, a forecast-versus-measured chart
/// (`run_{KIND}_{ZONE}_{DATE}.svg`). Returns the written paths.
pub fn emit_report(
    records: &[MetricRecord],
    out_dir: &Path,
    run_chart: Option<RunChart<'_>>,
) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no metric records to report".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let metrics = out_dir.join("metrics.csv");
    write_metrics_csv(fs::File::create(&metrics)?, records)?;
    written.push(metrics);

    let mut by_kind_month: BTreeMap<(PlantKind, i32, u32), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        by_kind_month
            .entry((r.kind, r.year, r.month))
            .or_default()
            .push(r);
    }
    for ((kind, year, month), recs) in &by_kind_month {
        let mut areas: Vec<Area> = recs.iter().map(|r| r.area).collect();
        areas.sort();
        areas.dedup();
        let mut series = Vec::new();
        for area in areas {
            let mut days: Vec<&&MetricRecord> = recs
                .iter()
                .filter(|r| r.area == area && r.lead_day > 0)
                .collect();
            days.sort_by_key(|r| r.lead_day);
            let italy = area == Area::Italy;
            series.push(Series {
                name: format!("{area} NRMSE"),
                points: days.iter().map(|r| (r.lead_day as f64, r.nrmse)).collect(),
                dashed: false,
            });
            if italy {
                series.push(Series {
                    name: format!("{area} NMBE"),
                    points: days.iter().map(|r| (r.lead_day as f64, r.nmbe)).collect(),
                    dashed: true,
                });
            }
        }
        let chart = LineChart {
            title: format!("{kind} {year}-{month:02}: error by lead day"),
            x_label: "lead day".into(),
            y_label: "normalized error".into(),
            series,
            x_ticks: (1..=HORIZON_DAYS)
                .map(|d| (d as f64, d.to_string()))
                .collect(),
        };
        let path = out_dir.join(format!("leadday_{kind}_{year}-{month:02}.svg"));
        fs::write(&path, chart.render())?;
        written.push(path);
    }

    let mut kinds: Vec<PlantKind> = records.iter().map(|r| r.kind).collect();
    kinds.sort();
    kinds.dedup();
    for kind in kinds {
        let mut months: Vec<(i32, u32)> = records
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| (r.year, r.month))
            .collect();
        months.sort();
        months.dedup();
        let mut per_area: BTreeMap<Area, Vec<(f64, f64)>> = BTreeMap::new();
        for r in records.iter().filter(|r| r.kind == kind && r.lead_day == 0) {
            let x = months
                .binary_search(&(r.year, r.month))
                .expect("collected above") as f64;
            per_area.entry(r.area).or_default().push((x, r.nrmse));
        }
        let series = per_area
            .into_iter()
            .map(|(area, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    name: area.to_string(),
                    points,
                    dashed: area == Area::Italy,
                }
            })
            .collect();
        let chart = LineChart {
            title: format!("{kind}: NRMSE over all lead days by month"),
            x_label: "test month".into(),
            y_label: "NRMSE".into(),
            series,
            x_ticks: months
                .iter()
                .enumerate()
                .map(|(i, (y, m))| (i as f64, format!("{y}-{m:02}")))
                .collect(),
        };
        let path = out_dir.join(format!("zones_{kind}.svg"));
        fs::write(&path, chart.render())?;
        written.push(path);
    }

    if let Some(RunChart { run, measured }) = run_chart {
        let forecast: Vec<(f64, f64)> = run
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| ((i + 1) as f64, *v))
            .collect();
        let metered: Vec<(f64, f64)> = (1..=HORIZON_HOURS)
            .filter_map(|h| measured.get(run.lead_timestamp(h)).map(|v| (h as f64, v)))
            .collect();
        let chart = LineChart {
            title: format!("{} {} run {}", run.kind, run.zone, run.run_date),
            x_label: "lead hour".into(),
            y_label: "power (MW)".into(),
            series: vec![
                Series {
                    name: "forecast".into(),
                    points: forecast,
                    dashed: false,
                },
                Series {
                    name: "measured".into(),
                    points: metered,
                    dashed: true,
                },
            ],
            x_ticks: (0..=HORIZON_DAYS)
                .step_by(3)
                .map(|d| ((d * 24) as f64, format!("{}", d * 24)))
                .collect(),
        };
        let path = out_dir.join(format!(
            "run_{}_{}_{}.svg",
            run.kind, run.zone, run.run_date
        ));
        fs::write(&path, chart.render())?;
        written.push(path);
    }
    Ok(written)
}
