//! Grid search over the cone threshold, forest quantile, neighbour count and
//! post-processing window on the training period.
//!
//! The last 15 days of the training period are held out. Models are fitted
//! on the rest, a single pseudo-run is issued at the start of the held-out
//! days with the measured weather standing in for the met forecast, and the
//! run is scored by NRMSE against measured power, averaged over zones.
//! Measured targets come from a preprocessing pass without outlier removal,
//! so every grid point is scored against the same values.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{Datelike, Duration, NaiveDate};
use serde::Serialize;

use crate::dataset::{preprocess_dataset, Dataset};
use crate::error::{Error, Result, StageExt};
use crate::evaluate::{monthly_norm, nrmse, required_actuals};
use crate::ingest::MetForecast;
use crate::knn::KnnParams;
use crate::pipeline::{
    postprocess_tail, required_variables, run_forecast, train_zone, zone_training_data,
    PipelineParams, ZoneModels,
};
use crate::preprocess::PreprocessConfig;
use crate::types::{HourlyTimestamp, PlantKind, ZoneId, HORIZON_DAYS, HORIZON_HOURS};

#[derive(Debug, Clone, PartialEq)]
pub struct TuneGrid {
    pub cone_threshold: Vec<f64>,
    pub quantile: Vec<f64>,
    pub k: Vec<usize>,
    pub n_weeks: Vec<usize>,
}

impl Default for TuneGrid {
    fn default() -> Self {
        TuneGrid {
            cone_threshold: vec![3.0, 5.0],
            quantile: vec![0.4, 0.5],
            k: vec![10, 20],
            n_weeks: vec![1, 2],
        }
    }
}

impl TuneGrid {
    pub fn len(&self) -> usize {
        self.cone_threshold.len() * self.quantile.len() * self.k.len() * self.n_weeks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("cone_threshold", self.cone_threshold.is_empty()),
            ("quantile", self.quantile.is_empty()),
            ("k", self.k.is_empty()),
            ("n_weeks", self.n_weeks.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("tune.{name} grid is empty")));
        }
        if let Some(t) = self.cone_threshold.iter().find(|t| !(**t > 0.0)) {
            return Err(Error::Config(format!(
                "tune.cone_threshold value {t} is not > 0"
            )));
        }
        if let Some(q) = self.quantile.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return Err(Error::Config(format!(
                "tune.quantile value {q} is not in (0, 1)"
            )));
        }
        if self.k.contains(&0) {
            return Err(Error::Config("tune.k values must be >= 1".into()));
        }
        if self.n_weeks.contains(&0) {
            return Err(Error::Config("tune.n_weeks values must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub kind: PlantKind,
    pub train_start: NaiveDate,
    /// The training period ends at 00:00 of this date.
    pub train_end: NaiveDate,
    /// `None` takes every zone with power of the kind.
    pub zones: Option<Vec<ZoneId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TuneRow {
    pub rank: usize,
    pub cone_threshold: f64,
    pub quantile: f64,
    pub k: usize,
    pub n_weeks: usize,
    pub nrmse: f64,
}

/// Measured weather of the hours after 00:00 of `run_date`, shaped as a
/// met forecast with the full 360-hour horizon.
fn measured_as_forecast(
    ds: &Dataset,
    zone: ZoneId,
    kind: PlantKind,
    run_date: NaiveDate,
) -> Result<MetForecast> {
    let origin = HourlyTimestamp::start_of(run_date);
    let mut series = BTreeMap::new();
    for &province in ds.zone_map.provinces(zone) {
        for &var in required_variables(kind) {
            let measured = ds.met.get(&(province, var)).ok_or_else(|| {
                Error::Config(format!("no measured {var} for province {province}"))
            })?;
            let mut values = Vec::with_capacity(HORIZON_HOURS);
            for h in 1..=HORIZON_HOURS as i64 {
                let ts = origin.plus_hours(h);
                values.push(measured.get(ts).ok_or_else(|| {
                    Error::Coverage(format!("no measured {var} for province {province} at {ts}"))
                })?);
            }
            series.insert((province, var), values);
        }
    }
    Ok(MetForecast { run_date, series })
}

/// Scores every grid point and returns the rows sorted by NRMSE, best
/// first; ties keep grid order (threshold, quantile, k, weeks).
pub fn tune(
    raw: &Dataset,
    preprocess: &PreprocessConfig,
    cfg: &TuneConfig,
    grid: &TuneGrid,
    base: &PipelineParams,
) -> Result<Vec<TuneRow>> {
    grid.validate()?;
    base.validate()?;
    let kind = cfg.kind;
    let holdout_date = cfg.train_end - Duration::days(HORIZON_DAYS as i64);
    if holdout_date <= cfg.train_start {
        return Err(Error::Config(format!(
            "training period {}..{} is too short to hold out {HORIZON_DAYS} days",
            cfg.train_start, cfg.train_end
        )));
    }
    let train_from = HourlyTimestamp::start_of(cfg.train_start);
    let origin = HourlyTimestamp::start_of(holdout_date);
    let zones = match &cfg.zones {
        Some(z) => z.clone(),
        None => raw.zones(kind),
    };
    if zones.is_empty() {
        return Err(Error::Config(format!("no zones with {kind} power to tune")));
    }

    let reference_cfg = PreprocessConfig {
        cone_threshold: f64::MAX,
        ..*preprocess
    };
    let (reference, _) = preprocess_dataset(raw, &reference_cfg).stage("tune")?;
    let mut targets = Vec::with_capacity(zones.len());
    for &zone in &zones {
        let power = reference.power_series(zone, kind)?;
        let actual = required_actuals(
            power,
            origin,
            origin.plus_hours(HORIZON_HOURS as i64),
            &format!("{zone} {kind} holdout"),
        )
        .stage("tune")?;
        let m_norm = monthly_norm(&power.window(train_from, origin), holdout_date.month())
            .stage("normalizer")?;
        let weather = measured_as_forecast(&reference, zone, kind, holdout_date).stage("tune")?;
        targets.push((actual, m_norm, weather));
    }

    let mut rows = Vec::with_capacity(grid.len());
    for &theta in &grid.cone_threshold {
        let pre_cfg = PreprocessConfig {
            cone_threshold: theta,
            ..*preprocess
        };
        let (ds, _) = preprocess_dataset(raw, &pre_cfg).stage("tune")?;
        let mut fitted: Vec<ZoneModels> = Vec::with_capacity(zones.len());
        for &zone in &zones {
            let (knn_data, qrf_data) = zone_training_data(
                ds.power_series(zone, kind)?,
                &ds.met,
                &ds.zone_map,
                zone,
                kind,
                train_from,
                origin,
            )
            .stage("training data")?;
            fitted.push(train_zone(&knn_data, &qrf_data, base)?);
        }
        log::info!("tune {kind}: models fitted for cone threshold {theta}");

        for &q in &grid.quantile {
            for &k in &grid.k {
                for &n_weeks in &grid.n_weeks {
                    let mut params = *base;
                    params.qrf.quantile = q;
                    params.knn.k = k;
                    params.postprocess.n_weeks = n_weeks;
                    let knn_params: KnnParams = params.knn_for(kind);
                    let mut total = 0.0;
                    for ((zone, models), (actual, m_norm, weather)) in
                        zones.iter().zip(&fitted).zip(&targets)
                    {
                        let variant = ZoneModels {
                            zone: *zone,
                            kind,
                            knn: models.knn.with_params(knn_params).stage("tune")?,
                            qrf: models.qrf.with_quantile(q).stage("tune")?,
                        };
                        let tail = if kind == PlantKind::Pv && params.postprocess.enabled {
                            Some(
                                postprocess_tail(
                                    ds.power_series(*zone, kind)?,
                                    &ds.met,
                                    &ds.zone_map,
                                    *zone,
                                    holdout_date,
                                    n_weeks,
                                )
                                .stage("postprocess tail")?,
                            )
                        } else {
                            None
                        };
                        let out =
                            run_forecast(&variant, weather, &ds.zone_map, tail.as_ref(), &params)?;
                        total += nrmse(out.run.values(), actual, *m_norm)?;
                    }
                    rows.push(TuneRow {
                        rank: 0,
                        cone_threshold: theta,
                        quantile: q,
                        k,
                        n_weeks,
                        nrmse: total / zones.len() as f64,
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| a.nrmse.total_cmp(&b.nrmse));
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = i + 1;
    }
    Ok(rows)
}

pub fn write_tune_csv<W: Write>(out: W, rows: &[TuneRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "rank",
        "cone_threshold",
        "quantile",
        "k",
        "n_weeks",
        "nrmse",
    ])?;
    for r in rows {
        w.write_record([
            r.rank.to_string(),
            r.cone_threshold.to_string(),
            r.quantile.to_string(),
            r.k.to_string(),
            r.n_weeks.to_string(),
            r.nrmse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_pv_dataset, SynthConfig};

    fn small_synth() -> Dataset {
        let cfg = SynthConfig {
            start: NaiveDate::from_ymd_opt(2016, 1, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2016, 4, 30).unwrap(),
            forecast_from: NaiveDate::from_ymd_opt(2016, 4, 1).unwrap(),
            forecast_to: NaiveDate::from_ymd_opt(2016, 4, 2).unwrap(),
            zones: vec![ZoneId::Nord],
            ..SynthConfig::default()
        };
        generate_pv_dataset(&cfg).unwrap().into_dataset()
    }

    #[test]
    fn two_by_two_grid_gives_sixteen_ranked_rows() {
        let ds = small_synth();
        let cfg = TuneConfig {
            kind: PlantKind::Pv,
            train_start: NaiveDate::from_ymd_opt(2016, 1, 1).unwrap(),
            train_end: NaiveDate::from_ymd_opt(2016, 4, 1).unwrap(),
            zones: None,
        };
        let mut base = PipelineParams::default();
        base.qrf.n_trees = 10;
        let rows = tune(
            &ds,
            &PreprocessConfig::default(),
            &cfg,
            &TuneGrid::default(),
            &base,
        )
        .unwrap();
        assert_eq!(rows.len(), 16);
        assert!(rows.windows(2).all(|w| w[0].nrmse <= w[1].nrmse));
        assert_eq!(
            rows.iter().map(|r| r.rank).collect::<Vec<_>>(),
            (1..=16).collect::<Vec<_>>()
        );
        assert!(rows.iter().all(|r| r.nrmse.is_finite() && r.nrmse >= 0.0));

        let mut csv = Vec::new();
        write_tune_csv(&mut csv, &rows).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 17);
    }

    #[test]
    fn holdout_must_fit_in_training_period() {
        let ds = small_synth();
        let cfg = TuneConfig {
            kind: PlantKind::Pv,
            train_start: NaiveDate::from_ymd_opt(2016, 1, 1).unwrap(),
            train_end: NaiveDate::from_ymd_opt(2016, 1, 10).unwrap(),
            zones: None,
        };
        let err = tune(
            &ds,
            &PreprocessConfig::default(),
            &cfg,
            &TuneGrid::default(),
            &PipelineParams::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn empty_grid_axis_is_rejected() {
        let grid = TuneGrid {
            k: Vec::new(),
            ..TuneGrid::default()
        };
        assert!(grid.validate().is_err());
        assert_eq!(TuneGrid::default().len(), 16);
    }
}
