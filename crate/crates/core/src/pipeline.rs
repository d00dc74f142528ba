//! End-to-end forecasting for one zone and plant kind.
//!
//! A run issued at 00:00 of a run date turns a met forecast covering lead
//! hours `1..=H` into 360 hourly power values:
//!
//! 1. [`extend_forecast`] tiles the last forecast day forward to 360 hours;
//! 2. [`forecast_features`] builds the k-NN and QRF inputs per lead hour;
//! 3. each learner predicts every hour;
//! 4. for PV, each learner's output is rescaled by `K_prod` ([`pv_postprocess`]);
//! 5. [`ensemble_combine`] blends the two.
//!
//! Inputs per learner:
//!
//! | kind | k-NN                  | QRF                        |
//! |------|-----------------------|----------------------------|
//! | PV   | GHI, GHI_CS           | GHI, GHI_CS, MONTH, HOUR   |
//! | WD   | wind speed            | UGRD, VGRD                 |
//!
//! Zone-level values are the mean over the zone's provinces; wind speed is
//! computed per province before averaging.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::ingest::{MetData, MetForecast, ProvinceId, ZoneMap};
use crate::knn::{fit_knn, KnnModel, KnnParams};
use crate::qrf::{fit_qrf, QrfModel, QrfParams};
use crate::types::{
    ForecastRun, HourlySeries, HourlyTimestamp, MetVariable, PlantKind, SampleMatrix, ZoneId,
    HORIZON_HOURS, HOURS_PER_DAY,
};

pub const HOURS_PER_WEEK: i64 = 7 * 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Learner {
    Knn,
    Qrf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSpec {
    pub kind: PlantKind,
    pub learner: Learner,
}

impl FeatureSpec {
    pub fn new(kind: PlantKind, learner: Learner) -> Self {
        FeatureSpec { kind, learner }
    }

    pub fn names(&self) -> &'static [&'static str] {
        match (self.kind, self.learner) {
            (PlantKind::Pv, Learner::Knn) => &["GHI", "GHI_CS"],
            (PlantKind::Pv, Learner::Qrf) => &["GHI", "GHI_CS", "MONTH", "HOUR"],
            (PlantKind::Wd, Learner::Knn) => &["WIND_SPEED"],
            (PlantKind::Wd, Learner::Qrf) => &["UGRD", "VGRD"],
        }
    }

    pub fn width(&self) -> usize {
        self.names().len()
    }
}

/// Province-level variables a plant kind draws on.
pub fn required_variables(kind: PlantKind) -> &'static [MetVariable] {
    match kind {
        PlantKind::Pv => &[MetVariable::Ghi, MetVariable::GhiCs],
        PlantKind::Wd => &[MetVariable::Ugrd, MetVariable::Vgrd],
    }
}

/// Timestamped feature rows, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub timestamps: Vec<HourlyTimestamp>,
    pub values: Vec<f64>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.values[i * w..(i + 1) * w]
    }
}

fn zone_provinces(zone_map: &ZoneMap, zone: ZoneId) -> Result<&[ProvinceId]> {
    let provinces = zone_map.provinces(zone);
    if provinces.is_empty() {
        return Err(Error::Config(format!(
            "zone {zone} has no provinces in the zone map"
        )));
    }
    Ok(provinces)
}

/// Appends the feature vector for `ts` to `out`; returns false (leaving
/// `out` unchanged) when any province value is missing.
fn push_row(
    spec: FeatureSpec,
    ts: HourlyTimestamp,
    provinces: &[ProvinceId],
    lookup: &impl Fn(ProvinceId, MetVariable) -> Option<f64>,
    out: &mut Vec<f64>,
) -> bool {
    let n = provinces.len() as f64;
    let zone_mean = |var: MetVariable| -> Option<f64> {
        let mut sum = 0.0;
        for &p in provinces {
            sum += lookup(p, var)?;
        }
        Some(sum / n)
    };
    let start = out.len();
    let ok = match (spec.kind, spec.learner) {
        (PlantKind::Pv, learner) => {
            match (zone_mean(MetVariable::Ghi), zone_mean(MetVariable::GhiCs)) {
                (Some(ghi), Some(cs)) => {
                    out.extend([ghi, cs]);
                    if learner == Learner::Qrf {
                        out.extend([ts.month() as f64, ts.hour() as f64]);
                    }
                    true
                }
                _ => false,
            }
        }
        (PlantKind::Wd, Learner::Knn) => {
            let mut sum = 0.0;
            let mut ok = true;
            for &p in provinces {
                match (lookup(p, MetVariable::Ugrd), lookup(p, MetVariable::Vgrd)) {
                    (Some(u), Some(v)) => sum += u.hypot(v),
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                out.push(sum / n);
            }
            ok
        }
        (PlantKind::Wd, Learner::Qrf) => {
            match (zone_mean(MetVariable::Ugrd), zone_mean(MetVariable::Vgrd)) {
                (Some(u), Some(v)) => {
                    out.extend([u, v]);
                    true
                }
                _ => false,
            }
        }
    };
    if !ok {
        out.truncate(start);
    }
    ok
}

/// Feature rows from historical province met series, for every hour at which
/// all of the zone's provinces have every required variable.
pub fn build_features(
    met: &MetData,
    zone_map: &ZoneMap,
    zone: ZoneId,
    spec: FeatureSpec,
) -> Result<FeatureTable> {
    let provinces = zone_provinces(zone_map, zone)?;
    let vars = required_variables(spec.kind);
    for &p in provinces {
        for &v in vars {
            if !met.contains_key(&(p, v)) {
                return Err(Error::Config(format!(
                    "zone {zone}: no {v} series for province {p}"
                )));
            }
        }
    }
    let clock = &met[&(provinces[0], vars[0])];
    let mut table = FeatureTable {
        names: spec.names().iter().map(|s| s.to_string()).collect(),
        timestamps: Vec::new(),
        values: Vec::new(),
    };
    for point in &clock.points {
        let lookup = |p, v| met[&(p, v)].get(point.ts);
        if push_row(spec, point.ts, provinces, &lookup, &mut table.values) {
            table.timestamps.push(point.ts);
        }
    }
    Ok(table)
}

/// Feature rows for lead hours `1..=horizon` of a met forecast.
pub fn forecast_features(
    fc: &MetForecast,
    zone_map: &ZoneMap,
    zone: ZoneId,
    spec: FeatureSpec,
) -> Result<FeatureTable> {
    let provinces = zone_provinces(zone_map, zone)?;
    let horizon = fc.horizon();
    for &p in provinces {
        for &v in required_variables(spec.kind) {
            if !fc.series.contains_key(&(p, v)) {
                return Err(Error::Config(format!(
                    "forecast {}: no {v} series for province {p} of zone {zone}",
                    fc.run_date
                )));
            }
        }
    }
    let origin = HourlyTimestamp::start_of(fc.run_date);
    let mut table = FeatureTable {
        names: spec.names().iter().map(|s| s.to_string()).collect(),
        timestamps: Vec::with_capacity(horizon),
        values: Vec::with_capacity(horizon * spec.width()),
    };
    for h in 1..=horizon {
        let ts = origin.plus_hours(h as i64);
        let lookup = |p, v| {
            fc.series
                .get(&(p, v))
                .and_then(|s: &Vec<f64>| s.get(h - 1).copied())
        };
        if !push_row(spec, ts, provinces, &lookup, &mut table.values) {
            return Err(Error::Format(format!(
                "forecast {}: incomplete inputs at lead hour {h}",
                fc.run_date
            )));
        }
        table.timestamps.push(ts);
    }
    Ok(table)
}

/// Pairs feature rows with the present power values at the same hours.
pub fn training_samples(
    power: &HourlySeries,
    features: &FeatureTable,
    zone: ZoneId,
    kind: PlantKind,
) -> Result<SampleMatrix> {
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut targets = Vec::new();
    for (i, &ts) in features.timestamps.iter().enumerate() {
        if let Some(y) = power.get(ts) {
            timestamps.push(ts);
            values.extend_from_slice(features.row(i));
            targets.push(y);
        }
    }
    SampleMatrix::new(
        zone,
        kind,
        features.names.clone(),
        timestamps,
        values,
        targets,
    )
}

/// Tiles the final whole day of a lead-indexed series forward to 360 hours.
/// Returns the extended values and a flag per lead hour marking tiled hours.
pub fn persistence_extend(values: &[f64]) -> Result<(Vec<f64>, Vec<bool>)> {
    let h = values.len();
    if h < HOURS_PER_DAY {
        return Err(Error::InsufficientData(format!(
            "met forecast covers {h} lead hours; at least {HOURS_PER_DAY} are needed"
        )));
    }
    if !h.is_multiple_of(HOURS_PER_DAY) {
        return Err(Error::InvalidArgument(format!(
            "met forecast horizon {h} is not a whole number of days"
        )));
    }
    if h >= HORIZON_HOURS {
        return Ok((values[..HORIZON_HOURS].to_vec(), vec![false; HORIZON_HOURS]));
    }
    let last_day = &values[h - HOURS_PER_DAY..];
    let mut out = values.to_vec();
    out.extend((h..HORIZON_HOURS).map(|i| last_day[(i - h) % HOURS_PER_DAY]));
    let mut flags = vec![false; h];
    flags.resize(HORIZON_HOURS, true);
    Ok((out, flags))
}

/// Applies [`persistence_extend`] to every series of a met forecast.
pub fn extend_forecast(fc: &MetForecast) -> Result<(MetForecast, Vec<bool>)> {
    let mut flags = vec![false; HORIZON_HOURS];
    let mut series = std::collections::BTreeMap::new();
    for (key, values) in &fc.series {
        let (extended, f) = persistence_extend(values)?;
        flags = f;
        series.insert(*key, extended);
    }
    if series.is_empty() {
        return Err(Error::InsufficientData(format!(
            "forecast {} is empty",
            fc.run_date
        )));
    }
    Ok((
        MetForecast {
            run_date: fc.run_date,
            series,
        },
        flags,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    pub weight_knn: f64,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        EnsembleParams { weight_knn: 0.5 }
    }
}

impl EnsembleParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.weight_knn) {
            return Err(Error::Config(
                "pipeline.weight_knn must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

pub fn ensemble_combine(knn_pred: f64, qrf_pred: f64, params: &EnsembleParams) -> f64 {
    let w = params.weight_knn;
    if w == 1.0 {
        return knn_pred;
    }
    if w == 0.0 || knn_pred == qrf_pred {
        return qrf_pred;
    }
    let v = w * knn_pred + (1.0 - w) * qrf_pred;
    v.clamp(knn_pred.min(qrf_pred), knn_pred.max(qrf_pred))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PostprocessOrder {
    /// Rescale each learner's output, then blend.
    BeforeCombine,
    /// Blend, then rescale the ensemble.
    AfterCombine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessParams {
    pub enabled: bool,
    pub n_weeks: usize,
    /// Days whose peak irradiance is below this are ignored (W/m²).
    pub ghi_floor: f64,
    pub order: PostprocessOrder,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        PostprocessParams {
            enabled: true,
            n_weeks: 2,
            ghi_floor: 20.0,
            order: PostprocessOrder::BeforeCombine,
        }
    }
}

impl PostprocessParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_weeks < 1 {
            return Err(Error::Config("pipeline.n_weeks must be >= 1".into()));
        }
        if !(self.ghi_floor >= 0.0) {
            return Err(Error::Config("ghi floor must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean over calendar days of `power / ghi` at each day's peak-irradiance
/// hour (first hour on ties). Days whose peak is below `ghi_floor` are
/// skipped; `None` when no day qualifies. Rows must be sorted by time.
pub fn peak_ratio(
    timestamps: &[HourlyTimestamp],
    ghi: &[f64],
    power: &[f64],
    ghi_floor: f64,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut days = 0usize;
    let mut i = 0;
    while i < timestamps.len() {
        let date = timestamps[i].date();
        let mut peak = i;
        let mut j = i + 1;
        while j < timestamps.len() && timestamps[j].date() == date {
            if ghi[j] > ghi[peak] {
                peak = j;
            }
            j += 1;
        }
        if ghi[peak] >= ghi_floor && ghi[peak] > 0.0 {
            sum += power[peak] / ghi[peak];
            days += 1;
        }
        i = j;
    }
    (days > 0).then(|| sum / days as f64)
}

/// Result of [`pv_postprocess`].
#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessOutcome {
    pub run: ForecastRun,
    /// Applied factor; `None` when the run was returned unscaled.
    pub k_prod: Option<f64>,
    pub warning: Option<String>,
}

/// `K_prod = Q_train / Q_for`, or the reason it cannot be applied.
fn k_prod(
    origin: HourlyTimestamp,
    values: &[f64],
    ghi_forecast: &[f64],
    tail: &SampleMatrix,
    params: &PostprocessParams,
) -> Result<std::result::Result<f64, String>> {
    if values.len() != HORIZON_HOURS || ghi_forecast.len() != HORIZON_HOURS {
        return Err(Error::InvalidArgument(format!(
            "post-processing needs {HORIZON_HOURS} forecast and irradiance values"
        )));
    }
    let ghi_col = tail
        .feature_index("GHI")
        .ok_or_else(|| Error::InvalidArgument("post-processing tail has no GHI column".into()))?;
    let from = origin.plus_hours(-(params.n_weeks as i64) * HOURS_PER_WEEK);
    if tail.timestamps().iter().any(|t| *t <= from || *t > origin) {
        return Err(Error::InvalidArgument(format!(
            "post-processing tail must lie within the {} weeks before {origin}",
            params.n_weeks
        )));
    }
    let lead_ts: Vec<HourlyTimestamp> = (1..=HORIZON_HOURS)
        .map(|h| origin.plus_hours(h as i64))
        .collect();
    let Some(q_for) = peak_ratio(&lead_ts, ghi_forecast, values, params.ghi_floor) else {
        return Ok(Err("no forecast day reaches the irradiance floor".into()));
    };
    if q_for == 0.0 {
        return Ok(Err(
            "forecast power is zero at every irradiance peak (Q_for = 0)".into(),
        ));
    }
    let tail_ghi: Vec<f64> = (0..tail.len()).map(|i| tail.row(i)[ghi_col]).collect();
    let Some(q_train) = peak_ratio(
        tail.timestamps(),
        &tail_ghi,
        tail.targets(),
        params.ghi_floor,
    ) else {
        return Ok(Err(
            "no measured day in the tail reaches the irradiance floor".into(),
        ));
    };
    let k = q_train / q_for;
    if !(k.is_finite() && k > 0.0) {
        return Ok(Err(format!("K_prod = {k} is not a positive finite factor")));
    }
    Ok(Ok(k))
}

/// Rescales a PV run so its power-to-irradiance ratio at daily peaks matches
/// the measured ratio over the `n_weeks` before the run date.
///
/// `ghi_forecast` is the zone-mean forecast irradiance per lead hour and
/// `tail` holds measured rows with a `GHI` column, all within the `n_weeks`
/// immediately preceding the run date.
pub fn pv_postprocess(
    forecast: &ForecastRun,
    ghi_forecast: &[f64],
    tail: &SampleMatrix,
    params: &PostprocessParams,
) -> Result<PostprocessOutcome> {
    params.validate()?;
    match k_prod(
        forecast.origin(),
        forecast.values(),
        ghi_forecast,
        tail,
        params,
    )? {
        Ok(k) => Ok(PostprocessOutcome {
            run: forecast.scaled(k),
            k_prod: Some(k),
            warning: None,
        }),
        Err(reason) => {
            log::warn!(
                "{} {} run {}: post-processing skipped: {reason}",
                forecast.zone,
                forecast.kind,
                forecast.run_date
            );
            Ok(PostprocessOutcome {
                run: forecast.clone(),
                k_prod: None,
                warning: Some(reason),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    /// k-NN settings; the calendar window applies to PV only.
    pub knn: KnnParams,
    pub qrf: QrfParams,
    pub ensemble: EnsembleParams,
    pub postprocess: PostprocessParams,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            knn: KnnParams::default_for(PlantKind::Pv),
            qrf: QrfParams::default(),
            ensemble: EnsembleParams::default(),
            postprocess: PostprocessParams::default(),
        }
    }
}

impl PipelineParams {
    pub fn knn_for(&self, kind: PlantKind) -> KnnParams {
        match kind {
            PlantKind::Pv => self.knn,
            PlantKind::Wd => KnnParams {
                window: None,
                ..self.knn
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.knn.validate()?;
        self.qrf.validate()?;
        self.ensemble.validate()?;
        self.postprocess.validate()
    }
}

/// The two fitted learners of one zone and kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneModels {
    pub zone: ZoneId,
    pub kind: PlantKind,
    pub knn: KnnModel,
    pub qrf: QrfModel,
}

/// Files `{KIND}_{ZONE}.knn.json` and `{KIND}_{ZONE}.qrf.json` in `dir`.
pub fn model_paths(dir: &Path, zone: ZoneId, kind: PlantKind) -> (PathBuf, PathBuf) {
    let stem = format!("{kind}_{zone}");
    (
        dir.join(format!("{stem}.knn.json")),
        dir.join(format!("{stem}.qrf.json")),
    )
}

pub fn save_zone_models(dir: &Path, models: &ZoneModels) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (knn_path, qrf_path) = model_paths(dir, models.zone, models.kind);
    let mut out = BufWriter::new(File::create(&knn_path)?);
    models.knn.save_json(&mut out)?;
    out.flush()?;
    let mut out = BufWriter::new(File::create(&qrf_path)?);
    models.qrf.save_json(&mut out)?;
    out.flush()?;
    Ok(vec![knn_path, qrf_path])
}

pub fn load_zone_models(dir: &Path, zone: ZoneId, kind: PlantKind) -> Result<ZoneModels> {
    let (knn_path, qrf_path) = model_paths(dir, zone, kind);
    let open = |path: &Path| -> Result<BufReader<File>> {
        match File::open(path) {
            Ok(f) => Ok(BufReader::new(f)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(Error::MissingModel(path.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    };
    let knn = KnnModel::load_json(open(&knn_path)?)?;
    let qrf = QrfModel::load_json(open(&qrf_path)?)?;
    Ok(ZoneModels {
        zone,
        kind,
        knn,
        qrf,
    })
}

/// Training rows for both learners of one zone, restricted to `from < ts <= to`.
pub fn zone_training_data(
    power: &HourlySeries,
    met: &MetData,
    zone_map: &ZoneMap,
    zone: ZoneId,
    kind: PlantKind,
    from: HourlyTimestamp,
    to: HourlyTimestamp,
) -> Result<(SampleMatrix, SampleMatrix)> {
    let power = power.window(from, to);
    let build = |learner| -> Result<SampleMatrix> {
        let features = build_features(met, zone_map, zone, FeatureSpec::new(kind, learner))?;
        training_samples(&power, &features, zone, kind)
    };
    Ok((build(Learner::Knn)?, build(Learner::Qrf)?))
}

pub fn train_zone(
    knn_data: &SampleMatrix,
    qrf_data: &SampleMatrix,
    params: &PipelineParams,
) -> Result<ZoneModels> {
    let knn = fit_knn(knn_data, params.knn_for(knn_data.kind)).stage("knn fit")?;
    let qrf = fit_qrf(qrf_data, params.qrf).stage("qrf fit")?;
    Ok(ZoneModels {
        zone: knn_data.zone,
        kind: knn_data.kind,
        knn,
        qrf,
    })
}

/// A run plus per-learner outputs and post-processing details.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOutput {
    pub run: ForecastRun,
    pub knn: Vec<f64>,
    pub qrf: Vec<f64>,
    /// Applied `K_prod` per learner (or for the ensemble with
    /// [`PostprocessOrder::AfterCombine`]); empty for wind.
    pub k_prod: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// Produces the 360-hour forecast of one zone from a met forecast issued at
/// 00:00 of its run date. `tail` (PV only) holds measured rows with a `GHI`
/// column from the `n_weeks` before the run date.
pub fn run_forecast(
    models: &ZoneModels,
    met_forecast: &MetForecast,
    zone_map: &ZoneMap,
    tail: Option<&SampleMatrix>,
    params: &PipelineParams,
) -> Result<ForecastOutput> {
    params.validate()?;
    let (zone, kind) = (models.zone, models.kind);
    let run_date: NaiveDate = met_forecast.run_date;
    let origin = HourlyTimestamp::start_of(run_date);
    let (extended, flags) = extend_forecast(met_forecast).stage("persistence")?;
    let knn_x = forecast_features(
        &extended,
        zone_map,
        zone,
        FeatureSpec::new(kind, Learner::Knn),
    )
    .stage("features")?;
    let qrf_x = forecast_features(
        &extended,
        zone_map,
        zone,
        FeatureSpec::new(kind, Learner::Qrf),
    )
    .stage("features")?;

    let mut knn = Vec::with_capacity(HORIZON_HOURS);
    let mut qrf = Vec::with_capacity(HORIZON_HOURS);
    for i in 0..HORIZON_HOURS {
        let ts = knn_x.timestamps[i];
        knn.push(
            models
                .knn
                .predict(knn_x.row(i), ts.month(), ts.hour())
                .stage("knn predict")?,
        );
        qrf.push(
            models
                .qrf
                .predict(qrf_x.row(i))
                .stage("qrf predict")?
                .max(0.0),
        );
    }

    let mut k_values = Vec::new();
    let mut warnings = Vec::new();
    let combine = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| ensemble_combine(*x, *y, &params.ensemble))
            .collect()
    };
    let pp = &params.postprocess;
    let values = if kind == PlantKind::Pv && pp.enabled {
        let tail = tail.ok_or_else(|| {
            Error::InvalidArgument("PV post-processing needs a measured tail".into())
                .in_stage("postprocess")
        })?;
        let ghi: Vec<f64> = (0..HORIZON_HOURS).map(|i| knn_x.row(i)[0]).collect();
        let mut scale = |values: &[f64]| -> Result<Vec<f64>> {
            match k_prod(origin, values, &ghi, tail, pp).stage("postprocess")? {
                Ok(k) => {
                    k_values.push(Some(k));
                    Ok(values.iter().map(|v| v * k).collect())
                }
                Err(reason) => {
                    log::warn!("{zone} {kind} run {run_date}: post-processing skipped: {reason}");
                    k_values.push(None);
                    warnings.push(reason);
                    Ok(values.to_vec())
                }
            }
        };
        match pp.order {
            PostprocessOrder::BeforeCombine => {
                let a = scale(&knn)?;
                let b = scale(&qrf)?;
                combine(&a, &b)
            }
            PostprocessOrder::AfterCombine => scale(&combine(&knn, &qrf))?,
        }
    } else {
        combine(&knn, &qrf)
    };
    let run = ForecastRun::new(run_date, zone, kind, values, flags).stage("assemble")?;
    Ok(ForecastOutput {
        run,
        knn,
        qrf,
        k_prod: k_values,
        warnings,
    })
}

/// Measured rows with a `GHI` column for the `n_weeks` before `run_date`,
/// as consumed by PV post-processing.
pub fn postprocess_tail(
    power: &HourlySeries,
    met: &MetData,
    zone_map: &ZoneMap,
    zone: ZoneId,
    run_date: NaiveDate,
    n_weeks: usize,
) -> Result<SampleMatrix> {
    let origin = HourlyTimestamp::start_of(run_date);
    let from = origin.plus_hours(-(n_weeks as i64) * HOURS_PER_WEEK);
    let features = build_features(
        met,
        zone_map,
        zone,
        FeatureSpec::new(PlantKind::Pv, Learner::Knn),
    )?;
    let samples = training_samples(&power.window(from, origin), &features, zone, PlantKind::Pv)?;
    Ok(samples)
}

/// Writes runs as `run_date,zone,kind,lead_hour,timestamp,power_mw,persistence_flag`.
pub fn write_forecast_runs<W: std::io::Write>(out: W, runs: &[ForecastRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "run_date",
        "zone",
        "kind",
        "lead_hour",
        "timestamp",
        "power_mw",
        "persistence_flag",
    ])?;
    for run in runs {
        let date = run.run_date.to_string();
        for (i, (v, f)) in run.values().iter().zip(run.persistence_flag()).enumerate() {
            w.write_record([
                date.as_str(),
                run.zone.as_str(),
                run.kind.as_str(),
                &(i + 1).to_string(),
                &run.lead_timestamp(i + 1).to_string(),
                &v.to_string(),
                if *f { "1" } else { "0" },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
