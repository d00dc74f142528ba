//! A complete set of inputs and its cleaning pass.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result, StageExt};
use crate::ingest::{ForecastArchive, MetData, MonthlyNationalTotal, PowerData, ZoneMap};
use crate::pipeline::{build_features, FeatureSpec, Learner};
use crate::preprocess::{cone_filter, monthly_rescale, spline_fill, PreprocessConfig};
use crate::types::{validate_hourly_series, HourlySeries, PlantKind, SeriesPoint, ZoneId};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub power: PowerData,
    pub met: MetData,
    /// National monthly energy; rescaling is skipped when absent.
    pub totals: Option<Vec<MonthlyNationalTotal>>,
    pub zone_map: ZoneMap,
    pub forecasts: ForecastArchive,
}

impl Dataset {
    pub fn zones(&self, kind: PlantKind) -> Vec<ZoneId> {
        self.power
            .keys()
            .filter(|(_, k)| *k == kind)
            .map(|(z, _)| *z)
            .collect()
    }

    pub fn power_series(&self, zone: ZoneId, kind: PlantKind) -> Result<&HourlySeries> {
        self.power
            .get(&(zone, kind))
            .ok_or_else(|| Error::Config(format!("no {kind} power series for zone {zone}")))
    }

    /// Rejects series that break the hourly-series invariants.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for ((zone, kind), s) in &self.power {
            problems.extend(
                validate_hourly_series(s)
                    .iter()
                    .map(|v| format!("{zone} {kind} power: {v}")),
            );
        }
        for ((p, var), s) in &self.met {
            problems.extend(
                validate_hourly_series(s)
                    .iter()
                    .map(|v| format!("province {p} {var}: {v}")),
            );
        }
        if problems.is_empty() {
            Ok(())
        } else {
            let shown: Vec<_> = problems.iter().take(5).cloned().collect();
            Err(Error::Format(format!(
                "{} series violation(s): {}",
                problems.len(),
                shown.join("; ")
            )))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PreprocessReport {
    pub rescaled_kinds: Vec<PlantKind>,
    /// PV hours removed by the safety cone, per zone.
    pub cone_outliers: BTreeMap<ZoneId, usize>,
    /// Hours filled by spline interpolation, power and met together.
    pub filled_hours: usize,
    /// Hours still missing after filling.
    pub missing_hours: usize,
}

fn missing(s: &HourlySeries) -> usize {
    s.regularized()
        .points
        .iter()
        .filter(|p| p.value.is_none())
        .count()
}

/// Monthly rescale against national totals, safety-cone outlier removal for
/// PV and spline filling of short gaps, in that order.
pub fn preprocess_dataset(
    ds: &Dataset,
    cfg: &PreprocessConfig,
) -> Result<(Dataset, PreprocessReport)> {
    cfg.validate()?;
    ds.validate().stage("validate")?;
    let mut report = PreprocessReport::default();
    let mut power = ds.power.clone();

    if let Some(totals) = &ds.totals {
        for kind in [PlantKind::Pv, PlantKind::Wd] {
            let zonal: BTreeMap<ZoneId, HourlySeries> = power
                .iter()
                .filter(|((_, k), _)| *k == kind)
                .map(|((z, _), s)| (*z, s.clone()))
                .collect();
            if zonal.is_empty() {
                continue;
            }
            for (zone, s) in monthly_rescale(&zonal, totals, kind).stage("rescale")? {
                power.insert((zone, kind), s);
            }
            report.rescaled_kinds.push(kind);
        }
    } else {
        log::warn!("no national totals supplied; monthly rescaling skipped");
    }

    for zone in ds.zones(PlantKind::Pv) {
        let features = build_features(
            &ds.met,
            &ds.zone_map,
            zone,
            FeatureSpec::new(PlantKind::Pv, Learner::Knn),
        )
        .stage("cone filter")?;
        let series = &power[&(zone, PlantKind::Pv)];
        let mut index = Vec::new();
        let mut pairs = Vec::new();
        for (i, p) in series.points.iter().enumerate() {
            if let (Some(v), Ok(row)) = (p.value, features.timestamps.binary_search(&p.ts)) {
                index.push(i);
                pairs.push((features.row(row)[0], v));
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let cone = cone_filter(&pairs, cfg).stage("cone filter")?;
        let mut points = series.points.clone();
        for (i, outlier) in index.iter().zip(&cone.outliers) {
            if *outlier {
                points[*i] = SeriesPoint::missing(points[*i].ts);
            }
        }
        report.cone_outliers.insert(zone, cone.outlier_count());
        power.insert(
            (zone, PlantKind::Pv),
            HourlySeries::new(series.quantity, points),
        );
    }

    let mut fill = |s: &HourlySeries| -> Result<HourlySeries> {
        let before = missing(s);
        let filled = spline_fill(s, cfg.max_gap_hours).stage("spline fill")?;
        let after = missing(&filled);
        report.filled_hours += before - after;
        report.missing_hours += after;
        Ok(filled)
    };
    let power = power
        .iter()
        .map(|(k, s)| Ok((*k, fill(s)?)))
        .collect::<Result<PowerData>>()?;
    let met = ds
        .met
        .iter()
        .map(|(k, s)| Ok((*k, fill(s)?)))
        .collect::<Result<MetData>>()?;

    Ok((
        Dataset {
            power,
            met,
            totals: ds.totals.clone(),
            zone_map: ds.zone_map.clone(),
            forecasts: ds.forecasts.clone(),
        },
        report,
    ))
}
