//! Training-data cleaning: monthly proportional rescaling against national
//! totals, the irradiance/power safety cone for PV outliers, and spline
//! filling of short gaps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::MonthlyNationalTotal;
use crate::numeric::{median, CompensatedSum};
use crate::spline::NaturalCubicSpline;
use crate::types::{HourlySeries, PlantKind, SeriesPoint, ZoneId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Width of the outlier band in MADs.
    pub cone_threshold: f64,
    /// Irradiance below which an hour is treated as night (W/m²).
    pub ghi_floor: f64,
    /// Longest run of missing hours that is interpolated.
    pub max_gap_hours: usize,
    /// Band half-width as a fraction of the median ratio when the MAD is 0.
    pub mad_fallback_frac: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            cone_threshold: 5.0,
            ghi_floor: 20.0,
            max_gap_hours: 6,
            mad_fallback_frac: 0.1,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cone_threshold > 0.0) {
            return Err(Error::Config(
                "preprocess.cone_threshold must be > 0".into(),
            ));
        }
        if !(self.ghi_floor >= 0.0) {
            return Err(Error::Config("preprocess.ghi_floor must be >= 0".into()));
        }
        if self.max_gap_hours < 1 {
            return Err(Error::Config(
                "preprocess.max_gap_hours must be >= 1".into(),
            ));
        }
        if !(self.mad_fallback_frac > 0.0 && self.mad_fallback_frac < 1.0) {
            return Err(Error::Config(
                "preprocess.mad_fallback_frac must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Scales every zone's hourly values by one factor per calendar month so the
/// national sum over all zones matches the monthly national energy.
pub fn monthly_rescale(
    zonal: &BTreeMap<ZoneId, HourlySeries>,
    totals: &[MonthlyNationalTotal],
    kind: PlantKind,
) -> Result<BTreeMap<ZoneId, HourlySeries>> {
    let mut sums: BTreeMap<(i32, u32), CompensatedSum> = BTreeMap::new();
    for series in zonal.values() {
        for (ts, v) in series.present() {
            sums.entry((ts.year(), ts.month())).or_default().add(v);
        }
    }
    let energy: BTreeMap<(i32, u32), f64> = totals
        .iter()
        .filter(|t| t.kind == kind)
        .map(|t| ((t.year, t.month), t.energy_mwh))
        .collect();

    let mut factors = BTreeMap::new();
    for ((year, month), sum) in sums {
        let e = *energy
            .get(&(year, month))
            .ok_or_else(|| Error::MissingTotal {
                year,
                month,
                kind: kind.to_string(),
            })?;
        let s = sum.value();
        let f = if s == 0.0 {
            if e > 0.0 {
                return Err(Error::DegenerateMonth {
                    year,
                    month,
                    total: e,
                });
            }
            1.0
        } else {
            e / s
        };
        factors.insert((year, month), f);
    }

    Ok(zonal
        .iter()
        .map(|(zone, series)| {
            let points = series
                .points
                .iter()
                .map(|p| SeriesPoint {
                    ts: p.ts,
                    value: p.value.map(|v| v * factors[&(p.ts.year(), p.ts.month())]),
                })
                .collect();
            (*zone, HourlySeries::new(series.quantity, points))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeStats {
    pub median_ratio: f64,
    pub mad: f64,
    /// Maximum allowed |ratio − median|.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeResult {
    /// `true` marks an outlier.
    pub outliers: Vec<bool>,
    /// `None` when no pair was above the irradiance floor.
    pub stats: Option<ConeStats>,
}

impl ConeResult {
    pub fn outlier_count(&self) -> usize {
        self.outliers.iter().filter(|o| **o).count()
    }
}

/// Flags (irradiance, power) pairs whose power-to-irradiance ratio leaves a
/// median/MAD band; a band on the ratio is a cone through the origin of the
/// (irradiance, power) plane. Night hours below `ghi_floor` are never flagged.
pub fn cone_filter(pairs: &[(f64, f64)], cfg: &PreprocessConfig) -> Result<ConeResult> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "cone filter needs at least one pair".into(),
        ));
    }
    let eligible = |ghi: f64| ghi >= cfg.ghi_floor && ghi > 0.0;
    let ratios: Vec<f64> = pairs
        .iter()
        .filter(|(g, _)| eligible(*g))
        .map(|(g, p)| p / g)
        .collect();
    let Some(med) = median(&ratios) else {
        log::warn!(
            "safety cone: all {} pairs are below the irradiance floor",
            pairs.len()
        );
        return Ok(ConeResult {
            outliers: vec![false; pairs.len()],
            stats: None,
        });
    };
    let deviations: Vec<f64> = ratios.iter().map(|r| (r - med).abs()).collect();
    let mad = median(&deviations).expect("non-empty");
    let bound = if mad > 0.0 {
        cfg.cone_threshold * mad
    } else {
        cfg.cone_threshold * cfg.mad_fallback_frac * med.abs()
    };
    let outliers = pairs
        .iter()
        .map(|(g, p)| eligible(*g) && (p / g - med).abs() > bound)
        .collect();
    Ok(ConeResult {
        outliers,
        stats: Some(ConeStats {
            median_ratio: med,
            mad,
            bound,
        }),
    })
}

/// Fills interior runs of at most `max_gap_hours` missing hours with a
/// natural cubic spline through all present points. Absent hours count as
/// missing. Longer runs and leading/trailing runs stay missing.
pub fn spline_fill(s: &HourlySeries, max_gap_hours: usize) -> Result<HourlySeries> {
    let reg = s.regularized();
    let n = reg.points.len();
    let first_present = reg.points.iter().position(|p| p.value.is_some());
    let last_present = reg.points.iter().rposition(|p| p.value.is_some());
    let (Some(lo), Some(hi)) = (first_present, last_present) else {
        return Ok(reg);
    };

    let mut runs = Vec::new();
    let mut i = lo;
    while i <= hi {
        if reg.points[i].value.is_none() {
            let start = i;
            while reg.points[i].value.is_none() {
                i += 1;
            }
            if i - start <= max_gap_hours {
                runs.push(start..i);
            }
        } else {
            i += 1;
        }
    }
    if runs.is_empty() {
        return Ok(reg);
    }

    let origin = reg.points[0].ts;
    let (xs, ys): (Vec<f64>, Vec<f64>) = reg
        .present()
        .map(|(ts, v)| (ts.hours_since(origin) as f64, v))
        .unzip();
    if xs.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "spline fill needs at least 4 present points, found {}",
            xs.len()
        )));
    }
    let spline = NaturalCubicSpline::fit(&xs, &ys)?;
    let clip = reg.quantity.is_nonnegative();
    let mut points = reg.points;
    for run in runs {
        for p in &mut points[run] {
            let v = spline.eval(p.ts.hours_since(origin) as f64);
            p.value = Some(if clip { v.max(0.0) } else { v });
        }
    }
    debug_assert_eq!(points.len(), n);
    Ok(HourlySeries::new(reg.quantity, points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{HourlyTimestamp, MetVariable, Quantity};
    use proptest::prelude::*;

    fn series(start: HourlyTimestamp, values: &[Option<f64>]) -> HourlySeries {
        HourlySeries::contiguous(Quantity::Power, start, values)
    }

    fn jan(h: i64) -> HourlyTimestamp {
        HourlyTimestamp::from_ymdh(2017, 1, 10, 0)
            .unwrap()
            .plus_hours(h)
    }

    fn total(energy: f64) -> MonthlyNationalTotal {
        MonthlyNationalTotal {
            year: 2017,
            month: 1,
            kind: PlantKind::Pv,
            energy_mwh: energy,
        }
    }

    #[test]
    fn rescale_hand_factor() {
        let mut zonal = BTreeMap::new();
        zonal.insert(ZoneId::Nord, series(jan(0), &[Some(300.0), Some(200.0)]));
        zonal.insert(ZoneId::Sud, series(jan(0), &[Some(400.0), None, Some(0.0)]));
        let out = monthly_rescale(&zonal, &[total(1000.0)], PlantKind::Pv).unwrap();
        let nord: Vec<_> = out[&ZoneId::Nord].present().map(|(_, v)| v).collect();
        assert!((nord[0] - 300.0 * 10.0 / 9.0).abs() < 1e-9);
        let sum: f64 = out.values().flat_map(|s| s.present().map(|(_, v)| v)).sum();
        assert!((sum - 1000.0).abs() / 1000.0 < 1e-9);
        assert_eq!(out[&ZoneId::Sud].points[1].value, None);
        assert_eq!(out[&ZoneId::Sud].points[2].value, Some(0.0));
    }

    #[test]
    fn rescale_identity_when_sum_matches() {
        let mut zonal = BTreeMap::new();
        zonal.insert(
            ZoneId::Nord,
            series(jan(0), &[Some(0.1), Some(0.7), Some(1.3)]),
        );
        let s: f64 = crate::numeric::compensated_sum([0.1, 0.7, 1.3]);
        let out = monthly_rescale(&zonal, &[total(s)], PlantKind::Pv).unwrap();
        assert_eq!(out, zonal);
    }

    #[test]
    fn rescale_vacuous_and_degenerate_months() {
        let mut zonal = BTreeMap::new();
        zonal.insert(ZoneId::Nord, series(jan(0), &[Some(0.0), Some(0.0)]));
        assert_eq!(
            monthly_rescale(&zonal, &[total(0.0)], PlantKind::Pv).unwrap(),
            zonal
        );
        assert!(matches!(
            monthly_rescale(&zonal, &[total(5.0)], PlantKind::Pv),
            Err(Error::DegenerateMonth { .. })
        ));
        assert!(matches!(
            monthly_rescale(&zonal, &[], PlantKind::Pv),
            Err(Error::MissingTotal { .. })
        ));
    }

    proptest! {
        #[test]
        fn rescale_is_one_positive_scalar_per_month(
            values in prop::collection::vec(0.0f64..1e3, 2..100),
            energy in 1.0f64..1e6,
        ) {
            let vals: Vec<_> = values.iter().map(|v| Some(*v)).collect();
            let mut zonal = BTreeMap::new();
            zonal.insert(ZoneId::Csud, series(jan(0), &vals));
            let out = monthly_rescale(&zonal, &[total(energy)], PlantKind::Pv);
            prop_assume!(values.iter().any(|v| *v > 0.0));
            let out = out.unwrap();
            let scaled: Vec<f64> = out[&ZoneId::Csud].present().map(|(_, v)| v).collect();
            let sum = crate::numeric::compensated_sum(scaled.iter().copied());
            prop_assert!((sum - energy).abs() / energy < 1e-9);
            for (a, b) in values.iter().zip(&scaled) {
                prop_assert_eq!(*a == 0.0, *b == 0.0);
            }
            let (a0, b0) = values.iter().zip(&scaled).find(|(a, _)| **a > 1e-6).unwrap();
            let f = b0 / a0;
            prop_assert!(f > 0.0);
            for (a, b) in values.iter().zip(&scaled) {
                if *a > 1e-6 {
                    prop_assert!(((b / a) - f).abs() <= 1e-12 * f);
                }
            }
        }
    }

    #[test]
    fn cone_hand_fixture() {
        let cfg = PreprocessConfig::default();
        let pairs = [(100.0, 10.0), (100.0, 11.0), (100.0, 9.0), (100.0, 50.0)];
        let r = cone_filter(&pairs, &cfg).unwrap();
        assert_eq!(r.outliers, vec![false, false, false, true]);
        let stats = r.stats.unwrap();
        assert!((stats.median_ratio - 0.105).abs() < 1e-12);
        assert!((stats.mad - 0.010).abs() < 1e-12);
        assert!((stats.bound - 0.05).abs() < 1e-12);
    }

    #[test]
    fn cone_constant_ratio_uses_fallback() {
        let pairs: Vec<_> = (1..20).map(|i| (i as f64 * 50.0, i as f64 * 5.0)).collect();
        let r = cone_filter(&pairs, &PreprocessConfig::default()).unwrap();
        let stats = r.stats.unwrap();
        assert_eq!(stats.mad, 0.0);
        assert!(stats.bound > 0.0);
        assert_eq!(r.outlier_count(), 0);
    }

    #[test]
    fn cone_night_exemption() {
        let pairs = [(0.0, 40.0), (200.0, 20.0), (300.0, 30.0), (400.0, 40.0)];
        let r = cone_filter(&pairs, &PreprocessConfig::default()).unwrap();
        assert!(!r.outliers[0]);

        let dark = [(1.0, 3.0), (5.0, 100.0)];
        let r = cone_filter(&dark, &PreprocessConfig::default()).unwrap();
        assert!(r.stats.is_none());
        assert_eq!(r.outlier_count(), 0);
    }

    proptest! {
        #[test]
        fn cone_is_scale_equivariant(
            pairs in prop::collection::vec((20.0f64..1000.0, 0.0f64..500.0), 1..60),
            c in 1.0f64..50.0,
        ) {
            let cfg = PreprocessConfig::default();
            let a = cone_filter(&pairs, &cfg).unwrap();
            let scaled: Vec<_> = pairs.iter().map(|(g, p)| (g * c, p * c)).collect();
            let b = cone_filter(&scaled, &cfg).unwrap();
            // Ratios equal up to rounding; exclude pairs sitting on the band edge.
            let stats = a.stats.unwrap();
            for (i, (g, p)) in pairs.iter().enumerate() {
                let margin = ((p / g) - stats.median_ratio).abs() - stats.bound;
                if margin.abs() > 1e-9 {
                    prop_assert_eq!(a.outliers[i], b.outliers[i]);
                }
            }
        }
    }

    #[test]
    fn spline_fills_collinear_gap_exactly() {
        let s = series(
            jan(0),
            &[Some(0.0), Some(1.0), Some(2.0), None, Some(4.0), Some(5.0)],
        );
        let f = spline_fill(&s, 6).unwrap();
        assert_eq!(f.points[3].value, Some(3.0));
        for i in [0, 1, 2, 4, 5] {
            assert_eq!(f.points[i], s.points[i]);
        }
    }

    #[test]
    fn spline_identity_without_gaps() {
        let s = series(jan(0), &[Some(3.0), Some(1.0), Some(2.0)]);
        assert_eq!(spline_fill(&s, 6).unwrap(), s);
    }

    #[test]
    fn spline_leaves_long_gaps() {
        let mut vals: Vec<Option<f64>> = (0..20).map(|i| Some(i as f64)).collect();
        for v in &mut vals[5..12] {
            *v = None;
        }
        let s = series(jan(0), &vals);
        assert_eq!(spline_fill(&s, 6).unwrap(), s);
        let filled = spline_fill(&s, 7).unwrap();
        assert!(filled.points.iter().all(|p| p.value.is_some()));
    }

    #[test]
    fn spline_insufficient_points() {
        let s = series(jan(0), &[Some(1.0), None, Some(2.0), Some(3.0)]);
        assert!(matches!(
            spline_fill(&s, 6),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn spline_fills_absent_hours_and_clips() {
        let s = HourlySeries::new(
            Quantity::Power,
            vec![
                SeriesPoint::present(jan(0), 10.0),
                SeriesPoint::present(jan(1), 0.0),
                SeriesPoint::present(jan(4), 0.0),
                SeriesPoint::present(jan(5), 10.0),
            ],
        );
        let f = spline_fill(&s, 6).unwrap();
        assert_eq!(f.len(), 6);
        assert!(f.present().all(|(_, v)| v >= 0.0));

        // Wind components are not clipped.
        let u = HourlySeries::new(Quantity::Met(MetVariable::Ugrd), s.points.clone());
        let fu = spline_fill(&u, 6).unwrap();
        assert!(fu.points[2].value.unwrap() < 0.0);
    }

    #[test]
    fn spline_fill_is_c2_at_known_boundaries() {
        let vals: Vec<Option<f64>> = (0..30)
            .map(|i| {
                if (12..15).contains(&i) {
                    None
                } else {
                    Some((i as f64 * 0.4).sin() * 10.0 + 20.0)
                }
            })
            .collect();
        let s = series(jan(0), &vals);
        let f = spline_fill(&s, 6).unwrap();
        let (xs, ys): (Vec<f64>, Vec<f64>) = s
            .present()
            .map(|(t, v)| (t.hours_since(jan(0)) as f64, v))
            .unzip();
        let spline = NaturalCubicSpline::fit(&xs, &ys).unwrap();
        // Second derivative is continuous across the gap edges at 11 and 15.
        for k in [11.0, 15.0] {
            let left = spline.second_derivative(k - 1e-9);
            let right = spline.second_derivative(k + 1e-9);
            assert!((left - right).abs() < 1e-6);
        }
        for i in 12..15 {
            let v = f.points[i].value.unwrap();
            assert!((v - spline.eval(i as f64)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn spline_fill_is_idempotent(
            vals in prop::collection::vec(prop::option::weighted(0.8, 0.0f64..100.0), 4..80),
            max_gap in 1usize..8,
        ) {
            let s = series(jan(0), &vals);
            if let Ok(once) = spline_fill(&s, max_gap) {
                let twice = spline_fill(&once, max_gap).unwrap();
                prop_assert_eq!(once, twice);
            }
        }
    }
}
