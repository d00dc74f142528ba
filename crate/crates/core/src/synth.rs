//! Seeded synthetic PV and wind datasets with closed-form ground truth.
//!
//! Truth per hour, for a period-ending label `t` evaluated at mid-hour:
//!
//! * PV: `GHI_CS(t)` follows a sinusoidal day whose length and amplitude vary
//!   with the season; each zone has an AR(1) clearness index, jittered per
//!   province, and `GHI = clearness × GHI_CS`. Zone power is
//!   `capacity × efficiency × mean_GHI / 1000 × (1 + noise_frac × N(0,1))`,
//!   clipped at 0.
//! * Wind: per-zone AR(1) `UGRD`/`VGRD` with per-province jitter; zone power
//!   is `capacity × curve(mean province speed) × (1 + noise_frac × N(0,1))`.
//!
//! A met forecast issued on day `D` covers lead hours `1..=horizon` and
//! perturbs the truth with noise whose standard deviation is
//! `forecast_noise_growth × lead_day` (clearness units for PV, multiples of
//! the wind standard deviation for wind). Monthly national totals are the
//! exact hourly sums.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ingest::{
    write_forecast_csv, write_met_csv, write_power_csv, write_totals_csv, write_zone_map_csv,
    ForecastArchive, MetData, MetForecast, MonthlyNationalTotal, PowerData, ProvinceId, ZoneMap,
};
use crate::numeric::CompensatedSum;
use crate::types::{
    HourlySeries, HourlyTimestamp, MetVariable, PlantKind, Quantity, SeriesPoint, ZoneId,
    HOURS_PER_DAY,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvSynth {
    pub capacity_mw: f64,
    pub efficiency: f64,
    /// Hourly AR(1) coefficient of the clearness process.
    pub cloud_persistence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WdSynth {
    pub capacity_mw: f64,
    /// Hourly AR(1) coefficient of both wind components.
    pub ar_coef: f64,
    pub cut_in: f64,
    pub rated: f64,
    pub cut_out: f64,
    pub mean_u: f64,
    pub mean_v: f64,
    /// Standard deviation of each wind component (m/s).
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Measured data covers `start 00:00 < t <= end 00:00`.
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub zones: Vec<ZoneId>,
    pub provinces_per_zone: usize,
    pub pv: PvSynth,
    pub wd: WdSynth,
    pub noise_frac: f64,
    pub forecast_noise_growth: f64,
    /// Met forecasts are issued for every run date in this inclusive range.
    pub forecast_from: NaiveDate,
    pub forecast_to: NaiveDate,
    pub forecast_horizon_hours: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
        SynthConfig {
            seed: 7,
            start: d(2016, 1, 1),
            end: d(2017, 7, 16),
            zones: vec![ZoneId::Nord, ZoneId::Sud],
            provinces_per_zone: 3,
            pv: PvSynth {
                capacity_mw: 1000.0,
                efficiency: 0.8,
                cloud_persistence: 0.97,
            },
            wd: WdSynth {
                capacity_mw: 800.0,
                ar_coef: 0.97,
                cut_in: 3.0,
                rated: 12.0,
                cut_out: 25.0,
                mean_u: 2.0,
                mean_v: 1.0,
                sigma: 4.5,
            },
            noise_frac: 0.02,
            forecast_noise_growth: 0.02,
            forecast_from: d(2017, 1, 1),
            forecast_to: d(2017, 6, 30),
            forecast_horizon_hours: 240,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.end <= self.start {
            return fail("end must be after start");
        }
        if self.zones.is_empty() || self.provinces_per_zone == 0 {
            return fail("at least one zone with one province is required");
        }
        let mut zones = self.zones.clone();
        zones.sort();
        zones.dedup();
        if zones.len() != self.zones.len() {
            return fail("zones must be distinct");
        }
        if self.zones.len() * self.provinces_per_zone > crate::ingest::PROVINCE_COUNT as usize {
            return fail("too many provinces");
        }
        if !(self.pv.capacity_mw > 0.0 && self.wd.capacity_mw > 0.0) {
            return fail("capacities must be > 0");
        }
        if !(self.pv.efficiency > 0.0) {
            return fail("pv efficiency must be > 0");
        }
        for phi in [self.pv.cloud_persistence, self.wd.ar_coef] {
            if !(0.0..1.0).contains(&phi) {
                return fail("AR coefficients must lie in [0, 1)");
            }
        }
        let w = &self.wd;
        if !(0.0 <= w.cut_in && w.cut_in < w.rated && w.rated < w.cut_out) {
            return fail("wind speeds must satisfy cut_in < rated < cut_out");
        }
        if !(w.sigma >= 0.0) {
            return fail("wind sigma must be >= 0");
        }
        if !(self.noise_frac >= 0.0 && self.forecast_noise_growth >= 0.0) {
            return fail("noise levels must be >= 0");
        }
        let h = self.forecast_horizon_hours;
        if h < HOURS_PER_DAY || h % HOURS_PER_DAY != 0 || h > crate::types::HORIZON_HOURS {
            return fail("forecast horizon must be a whole number of days between 1 and 15");
        }
        if self.forecast_to < self.forecast_from {
            return fail("forecast_to is before forecast_from");
        }
        if self.forecast_from < self.start
            || HourlyTimestamp::start_of(self.forecast_to).plus_hours(h as i64)
                > HourlyTimestamp::start_of(self.end)
        {
            return fail(
                "forecast run dates must lie within the measured period, horizon included",
            );
        }
        Ok(())
    }

    pub fn zone_map(&self) -> ZoneMap {
        let mut assignments = Vec::new();
        for (i, zone) in self.zones.iter().enumerate() {
            for j in 0..self.provinces_per_zone {
                let id = (i * self.provinces_per_zone + j + 1) as u16;
                assignments.push((ProvinceId::new(id).expect("validated count"), *zone));
            }
        }
        ZoneMap::new(assignments).expect("distinct provinces")
    }

    fn hours(&self) -> Vec<HourlyTimestamp> {
        let from = HourlyTimestamp::start_of(self.start);
        let n = HourlyTimestamp::start_of(self.end).hours_since(from);
        (1..=n).map(|h| from.plus_hours(h)).collect()
    }

    fn run_dates(&self) -> Vec<NaiveDate> {
        self.forecast_from
            .iter_days()
            .take_while(|d| *d <= self.forecast_to)
            .collect()
    }
}

/// Clear-sky irradiance (W/m²) of the hour ending at `ts`, evaluated at mid-hour.
pub fn clear_sky_ghi(ts: HourlyTimestamp) -> f64 {
    let mid = ts.to_naive() - chrono::Duration::minutes(30);
    let season = (2.0 * PI * (mid.ordinal() as f64 - 80.0) / 365.25).sin();
    let day_length = 12.0 + 3.5 * season;
    let amplitude = 700.0 + 250.0 * season;
    let hour = mid.hour() as f64 + mid.minute() as f64 / 60.0;
    let x = (hour - (11.5 - day_length / 2.0)) / day_length;
    if x > 0.0 && x < 1.0 {
        amplitude * (PI * x).sin()
    } else {
        0.0
    }
}

/// Noiseless PV zone power for a zone-mean irradiance.
pub fn pv_power(cfg: &PvSynth, mean_ghi: f64) -> f64 {
    (cfg.capacity_mw * cfg.efficiency * mean_ghi / 1000.0).max(0.0)
}

/// Fraction of capacity produced at wind speed `v`.
pub fn wind_power_curve(cfg: &WdSynth, v: f64) -> f64 {
    if v < cfg.cut_in || v > cfg.cut_out {
        0.0
    } else if v < cfg.rated {
        let c3 = cfg.cut_in.powi(3);
        (v.powi(3) - c3) / (cfg.rated.powi(3) - c3)
    } else {
        1.0
    }
}

/// Generated series and files for one or both plant kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub power: PowerData,
    pub met: MetData,
    pub totals: Vec<MonthlyNationalTotal>,
    pub zone_map: ZoneMap,
    pub forecasts: ForecastArchive,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn forecast_rng(seed: u64, kind: PlantKind, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = match kind {
        PlantKind::Pv => 0,
        PlantKind::Wd => 1,
    };
    rng.set_stream(16 + 2 * run as u64 + k);
    rng
}

fn monthly_totals(power: &PowerData, kind: PlantKind) -> Vec<MonthlyNationalTotal> {
    let mut sums: BTreeMap<(i32, u32), CompensatedSum> = BTreeMap::new();
    for ((_, k), series) in power {
        if *k != kind {
            continue;
        }
        for (ts, v) in series.present() {
            sums.entry((ts.year(), ts.month())).or_default().add(v);
        }
    }
    sums.into_iter()
        .map(|((year, month), s)| MonthlyNationalTotal {
            year,
            month,
            kind,
            energy_mwh: s.value(),
        })
        .collect()
}

fn series_from(quantity: Quantity, hours: &[HourlyTimestamp], values: Vec<f64>) -> HourlySeries {
    HourlySeries::new(
        quantity,
        hours
            .iter()
            .zip(values)
            .map(|(t, v)| SeriesPoint::present(*t, v))
            .collect(),
    )
}

/// Measured-style values per province in zone order: `values[p][t]`.
struct ProvinceTable {
    provinces: Vec<ProvinceId>,
    values: Vec<Vec<f64>>,
}

pub fn generate_pv_dataset(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let zone_map = cfg.zone_map();
    let hours = cfg.hours();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let phi = cfg.pv.cloud_persistence;
    let innovation = (1.0 - phi * phi).sqrt();
    let cs: Vec<f64> = hours.iter().map(|t| clear_sky_ghi(*t)).collect();

    let mut latent = vec![0.0; cfg.zones.len()];
    let mut clearness: Vec<ProvinceTable> = cfg
        .zones
        .iter()
        .map(|z| ProvinceTable {
            provinces: zone_map.provinces(*z).to_vec(),
            values: vec![Vec::with_capacity(hours.len()); cfg.provinces_per_zone],
        })
        .collect();
    let mut zone_power = vec![Vec::with_capacity(hours.len()); cfg.zones.len()];
    for t in 0..hours.len() {
        for (z, table) in clearness.iter_mut().enumerate() {
            latent[z] = phi * latent[z] + innovation * normal(&mut rng);
            let base = 0.72 + 0.22 * latent[z];
            let mut sum = 0.0;
            for col in table.values.iter_mut() {
                let c = (base + 0.03 * normal(&mut rng)).clamp(0.0, 1.0);
                col.push(c);
                sum += c * cs[t];
            }
            let mean_ghi = sum / cfg.provinces_per_zone as f64;
            let noise = 1.0 + cfg.noise_frac * normal(&mut rng);
            zone_power[z].push((pv_power(&cfg.pv, mean_ghi) * noise).max(0.0));
        }
    }

    let mut power = PowerData::new();
    let mut met = MetData::new();
    for (z, zone) in cfg.zones.iter().enumerate() {
        power.insert(
            (*zone, PlantKind::Pv),
            series_from(Quantity::Power, &hours, std::mem::take(&mut zone_power[z])),
        );
        let table = &clearness[z];
        for (p, province) in table.provinces.iter().enumerate() {
            let ghi: Vec<f64> = table.values[p]
                .iter()
                .zip(&cs)
                .map(|(c, s)| c * s)
                .collect();
            met.insert(
                (*province, MetVariable::Ghi),
                series_from(Quantity::Met(MetVariable::Ghi), &hours, ghi),
            );
            met.insert(
                (*province, MetVariable::GhiCs),
                series_from(Quantity::Met(MetVariable::GhiCs), &hours, cs.clone()),
            );
        }
    }

    let first = hours[0];
    let mut forecasts = ForecastArchive::new();
    for (r, date) in cfg.run_dates().into_iter().enumerate() {
        let mut rng = forecast_rng(cfg.seed, PlantKind::Pv, r);
        let offset = HourlyTimestamp::start_of(date).hours_since(first) as usize;
        let mut series = BTreeMap::new();
        for table in &clearness {
            let deltas: Vec<f64> = (1..=cfg.forecast_horizon_hours)
                .map(|h| {
                    normal(&mut rng) * cfg.forecast_noise_growth * crate::types::lead_day(h) as f64
                })
                .collect();
            for (p, province) in table.provinces.iter().enumerate() {
                let mut ghi = Vec::with_capacity(deltas.len());
                let mut ghi_cs = Vec::with_capacity(deltas.len());
                for (i, d) in deltas.iter().enumerate() {
                    let t = offset + 1 + i;
                    ghi.push((table.values[p][t] + d).clamp(0.0, 1.0) * cs[t]);
                    ghi_cs.push(cs[t]);
                }
                series.insert((*province, MetVariable::Ghi), ghi);
                series.insert((*province, MetVariable::GhiCs), ghi_cs);
            }
        }
        forecasts.insert(
            date,
            MetForecast {
                run_date: date,
                series,
            },
        );
    }

    let totals = monthly_totals(&power, PlantKind::Pv);
    Ok(SynthData {
        power,
        met,
        totals,
        zone_map,
        forecasts,
    })
}

pub fn generate_wd_dataset(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let zone_map = cfg.zone_map();
    let hours = cfg.hours();
    let w = cfg.wd;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let innovation = (1.0 - w.ar_coef * w.ar_coef).sqrt();

    let n_p = cfg.provinces_per_zone;
    let mut latent = vec![(0.0, 0.0); cfg.zones.len()];
    // u[z][p][t], v[z][p][t]
    let mut u = vec![vec![Vec::with_capacity(hours.len()); n_p]; cfg.zones.len()];
    let mut v = u.clone();
    let mut zone_power = vec![Vec::with_capacity(hours.len()); cfg.zones.len()];
    for _ in 0..hours.len() {
        for z in 0..cfg.zones.len() {
            let (lu, lv) = latent[z];
            let lu = w.ar_coef * lu + innovation * normal(&mut rng);
            let lv = w.ar_coef * lv + innovation * normal(&mut rng);
            latent[z] = (lu, lv);
            let mut speed = 0.0;
            for p in 0..n_p {
                let up = w.mean_u + w.sigma * lu + 0.5 * normal(&mut rng);
                let vp = w.mean_v + w.sigma * lv + 0.5 * normal(&mut rng);
                speed += up.hypot(vp);
                u[z][p].push(up);
                v[z][p].push(vp);
            }
            let noise = 1.0 + cfg.noise_frac * normal(&mut rng);
            zone_power[z]
                .push((w.capacity_mw * wind_power_curve(&w, speed / n_p as f64) * noise).max(0.0));
        }
    }

    let mut power = PowerData::new();
    let mut met = MetData::new();
    for (z, zone) in cfg.zones.iter().enumerate() {
        power.insert(
            (*zone, PlantKind::Wd),
            series_from(Quantity::Power, &hours, std::mem::take(&mut zone_power[z])),
        );
        for (p, province) in zone_map.provinces(*zone).iter().enumerate() {
            met.insert(
                (*province, MetVariable::Ugrd),
                series_from(Quantity::Met(MetVariable::Ugrd), &hours, u[z][p].clone()),
            );
            met.insert(
                (*province, MetVariable::Vgrd),
                series_from(Quantity::Met(MetVariable::Vgrd), &hours, v[z][p].clone()),
            );
        }
    }

    let first = hours[0];
    let mut forecasts = ForecastArchive::new();
    for (r, date) in cfg.run_dates().into_iter().enumerate() {
        let mut rng = forecast_rng(cfg.seed, PlantKind::Wd, r);
        let offset = HourlyTimestamp::start_of(date).hours_since(first) as usize;
        let mut series = BTreeMap::new();
        for (z, zone) in cfg.zones.iter().enumerate() {
            let deltas: Vec<(f64, f64)> = (1..=cfg.forecast_horizon_hours)
                .map(|h| {
                    let sd = w.sigma * cfg.forecast_noise_growth * crate::types::lead_day(h) as f64;
                    (normal(&mut rng) * sd, normal(&mut rng) * sd)
                })
                .collect();
            for (p, province) in zone_map.provinces(*zone).iter().enumerate() {
                let range = offset + 1..offset + 1 + deltas.len();
                let fu = u[z][p][range.clone()]
                    .iter()
                    .zip(&deltas)
                    .map(|(x, d)| x + d.0)
                    .collect();
                let fv = v[z][p][range]
                    .iter()
                    .zip(&deltas)
                    .map(|(x, d)| x + d.1)
                    .collect();
                series.insert((*province, MetVariable::Ugrd), fu);
                series.insert((*province, MetVariable::Vgrd), fv);
            }
        }
        forecasts.insert(
            date,
            MetForecast {
                run_date: date,
                series,
            },
        );
    }

    let totals = monthly_totals(&power, PlantKind::Wd);
    Ok(SynthData {
        power,
        met,
        totals,
        zone_map,
        forecasts,
    })
}

impl SynthData {
    /// Union of two datasets generated from the same configuration.
    pub fn merge(mut self, other: SynthData) -> Result<SynthData> {
        if self.zone_map != other.zone_map {
            return Err(Error::InvalidArgument(
                "cannot merge datasets with different zone maps".into(),
            ));
        }
        self.power.extend(other.power);
        self.met.extend(other.met);
        self.totals.extend(other.totals);
        self.totals
            .sort_by(|a, b| (a.year, a.month, a.kind).cmp(&(b.year, b.month, b.kind)));
        for (date, fc) in other.forecasts {
            self.forecasts
                .entry(date)
                .or_insert_with(|| MetForecast {
                    run_date: date,
                    series: BTreeMap::new(),
                })
                .series
                .extend(fc.series);
        }
        Ok(self)
    }

    pub fn into_dataset(self) -> Dataset {
        Dataset {
            power: self.power,
            met: self.met,
            totals: Some(self.totals),
            zone_map: self.zone_map,
            forecasts: self.forecasts,
        }
    }

    /// Writes `power.csv`, `met.csv`, `totals.csv`, `met_forecast.csv` and
    /// `zone_map.csv` into `dir`; returns the paths.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let path = |name: &str| dir.join(name);
        let create =
            |p: &PathBuf| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(p)?)) };
        let files = [
            path("power.csv"),
            path("met.csv"),
            path("totals.csv"),
            path("met_forecast.csv"),
            path("zone_map.csv"),
        ];
        write_power_csv(create(&files[0])?, &self.power)?;
        write_met_csv(create(&files[1])?, &self.met)?;
        write_totals_csv(create(&files[2])?, &self.totals)?;
        write_forecast_csv(create(&files[3])?, &self.forecasts)?;
        write_zone_map_csv(create(&files[4])?, &self.zone_map)?;
        Ok(files.to_vec())
    }
}

/// Both kinds from one configuration.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    generate_pv_dataset(cfg)?.merge(generate_wd_dataset(cfg)?)
}
