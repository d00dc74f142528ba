//! Run configuration: flat `section.key = value` lines.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory of the config file. Unknown keys and
//! repeated keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use zonecast::knn::CalendarWindow;
use zonecast::pipeline::{PipelineParams, PostprocessOrder};
use zonecast::preprocess::PreprocessConfig;
use zonecast::synth::SynthConfig;
use zonecast::tune::TuneGrid;
use zonecast::types::{PlantKind, ZoneId};

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "data.power",
    "data.met",
    "data.totals",
    "data.zone_map",
    "data.forecasts",
    "output.dir",
    "preprocess.cone_threshold",
    "preprocess.ghi_floor",
    "preprocess.max_gap_hours",
    "preprocess.mad_fallback_frac",
    "knn.k",
    "knn.epsilon",
    "knn.window",
    "knn.month_window",
    "knn.hour_window",
    "qrf.n_trees",
    "qrf.min_leaf",
    "qrf.mtry",
    "qrf.max_depth",
    "qrf.seed",
    "qrf.quantile",
    "pipeline.weight_knn",
    "pipeline.postprocess",
    "pipeline.postprocess_order",
    "pipeline.n_weeks",
    "pipeline.ghi_floor",
    "backtest.train_start",
    "backtest.test_months",
    "train.end",
    "tune.train_end",
    "tune.cone_threshold",
    "tune.quantile",
    "tune.k",
    "tune.n_weeks",
    "synth.seed",
    "synth.start",
    "synth.end",
    "synth.zones",
    "synth.provinces_per_zone",
    "synth.noise_frac",
    "synth.forecast_noise_growth",
    "synth.forecast_from",
    "synth.forecast_to",
    "synth.forecast_horizon_hours",
    "synth.pv_capacity_mw",
    "synth.wd_capacity_mw",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataPaths {
    pub power: Option<PathBuf>,
    pub met: Option<PathBuf>,
    pub totals: Option<PathBuf>,
    pub zone_map: Option<PathBuf>,
    pub forecasts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataPaths,
    pub out_dir: PathBuf,
    pub preprocess: PreprocessConfig,
    pub pipeline: PipelineParams,
    pub train_start: Option<NaiveDate>,
    pub test_months: Vec<(i32, u32)>,
    /// Training data for `train` ends at 00:00 of this date.
    pub train_end: Option<NaiveDate>,
    pub tune_train_end: Option<NaiveDate>,
    pub tune: TuneGrid,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataPaths::default(),
            out_dir: PathBuf::from("out"),
            preprocess: PreprocessConfig::default(),
            pipeline: PipelineParams::default(),
            train_start: None,
            test_months: Vec::new(),
            train_end: None,
            tune_train_end: None,
            tune: TuneGrid::default(),
            synth: SynthConfig::default(),
        }
    }
}

type ConfigResult<T> = Result<T, ConfigError>;

fn parse<T: FromStr>(key: &str, value: &str) -> ConfigResult<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| ConfigError(format!("{key} = {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> ConfigResult<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(|item| parse(key, item.trim()))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> ConfigResult<bool> {
    match value {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(ConfigError(format!(
            "{key} = {value:?}: expected true or false"
        ))),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> ConfigResult<Option<T>>
where
    T::Err: fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_month(key: &str, value: &str) -> ConfigResult<(i32, u32)> {
    let bad = || ConfigError(format!("{key}: {value:?} is not a YYYY-MM month"));
    let (y, m) = value.split_once('-').ok_or_else(bad)?;
    let y: i32 = y.parse().map_err(|_| bad())?;
    let m: u32 = m.parse().map_err(|_| bad())?;
    NaiveDate::from_ymd_opt(y, m, 1).ok_or_else(bad)?;
    Ok((y, m))
}

/// `2017-01, 2017-03` or an inclusive range `2017-01..2017-06`.
fn parse_months(key: &str, value: &str) -> ConfigResult<Vec<(i32, u32)>> {
    let mut months = Vec::new();
    for item in value.split(',').map(str::trim) {
        match item.split_once("..") {
            Some((a, b)) => {
                let (mut y, mut m) = parse_month(key, a.trim())?;
                let last = parse_month(key, b.trim())?;
                if last < (y, m) {
                    return Err(ConfigError(format!("{key}: empty range {item:?}")));
                }
                while (y, m) <= last {
                    months.push((y, m));
                    (y, m) = if m == 12 { (y + 1, 1) } else { (y, m + 1) };
                }
            }
            None => months.push(parse_month(key, item)?),
        }
    }
    Ok(months)
}

impl RunConfig {
    pub fn load(path: &Path) -> ConfigResult<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
            .map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn parse(text: &str, base_dir: &Path) -> ConfigResult<RunConfig> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError(format!("line {}: unknown key {key:?}", i + 1)));
            }
            if let Some((first, _)) = entries.get(key) {
                return Err(ConfigError(format!(
                    "line {}: {key} already set on line {first}",
                    i + 1
                )));
            }
            entries.insert(key.to_string(), (i + 1, value.trim().to_string()));
        }

        let mut cfg = RunConfig::default();
        let resolve = |v: &str| base_dir.join(v);
        for (key, (_, v)) in &entries {
            let key = key.as_str();
            let v = v.as_str();
            match key {
                "data.power" => cfg.data.power = Some(resolve(v)),
                "data.met" => cfg.data.met = Some(resolve(v)),
                "data.totals" => cfg.data.totals = Some(resolve(v)),
                "data.zone_map" => cfg.data.zone_map = Some(resolve(v)),
                "data.forecasts" => cfg.data.forecasts = Some(resolve(v)),
                "output.dir" => cfg.out_dir = resolve(v),
                "preprocess.cone_threshold" => cfg.preprocess.cone_threshold = parse(key, v)?,
                "preprocess.ghi_floor" => cfg.preprocess.ghi_floor = parse(key, v)?,
                "preprocess.max_gap_hours" => cfg.preprocess.max_gap_hours = parse(key, v)?,
                "preprocess.mad_fallback_frac" => cfg.preprocess.mad_fallback_frac = parse(key, v)?,
                "knn.k" => cfg.pipeline.knn.k = parse(key, v)?,
                "knn.epsilon" => cfg.pipeline.knn.epsilon = parse(key, v)?,
                "knn.window" | "knn.month_window" | "knn.hour_window" => {}
                "qrf.n_trees" => cfg.pipeline.qrf.n_trees = parse(key, v)?,
                "qrf.min_leaf" => cfg.pipeline.qrf.min_leaf = parse(key, v)?,
                "qrf.mtry" => cfg.pipeline.qrf.mtry = parse_optional(key, v)?,
                "qrf.max_depth" => cfg.pipeline.qrf.max_depth = parse_optional(key, v)?,
                "qrf.seed" => cfg.pipeline.qrf.seed = parse(key, v)?,
                "qrf.quantile" => cfg.pipeline.qrf.quantile = parse(key, v)?,
                "pipeline.weight_knn" => cfg.pipeline.ensemble.weight_knn = parse(key, v)?,
                "pipeline.postprocess" => cfg.pipeline.postprocess.enabled = parse_bool(key, v)?,
                "pipeline.postprocess_order" => {
                    cfg.pipeline.postprocess.order = match v {
                        "before_combine" => PostprocessOrder::BeforeCombine,
                        "after_combine" => PostprocessOrder::AfterCombine,
                        _ => {
                            return Err(ConfigError(format!(
                                "{key} = {v:?}: expected before_combine or after_combine"
                            )))
                        }
                    }
                }
                "pipeline.n_weeks" => cfg.pipeline.postprocess.n_weeks = parse(key, v)?,
                "pipeline.ghi_floor" => cfg.pipeline.postprocess.ghi_floor = parse(key, v)?,
                "backtest.train_start" => cfg.train_start = Some(parse(key, v)?),
                "backtest.test_months" => cfg.test_months = parse_months(key, v)?,
                "train.end" => cfg.train_end = Some(parse(key, v)?),
                "tune.train_end" => cfg.tune_train_end = Some(parse(key, v)?),
                "tune.cone_threshold" => cfg.tune.cone_threshold = parse_list(key, v)?,
                "tune.quantile" => cfg.tune.quantile = parse_list(key, v)?,
                "tune.k" => cfg.tune.k = parse_list(key, v)?,
                "tune.n_weeks" => cfg.tune.n_weeks = parse_list(key, v)?,
                "synth.seed" => cfg.synth.seed = parse(key, v)?,
                "synth.start" => cfg.synth.start = parse(key, v)?,
                "synth.end" => cfg.synth.end = parse(key, v)?,
                "synth.zones" => cfg.synth.zones = parse_list::<ZoneId>(key, v)?,
                "synth.provinces_per_zone" => cfg.synth.provinces_per_zone = parse(key, v)?,
                "synth.noise_frac" => cfg.synth.noise_frac = parse(key, v)?,
                "synth.forecast_noise_growth" => cfg.synth.forecast_noise_growth = parse(key, v)?,
                "synth.forecast_from" => cfg.synth.forecast_from = parse(key, v)?,
                "synth.forecast_to" => cfg.synth.forecast_to = parse(key, v)?,
                "synth.forecast_horizon_hours" => cfg.synth.forecast_horizon_hours = parse(key, v)?,
                "synth.pv_capacity_mw" => cfg.synth.pv.capacity_mw = parse(key, v)?,
                "synth.wd_capacity_mw" => cfg.synth.wd.capacity_mw = parse(key, v)?,
                _ => unreachable!("key list and match arms are in sync"),
            }
        }

        let value = |k: &str| entries.get(k).map(|(_, v)| v.as_str());
        let window_on = match value("knn.window") {
            Some(v) => parse_bool("knn.window", v)?,
            None => cfg.pipeline.knn.window.is_some(),
        };
        cfg.pipeline.knn.window = if window_on {
            let default = cfg.pipeline.knn.window.unwrap_or(CalendarWindow {
                months: 1,
                hours: 1,
            });
            Some(CalendarWindow {
                months: match value("knn.month_window") {
                    Some(v) => parse("knn.month_window", v)?,
                    None => default.months,
                },
                hours: match value("knn.hour_window") {
                    Some(v) => parse("knn.hour_window", v)?,
                    None => default.hours,
                },
            })
        } else {
            None
        };

        cfg.preprocess
            .validate()
            .and_then(|_| cfg.pipeline.validate())
            .and_then(|_| cfg.tune.validate())
            .map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    /// A config pointing at the files written by `synth`. The backtest
    /// covers the whole months of forecast run dates that have 15 days of
    /// measured power after them and a year of history before them.
    pub fn render_for_synth(synth: &SynthConfig, kinds: &[PlantKind]) -> String {
        let mut out = String::from("# Written by `zonecast synth`.\n");
        out.push_str("data.power = power.csv\n");
        out.push_str("data.met = met.csv\n");
        out.push_str("data.totals = totals.csv\n");
        out.push_str("data.zone_map = zone_map.csv\n");
        out.push_str("data.forecasts = met_forecast.csv\n");
        out.push_str("output.dir = report\n");
        out.push_str(&format!("backtest.train_start = {}\n", synth.start));
        let last_full = synth.end - chrono::Duration::days(15);
        let first = synth.forecast_from;
        let mut months = Vec::new();
        let mut d = NaiveDate::from_ymd_opt(
            chrono::Datelike::year(&first),
            chrono::Datelike::month(&first),
            1,
        )
        .expect("valid month");
        while let Some(next) = d.checked_add_months(chrono::Months::new(1)) {
            let month_last = next.pred_opt().expect("valid date");
            let has_history = d
                .checked_sub_months(chrono::Months::new(12))
                .is_some_and(|a| a >= synth.start);
            if has_history
                && d >= first
                && month_last <= last_full
                && month_last <= synth.forecast_to
            {
                months.push(d.format("%Y-%m").to_string());
            }
            if next > synth.forecast_to {
                break;
            }
            d = next;
        }
        if !months.is_empty() {
            out.push_str(&format!("backtest.test_months = {}\n", months.join(", ")));
        }
        out.push_str(&format!("tune.train_end = {}\n", synth.forecast_from));
        let kinds: Vec<String> = kinds.iter().map(ToString::to_string).collect();
        out.push_str(&format!("# generated kinds: {}\n", kinds.join(", ")));
        out
    }
}
