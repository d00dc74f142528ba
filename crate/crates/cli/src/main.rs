mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use zonecast::dataset::{preprocess_dataset, Dataset};
use zonecast::evaluate::{backtest, emit_report, Area, BacktestConfig, RunChart};
use zonecast::ingest::{
    parse_forecast_csv, parse_met_csv, parse_power_csv, parse_totals_csv, parse_zone_map_csv,
    write_met_csv, write_power_csv,
};
use zonecast::pipeline::{
    load_zone_models, postprocess_tail, run_forecast, save_zone_models, train_zone,
    write_forecast_runs, zone_training_data,
};
use zonecast::synth::{generate, generate_pv_dataset, generate_wd_dataset};
use zonecast::tune::{tune, write_tune_csv, TuneConfig};
use zonecast::types::{HourlyTimestamp, PlantKind, ZoneId};

use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "zonecast",
    version,
    about = "Zonal PV and wind power forecasting"
)]
struct Cli {
    /// Run configuration (`section.key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Forecast run date (forecast) or end of the training data (train).
    #[arg(long, global = true, value_name = "YYYY-MM-DD")]
    run_date: Option<NaiveDate>,

    /// Restrict to one plant kind.
    #[arg(long, global = true, value_parser = ["PV", "WD"])]
    kind: Option<String>,

    /// Restrict to one bidding zone.
    #[arg(long, global = true, value_parser = ["NORD", "CNOR", "CSUD", "SUD", "SICI", "SARD", "ALL"])]
    zone: Option<String>,

    /// Worker threads for parallel stages.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate the inputs and print a summary.
    Ingest,
    /// Clean the measured data and write the cleaned CSVs.
    Preprocess,
    /// Fit and save the models of every zone.
    Train,
    /// Issue a 360-hour forecast from saved models.
    Forecast,
    /// Run the monthly backtest and write metrics and charts.
    Backtest,
    /// Generate a synthetic dataset and a matching config.
    Synth,
    /// Grid-search the tunable hyperparameters on the training period.
    Tune,
}

struct Invocation {
    cfg: RunConfig,
    out: PathBuf,
    kinds: Vec<PlantKind>,
    zone: Option<ZoneId>,
    run_date: Option<NaiveDate>,
}

impl Invocation {
    fn zones(&self, ds: &Dataset, kind: PlantKind) -> Vec<ZoneId> {
        match self.zone {
            Some(z) => vec![z],
            None => ds.zones(kind),
        }
    }

    fn train_start(&self) -> Result<NaiveDate> {
        self.cfg
            .train_start
            .ok_or_else(|| ConfigError("backtest.train_start is not set".into()).into())
    }
}

fn input<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| ConfigError(format!("{key} is not set")).into())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(file))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let read = |key: &str, path: &Path| format!("ingest: {key} ({})", path.display());
    let power_path = input(&d.power, "data.power")?;
    let power = parse_power_csv(open(power_path)?).with_context(|| read("power", power_path))?;
    let met_path = input(&d.met, "data.met")?;
    let met = parse_met_csv(open(met_path)?).with_context(|| read("met", met_path))?;
    let map_path = input(&d.zone_map, "data.zone_map")?;
    let zone_map =
        parse_zone_map_csv(open(map_path)?).with_context(|| read("zone map", map_path))?;
    let totals = match &d.totals {
        Some(p) => Some(parse_totals_csv(open(p)?).with_context(|| read("totals", p))?),
        None => None,
    };
    let forecasts = match &d.forecasts {
        Some(p) => parse_forecast_csv(open(p)?).with_context(|| read("forecasts", p))?,
        None => Default::default(),
    };
    let ds = Dataset {
        power,
        met,
        totals,
        zone_map,
        forecasts,
    };
    ds.validate().context("ingest")?;
    Ok(ds)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn cmd_ingest(ctx: &Invocation) -> Result<()> {
    let ds = load_dataset(&ctx.cfg)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "power series:")?;
    for ((zone, kind), s) in &ds.power {
        let regular = s.regularized();
        writeln!(
            stdout,
            "  {kind} {zone}: {} .. {}, {} hours, {} missing",
            s.first_ts().map(|t| t.to_string()).unwrap_or_default(),
            s.last_ts().map(|t| t.to_string()).unwrap_or_default(),
            regular.len(),
            regular.len() - regular.present_count()
        )?;
    }
    let met_missing: usize = ds
        .met
        .values()
        .map(|s| {
            let r = s.regularized();
            r.len() - r.present_count()
        })
        .sum();
    writeln!(
        stdout,
        "met series: {} (province, variable) pairs, {met_missing} missing hours",
        ds.met.len()
    )?;
    writeln!(
        stdout,
        "zone map: {} provinces in {} zones",
        ds.zone_map.assignments().count(),
        ds.zone_map.zones().count()
    )?;
    match &ds.totals {
        Some(t) => writeln!(stdout, "national totals: {} months", t.len())?,
        None => writeln!(stdout, "national totals: none")?,
    }
    if let (Some(first), Some(last)) = (ds.forecasts.keys().next(), ds.forecasts.keys().last()) {
        writeln!(
            stdout,
            "met forecasts: {} runs, {first} .. {last}",
            ds.forecasts.len()
        )?;
    } else {
        writeln!(stdout, "met forecasts: none")?;
    }
    Ok(())
}

fn cmd_preprocess(ctx: &Invocation) -> Result<()> {
    let raw = load_dataset(&ctx.cfg)?;
    let (ds, report) = preprocess_dataset(&raw, &ctx.cfg.preprocess)?;
    let dir = ctx.out.join("clean");
    write_power_csv(create(&dir.join("power.csv"))?, &ds.power)?;
    write_met_csv(create(&dir.join("met.csv"))?, &ds.met)?;
    let kinds: Vec<String> = report
        .rescaled_kinds
        .iter()
        .map(|k| k.to_string())
        .collect();
    println!(
        "rescaled kinds: {}",
        if kinds.is_empty() {
            "none".into()
        } else {
            kinds.join(", ")
        }
    );
    for (zone, n) in &report.cone_outliers {
        println!("PV {zone}: {n} outlier hour(s) removed");
    }
    println!(
        "filled {} hour(s); {} hour(s) still missing",
        report.filled_hours, report.missing_hours
    );
    println!("cleaned data written to {}", dir.display());
    Ok(())
}

fn cmd_train(ctx: &Invocation) -> Result<()> {
    let raw = load_dataset(&ctx.cfg)?;
    let (ds, _) = preprocess_dataset(&raw, &ctx.cfg.preprocess)?;
    let from = HourlyTimestamp::start_of(ctx.train_start()?);
    let to = match ctx.run_date.or(ctx.cfg.train_end) {
        Some(d) => HourlyTimestamp::start_of(d),
        None => ds
            .power
            .values()
            .filter_map(|s| s.last_ts())
            .max()
            .ok_or_else(|| anyhow!("train: no measured power"))?,
    };
    let dir = ctx.out.join("models");
    for &kind in &ctx.kinds {
        for zone in ctx.zones(&ds, kind) {
            let power = ds.power_series(zone, kind)?;
            let (knn_data, qrf_data) =
                zone_training_data(power, &ds.met, &ds.zone_map, zone, kind, from, to)
                    .with_context(|| format!("train {kind} {zone}: training data"))?;
            let models = train_zone(&knn_data, &qrf_data, &ctx.cfg.pipeline)
                .with_context(|| format!("train {kind} {zone}"))?;
            for path in save_zone_models(&dir, &models)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn cmd_forecast(ctx: &Invocation) -> Result<()> {
    let run_date = ctx
        .run_date
        .ok_or_else(|| ConfigError("forecast needs --run-date".into()))?;
    let raw = load_dataset(&ctx.cfg)?;
    let dir = ctx.out.join("models");
    let mut models = Vec::new();
    for &kind in &ctx.kinds {
        for zone in ctx.zones(&raw, kind) {
            models.push(load_zone_models(&dir, zone, kind).context("forecast: loading models")?);
        }
    }
    let fc = raw
        .forecasts
        .get(&run_date)
        .ok_or_else(|| anyhow!("forecast: no met forecast for run date {run_date}"))?;
    let (ds, _) = preprocess_dataset(&raw, &ctx.cfg.preprocess)?;
    let params = &ctx.cfg.pipeline;
    let mut runs = Vec::new();
    for m in &models {
        let tail = if m.kind == PlantKind::Pv && params.postprocess.enabled {
            Some(postprocess_tail(
                ds.power_series(m.zone, m.kind)?,
                &ds.met,
                &ds.zone_map,
                m.zone,
                run_date,
                params.postprocess.n_weeks,
            )?)
        } else {
            None
        };
        let out = run_forecast(m, fc, &ds.zone_map, tail.as_ref(), params)
            .with_context(|| format!("forecast {} {}", m.kind, m.zone))?;
        for w in &out.warnings {
            eprintln!("warning: {} {}: {w}", m.kind, m.zone);
        }
        runs.push(out.run);
    }
    let path = ctx.out.join(format!("forecast_{run_date}.csv"));
    let mut w = create(&path)?;
    write_forecast_runs(&mut w, &runs)?;
    w.flush()?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_backtest(ctx: &Invocation) -> Result<()> {
    if ctx.cfg.test_months.is_empty() {
        return Err(ConfigError("backtest.test_months is not set".into()).into());
    }
    let raw = load_dataset(&ctx.cfg)?;
    let (ds, _) = preprocess_dataset(&raw, &ctx.cfg.preprocess)?;
    let cfg = BacktestConfig {
        train_start: ctx.train_start()?,
        test_months: ctx.cfg.test_months.clone(),
        kinds: ctx.kinds.clone(),
        zones: ctx.zone.map(|z| vec![z]),
    };
    let result = backtest(&ds, &cfg, &ctx.cfg.pipeline)?;
    let chart = match result.runs.first() {
        Some(run) => Some(RunChart {
            run,
            measured: ds.power_series(run.zone, run.kind)?,
        }),
        None => None,
    };
    let written = emit_report(&result.records, &ctx.out, chart)?;
    println!("kind  month    area   NRMSE(all)  NRMSE(day 1)  NRMSE(day 15)");
    for r in result
        .records
        .iter()
        .filter(|r| r.area == Area::Italy && r.lead_day == 0)
    {
        let day = |d: u32| {
            result
                .records
                .iter()
                .find(|x| {
                    (x.kind, x.year, x.month, x.area, x.lead_day)
                        == (r.kind, r.year, r.month, r.area, d)
                })
                .map(|x| x.nrmse)
                .unwrap_or(f64::NAN)
        };
        println!(
            "{:<5} {}-{:02}  {:<6} {:>10.4}  {:>12.4}  {:>13.4}",
            r.kind.to_string(),
            r.year,
            r.month,
            r.area.to_string(),
            r.nrmse,
            day(1),
            day(15)
        );
    }
    if result.postprocess_skips > 0 {
        eprintln!(
            "warning: PV post-processing skipped in {} run(s)",
            result.postprocess_skips
        );
    }
    println!("{} file(s) written to {}", written.len(), ctx.out.display());
    Ok(())
}

fn cmd_synth(ctx: &Invocation) -> Result<()> {
    let mut synth = ctx.cfg.synth.clone();
    if let Some(z) = ctx.zone {
        synth.zones = vec![z];
    }
    let data = match ctx.kinds.as_slice() {
        [PlantKind::Pv] => generate_pv_dataset(&synth),
        [PlantKind::Wd] => generate_wd_dataset(&synth),
        _ => generate(&synth),
    }
    .context("synth")?;
    for path in data.write_to(&ctx.out)? {
        println!("{}", path.display());
    }
    let conf = ctx.out.join("zonecast.conf");
    let mut w = create(&conf)?;
    w.write_all(RunConfig::render_for_synth(&synth, &ctx.kinds).as_bytes())?;
    w.flush()?;
    println!("{}", conf.display());
    Ok(())
}

fn cmd_tune(ctx: &Invocation) -> Result<()> {
    let raw = load_dataset(&ctx.cfg)?;
    let train_end = ctx
        .cfg
        .tune_train_end
        .ok_or_else(|| ConfigError("tune.train_end is not set".into()))?;
    for &kind in &ctx.kinds {
        let cfg = TuneConfig {
            kind,
            train_start: ctx.train_start()?,
            train_end,
            zones: ctx.zone.map(|z| vec![z]),
        };
        let rows = tune(
            &raw,
            &ctx.cfg.preprocess,
            &cfg,
            &ctx.cfg.tune,
            &ctx.cfg.pipeline,
        )
        .with_context(|| format!("tune {kind}"))?;
        let path = ctx.out.join(format!("tune_{kind}.csv"));
        let mut w = create(&path)?;
        write_tune_csv(&mut w, &rows)?;
        w.flush()?;
        println!("{kind}: rank  threshold  quantile    k  weeks     NRMSE");
        for r in &rows {
            println!(
                "{kind}: {:>4}  {:>9}  {:>8}  {:>3}  {:>5}  {:.6}",
                r.rank, r.cone_threshold, r.quantile, r.k, r.n_weeks, r.nrmse
            );
        }
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.into())
            .build_global()
            .context("cannot start worker threads")?;
    }
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ctx = Invocation {
        out: cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone()),
        kinds: match cli.kind.as_deref() {
            Some(k) => vec![k.parse()?],
            None => PlantKind::ALL.to_vec(),
        },
        zone: match cli.zone.as_deref() {
            None | Some("ALL") => None,
            Some(z) => Some(z.parse()?),
        },
        run_date: cli.run_date,
        cfg,
    };
    match cli.command {
        Command::Ingest => cmd_ingest(&ctx),
        Command::Preprocess => cmd_preprocess(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Forecast => cmd_forecast(&ctx),
        Command::Backtest => cmd_backtest(&ctx),
        Command::Synth => cmd_synth(&ctx),
        Command::Tune => cmd_tune(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
