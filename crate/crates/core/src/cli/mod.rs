//! Batch command-line surface: ingest → prepare → train → evaluate →
//! export-plot.

mod config;
mod manifest;

pub use config::{pick, resolve_seed, FileConfig, SEED_ENV};
pub use manifest::{sha256_file, InputFile, ManifestBuilder, RunManifest, Timestamps};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, TimeZone, Utc};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::catalog::{
    assign_region, deduplicate, filter_events, parse_catalog, write_events, write_rejects, ColumnMapping, RegionGrid,
    RegionId, TimeRange, STUDY_MIN_MAGNITUDE,
};
use crate::error::{Error, Result};
use crate::metrics::{Metrics, Space};
use crate::model::{Architecture, Checkpoint, Model, ModelSpec};
use crate::series::{aggregate_monthly, prepare, Case, MonthRange, PreparedDataset, PreparedMeta, YearMonth};
use crate::train::{train_protocol, write_training_log, EvalReport, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "quakecast", version, about = "Monthly earthquake count and magnitude forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean, filter and region-tag a raw catalog CSV.
    Ingest(IngestArgs),
    /// Build per-region monthly training series from ingested events.
    Prepare(PrepareArgs),
    /// Train one architecture on prepared series and write reports.
    Train(TrainArgs),
    /// Re-score saved checkpoints against their reports.
    Evaluate(EvaluateArgs),
    /// Write plot-ready CSV series from training reports.
    ExportPlot(ExportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub min_mag: Option<f64>,
    /// lat_min,lat_max,lon_min,lon_max
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub bbox: Option<Vec<f64>>,
    /// First day kept (YYYY-MM-DD); defaults to 1966-01-15.
    #[arg(long)]
    pub start: Option<NaiveDate>,
    /// Last day kept (YYYY-MM-DD, inclusive); defaults to 2021-05-22.
    #[arg(long)]
    pub end: Option<NaiveDate>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Output directory of `ingest`.
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub case: Option<Case>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub split: Option<f64>,
    /// Defaults to the ingest directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory of `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub arch: Option<Architecture>,
    /// Region number 1–9 or `all`.
    #[arg(long, default_value = "all")]
    pub region: String,
    #[arg(long)]
    pub case: Option<Case>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Falls back to the config file, then QUAKECAST_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Worker threads for regions and repeats.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Defaults to `<data>/reports`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory searched recursively for `report.json`.
    #[arg(long)]
    pub report: PathBuf,
    /// Output directory of `prepare` used for training.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Directory searched recursively for `report.json`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Prepare(a) => cmd_prepare(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::ExportPlot(a) => cmd_export_plot(&a),
    }
}

/// Settings `ingest` leaves for `prepare`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSettings {
    pub min_mag: f64,
    pub grid: RegionGrid,
    pub range: TimeRange,
}

pub const EVENTS_FILE: &str = "events.csv";
pub const REJECTS_FILE: &str = "rejects.csv";
pub const INGEST_FILE: &str = "ingest.json";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn open_file(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let min_mag = pick(a.min_mag, file.min_mag, STUDY_MIN_MAGNITUDE);
    let bbox = match (&a.bbox, file.bbox) {
        (Some(b), _) => <[f64; 4]>::try_from(b.as_slice())
            .map_err(|_| Error::Config(format!("--bbox needs 4 comma-separated values, got {}", b.len())))?,
        (None, Some(b)) => b,
        (None, None) => [23.0, 45.0, 75.0, 119.0],
    };
    let grid = RegionGrid::new(bbox[0], bbox[1], bbox[2], bbox[3])?;
    let study = TimeRange::study_period();
    let day_start = |d: NaiveDate| Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).expect("midnight"));
    let day_end = |d: NaiveDate| Utc.from_utc_datetime(&d.and_hms_opt(23, 59, 59).expect("end of day"));
    let range = TimeRange::new(
        a.start.map_or(study.start, day_start),
        a.end.map_or(study.end, day_end),
    )?;

    let parsed = parse_catalog(open_file(&a.catalog)?, &ColumnMapping::default())?;
    let read = parsed.events.len();
    let unique = deduplicate(&parsed.events);
    let kept = filter_events(&unique, min_mag, &range, &grid);
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "no events survive filtering ({read} parsed, {} unique); check --min-mag, --bbox and the date range",
            unique.len()
        )));
    }
    let regions = kept.iter().map(|e| assign_region(e, &grid)).collect::<Result<Vec<_>>>()?;

    create_dir(&a.out)?;
    let settings = IngestSettings { min_mag, grid, range };
    let mut manifest = ManifestBuilder::new(&a.out, "ingest", serde_json::to_value(&settings)?);
    manifest.input(&a.catalog)?;
    let events_path = a.out.join(EVENTS_FILE);
    write_events(create_file(&events_path)?, &kept, Some(&regions))?;
    manifest.output(&events_path);
    let rejects_path = a.out.join(REJECTS_FILE);
    write_rejects(create_file(&rejects_path)?, &parsed.rejects)?;
    manifest.output(&rejects_path);
    let settings_path = a.out.join(INGEST_FILE);
    write_json(&settings_path, &settings)?;
    manifest.output(&settings_path);
    manifest.finish("manifest.json")?;
    println!(
        "ingest: {read} parsed, {} rejected, {} duplicates, {} kept",
        parsed.rejects.len(),
        read - unique.len(),
        kept.len()
    );
    Ok(())
}

/// `region-<n>-<case>` stem shared by all per-series files.
pub fn series_stem(region: RegionId, case: Case) -> String {
    format!("region-{region}-{}", case.as_str())
}

pub fn cmd_prepare(a: &PrepareArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let case = pick(a.case, file.case, Case::Count);
    let window = pick(a.window, file.window, ModelSpec::DEFAULT_WINDOW);
    let split = pick(a.split, file.split, 0.8);
    let out = a.out.clone().unwrap_or_else(|| a.events.clone());

    let settings_path = a.events.join(INGEST_FILE);
    let settings: IngestSettings = read_json(&settings_path)?;
    let events_path = a.events.join(EVENTS_FILE);
    let events = parse_catalog(open_file(&events_path)?, &ColumnMapping::default())?.events;
    let months = MonthRange::new(YearMonth::of(&settings.range.start), YearMonth::of(&settings.range.end))?;

    create_dir(&out)?;
    let config = serde_json::json!({ "case": case, "window": window, "split": split, "months": months.len() });
    let mut manifest = ManifestBuilder::new(&out, "prepare", config);
    manifest.input(&events_path)?;
    manifest.input(&settings_path)?;

    let mut by_region: BTreeMap<RegionId, Vec<_>> = RegionId::all().map(|r| (r, Vec::new())).collect();
    for e in events {
        let r = assign_region(&e, &settings.grid)?;
        by_region.get_mut(&r).expect("all regions present").push(e);
    }
    for (region, evs) in &by_region {
        let series = aggregate_monthly(evs, *region, case, &months);
        let data = prepare(&series, split, window).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("region {region}: {m}")),
            other => other,
        })?;
        let stem = series_stem(*region, case);
        let csv_path = out.join(format!("{stem}.csv"));
        data.write_csv(create_file(&csv_path)?)?;
        manifest.output(&csv_path);
        let meta_path = out.join(format!("{stem}.json"));
        write_json(&meta_path, &data.meta)?;
        manifest.output(&meta_path);
        let windows_path = out.join(format!("{stem}.windows.csv"));
        write_windows(&windows_path, &data)?;
        manifest.output(&windows_path);
        println!(
            "prepare: region {region} {}: {} events, {} train / {} test windows, scaler [{}, {}]",
            case.as_str(),
            evs.len(),
            data.train.len(),
            data.test.len(),
            data.meta.scaler.min,
            data.meta.scaler.max
        );
    }
    manifest.finish(&format!("prepare-{}.manifest.json", case.as_str()))?;
    Ok(())
}

fn write_windows(path: &Path, data: &PreparedDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    let mut header = vec!["split".to_string(), "sample".to_string()];
    header.extend((0..data.meta.window).map(|k| format!("x{k}")));
    header.push("target".into());
    w.write_record(&header)?;
    for (name, set) in [("train", &data.train), ("test", &data.test)] {
        for i in 0..set.len() {
            let mut row = vec![name.to_string(), i.to_string()];
            row.extend(set.input(i).iter().map(f64::to_string));
            row.push(set.targets[i].to_string());
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a prepared series, naming the expected path when it is absent.
pub fn load_prepared(dir: &Path, region: RegionId, case: Case) -> Result<PreparedDataset> {
    let stem = series_stem(region, case);
    let meta: PreparedMeta = read_json(&dir.join(format!("{stem}.json")))?;
    PreparedDataset::from_parts(open_file(&dir.join(format!("{stem}.csv")))?, meta)
}

fn parse_regions(s: &str) -> Result<Vec<RegionId>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(RegionId::all().collect());
    }
    let n: u8 = s
        .parse()
        .map_err(|_| Error::Usage(format!("--region expects 1–9 or `all`, got `{s}`")))?;
    Ok(vec![RegionId::new(n).map_err(|e| Error::Usage(e.to_string()))?])
}

pub const REPORT_FILE: &str = "report.json";

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let arch = pick(a.arch, file.architecture, Architecture::CnnBilstmAm);
    let case = pick(a.case, file.case, Case::Count);
    let regions = parse_regions(&a.region)?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        epochs: pick(a.epochs, file.epochs, defaults.epochs),
        batch_size: pick(a.batch_size, file.batch_size, defaults.batch_size),
        lr_start: file.lr_start.unwrap_or(defaults.lr_start),
        lr_end: file.lr_end.unwrap_or(defaults.lr_end),
        repeats: pick(a.repeats, file.repeats, defaults.repeats),
        seed: resolve_seed(a.seed, file.seed)?,
        ..defaults
    };
    config.validate()?;
    let jobs = pick(a.jobs, file.jobs, 1).max(1);
    let out_root = a.out.clone().unwrap_or_else(|| a.data.join("reports"));
    let arch_dir = out_root.join(arch.as_str());

    let datasets = regions
        .iter()
        .map(|&r| load_prepared(&a.data, r, case))
        .collect::<Result<Vec<_>>>()?;
    let mut spec = ModelSpec::new(arch);
    spec.window = pick(None, file.window, datasets[0].meta.window);
    spec.dropout = file.dropout.unwrap_or(spec.dropout);
    spec.combine = file.combine.unwrap_or(spec.combine);
    spec.pool_stride = file.pool_stride.unwrap_or(spec.pool_stride);
    if let Some(layers) = &file.layers {
        spec.layers = layers.clone();
    }
    spec.validate()?;

    create_dir(&arch_dir)?;
    let echo = serde_json::json!({ "model": &spec, "train": &config, "case": case, "jobs": jobs });
    let mut manifest = ManifestBuilder::new(&arch_dir, "train", echo);
    for &r in &regions {
        let stem = series_stem(r, case);
        manifest.input(&a.data.join(format!("{stem}.csv")))?;
        manifest.input(&a.data.join(format!("{stem}.json")))?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    use rayon::prelude::*;
    let outcomes = pool.install(|| {
        datasets
            .par_iter()
            .map(|d| train_protocol(&spec, d, &config))
            .collect::<Result<Vec<_>>>()
    })?;

    for (data, outcome) in datasets.iter().zip(outcomes) {
        let stem = series_stem(data.meta.region, case);
        let dir = arch_dir.join(&stem);
        create_dir(&dir.join("logs"))?;
        create_dir(&dir.join("checkpoints"))?;
        let report = &outcome.report;

        let path = dir.join(REPORT_FILE);
        let mut f = create_file(&path)?;
        report.write_json(&mut f)?;
        manifest.output(&path);
        let path = dir.join("report.csv");
        report.write_csv(create_file(&path)?)?;
        manifest.output(&path);

        let months = data.test_target_months();
        let path = dir.join("predictions.csv");
        let mut w = csv::Writer::from_writer(create_file(&path)?);
        w.write_record(["run", "month", "actual", "predicted"])?;
        for run in &outcome.runs {
            for ((m, y), p) in months.iter().zip(&data.test.targets).zip(&run.predictions) {
                w.write_record([run.run.to_string(), m.to_string(), y.to_string(), p.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        manifest.output(&path);

        if outcome.runs.iter().any(|r| r.attention.is_some()) {
            let path = dir.join("attention.csv");
            let mut w = csv::Writer::from_writer(create_file(&path)?);
            w.write_record(["run", "sample", "timestep", "weight"])?;
            for run in &outcome.runs {
                for (s, row) in run.attention.iter().flatten().enumerate() {
                    for (t, v) in row.iter().enumerate() {
                        w.write_record([run.run.to_string(), s.to_string(), t.to_string(), v.to_string()])?;
                    }
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            manifest.output(&path);
        }

        for (run, model) in outcome.runs.iter().zip(&outcome.models) {
            let path = dir.join("logs").join(format!("run-{}.csv", run.run));
            write_training_log(&run.log, create_file(&path)?)?;
            manifest.output(&path);
            let path = dir.join("checkpoints").join(format!("run-{}.bin", run.run));
            model.checkpoint().save(&path)?;
            manifest.output(&path);
            manifest.wall_time(format!("{stem}/run-{}", run.run), run.wall_time_secs);
        }
        println!(
            "train: {arch} region {} {}: rmse {:.4} ± {:.4}, mae {:.4} ± {:.4}, r2 {:.4} ± {:.4}",
            data.meta.region,
            case.as_str(),
            report.mean.rmse,
            report.std.rmse,
            report.mean.mae,
            report.std.mae,
            report.mean.r2,
            report.std.r2
        );
    }
    manifest.finish(&format!("{}.manifest.json", case.as_str()))?;
    Ok(())
}

/// Every `report.json` below `root`, in a stable order.
pub fn find_reports(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "report directory not found")));
    }
    let mut found: Vec<PathBuf> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == REPORT_FILE)
        .map(|e| e.into_path())
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(Error::Config(format!("no {REPORT_FILE} found under {}", root.display())));
    }
    Ok(found)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let reports = find_reports(&a.report)?;
    let mut mismatches = 0;
    for path in &reports {
        let report: EvalReport = read_json(path)?;
        let dir = path.parent().expect("report has a parent");
        let data = load_prepared(&a.data, report.region, report.case)?;
        let out_path = dir.join("evaluation.csv");
        let mut w = csv::Writer::from_writer(create_file(&out_path)?);
        w.write_record(["region", "case", "architecture", "run", "rmse", "mae", "r2", "matches_report"])?;
        for run in &report.runs {
            let ck = Checkpoint::load(&dir.join("checkpoints").join(format!("run-{}.bin", run.run)))?;
            let mut model = Model::from_checkpoint(&ck)?;
            let (pred, _) = model.predict(&data.test.inputs, report.config.train.batch_size)?;
            let m = Metrics::compute(&data.test.targets, &pred, Space::Scaled)?;
            let same = m == run.scaled;
            mismatches += usize::from(!same);
            w.write_record([
                report.region.to_string(),
                report.case.as_str().to_string(),
                report.config.architecture.to_string(),
                run.run.to_string(),
                m.rmse.to_string(),
                m.mae.to_string(),
                m.r2.to_string(),
                same.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&out_path, e))?;
        println!(
            "evaluate: {} region {} {}: {} runs re-scored",
            report.config.architecture,
            report.region,
            report.case.as_str(),
            report.runs.len()
        );
    }
    if mismatches > 0 {
        return Err(Error::Domain(format!("{mismatches} run(s) do not reproduce their report metrics")));
    }
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_reader(open_file(path)?);
    Ok(r.records().collect::<std::result::Result<_, _>>()?)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config(format!("{}: malformed row {:?}", path.display(), rec)))
}

pub fn cmd_export_plot(a: &ExportArgs) -> Result<()> {
    let reports = find_reports(&a.report)?;
    // (region, case) → architecture → report directory.
    let mut groups: BTreeMap<String, BTreeMap<String, (EvalReport, PathBuf)>> = BTreeMap::new();
    for path in reports {
        let report: EvalReport = read_json(&path)?;
        let key = series_stem(report.region, report.case);
        let dir = path.parent().expect("report has a parent").to_path_buf();
        groups
            .entry(key)
            .or_default()
            .insert(report.config.architecture.to_string(), (report, dir));
    }
    create_dir(&a.out)?;
    for (stem, archs) in &groups {
        let out_dir = a.out.join(stem);
        create_dir(&out_dir)?;
        let months = &archs.values().next().expect("non-empty group").0.test_months;
        let mut actual = vec![f64::NAN; months.len()];
        let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
        for (arch, (report, dir)) in archs {
            if &report.test_months != months {
                return Err(Error::Config(format!("{stem}: reports disagree on test months")));
            }
            let path = dir.join("predictions.csv");
            let mut sums = vec![0.0; months.len()];
            let mut counts = vec![0usize; months.len()];
            for rec in read_records(&path)? {
                let month: YearMonth = field(&rec, 1, &path)?;
                let i = months
                    .iter()
                    .position(|m| *m == month)
                    .ok_or_else(|| Error::Config(format!("{}: month {month} not in report", path.display())))?;
                actual[i] = field(&rec, 2, &path)?;
                sums[i] += field::<f64>(&rec, 3, &path)?;
                counts[i] += 1;
            }
            let mean = sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect();
            columns.push((arch.clone(), mean));

            let att_path = dir.join("attention.csv");
            if att_path.exists() {
                let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
                for rec in read_records(&att_path)? {
                    let e = acc
                        .entry((field(&rec, 1, &att_path)?, field(&rec, 2, &att_path)?))
                        .or_default();
                    e.0 += field::<f64>(&rec, 3, &att_path)?;
                    e.1 += 1;
                }
                let name = if archs.values().filter(|(_, d)| d.join("attention.csv").exists()).count() > 1 {
                    format!("attention-{arch}.csv")
                } else {
                    "attention.csv".into()
                };
                let path = out_dir.join(name);
                let mut w = csv::Writer::from_writer(create_file(&path)?);
                w.write_record(["sample", "timestep", "weight"])?;
                for ((s, t), (sum, n)) in acc {
                    w.write_record([s.to_string(), t.to_string(), (sum / n as f64).to_string()])?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
        }
        let path = out_dir.join("pred_vs_actual.csv");
        let mut w = csv::Writer::from_writer(create_file(&path)?);
        let mut header = vec!["month".to_string(), "actual".to_string()];
        header.extend(columns.iter().map(|(a, _)| a.clone()));
        w.write_record(&header)?;
        for (i, m) in months.iter().enumerate() {
            let mut row = vec![m.to_string(), actual[i].to_string()];
            row.extend(columns.iter().map(|(_, v)| v[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        println!("export-plot: {stem}: {} months, {} architectures", months.len(), columns.len());
    }
    Ok(())
}
