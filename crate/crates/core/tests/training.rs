mod common;

use quakecast::catalog::RegionId;
use quakecast::cli::load_prepared;
use quakecast::model::{Architecture, Model, ModelSpec};
use quakecast::series::{prepare, Case, MonthlySeries, PreparedDataset, YearMonth};
use quakecast::train::{train_once, train_protocol, TrainConfig};
use quakecast::Error;

fn dataset(n: usize, window: usize) -> PreparedDataset {
    let series = MonthlySeries {
        region: RegionId::new(6).unwrap(),
        case: Case::Count,
        start_month: YearMonth::new(1990, 1).unwrap(),
        values: common::seasonal_series(n, 1.0, 3),
    };
    prepare(&series, 0.8, window).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        repeats: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_same_run() {
    let data = dataset(80, 6);
    let spec = common::tiny_spec(Architecture::CnnBilstmAm);
    let run = |seed| {
        let mut m = Model::build(&spec, seed).unwrap();
        train_once(&mut m, &data.train, &data.test, &quick(5), seed).unwrap()
    };
    let (a, b, c) = (run(4), run(4), run(5));
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.log, b.log);
    assert_eq!(a.attention, b.attention);
    assert_ne!(a.predictions, c.predictions);
    let att = a.attention.unwrap();
    assert_eq!(att.len(), data.test.len());
    assert!(att.iter().all(|w| w.len() == 6 && (w.iter().sum::<f64>() - 1.0).abs() < 1e-12));
}

#[test]
fn loss_decreases_and_stays_finite() {
    let data = dataset(120, 12);
    for arch in Architecture::ALL {
        let mut spec = ModelSpec::new(arch);
        spec.layers.conv.iter_mut().for_each(|c| c.filters = c.filters.min(8));
        spec.layers.recurrent = vec![8, 4];
        let mut model = Model::build(&spec, 1).unwrap();
        let r = train_once(&mut model, &data.train, &data.test, &quick(25), 1).unwrap();
        assert!(r.log.iter().all(|l| l.train_loss.is_finite()), "{arch}");
        let (first, last) = (r.log[0].train_loss, r.log.last().unwrap().train_loss);
        assert!(last < first, "{arch}: {first} -> {last}");
        assert_eq!(r.log[0].lr, 1e-3);
        assert_eq!(r.log[24].lr, 1e-4);
        assert!(r.metrics.rmse.is_finite() && r.metrics.rmse >= r.metrics.mae);
    }
}

#[test]
fn protocol_aggregates_runs() {
    let data = dataset(80, 6);
    let spec = common::tiny_spec(Architecture::LstmOnly);
    let one = train_protocol(&spec, &data, &TrainConfig { seed: 9, ..quick(3) }).unwrap();
    assert_eq!(one.report.runs.len(), 1);
    assert_eq!(one.report.std.rmse, 0.0);
    assert_eq!(one.report.mean.rmse, one.report.runs[0].scaled.rmse);
    assert_eq!(one.report.runs[0].seed, 9);
    assert_eq!(one.report.config.train.epochs, 3);
    assert_eq!(one.report.config.architecture, Architecture::LstmOnly);
    assert_eq!(one.report.test_months.len(), data.test.len());

    let three = train_protocol(&spec, &data, &TrainConfig { seed: 9, repeats: 3, ..quick(3) }).unwrap();
    assert_eq!(three.runs[0].predictions, one.runs[0].predictions, "run 0 is independent of the repeat count");
    let r: Vec<f64> = three.report.runs.iter().map(|r| r.scaled.rmse).collect();
    let mean = r.iter().sum::<f64>() / 3.0;
    let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((three.report.mean.rmse - mean).abs() < 1e-15);
    assert!((three.report.std.rmse - std).abs() < 1e-15);
    assert!(three.report.runs.iter().all(|r| r.raw.rmse > r.scaled.rmse), "raw space spans more than one unit");
}

#[test]
fn mismatched_window_is_rejected() {
    let data = dataset(80, 6);
    let mut spec = common::tiny_spec(Architecture::Mlp);
    spec.window = 7;
    assert!(matches!(train_protocol(&spec, &data, &quick(1)), Err(Error::Config(_))));
    let bad = TrainConfig {
        batch_size: 0,
        ..quick(1)
    };
    assert!(matches!(train_protocol(&common::tiny_spec(Architecture::Mlp), &data, &bad), Err(Error::Config(_))));
}

#[test]
fn missing_prepared_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_prepared(dir.path(), RegionId::new(2).unwrap(), Case::MaxMagnitude).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
    assert!(err.to_string().contains("region-2-maxmag"), "{err}");
}
