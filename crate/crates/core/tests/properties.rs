mod common;

use proptest::prelude::*;

use quakecast::attention::attention_forward;
use quakecast::autodiff::{ParamStore, Tape, Tensor};
use quakecast::catalog::{RegionGrid, RegionId};
use quakecast::metrics::{mae, r_squared, rmse};
use quakecast::model::{Architecture, Checkpoint, Model};
use quakecast::series::{fit_scaler, make_windows, prepare, zoh_impute, Case, MonthlySeries, YearMonth};
use quakecast::train::{adam_step, lr_schedule, AdamState, TrainConfig};

fn vec_pair(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(|n| (prop::collection::vec(-100.0..100.0f64, n), prop::collection::vec(-100.0..100.0f64, n)))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn attention_weights_are_a_distribution(
        batch in 1usize..4, time in 1usize..10, hidden in 1usize..6, seed in any::<u64>(), scale in 0.1f64..20.0,
    ) {
        let mut r = common::rng(seed);
        let mut tape = Tape::new();
        let hv = common::tensor(&mut r, &[batch, time, hidden], scale);
        let h = tape.constant(hv.clone());
        let w = tape.constant(common::tensor(&mut r, &[1, hidden], 2.0));
        let b = tape.constant(common::tensor(&mut r, &[1], 1.0));
        let out = attention_forward(&mut tape, h, w, b).unwrap();
        let a = tape.value(out.weights).data();
        let ctx = tape.value(out.context).data();
        for s in 0..batch {
            let row = &a[s * time..(s + 1) * time];
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for j in 0..hidden {
                let column: Vec<f64> = (0..time).map(|t| hv.data()[(s * time + t) * hidden + j]).collect();
                let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let c = ctx[s * hidden + j];
                prop_assert!(c >= lo - 1e-12 && c <= hi + 1e-12, "context {c} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn attention_over_one_step_is_identity(batch in 1usize..4, hidden in 1usize..6, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let mut tape = Tape::new();
        let hv = common::tensor(&mut r, &[batch, 1, hidden], 5.0);
        let h = tape.constant(hv.clone());
        let w = tape.constant(common::tensor(&mut r, &[1, hidden], 2.0));
        let b = tape.constant(common::tensor(&mut r, &[1], 1.0));
        let out = attention_forward(&mut tape, h, w, b).unwrap();
        prop_assert!(tape.value(out.weights).data().iter().all(|&v| v == 1.0));
        prop_assert_eq!(tape.value(out.context).data(), hv.data());
    }

    #[test]
    fn rmse_dominates_mae((y, p) in vec_pair(1..40)) {
        let (r, m) = (rmse(&y, &p).unwrap(), mae(&y, &p).unwrap());
        prop_assert!(m >= 0.0);
        prop_assert!(r >= m * (1.0 - 1e-12));
    }

    #[test]
    fn metrics_ignore_joint_permutation((y, p) in vec_pair(2..30), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..y.len()).collect();
        idx.shuffle(&mut common::rng(seed));
        let y2: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let p2: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        prop_assert!((rmse(&y, &p).unwrap() - rmse(&y2, &p2).unwrap()).abs() <= 1e-12);
        prop_assert!((mae(&y, &p).unwrap() - mae(&y2, &p2).unwrap()).abs() <= 1e-12);
        let r1 = r_squared(&y, &p).unwrap();
        prop_assert!(r1 <= 1.0);
        prop_assert!((r1 - r_squared(&y2, &p2).unwrap()).abs() <= 1e-9 * r1.abs().max(1.0));
    }

    #[test]
    fn zoh_is_idempotent_and_fills_gaps(values in prop::collection::vec(prop_oneof![Just(0.0), 0.1f64..9.0], 0..60)) {
        let once = zoh_impute(&values);
        prop_assert_eq!(&zoh_impute(&once), &once);
        let first = values.iter().position(|&v| v != 0.0);
        for (i, (&a, &b)) in values.iter().zip(&once).enumerate() {
            if a != 0.0 { prop_assert_eq!(a, b); }
            if first.is_some_and(|f| i >= f) { prop_assert!(b != 0.0); } else { prop_assert_eq!(b, 0.0); }
        }
    }

    #[test]
    fn windows_are_contiguous(values in prop::collection::vec(0.0f64..1.0, 2..50), w in 1usize..8) {
        prop_assume!(values.len() > w);
        let d = make_windows(&values, w).unwrap();
        prop_assert_eq!(d.len(), values.len() - w);
        for i in 0..d.len() {
            prop_assert_eq!(d.input(i), &values[i..i + w]);
            prop_assert_eq!(d.targets[i], values[i + w]);
        }
    }

    #[test]
    fn scaler_maps_train_into_unit_interval(values in prop::collection::vec(-50.0f64..50.0, 2..40)) {
        let s = fit_scaler(&values).unwrap();
        for &v in &values {
            let z = s.apply(v);
            prop_assert!((0.0..=1.0).contains(&z));
            if s.max > s.min { prop_assert!((s.invert(z) - v).abs() <= 1e-9); }
        }
    }

    #[test]
    fn test_values_never_reach_training_side(
        values in prop::collection::vec(prop_oneof![Just(0.0), 1.0f64..20.0], 40..80),
        noise in prop::collection::vec(0.0f64..100.0, 80),
    ) {
        let series = |v: Vec<f64>| MonthlySeries {
            region: RegionId::new(1).unwrap(),
            case: Case::Count,
            start_month: YearMonth::new(2000, 1).unwrap(),
            values: v,
        };
        let Ok(a) = prepare(&series(values.clone()), 0.8, 4) else { return Ok(()) };
        let train_len = a.meta.train_months;
        let mut changed = values.clone();
        for (i, v) in changed.iter_mut().enumerate().skip(train_len) {
            *v = noise[i];
        }
        let b = prepare(&series(changed), 0.8, 4).unwrap();
        prop_assert_eq!(a.meta.scaler, b.meta.scaler);
        prop_assert_eq!(&a.train, &b.train);
        prop_assert_eq!(&a.rows[..train_len], &b.rows[..train_len]);
        for row in &b.rows[train_len..] {
            prop_assert_eq!(row.imputed, row.raw);
        }
    }

    #[test]
    fn every_box_point_has_one_region(lat in 23.0f64..=45.0, lon in 75.0f64..=119.0) {
        let grid = RegionGrid::study_area();
        let region = grid.assign(lat, lon).unwrap();
        let owners: Vec<RegionId> = RegionId::all()
            .filter(|&r| {
                let (la0, la1, lo0, lo1) = grid.region_bounds(r);
                let in_lat = la0 <= lat && (lat < la1 || (la1 == grid.lat_max && lat == la1));
                let in_lon = lo0 <= lon && (lon < lo1 || (lo1 == grid.lon_max && lon == lo1));
                in_lat && in_lon
            })
            .collect();
        prop_assert_eq!(owners, vec![region]);
    }

    #[test]
    fn batch_norm_standardizes_channels(batch in 2usize..6, channels in 1usize..4, len in 1usize..6, seed in any::<u64>(), scale in 0.5f64..50.0) {
        let mut r = common::rng(seed);
        let mut tape = Tape::new();
        let x = tape.constant(common::tensor(&mut r, &[batch, channels, len], scale));
        let g = tape.constant(Tensor::full([channels], 1.0));
        let b = tape.constant(Tensor::zeros([channels]));
        let (y, _) = tape.batch_norm(x, g, b, 0.0, None).unwrap();
        let d = tape.value(y).data();
        for c in 0..channels {
            let vals: Vec<f64> = (0..batch).flat_map(|s| (0..len).map(move |t| (s, t))).map(|(s, t)| d[(s * channels + c) * len + t]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() <= 1e-8);
            prop_assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn schedule_decays_monotonically(epochs in 1usize..400, lo in 1e-6f64..1e-3, span in 0.0f64..1e-2) {
        let c = TrainConfig { epochs, lr_start: lo + span, lr_end: lo, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for e in 0..epochs {
            let lr = lr_schedule(e, &c);
            prop_assert!(lr <= prev && lr >= lo * (1.0 - 1e-12) && lr <= (lo + span) * (1.0 + 1e-12));
            prev = lr;
        }
        prop_assert_eq!(lr_schedule(0, &c), c.lr_start);
        if epochs > 1 { prop_assert_eq!(lr_schedule(epochs - 1, &c), c.lr_end); }
    }

    #[test]
    fn adam_steps_stay_bounded(grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 1..30), lr in 1e-5f64..1e-2) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros([5]), true);
        let mut state = AdamState::new(&store);
        let config = TrainConfig::default();
        for g in grads {
            let before = store.get(id).value.data().to_vec();
            store.get_mut(id).grad = g;
            adam_step(&mut store, &mut state, lr, &config).unwrap();
            for (a, b) in before.iter().zip(store.get(id).value.data()) {
                prop_assert!((a - b).abs() <= 10.0 * lr);
            }
            prop_assert!(state.v[0].iter().all(|&v| v >= 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn checkpoints_reproduce_predictions(seed in any::<u64>(), arch_index in 0usize..5, binary in any::<bool>()) {
        let arch = Architecture::ALL[arch_index];
        let spec = common::tiny_spec(arch);
        let mut model = Model::build(&spec, seed).unwrap();
        let x = common::tensor(&mut common::rng(seed), &[4, spec.window], 1.0);
        let (before, _) = model.predict(x.data(), 4).unwrap();
        let ck = model.checkpoint();
        let restored = if binary {
            Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()
        } else {
            Checkpoint::from_json(&ck.to_json().unwrap()).unwrap()
        };
        let mut loaded = Model::from_checkpoint(&restored).unwrap();
        let (after, _) = loaded.predict(x.data(), 4).unwrap();
        prop_assert_eq!(before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), after.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(model.count_parameters(), loaded.count_parameters());
    }
}
