mod common;

use collidenet_core::datagen::{ClipSample, Dataset};
use collidenet_core::harness::*;
use collidenet_core::numerics::Tensor;
use collidenet_core::temporal::{ablation_row, ClipInput, CollideNet, ModelConfig, Toggles};
use collidenet_core::{Error, Result};
use common::{rng, uniform};

const SEQ: usize = 8;

fn config() -> ModelConfig {
    ModelConfig::compact(SEQ)
}

fn clips(seed: u64, n: usize) -> Vec<ClipSample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let z = uniform(&mut r, &[SEQ, 16]);
            let label = 2.0 + z.data()[0];
            ClipSample {
                input: ClipInput::Embeddings(z),
                ttc_label: label,
                id: format!("s{seed}-{i}"),
            }
        })
        .collect()
}

fn dataset() -> Dataset {
    Dataset {
        train: clips(1, 6),
        val: clips(2, 3),
        test: clips(3, 3),
    }
}

fn quick(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        plateau_patience: 2.min(max_epochs.saturating_sub(1)),
        early_stop_patience: 4.min(max_epochs.saturating_sub(1)),
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let data = dataset();
    let mut model = CollideNet::new(config(), 0).unwrap();
    let before = model.params.clone();
    train(&mut model, &data.train, &data.val, &TrainConfig { lr: 0.0, ..quick(5) }).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(model.params.iter()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn memorises_a_single_sample() {
    let one = clips(4, 1);
    let mut model = CollideNet::new(config(), 1).unwrap();
    let initial = evaluate(&model, &one, 0).unwrap().mse;
    let cfg = TrainConfig {
        max_epochs: 200,
        plateau_patience: 198,
        early_stop_patience: 199,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &one, &one, &cfg).unwrap();
    let last = out.history.last().unwrap().train_mse;
    assert_eq!(out.history.len(), 200);
    assert!(last < 0.01 * initial, "{last} vs initial {initial}");
    assert!(evaluate(&model, &one, 0).unwrap().mse < 0.01 * initial);
}

#[test]
fn steady_improvement_never_decays_the_rate() {
    let one = clips(5, 1);
    let mut model = CollideNet::new(config(), 2).unwrap();
    let cfg = TrainConfig { lr: 1e-4, batch_size: 1, ..quick(10) };
    let out = train(&mut model, &one, &one, &cfg).unwrap();
    assert!(out.history.iter().all(|h| h.improved), "{:?}", out.history);
    assert!(out.history.iter().all(|h| !h.lr_decayed && h.lr == 1e-4));
}

#[test]
fn plateau_halves_rate_and_best_checkpoint_is_kept() {
    let data = dataset();
    let mut model = CollideNet::new(config(), 3).unwrap();
    let cfg = TrainConfig { lr: 0.05, ..quick(12) };
    let out = train(&mut model, &data.train, &data.val, &cfg).unwrap();
    let seen = out.history.iter().map(|h| h.val_mse).fold(out.initial_val_mse, f64::min);
    assert_eq!(out.best_val_mse, seen);
    assert_eq!(evaluate(&model, &data.val, 0).unwrap().mse, out.best_val_mse);
    for (i, h) in out.history.iter().enumerate() {
        if h.lr_decayed {
            assert!(i + 1 >= cfg.plateau_patience);
            assert!(out.history[i + 1 - cfg.plateau_patience..=i].iter().all(|r| !r.improved));
            if let Some(next) = out.history.get(i + 1) {
                assert_eq!(next.lr, 0.5 * h.lr);
            }
        }
    }
    if out.stopped_early {
        assert!(out.history.iter().rev().take(cfg.early_stop_patience).all(|r| !r.improved));
    }
}

#[test]
fn training_is_reproducible() {
    let data = dataset();
    let run = || {
        let mut m = CollideNet::new(config(), 4).unwrap();
        let out = train(&mut m, &data.train, &data.val, &quick(3)).unwrap();
        (m, out)
    };
    assert_eq!(run(), run());
}

#[test]
fn overflowing_loss_aborts_with_a_dump() {
    let mut bad = clips(6, 2);
    bad[1].ttc_label = 1e300;
    let mut model = CollideNet::new(config(), 5).unwrap();
    let err = train(&mut model, &bad, &clips(7, 1), &quick(3)).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

struct Oracle;

impl Predictor for Oracle {
    fn predict_ttc(&self, input: &ClipInput) -> Result<f64> {
        let ClipInput::Embeddings(z) = input else { unreachable!() };
        Ok(2.0 + z.data()[0])
    }

    fn fingerprint(&self) -> u64 {
        0
    }
}

#[test]
fn perfect_predictor_scores_zero() {
    assert_eq!(evaluate(&Oracle, &clips(8, 5), 0).unwrap().mse, 0.0);
}

#[test]
fn constant_predictor_arithmetic() {
    let mut set = clips(9, 2);
    set[0].ttc_label = 1.0;
    set[1].ttc_label = 3.0;
    assert_eq!(evaluate(&ConstantPredictor(2.0), &set, 0).unwrap().mse, 1.0);
    let c = 0.5;
    let want = ((1.0 - c) * (1.0f64 - c) + (3.0 - c) * (3.0 - c)) / 2.0;
    assert_eq!(evaluate(&ConstantPredictor(c), &set, 0).unwrap().mse, want);
    assert_eq!(ConstantPredictor::mean_of(&set), ConstantPredictor(2.0));
    assert!(evaluate(&ConstantPredictor(1.0), &[], 0).is_err());
}

#[test]
fn evaluation_is_repeatable() {
    let model = CollideNet::new(config(), 6).unwrap();
    let set = clips(10, 4);
    let a = evaluate(&model, &set, 3).unwrap();
    assert_eq!(a, evaluate(&model, &set, 3).unwrap());
    assert_eq!(format!("{a:?}"), format!("{:?}", evaluate(&model, &set, 3).unwrap()));
    assert_eq!(a.residuals.len(), 4);
    assert_ne!(a.fingerprint, 0);
}

#[test]
fn ablation_rows_match_the_table() {
    assert_eq!(ablation_row(1), Some(Toggles::all()));
    assert_eq!(ablation_row(14), Some(Toggles::none()));
    assert_eq!(
        ablation_row(6),
        Some(Toggles {
            multi_scale: false,
            trend: true,
            seasonality: true,
            non_stationary: false
        })
    );
    assert_eq!(ablation_row(15), None);
}

#[test]
fn untrained_ablation_equals_initial_evaluation() {
    let data = dataset();
    let rows = run_ablation(&config(), &data, &quick(0), &[7, 8]).unwrap();
    assert_eq!(rows.len(), 14);
    for row in &rows {
        assert_eq!(row.runs.len(), 2);
        for run in &row.runs {
            let model = CollideNet::new(with_toggles(&config(), row.toggles), run.seed).unwrap();
            assert_eq!(run.mse(), Some(evaluate(&model, &data.test, run.seed).unwrap().mse), "row {}", row.id);
        }
    }
}

#[test]
fn row_failures_are_recorded() {
    let mut data = dataset();
    data.val.clear();
    let row = run_ablation_row(&config(), 1, &data, &quick(1), &[0, 1]).unwrap();
    assert_eq!(row.runs.len(), 2);
    assert!(row.runs.iter().all(|r| r.result.is_err()));
    assert!(row.mse_mean_std().0.is_nan());
}

#[test]
fn sweeps_validate_before_training() {
    // An empty dataset would fail at training time; a config error proves
    // the sweep never got that far.
    let empty = Dataset::default();
    for (axis, v) in [(SweepAxis::TemporalScales, 5), (SweepAxis::WindowK, 17), (SweepAxis::WindowK, 4), (SweepAxis::SpatialScales, 5)] {
        let err = run_sensitivity(axis, &[1, v], &config(), &empty, &quick(1), &[0]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{axis:?}: {err}");
    }
    assert!(SweepAxis::WindowK.default_values().contains(&1));
    assert_eq!(SweepAxis::TemporalScales.default_values(), vec![1, 2, 3, 4, 5]);
}

#[test]
fn singleton_sweep_gives_one_row() {
    let rows = run_sensitivity(SweepAxis::WindowK, &[1], &config(), &dataset(), &quick(1), &[0]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].value, 1);
    assert!(rows[0].runs[0].mse().unwrap().is_finite());
}

#[test]
fn train_config_invariants() {
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!(TrainConfig::fine_tune().lr, 1e-6);
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { early_stop_patience: 50, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::default() }.validate().is_err());
    let mut model = CollideNet::new(config(), 0).unwrap();
    assert!(train(&mut model, &[], &clips(0, 1), &quick(1)).is_err());
}

#[test]
fn median_and_spread() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    let row = AblationRow {
        id: 1,
        toggles: Toggles::all(),
        runs: [1.0, 3.0].iter().enumerate().map(|(i, m)| SeedRun { seed: i as u64, result: Ok(*m) }).collect(),
    };
    assert_eq!(row.mse_mean_std(), (2.0, 1.0));
    let _ = Tensor::zeros(&[1]);
}
