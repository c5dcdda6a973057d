mod common;

use capc::csi::{few_shot_split, Dataset};
use capc::eval::{linear_eval, semi_supervised_eval, shots_sweep, transfer_eval, EvalConfig};
use capc::model::{Encoder, EncoderConfig};
use capc::synth::{generate, SynthParams};
use capc::train::{pretrain, TrainConfig};
use common::{param_values, rng};
use rand::seq::SliceRandom;

fn synth(classes: usize, per_class: usize, seed: u64) -> Dataset {
    let params = SynthParams {
        subcarriers: 8,
        frames: 40,
        classes,
        samples_per_class: per_class,
        seed,
        ..SynthParams::default()
    };
    generate(&params.build().unwrap()).unwrap()
}

fn encoder(tag: u64) -> Encoder<f32> {
    let cfg = EncoderConfig {
        links: 3,
        subcarriers: 8,
        frames: 10,
        channels: [4, 8],
        embed_dim: 8,
    };
    Encoder::new(cfg, &mut rng(tag)).unwrap()
}

fn quick(mut cfg: EvalConfig, epochs: usize) -> EvalConfig {
    cfg.epochs = epochs;
    cfg.batch_size = 32;
    cfg.shots = 4;
    cfg
}

#[test]
fn linear_eval_leaves_encoder_untouched_and_semi_changes_it() {
    let ds = synth(4, 12, 0);
    let enc = encoder(600);
    let before = param_values(&enc);
    linear_eval(&enc, &ds, &quick(EvalConfig::linear(), 5)).unwrap();
    assert_eq!(param_values(&enc), before);

    let (_, tuned) = semi_supervised_eval(&enc, &ds, &quick(EvalConfig::semi(), 2)).unwrap();
    assert_eq!(param_values(&enc), before);
    let after = param_values(&tuned);
    let changed = after
        .iter()
        .zip(&before)
        .filter(|((name, a), (_, b))| !name.contains("running") && a != b)
        .count();
    assert!(changed > 0);
    assert_ne!(after, before);
}

#[test]
fn few_shot_splits_are_disjoint_and_cover_the_data() {
    let ds = synth(4, 12, 0);
    for seed in 0..5 {
        let (train, test) = few_shot_split(&ds, 3, seed).unwrap();
        let ids = |d: &Dataset| d.samples.iter().map(|s| s.sample_id.clone()).collect::<Vec<_>>();
        let (a, b) = (ids(&train), ids(&test));
        assert!(a.iter().all(|id| !b.contains(id)));
        assert_eq!(a.len() + b.len(), ds.len());
        assert_eq!(train.class_histogram(), vec![3; 4]);
    }
    assert!(few_shot_split(&ds, 13, 0).is_err());
}

#[test]
fn transfer_on_source_equals_linear_exactly() {
    let ds = synth(4, 12, 0);
    let enc = encoder(601);
    let cfg = quick(EvalConfig::linear(), 10);
    assert_eq!(transfer_eval(&enc, &ds, &cfg).unwrap(), linear_eval(&enc, &ds, &cfg).unwrap());

    let mut wrong = SynthParams {
        subcarriers: 6,
        frames: 40,
        classes: 2,
        samples_per_class: 6,
        ..SynthParams::default()
    };
    let other = generate(&wrong.build().unwrap()).unwrap();
    let err = transfer_eval(&enc, &other, &cfg).unwrap_err().to_string();
    assert!(err.contains("antenna and subcarrier dimensions"), "{err}");
    wrong.subcarriers = 8;
    wrong.links = 2;
    assert!(transfer_eval(&enc, &generate(&wrong.build().unwrap()).unwrap(), &cfg).is_err());
}

fn shuffled_labels(mut ds: Dataset, tag: u64) -> Dataset {
    let mut labels: Vec<_> = ds.samples.iter().map(|s| s.label).collect();
    labels.shuffle(&mut rng(tag));
    for (s, l) in ds.samples.iter_mut().zip(labels) {
        s.label = l;
    }
    ds
}

/// `|acc - 1/n| <= 3 sigma` of a binomial with `trials` draws.
fn within_chance(acc: f64, classes: usize, trials: usize) -> bool {
    let p = 1.0 / classes as f64;
    (acc - p).abs() <= 3.0 * (p * (1.0 - p) / trials as f64).sqrt()
}

#[test]
fn random_labels_give_chance_accuracy() {
    let ds = shuffled_labels(synth(4, 60, 1), 602);
    let enc = encoder(603);
    let mut accs = Vec::new();
    for seed in 0..3 {
        let cfg = EvalConfig {
            seed,
            ..quick(EvalConfig::linear(), 30)
        };
        let r = linear_eval(&enc, &ds, &cfg).unwrap();
        assert_eq!(r.test_count, 240 - 16);
        accs.push(r.accuracy);
    }
    let mean = accs.iter().sum::<f64>() / 3.0;
    assert!(within_chance(mean, 4, 3 * 224), "{accs:?}");

    let zero = semi_supervised_eval(&enc, &ds, &quick(EvalConfig::semi(), 0)).unwrap().0;
    assert!(within_chance(zero.accuracy, 4, 224), "{}", zero.accuracy);
}

#[test]
fn frozen_semi_matches_linear() {
    let ds = synth(4, 20, 2);
    let enc = encoder(604);
    let mut lin = 0.0;
    let mut semi = 0.0;
    for seed in 0..3 {
        let base = EvalConfig {
            seed,
            ..quick(EvalConfig::linear(), 20)
        };
        lin += linear_eval(&enc, &ds, &base).unwrap().accuracy;
        let frozen = EvalConfig {
            mode: capc::eval::EvalMode::Semi,
            lr_encoder: 0.0,
            ..base
        };
        let (r, tuned) = semi_supervised_eval(&enc, &ds, &frozen).unwrap();
        assert_eq!(param_values(&tuned), param_values(&enc));
        semi += r.accuracy;
    }
    let (lin, semi) = (lin / 3.0, semi / 3.0);
    assert!((lin - semi).abs() <= 0.02, "linear {lin} semi {semi}");
}

#[test]
fn sweep_cells_and_row_average() {
    let ds = synth(4, 12, 0);
    let enc = encoder(605);
    let base = quick(EvalConfig::linear(), 5);
    let single = shots_sweep(&[("r", &enc)], &ds, &[2], &[0], &base).unwrap();
    assert_eq!(single.rows.len(), 1);
    let table = shots_sweep(&[("r", &enc)], &ds, &[2, 4], &[0, 1], &base).unwrap();
    let again = shots_sweep(&[("r", &enc)], &ds, &[2, 4], &[0, 1], &base).unwrap();
    assert_eq!(table, again);
    let cells = [table.cell_mean("r", 2).unwrap(), table.cell_mean("r", 4).unwrap()];
    assert!((table.row_average("r").unwrap() - (cells[0] + cells[1]) / 2.0).abs() < 1e-12);
}

#[test]
fn pretrained_encoder_transfers_to_other_electronics() {
    let source = {
        let params = SynthParams {
            frames: 100,
            samples_per_class: 12,
            ..SynthParams::default()
        };
        generate(&params.build().unwrap()).unwrap()
    };
    let target = {
        let params = SynthParams {
            frames: 100,
            classes: 4,
            samples_per_class: 30,
            seed: 99,
            ..SynthParams::default()
        };
        generate(&params.build().unwrap()).unwrap()
    };
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 32,
        lr_weights: 5.0,
        warmup_epochs: 1,
        horizon: 4,
        embed_dim: 16,
        hidden_dim: 16,
        proj_dim: 16,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let model = pretrain(&cfg, &source, None).unwrap().model;
    let eval = EvalConfig {
        shots: 6,
        epochs: 50,
        ..EvalConfig::linear()
    };
    let r = transfer_eval(model.encoder(), &target, &eval).unwrap();
    let sigma = (0.25 * 0.75 / r.test_count as f64).sqrt();
    assert!(r.accuracy > 0.25 + 3.0 * sigma, "{r:?}");
}
