use std::collections::BTreeSet;

use super::*;
use crate::nn::{EmbeddingConfig, PresetOptions};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 3,
        samples_per_epoch: 8,
        lr_initial: 0.01,
        lr_final: 0.001,
        eval_pairs: 4,
        score_scale: 0.01,
        ..TrainConfig::default()
    }
}

fn desk_scd() -> ScdConfig {
    ScdConfig {
        layers: BTreeSet::from([2, 3]),
        pair_budget: 40,
        ..ScdConfig::default()
    }
}

fn desk_model(seed: u64) -> SiameseModel {
    SiameseModel::new(
        EmbeddingConfig::desk(PresetOptions::default()),
        BTreeSet::from([2, 3]),
        &mut stream_rng(seed, Stream::Init),
    )
    .unwrap()
}

fn batch(seed: u64, n: usize) -> Batch {
    Batch::generate(&mut stream_rng(seed, Stream::Data), &PairSpec::default(), n).unwrap()
}

#[test]
fn lr_decays_geometrically_to_the_final_rate() {
    let cfg = TrainConfig::default();
    let first = lr_schedule(0, &cfg).unwrap();
    let second = lr_schedule(1, &cfg).unwrap();
    assert_eq!(first, 1e-3);
    assert!((second / first - 0.910298).abs() < 1e-6);
    assert!((lr_schedule(49, &cfg).unwrap() - 1e-5).abs() < 1e-15);
    assert!(lr_schedule(50, &cfg).is_err());
    let one = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    assert_eq!(lr_schedule(0, &one).unwrap(), 1e-3);
}

#[test]
fn sgd_applies_decay_and_clears_grads() {
    let mut w = Tensor4::scalar(1.0).with_requires_grad(true);
    w.accumulate_grad(&[0.5]).unwrap();
    sgd_step(vec![&mut w], 0.1, 0.0).unwrap();
    assert!((w.item().unwrap() - 0.95).abs() < 1e-15);
    assert_eq!(w.grad(), Some(&[0.0][..]));

    let mut w = Tensor4::scalar(1.0).with_requires_grad(true);
    w.accumulate_grad(&[0.5]).unwrap();
    sgd_step(vec![&mut w], 0.1, 0.0005).unwrap();
    assert!((w.item().unwrap() - 0.94995).abs() < 1e-15);

    let mut bare = Tensor4::scalar(1.0).with_requires_grad(true);
    assert!(sgd_step(vec![&mut bare], 0.1, 0.0).is_err());
}

#[test]
fn config_errors_name_the_field() {
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    match cfg.validate() {
        Err(Error::Config { field, .. }) => assert_eq!(field, "train.epochs"),
        other => panic!("unexpected {other:?}"),
    }
}

fn param_grads(model: &SiameseModel) -> Vec<f64> {
    model
        .params()
        .iter()
        .flat_map(|p| p.grad().expect("accumulated").to_vec())
        .collect()
}

#[test]
fn combined_gradient_is_the_weighted_sum_of_its_parts() {
    let scd = ScdConfig {
        alpha: 0.7,
        beta: 1.3,
        ..desk_scd()
    };
    let cfg = small_cfg();
    let b = batch(1, 3);
    let base = desk_model(2);
    let rng = stream_rng(9, Stream::Scd);

    let grads_for = |pick: &dyn Fn(&StepGraph) -> Var| {
        let mut m = base.clone();
        let mut step = forward_step(&mut m, &b, &cfg, &scd, &mut rng.clone()).unwrap();
        let root = pick(&step);
        step.graph.backward(root).unwrap();
        m.accumulate_grads(&step.graph, &step.vars).unwrap();
        param_grads(&m)
    };
    let total = grads_for(&|s| s.objective);
    let task = grads_for(&|s| s.task);
    let l2 = grads_for(&|s| s.per_layer[&2]);
    let l3 = grads_for(&|s| s.per_layer[&3]);
    // Norm-wise relative error: individual entries can cancel to ~0.
    let (mut diff, mut norm) = (0.0, 0.0);
    for i in 0..total.len() {
        let expect = 0.7 * task[i] + 1.3 / 2.0 * (l2[i] + l3[i]);
        diff += (total[i] - expect).powi(2);
        norm += expect * expect;
    }
    let rel = (diff / norm).sqrt();
    assert!(rel < 1e-10, "relative error {rel}");
}

#[test]
fn zero_beta_matches_disabled_bitwise() {
    let cfg = small_cfg();
    let run = |scd: ScdConfig| {
        let mut t = Trainer::new(desk_model(5), cfg.clone(), scd).unwrap();
        t.run(1, |_, _| Ok(())).unwrap();
        t.model.to_checkpoint().to_bytes()
    };
    let zero = run(ScdConfig {
        beta: 0.0,
        ..desk_scd()
    });
    let off = run(ScdConfig {
        enabled: false,
        ..desk_scd()
    });
    assert!(zero == off);
}

#[test]
fn training_is_deterministic() {
    let cfg = small_cfg();
    let run = || {
        let mut rows = Vec::new();
        let mut t = Trainer::new(desk_model(6), cfg.clone(), desk_scd()).unwrap();
        t.run(2, |r, _| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap();
        (rows, t.model.to_checkpoint().to_bytes())
    };
    let (ra, ca) = run();
    let (rb, cb) = run();
    assert_eq!(ra.len(), 6);
    assert_eq!(ra[0].epoch, 0.5);
    assert_eq!(ra, rb);
    assert!(ca == cb);
}

#[test]
fn repeated_steps_reduce_the_loss_on_a_fixed_batch() {
    let cfg = small_cfg();
    let scd = desk_scd();
    let b = batch(3, 4);
    let mut m = desk_model(3);
    let mut rng = stream_rng(3, Stream::Scd);
    let first = train_step(&mut m, &b, &cfg, &scd, 0.05, &mut rng).unwrap();
    let mut last = first.clone();
    for _ in 0..30 {
        last = train_step(&mut m, &b, &cfg, &scd, 0.05, &mut rng).unwrap();
    }
    assert!(last.combined < first.combined, "{} -> {}", first.combined, last.combined);
    assert!(last.task_loss < first.task_loss);
}

#[test]
fn row_cadence_must_fit_the_epoch() {
    let mut t = Trainer::new(desk_model(0), small_cfg(), desk_scd()).unwrap();
    assert!(t.run(0, |_, _| Ok(())).is_err());
    assert!(t.run(3, |_, _| Ok(())).is_err());
}
