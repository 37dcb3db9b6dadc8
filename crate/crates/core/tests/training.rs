use std::sync::Arc;

use selfcomp::config::{Plateau, TrainConfig};
use selfcomp::data::{synthetic_dataset, AugmentConfig, BatchStream, LoaderConfig, SyntheticKind};
use selfcomp::size::{network_size, SizeMode};
use selfcomp::trainer::{compute_gradients, load_datasets, train, MetricsRow, Objective, StopReason};

use common::net_at;

mod common;

fn tiny() -> TrainConfig {
    TrainConfig {
        main_steps: 12,
        width_scale: 0.125,
        batch_size: 8,
        synthetic_train_size: 96,
        synthetic_test_size: 32,
        train_subset: None,
        eval_subset: None,
        eval_interval: 4,
        eval_batch_size: 32,
        prune_warmup: 4,
        prune_interval: 4,
        gamma: 1.0,
        record_step_time: false,
        ..TrainConfig::desk()
    }
}

fn run(cfg: &TrainConfig) -> (selfcomp::trainer::TrainOutcome, Vec<MetricsRow>) {
    let (tr, ev) = load_datasets(cfg).unwrap();
    let net = net_at(cfg.width_scale, cfg.seed);
    let mut rows = Vec::new();
    let out = train(net, Arc::new(tr), &ev, cfg, &mut rows).unwrap();
    (out, rows)
}

#[test]
fn history_and_prune_schedule() {
    let cfg = tiny();
    let (out, rows) = run(&cfg);
    assert_eq!(out.stop_reason, StopReason::Budget);
    assert_eq!(out.steps, 12);
    assert_eq!(rows, out.history);
    assert_eq!(rows.len(), 13);
    assert!(rows.iter().enumerate().all(|(i, r)| r.step == i));
    assert!(rows[0].task_loss.is_none() && rows[0].eval_acc.is_some());
    for r in &rows[1..] {
        assert!(r.task_loss.unwrap().is_finite());
        assert_eq!(r.eval_acc.is_some(), r.step % 4 == 0);
    }
    for e in &out.prune_events {
        assert!(e.step >= cfg.prune_warmup && e.step % cfg.prune_interval == 0);
        assert!(e.max_removed_magnitude < cfg.bias_tol);
    }
    let last = rows.last().unwrap();
    let size = network_size(&out.net, cfg.size_mode);
    assert_eq!(out.final_size, size);
    assert_eq!(last.q, size.q);
    assert_eq!(last.eval_acc, Some(out.final_eval.accuracy));
    assert_eq!(size.n, net_at(cfg.width_scale, cfg.seed).initial_weight_count());
    for (name, live) in out.net.live_channels() {
        assert!(live <= out.net.initial_widths()[&name]);
    }
}

#[test]
fn a_large_compression_factor_shrinks_bits() {
    let (out, rows) = run(&tiny());
    assert!(rows.last().unwrap().total_bits < rows[0].total_bits);
    assert!(out.final_size.q < rows[0].q);
}

#[test]
fn annealing_stops_on_a_plateau_rule() {
    let cfg = TrainConfig {
        main_steps: 4,
        anneal_max_steps: 40,
        eval_interval: 1,
        plateau: Plateau {
            factor: 0.5,
            patience: 1,
            min_lr: 0.1,
        },
        ..tiny()
    };
    let (out, rows) = run(&cfg);
    assert!(out.steps <= 44);
    assert_ne!(out.stop_reason, StopReason::Budget);
    assert!(rows.windows(2).all(|w| w[1].lr_w <= w[0].lr_w));
    assert!(rows[..=4].iter().all(|r| r.lr_w == cfg.lr_weights && r.lr_q == cfg.lr_quant));
    if out.stop_reason == StopReason::LearningRateFloor {
        assert!(rows.last().unwrap().lr_w < cfg.lr_weights * 0.1 * 2.0);
    }
    let ratio = rows.last().unwrap().lr_q / cfg.lr_quant;
    assert_eq!(rows.last().unwrap().lr_w / cfg.lr_weights, ratio);
}

#[test]
fn zero_gamma_leaves_size_out_of_the_loss() {
    let net = net_at(0.125, 0);
    let data = Arc::new(synthetic_dataset(SyntheticKind::TwoGaussians, 16, 0).unwrap());
    let batch = BatchStream::new(
        data,
        LoaderConfig {
            batch_size: 8,
            seed: 0,
            augment: AugmentConfig::eval(),
        },
    )
    .next()
    .unwrap();
    let obj = Objective {
        gamma: 0.0,
        size_mode: SizeMode::Coupled,
        bias_drain_weight: 1.0,
    };
    let g0 = compute_gradients(&net, &batch, &obj).unwrap();
    assert_eq!(g0.loss.size_term, 0.0);
    assert_eq!(g0.loss.total, g0.loss.task_loss + g0.loss.bias_drain);

    let g1 = compute_gradients(&net, &batch, &Objective { gamma: 0.5, ..obj }).unwrap();
    let q = network_size(&net, SizeMode::Coupled).q;
    assert!((g1.loss.size_term - 0.5 * q).abs() < 1e-4 * q);
    // The size term only adds a constant pull on bit depths.
    let key = "layer2.bits";
    let d: Vec<f32> = g1.grads[key].data().iter().zip(g0.grads[key].data()).map(|(a, b)| a - b).collect();
    assert!(d.iter().all(|&v| v > 0.0));
    assert_eq!(g1.grads["layer2.weight"], g0.grads["layer2.weight"]);
}

#[test]
fn too_many_classes_is_a_config_error() {
    let cfg = tiny();
    let net = net_at(0.125, 0);
    let data = synthetic_dataset(SyntheticKind::StripedPatterns, 16, 0).unwrap();
    let mut labels = data.labels().to_vec();
    labels[0] = 10;
    let pixels: Vec<u8> = (0..16).flat_map(|i| data.image_bytes(i).to_vec()).collect();
    let bad = selfcomp::data::Dataset::new(pixels, labels, 11).unwrap();
    let r = train(net, Arc::new(bad), &data, &cfg, &mut Vec::new());
    assert!(matches!(r, Err(selfcomp::Error::Config(_))));
}
