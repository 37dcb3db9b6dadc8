#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use selfcomp::config::TrainConfig;
use selfcomp::network::{build_cifar_net, param_key, Network, ParamRole};
use selfcomp::tensor::Tensor;

pub fn net_at(width_scale: f64, seed: u64) -> Network {
    let cfg = TrainConfig {
        seed,
        width_scale,
        ..TrainConfig::desk()
    };
    build_cifar_net(&cfg.widths(), &cfg.build_options()).unwrap()
}

/// Zero the bits and additive terms of one channel so that it emits nothing.
pub fn drain(net: &mut Network, layer: &str, channel: usize) {
    for role in [ParamRole::Bits, ParamRole::Bias, ParamRole::NormShift, ParamRole::RunningMean] {
        if let Some(t) = net.params.get_mut(&param_key(layer, role)) {
            t.data_mut()[channel] = 0.0;
        }
    }
}

/// Drain `k` random channel indices. Indices on axes shared by a residual
/// sum are drained in every writer. Returns the drained indices per
/// channel space.
pub fn force_channels(net: &mut Network, k: usize, rng: &mut ChaCha8Rng) -> BTreeMap<usize, BTreeSet<usize>> {
    let g = net.graph.clone();
    let (spaces, _) = g.channel_spaces();
    let mut slots = Vec::new();
    for (si, s) in spaces.iter().enumerate() {
        let prunable = !s.is_input
            && !s.is_output
            && !s.producers.is_empty()
            && s.producers.iter().all(|&p| g.layers[p].is_conv() && g.layers[p].is_quantized());
        if prunable {
            for c in 0..g.channels(Some(s.producers[0])) {
                slots.push((si, c));
            }
        }
    }
    let mut forced: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    while forced.values().map(BTreeSet::len).sum::<usize>() < k {
        let (si, c) = slots[rng.gen_range(0..slots.len())];
        forced.entry(si).or_default().insert(c);
    }
    for (&si, chans) in &forced {
        for &p in &spaces[si].producers {
            for &c in chans {
                drain(net, &g.layers[p].name, c);
            }
        }
    }
    forced
}

pub fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}
