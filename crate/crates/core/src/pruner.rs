//! Removal of zero-bit channels.
//!
//! A channel of a convolution block is removable when its bit depth is zero
//! and the block emits (almost) nothing on that channel for a zero input,
//! i.e. its bias and normalization shift have drained. When several layers
//! write the same channel axis through a residual sum, an index is removed
//! only if it is removable in every one of them.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{logits, param_key, ChannelSpace, Network, ParamRole};
use crate::optim::Adam;
use crate::size::{network_size, SizeMode};
use crate::tensor::Tensor;

/// Default bound on the zero-input response of a removable channel.
pub const BIAS_TOL: f32 = 1e-5;

/// Relative logit tolerance of [`prune_verified`].
pub const PRESERVATION_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneCandidate {
    pub layer: String,
    pub channel: usize,
    pub bits: f32,
    /// Magnitude of the channel's output on an all-zero input.
    pub magnitude: f32,
}

/// Candidates together with the network revision they were computed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub revision: u64,
    pub candidates: Vec<PruneCandidate>,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneOptions {
    pub bias_tol: f32,
    /// Allow removing channels of axes shared through residual sums.
    pub prune_residual: bool,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            bias_tol: BIAS_TOL,
            prune_residual: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PruneReport {
    /// Output channels removed from each producing layer.
    pub channels_removed: BTreeMap<String, usize>,
    pub weights_removed: usize,
    pub bits_removed: f64,
    pub optimizer_entries_removed: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    /// Candidates left in place because a residual twin was not removable.
    pub refused: Vec<(String, usize)>,
}

impl PruneReport {
    pub fn total_channels_removed(&self) -> usize {
        self.channels_removed.values().sum()
    }
}

/// Multiply-accumulates for one example.
pub fn flop_estimate(net: &Network) -> u64 {
    network_size(net, SizeMode::Simple).flops
}

fn prunable(net: &Network, space: &ChannelSpace, opts: &PruneOptions) -> bool {
    !space.is_output
        && !space.is_input
        && !space.producers.is_empty()
        && (opts.prune_residual || space.producers.len() == 1)
        && space.producers.iter().all(|&p| {
            let l = &net.graph.layers[p];
            l.is_conv() && l.is_quantized()
        })
}

/// Every channel that passes the bit and drain tests in all layers writing
/// its axis.
pub fn find_removable(net: &Network, opts: &PruneOptions) -> CandidateSet {
    let (spaces, _) = net.graph.channel_spaces();
    let mut candidates = Vec::new();
    for space in spaces.iter().filter(|s| prunable(net, s, opts)) {
        let per_layer: Vec<(String, &[f32], Vec<f32>)> = space
            .producers
            .iter()
            .map(|&p| {
                let name = net.graph.layers[p].name.clone();
                let bits = net.bits(&name).unwrap_or(&[]);
                let resp = net.zero_input_response(&name).unwrap_or_default();
                (name, bits, resp)
            })
            .collect();
        let width = per_layer.iter().map(|(_, b, r)| b.len().min(r.len())).min().unwrap_or(0);
        for c in 0..width {
            let ok = per_layer
                .iter()
                .all(|(_, bits, resp)| bits[c] == 0.0 && resp[c].abs() < opts.bias_tol);
            if ok {
                for (name, bits, resp) in &per_layer {
                    candidates.push(PruneCandidate {
                        layer: name.clone(),
                        channel: c,
                        bits: bits[c],
                        magnitude: resp[c].abs(),
                    });
                }
            }
        }
    }
    CandidateSet {
        revision: net.revision(),
        candidates,
    }
}

/// Drop candidates so that every layer keeps at least one channel; the
/// highest-index channel of an axis that would empty is spared.
pub fn keep_one_survivor(net: &Network, set: &mut CandidateSet) {
    let (spaces, _) = net.graph.channel_spaces();
    for space in &spaces {
        let Some(&first) = space.producers.first() else {
            continue;
        };
        let name = &net.graph.layers[first].name;
        let width = net.graph.channels(Some(first));
        let removed: BTreeSet<usize> = set
            .candidates
            .iter()
            .filter(|c| &c.layer == name)
            .map(|c| c.channel)
            .collect();
        if width > 0 && removed.len() >= width {
            let spare = width - 1;
            let members: BTreeSet<&str> = space
                .producers
                .iter()
                .map(|&p| net.graph.layers[p].name.as_str())
                .collect();
            set.candidates
                .retain(|c| !(c.channel == spare && members.contains(c.layer.as_str())));
        }
    }
}

/// Remove the channels in `set` from `net` and from the optimizer moments.
pub fn prune(net: &mut Network, mut optim: Option<&mut Adam>, set: &CandidateSet) -> Result<PruneReport> {
    if set.revision != net.revision() {
        return Err(Error::StaleCandidates(format!(
            "computed at revision {}, network is at {}",
            set.revision,
            net.revision()
        )));
    }
    let g = &net.graph;
    let mut by_layer: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for c in &set.candidates {
        let Some(idx) = g.index_of(&c.layer) else {
            return Err(Error::StaleCandidates(format!("no layer named `{}`", c.layer)));
        };
        let bits = net.bits(&c.layer).unwrap_or(&[]);
        if c.channel >= g.channels(Some(idx)) || bits.get(c.channel) != Some(&0.0) {
            return Err(Error::StaleCandidates(format!(
                "`{}` channel {} is not a zero-bit channel",
                c.layer, c.channel
            )));
        }
        by_layer.entry(c.layer.as_str()).or_default().insert(c.channel);
    }

    let flops_before = flop_estimate(net);
    let weights_before = net.weight_count();
    let bits_before = network_size(net, SizeMode::Simple).total_bits;
    let (spaces, _) = g.channel_spaces();
    let mut report = PruneReport {
        flops_before,
        ..Default::default()
    };
    // (space, keep list)
    let mut plan: Vec<(usize, Vec<usize>)> = Vec::new();
    for (si, space) in spaces.iter().enumerate() {
        let names: Vec<&str> = space.producers.iter().map(|&p| g.layers[p].name.as_str()).collect();
        let requested: BTreeSet<usize> = names
            .iter()
            .flat_map(|n| by_layer.get(n).into_iter().flatten().copied())
            .collect();
        if requested.is_empty() {
            continue;
        }
        if space.is_output || space.is_input {
            return Err(Error::StaleCandidates("candidate on the network input or output".into()));
        }
        let mut remove = BTreeSet::new();
        for &c in &requested {
            if names.iter().all(|n| by_layer.get(n).is_some_and(|s| s.contains(&c))) {
                remove.insert(c);
            } else {
                for n in &names {
                    if by_layer.get(n).is_some_and(|s| s.contains(&c)) {
                        report.refused.push((n.to_string(), c));
                    }
                }
            }
        }
        if remove.is_empty() {
            continue;
        }
        let width = g.channels(Some(space.producers[0]));
        if remove.len() >= width {
            return Err(Error::WouldEmptyLayer(names.join(", ")));
        }
        let keep: Vec<usize> = (0..width).filter(|c| !remove.contains(c)).collect();
        for n in &names {
            report.channels_removed.insert(n.to_string(), remove.len());
        }
        plan.push((si, keep));
    }

    for (si, keep) in plan {
        let space = &spaces[si];
        for &p in &space.producers {
            let name = net.graph.layers[p].name.clone();
            for key in net.params.layer_keys(&name) {
                let t = net.params.get(&key).expect("listed key");
                *net.params.get_mut(&key).expect("listed key") = t.select(0, &keep)?;
                if let Some(o) = optim.as_deref_mut() {
                    report.optimizer_entries_removed += o.select(&key, 0, &keep)?;
                }
            }
            net.graph.layers[p].set_out(keep.len());
        }
        for &c in &space.consumers {
            let name = net.graph.layers[c].name.clone();
            let key = param_key(&name, ParamRole::Weight);
            let t = net
                .params
                .get(&key)
                .ok_or_else(|| Error::Network(format!("missing `{key}`")))?;
            *net.params.get_mut(&key).expect("checked") = t.select(1, &keep)?;
            if let Some(o) = optim.as_deref_mut() {
                report.optimizer_entries_removed += o.select(&key, 1, &keep)?;
            }
            net.graph.layers[c].set_in(keep.len());
        }
    }
    if report.channels_removed.is_empty() {
        report.flops_after = flops_before;
        return Ok(report);
    }
    net.bump_revision();
    report.flops_after = flop_estimate(net);
    report.weights_removed = weights_before - net.weight_count();
    report.bits_removed = bits_before - network_size(net, SizeMode::Simple).total_bits;
    Ok(report)
}

/// `n` standard-normal inputs shaped for `net`.
pub fn probe_inputs(net: &Network, n: usize, seed: u64) -> Tensor<f32> {
    let [c, h, w] = net.graph.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(vec![n, c, h, w], data).expect("shape matches data")
}

/// Prune a copy of `net` and keep the result only if its logits on `probes`
/// random inputs stay within `tol * (1 + max |logit|)` of the original.
pub fn prune_verified(
    net: &mut Network,
    set: &CandidateSet,
    probes: usize,
    seed: u64,
    tol: f64,
) -> Result<PruneReport> {
    let inputs = probe_inputs(net, probes, seed);
    let before = logits(net, &inputs)?;
    let mut pruned = net.clone();
    let report = prune(&mut pruned, None, set)?;
    let after = logits(&pruned, &inputs)?;
    let deviation = before
        .data()
        .iter()
        .zip(after.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    let limit = tol * (1.0 + before.max_abs() as f64);
    if !(deviation <= limit) {
        return Err(Error::Preservation { deviation, limit });
    }
    *net = pruned;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_cifar_net, logits, validate, BuildOptions, WidthConfig};
    use crate::tensor::Tensor;

    fn desk() -> Network {
        build_cifar_net(&WidthConfig::default().scaled(0.125), &BuildOptions::default()).unwrap()
    }

    fn zero_channel(net: &mut Network, layer: &str, c: usize) {
        net.params.get_mut(&format!("{layer}.bits")).unwrap().data_mut()[c] = 0.0;
        net.params.get_mut(&format!("{layer}.norm_shift")).unwrap().data_mut()[c] = 0.0;
    }

    fn inputs(n: usize) -> Tensor<f32> {
        let data = (0..n * 3 * 32 * 32).map(|i| ((i * 7919 % 1000) as f32 / 500.0) - 1.0).collect();
        Tensor::new([n, 3, 32, 32], data).unwrap()
    }

    #[test]
    fn nothing_to_remove_on_fresh_net() {
        let mut net = desk();
        let set = find_removable(&net, &PruneOptions::default());
        assert!(set.is_empty());
        let before = net.clone();
        let r = prune(&mut net, None, &set).unwrap();
        assert_eq!(r.total_channels_removed(), 0);
        assert_eq!(r.weights_removed, 0);
        assert_eq!(net, before);
    }

    #[test]
    fn gates_on_bits_and_drain() {
        let mut net = desk();
        zero_channel(&mut net, "res1a", 2);
        net.params.get_mut("res1a.bits").unwrap().data_mut()[3] = 0.3;
        net.params.get_mut("res1a.norm_shift").unwrap().data_mut()[3] = 0.0;
        zero_channel(&mut net, "res1a", 4);
        net.params.get_mut("res1a.norm_shift").unwrap().data_mut()[4] = 0.5;
        let set = find_removable(&net, &PruneOptions::default());
        let chans: Vec<_> = set.candidates.iter().map(|c| (c.layer.as_str(), c.channel)).collect();
        assert_eq!(chans, vec![("res1a", 2)]);
    }

    #[test]
    fn mid_layer_prune_preserves_logits() {
        let mut net = desk();
        zero_channel(&mut net, "res1a", 5);
        let x = inputs(4);
        let before = logits(&net, &x).unwrap();
        let set = find_removable(&net, &PruneOptions::default());
        let r = prune(&mut net, None, &set).unwrap();
        assert_eq!(r.channels_removed.get("res1a"), Some(&1));
        assert_eq!(net.graph.layer("res1a").unwrap().weight_dims().unwrap().out, 15);
        assert_eq!(net.graph.layer("res1b").unwrap().weight_dims().unwrap().inp, 15);
        assert_eq!(r.weights_removed, 16 * 9 * 2);
        assert!(r.flops_after < r.flops_before);
        assert!(validate(&net).is_empty());
        let after = logits(&net, &x).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn residual_twin_blocks_removal() {
        let mut net = desk();
        zero_channel(&mut net, "layer1", 1);
        assert!(find_removable(&net, &PruneOptions::default()).is_empty());
        zero_channel(&mut net, "res1b", 1);
        let set = find_removable(&net, &PruneOptions::default());
        assert_eq!(set.candidates.len(), 2);
        let off = PruneOptions {
            prune_residual: false,
            ..Default::default()
        };
        assert!(find_removable(&net, &off).is_empty());
        // A hand-made set naming only one branch is refused for that channel.
        let mut partial = set.clone();
        partial.candidates.retain(|c| c.layer == "layer1");
        zero_channel(&mut net, "res1a", 0);
        partial.revision = net.revision();
        partial.candidates.push(PruneCandidate {
            layer: "res1a".into(),
            channel: 0,
            bits: 0.0,
            magnitude: 0.0,
        });
        let r = prune(&mut net, None, &partial).unwrap();
        assert_eq!(r.refused, vec![("layer1".to_string(), 1)]);
        assert_eq!(r.channels_removed.get("res1a"), Some(&1));
        assert_eq!(net.graph.layer("layer1").unwrap().weight_dims().unwrap().out, 16);
    }

    #[test]
    fn stale_sets_are_rejected() {
        let mut net = desk();
        zero_channel(&mut net, "res1a", 5);
        let set = find_removable(&net, &PruneOptions::default());
        prune(&mut net, None, &set).unwrap();
        assert!(matches!(prune(&mut net, None, &set), Err(Error::StaleCandidates(_))));
    }

    #[test]
    fn emptying_a_layer_is_refused() {
        let mut net = desk();
        for c in 0..16 {
            zero_channel(&mut net, "res1a", c);
        }
        let mut set = find_removable(&net, &PruneOptions::default());
        assert!(matches!(prune(&mut net, None, &set), Err(Error::WouldEmptyLayer(_))));
        keep_one_survivor(&net, &mut set);
        let r = prune(&mut net, None, &set).unwrap();
        assert_eq!(r.channels_removed.get("res1a"), Some(&15));
        assert_eq!(net.graph.layer("res1a").unwrap().weight_dims().unwrap().out, 1);
    }
}
