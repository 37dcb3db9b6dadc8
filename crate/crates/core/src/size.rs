//! Network size in bits and the differentiable size objective.
//!
//! A quantized layer with dims `(O, I, H, W)` stores `I·H·W·Σb` bits
//! ("simple" size). The "coupled" size also accounts for input channels
//! that carry zero bits upstream:
//!
//! `z = H·W·(#live producer channels)·Σb + H·W·(#live own channels)·Σb_producer`
//!
//! where a channel is live when its bit depth is strictly positive. The
//! counts are treated as constants when differentiating. Coupled size needs
//! a unique producing convolution; a layer reading the network input or a
//! residual sum uses the simple size instead.
//!
//! `Q` is the summed layer size divided by `N`, the weight count of the
//! network as constructed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, GraphError, Var};
use crate::network::{param_key, LayerKind, Network, ParamRole, WeightDims};
use crate::tensor::Tensor;

/// Storage cost of an unquantized weight.
pub const FLOAT_BITS: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMode {
    Simple,
    #[default]
    Coupled,
}

impl std::str::FromStr for SizeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simple" => Ok(Self::Simple),
            "coupled" => Ok(Self::Coupled),
            other => Err(format!("unknown size mode `{other}` (expected simple or coupled)")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SizeError {
    #[error("bit vector has {got} entries for {want} channels")]
    Length { got: usize, want: usize },
    #[error("negative bit depth {0}")]
    Negative(f32),
}

fn check(bits: &[f32], want: usize) -> Result<(), SizeError> {
    if bits.len() != want {
        return Err(SizeError::Length { got: bits.len(), want });
    }
    match bits.iter().find(|b| !(**b >= 0.0)) {
        Some(&b) => Err(SizeError::Negative(b)),
        None => Ok(()),
    }
}

fn sum(bits: &[f32]) -> f64 {
    bits.iter().map(|&b| b as f64).sum()
}

fn live(bits: &[f32]) -> usize {
    bits.iter().filter(|&&b| b > 0.0).count()
}

/// `I·H·W·Σb`.
pub fn layer_size_simple(dims: WeightDims, bits: &[f32]) -> Result<f64, SizeError> {
    check(bits, dims.out)?;
    Ok(dims.per_channel() as f64 * sum(bits))
}

/// `H·W·(#b_prev > 0)·Σb + H·W·(#b > 0)·Σb_prev`.
pub fn layer_size_coupled(dims: WeightDims, bits: &[f32], prev_bits: &[f32]) -> Result<f64, SizeError> {
    check(bits, dims.out)?;
    check(prev_bits, dims.inp)?;
    let hw = (dims.kh * dims.kw) as f64;
    Ok(hw * live(prev_bits) as f64 * sum(bits) + hw * live(bits) as f64 * sum(prev_bits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSize {
    pub layer: String,
    /// Contribution to the objective in the chosen mode.
    pub z_bits: f64,
    /// `I·H·W·Σb` (or 32 bits per weight when unquantized).
    pub storage_bits: f64,
    pub live_channels: usize,
    pub initial_channels: usize,
    pub weights: usize,
    pub flops: u64,
    /// Coupled size was used for this layer.
    pub coupled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub mode: SizeMode,
    pub layers: Vec<LayerSize>,
    /// Objective bits divided by `N`.
    #[serde(rename = "Q")]
    pub q: f64,
    /// Bits needed to store every weight at its channel's depth.
    pub total_bits: f64,
    /// Sum of per-layer `z_bits`.
    pub objective_bits: f64,
    /// Starting weight count `N`.
    #[serde(rename = "N")]
    pub n: usize,
    pub live_weights: usize,
    /// Multiply-accumulates for one example.
    pub flops: u64,
}

impl SizeReport {
    pub fn live_channels(&self) -> usize {
        self.layers.iter().map(|l| l.live_channels).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSize> {
        self.layers.iter().find(|l| l.layer == name)
    }
}

/// How one weighted layer is sized.
#[derive(Debug, Clone)]
enum Plan {
    /// Unquantized: fixed 32 bits per weight.
    Float { weights: usize },
    Simple { dims: WeightDims },
    Coupled { dims: WeightDims, producer: String },
}

fn plans(net: &Network, mode: SizeMode) -> Vec<(String, Plan)> {
    let g = &net.graph;
    let (spaces, space_of) = g.channel_spaces();
    let mut out = Vec::new();
    for (idx, layer) in g.weighted() {
        let dims = layer.weight_dims().expect("weighted");
        let plan = if !layer.is_quantized() {
            Plan::Float { weights: dims.count() }
        } else if mode == SizeMode::Simple {
            Plan::Simple { dims }
        } else {
            let space = &spaces[g.input_space(idx, &space_of, &spaces)];
            match space.producers.as_slice() {
                [p] if g.layers[*p].is_quantized() && g.layers[*p].is_conv() => Plan::Coupled {
                    dims,
                    producer: g.layers[*p].name.clone(),
                },
                _ => Plan::Simple { dims },
            }
        };
        out.push((layer.name.clone(), plan));
    }
    out
}

/// Size, live channel and FLOP accounting for `net`.
pub fn network_size(net: &Network, mode: SizeMode) -> SizeReport {
    let g = &net.graph;
    let shapes = g.infer_shapes().unwrap_or_default();
    let bits_of = |name: &str| net.bits(name).unwrap_or(&[]);
    let mut layers = Vec::new();
    for (name, plan) in plans(net, mode) {
        let idx = g.index_of(&name).expect("layer exists");
        let spec = &g.layers[idx];
        let dims = spec.weight_dims().expect("weighted");
        let positions = match (&spec.kind, shapes.get(idx)) {
            (LayerKind::ConvBlock(_), Some(&(_, h, w))) => (h * w) as u64,
            _ => 1,
        };
        let storage_bits = match plan {
            Plan::Float { weights } => FLOAT_BITS * weights as f64,
            _ => layer_size_simple(dims, bits_of(&name)).unwrap_or(0.0),
        };
        let (z_bits, coupled) = match &plan {
            Plan::Coupled { producer, .. } => (
                layer_size_coupled(dims, bits_of(&name), bits_of(producer)).unwrap_or(0.0),
                true,
            ),
            _ => (storage_bits, false),
        };
        let live_channels = match plan {
            Plan::Float { .. } => dims.out,
            _ => live(bits_of(&name)),
        };
        layers.push(LayerSize {
            initial_channels: net.initial_widths().get(&name).copied().unwrap_or(dims.out),
            layer: name,
            z_bits,
            storage_bits,
            live_channels,
            weights: dims.count(),
            flops: dims.count() as u64 * positions,
            coupled,
        });
    }
    let objective_bits: f64 = layers.iter().map(|l| l.z_bits).sum();
    let n = net.initial_weight_count();
    SizeReport {
        mode,
        q: objective_bits / n as f64,
        total_bits: layers.iter().map(|l| l.storage_bits).sum(),
        objective_bits,
        n,
        live_weights: layers.iter().map(|l| l.weights).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    }
}

/// Differentiable `Q` built from the bit-depth leaves in `params`.
///
/// Layers whose bits are not tracked in `params` contribute their value as
/// a constant.
pub fn size_term(
    g: &mut Graph<f32>,
    params: &BTreeMap<String, Var>,
    net: &Network,
    mode: SizeMode,
) -> Result<Var, GraphError> {
    let n = net.initial_weight_count() as f64;
    let mut constant = 0.0f64;
    let mut terms: Vec<Var> = Vec::new();
    let mut bit_sum = |g: &mut Graph<f32>, layer: &str, coeff: f64, constant: &mut f64| -> Result<(), GraphError> {
        if coeff == 0.0 {
            return Ok(());
        }
        match params.get(&param_key(layer, ParamRole::Bits)) {
            Some(&v) => {
                let s = g.sum(v)?;
                terms.push(g.scale(s, coeff / n)?);
            }
            None => *constant += coeff * sum(net.bits(layer).unwrap_or(&[])),
        }
        Ok(())
    };
    for (name, plan) in plans(net, mode) {
        match plan {
            Plan::Float { weights } => constant += FLOAT_BITS * weights as f64,
            Plan::Simple { dims } => bit_sum(g, &name, dims.per_channel() as f64, &mut constant)?,
            Plan::Coupled { dims, producer } => {
                let hw = (dims.kh * dims.kw) as f64;
                let own_live = live(net.bits(&name).unwrap_or(&[])) as f64;
                let prev_live = live(net.bits(&producer).unwrap_or(&[])) as f64;
                bit_sum(g, &name, hw * prev_live, &mut constant)?;
                bit_sum(g, &producer, hw * own_live, &mut constant)?;
            }
        }
    }
    let mut acc = g.constant(Tensor::scalar((constant / n) as f32))?;
    for t in terms {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// L1 penalty on the additive parameters (conv bias, normalization shift)
/// of channels whose bit depth is zero. `None` when no channel qualifies.
pub fn bias_drain(g: &mut Graph<f32>, params: &BTreeMap<String, Var>, net: &Network) -> Result<Option<Var>, GraphError> {
    let mut acc: Option<Var> = None;
    for (_, layer) in net.graph.weighted() {
        let Some(bits) = net.bits(&layer.name) else {
            continue;
        };
        if bits.iter().all(|&b| b > 0.0) {
            continue;
        }
        let mask: Vec<f32> = bits.iter().map(|&b| if b > 0.0 { 0.0 } else { 1.0 }).collect();
        for role in [ParamRole::Bias, ParamRole::NormShift] {
            let Some(&v) = params.get(&param_key(&layer.name, role)) else {
                continue;
            };
            let m = g.constant(Tensor::from_vec(mask.clone()))?;
            let a = g.abs(v)?;
            let masked = g.mul(a, m)?;
            let s = g.sum(masked)?;
            acc = Some(match acc {
                Some(prev) => g.add(prev, s)?,
                None => s,
            });
        }
    }
    Ok(acc)
}

/// Value of the bias-drain penalty without building a graph.
pub fn bias_drain_value(net: &Network) -> f64 {
    let mut total = 0.0;
    for (_, layer) in net.graph.weighted() {
        let Some(bits) = net.bits(&layer.name) else {
            continue;
        };
        for role in [ParamRole::Bias, ParamRole::NormShift] {
            if let Some(t) = net.params.role(&layer.name, role) {
                total += t
                    .data()
                    .iter()
                    .zip(bits)
                    .filter(|(_, &b)| b <= 0.0)
                    .map(|(v, _)| v.abs() as f64)
                    .sum::<f64>();
            }
        }
    }
    total
}

/// Components of the training objective for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    /// `γ·Q`.
    pub size_term: f64,
    /// Weighted bias-drain penalty.
    pub bias_drain: f64,
    pub total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_network, BuildOptions, ConvSpec, LayerSpec, NetworkGraph, PoolKind};
    use proptest::prelude::*;

    fn dims(out: usize, inp: usize, k: usize) -> WeightDims {
        WeightDims { out, inp, kh: k, kw: k }
    }

    fn conv(name: &str, inp: usize, out: usize, k: usize, input: Option<usize>) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::ConvBlock(ConvSpec {
                out_channels: out,
                in_channels: inp,
                kernel: k,
                stride: 1,
                pad: k / 2,
                batch_norm: true,
                bias: true,
                relu: true,
                quantized: true,
            }),
            inputs: input.into_iter().collect(),
        }
    }

    fn chain(bits_a: Vec<f32>, bits_b: Vec<f32>) -> Network {
        let layers = vec![
            conv("a", 3, bits_a.len(), 1, None),
            conv("b", bits_a.len(), bits_b.len(), 3, Some(0)),
            LayerSpec {
                name: "pool".into(),
                kind: LayerKind::GlobalPool { pool: PoolKind::Avg },
                inputs: vec![1],
            },
        ];
        let graph = NetworkGraph {
            layers,
            input_shape: [3, 4, 4],
            classes: bits_b.len(),
        };
        let mut net = init_network(graph, &BuildOptions::default()).unwrap();
        *net.params.get_mut("a.bits").unwrap() = Tensor::from_vec(bits_a);
        *net.params.get_mut("b.bits").unwrap() = Tensor::from_vec(bits_b);
        net
    }

    #[test]
    fn simple_worked_values() {
        assert_eq!(layer_size_simple(dims(2, 3, 1), &[2.0, 4.0]), Ok(18.0));
        assert_eq!(layer_size_simple(dims(2, 3, 1), &[0.0, 0.0]), Ok(0.0));
        assert_eq!(
            layer_size_simple(dims(2, 3, 1), &[1.0]),
            Err(SizeError::Length { got: 1, want: 2 })
        );
    }

    #[test]
    fn coupled_worked_values() {
        assert_eq!(layer_size_coupled(dims(1, 2, 1), &[3.0], &[2.0, 0.0]), Ok(5.0));
        assert_eq!(layer_size_coupled(dims(1, 2, 1), &[0.0], &[0.0, 0.0]), Ok(0.0));
        assert!(layer_size_coupled(dims(1, 2, 1), &[3.0], &[2.0]).is_err());
    }

    #[test]
    fn chain_report_composes_layers() {
        let net = chain(vec![2.0, 0.0], vec![3.0, 1.0, 0.0]);
        let n = net.initial_weight_count();
        assert_eq!(n, 3 * 2 + 2 * 3 * 9);
        let simple = network_size(&net, SizeMode::Simple);
        assert_eq!(simple.objective_bits, 3.0 * 2.0 + 2.0 * 9.0 * 4.0);
        assert_eq!(simple.q, simple.objective_bits / n as f64);
        let coupled = network_size(&net, SizeMode::Coupled);
        let a = layer_size_simple(dims(2, 3, 1), &[2.0, 0.0]).unwrap();
        let b = layer_size_coupled(dims(3, 2, 3), &[3.0, 1.0, 0.0], &[2.0, 0.0]).unwrap();
        assert_eq!(b, 9.0 * 1.0 * 4.0 + 9.0 * 2.0 * 2.0);
        assert_eq!(coupled.objective_bits, a + b);
        assert!(!coupled.layers[0].coupled && coupled.layers[1].coupled);
        assert_eq!(coupled.total_bits, simple.total_bits);
        assert_eq!(coupled.live_channels(), 3);
        assert_eq!(coupled.flops, (6 * 16 + 54 * 16) as u64);
    }

    #[test]
    fn simple_gradient_is_fan_in_over_n() {
        let net = chain(vec![2.0, 5.0], vec![3.0, 1.0, 4.0]);
        let n = net.initial_weight_count() as f64;
        let mut g = Graph::new();
        let mut params = BTreeMap::new();
        for key in ["a.bits", "b.bits"] {
            params.insert(key.to_string(), g.param(net.params.get(key).unwrap().clone()).unwrap());
        }
        let q = size_term(&mut g, &params, &net, SizeMode::Simple).unwrap();
        let report = network_size(&net, SizeMode::Simple);
        assert!((g.value(q).item().unwrap() as f64 - report.q).abs() < 1e-6);
        let grads = g.backward(q).unwrap();
        for &v in grads.get(params["a.bits"]).unwrap().data() {
            assert!((v as f64 - 3.0 / n).abs() < 1e-7);
        }
        for &v in grads.get(params["b.bits"]).unwrap().data() {
            assert!((v as f64 - 18.0 / n).abs() < 1e-7);
        }
    }

    #[test]
    fn coupled_gradient_uses_live_counts() {
        let net = chain(vec![2.0, 0.0], vec![3.0, 1.0, 0.0]);
        let n = net.initial_weight_count() as f64;
        let mut g = Graph::new();
        let mut params = BTreeMap::new();
        for key in ["a.bits", "b.bits"] {
            params.insert(key.to_string(), g.param(net.params.get(key).unwrap().clone()).unwrap());
        }
        let q = size_term(&mut g, &params, &net, SizeMode::Coupled).unwrap();
        let grads = g.backward(q).unwrap();
        // a: its own simple size (3) plus b's coupling term (9 · 2 live in b).
        for &v in grads.get(params["a.bits"]).unwrap().data() {
            assert!((v as f64 - 21.0 / n).abs() < 1e-7);
        }
        // b: 9 · 1 live in a.
        for &v in grads.get(params["b.bits"]).unwrap().data() {
            assert!((v as f64 - 9.0 / n).abs() < 1e-7);
        }
    }

    #[test]
    fn bias_drain_only_touches_zero_bit_channels() {
        let mut net = chain(vec![2.0, 0.0], vec![0.0, 1.0, 0.0]);
        *net.params.get_mut("b.bias").unwrap() = Tensor::from_vec(vec![-0.1, 5.0, 0.2]);
        *net.params.get_mut("a.bias").unwrap() = Tensor::from_vec(vec![7.0, 0.3]);
        let mut g = Graph::new();
        let mut params = BTreeMap::new();
        for key in net.params.keys() {
            if key.ends_with("bias") {
                params.insert(key.clone(), g.param(net.params.get(key).unwrap().clone()).unwrap());
            }
        }
        let d = bias_drain(&mut g, &params, &net).unwrap().unwrap();
        assert!((g.value(d).item().unwrap() - 0.6).abs() < 1e-6);
        assert!((bias_drain_value(&net) - 0.6).abs() < 1e-6);
        let grads = g.backward(d).unwrap();
        assert_eq!(grads.get(params["b.bias"]).unwrap().data(), &[-1.0, 0.0, 1.0]);
        assert_eq!(grads.get(params["a.bias"]).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn no_drain_when_every_channel_has_bits() {
        let net = chain(vec![2.0, 1.0], vec![1.0, 1.0, 1.0]);
        let mut g = Graph::new();
        assert!(bias_drain(&mut g, &BTreeMap::new(), &net).unwrap().is_none());
        assert_eq!(bias_drain_value(&net), 0.0);
    }

    proptest! {
        #[test]
        fn simple_size_is_per_weight_count(
            inp in 1usize..5, k in 1usize..4,
            bits in proptest::collection::vec(0u8..17, 1..6),
        ) {
            let bits: Vec<f32> = bits.into_iter().map(f32::from).collect();
            let d = dims(bits.len(), inp, k);
            let mut brute = 0.0f64;
            for o in 0..d.out {
                for _ in 0..d.per_channel() {
                    brute += bits[o] as f64;
                }
            }
            prop_assert_eq!(layer_size_simple(d, &bits).unwrap(), brute);
        }

        #[test]
        fn coupled_with_all_live_matches_expansion(
            k in 1usize..4,
            bits in proptest::collection::vec(1u8..17, 1..6),
            prev in proptest::collection::vec(1u8..17, 1..6),
        ) {
            let bits: Vec<f32> = bits.into_iter().map(f32::from).collect();
            let prev: Vec<f32> = prev.into_iter().map(f32::from).collect();
            let d = dims(bits.len(), prev.len(), k);
            let hw = (k * k) as f64;
            let want = hw * prev.len() as f64 * sum(&bits) + hw * bits.len() as f64 * sum(&prev);
            prop_assert_eq!(layer_size_coupled(d, &bits, &prev).unwrap(), want);
        }

        #[test]
        fn size_ignores_weight_values(seed in 0u64..1000) {
            let mut net = chain(vec![2.0, 3.0], vec![3.0, 1.0, 4.0]);
            let before = network_size(&net, SizeMode::Coupled);
            let w = net.params.get_mut("b.weight").unwrap();
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                *v = ((seed as usize + i) % 7) as f32 - 3.0;
            }
            prop_assert_eq!(network_size(&net, SizeMode::Coupled), before);
        }
    }
}
