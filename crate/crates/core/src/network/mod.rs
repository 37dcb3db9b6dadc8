//! Network description and parameter storage.
//!
//! A [`NetworkGraph`] is an ordered list of layers; each layer names its
//! producers by index, so the list order is a topological order. Weighted
//! layers (convolution blocks and the dense head) carry one `(b, e)` pair
//! per output channel.
//!
//! Channel removal needs to know which layers write into, and read from, a
//! given activation channel. Pools pass channels through unchanged and a
//! residual `add` merges the channel axes of its operands, so the graph is
//! partitioned into [`ChannelSpace`]s: each space lists the weighted layers
//! producing it and the weighted layers consuming it.

mod build;
pub mod checkpoint;
mod forward;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::conv_output_dim;
use crate::error::{Error, Result};
use crate::quantizer::{QuantFormat, B_MAX};
use crate::tensor::Tensor;

pub use build::{build_cifar_net, init_network, BuildOptions, WidthConfig};
pub use forward::{forward_network, logits, ForwardOptions, ForwardPass, Mode};

/// Batch-norm epsilon and running-statistics momentum (`running = m·running + (1-m)·batch`).
pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub batch_norm: bool,
    pub bias: bool,
    pub relu: bool,
    pub quantized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub out_features: usize,
    pub in_features: usize,
    pub quantized: bool,
    /// Constant multiplier applied to the logits.
    pub output_scale: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    ConvBlock(ConvSpec),
    /// 2x2 max pooling, stride 2.
    Pool,
    Add,
    GlobalPool { pool: PoolKind },
    Dense(DenseSpec),
    SoftmaxCe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Producer layer indices; empty means the network input.
    pub inputs: Vec<usize>,
}

/// Weight tensor dimensions `(O, I, H, W)` of a weighted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightDims {
    pub out: usize,
    pub inp: usize,
    pub kh: usize,
    pub kw: usize,
}

impl WeightDims {
    pub fn per_channel(&self) -> usize {
        self.inp * self.kh * self.kw
    }

    pub fn count(&self) -> usize {
        self.out * self.per_channel()
    }
}

impl LayerSpec {
    pub fn weight_dims(&self) -> Option<WeightDims> {
        match &self.kind {
            LayerKind::ConvBlock(c) => Some(WeightDims {
                out: c.out_channels,
                inp: c.in_channels,
                kh: c.kernel,
                kw: c.kernel,
            }),
            LayerKind::Dense(d) => Some(WeightDims {
                out: d.out_features,
                inp: d.in_features,
                kh: 1,
                kw: 1,
            }),
            _ => None,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match &self.kind {
            LayerKind::ConvBlock(c) => Some(vec![c.out_channels, c.in_channels, c.kernel, c.kernel]),
            LayerKind::Dense(d) => Some(vec![d.out_features, d.in_features]),
            _ => None,
        }
    }

    pub fn is_quantized(&self) -> bool {
        match &self.kind {
            LayerKind::ConvBlock(c) => c.quantized,
            LayerKind::Dense(d) => d.quantized,
            _ => false,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::ConvBlock(_))
    }

    pub(crate) fn set_out(&mut self, n: usize) {
        match &mut self.kind {
            LayerKind::ConvBlock(c) => c.out_channels = n,
            LayerKind::Dense(d) => d.out_features = n,
            _ => {}
        }
    }

    pub(crate) fn set_in(&mut self, n: usize) {
        match &mut self.kind {
            LayerKind::ConvBlock(c) => c.in_channels = n,
            LayerKind::Dense(d) => d.in_features = n,
            _ => {}
        }
    }
}

/// Role of a stored tensor; the key suffix encodes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRole {
    Weight,
    Bits,
    Exponent,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub const ALL: [ParamRole; 8] = [
        ParamRole::Weight,
        ParamRole::Bits,
        ParamRole::Exponent,
        ParamRole::Bias,
        ParamRole::NormScale,
        ParamRole::NormShift,
        ParamRole::RunningMean,
        ParamRole::RunningVar,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bits => "bits",
            ParamRole::Exponent => "exponent",
            ParamRole::Bias => "bias",
            ParamRole::NormScale => "norm_scale",
            ParamRole::NormShift => "norm_shift",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    /// Split a `layer.role` key.
    pub fn parse_key(key: &str) -> Option<(&str, ParamRole)> {
        let (layer, suffix) = key.rsplit_once('.')?;
        ParamRole::ALL.into_iter().find(|r| r.suffix() == suffix).map(|r| (layer, r))
    }
}

pub fn param_key(layer: &str, role: ParamRole) -> String {
    format!("{layer}.{}", role.suffix())
}

/// Named tensors of a network, keyed `layer.role`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn get(&self, key: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(key)
    }

    pub fn role(&self, layer: &str, role: ParamRole) -> Option<&Tensor<f32>> {
        self.tensors.get(&param_key(layer, role))
    }

    pub fn insert(&mut self, key: String, t: Tensor<f32>) {
        self.tensors.insert(key, t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.tensors.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Keys of every tensor belonging to `layer`.
    pub fn layer_keys(&self, layer: &str) -> Vec<String> {
        ParamRole::ALL
            .iter()
            .map(|r| param_key(layer, *r))
            .filter(|k| self.tensors.contains_key(k))
            .collect()
    }
}

/// Activation channel axis shared by a set of producers and consumers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSpace {
    /// Weighted layers whose output channels form this axis.
    pub producers: Vec<usize>,
    /// Weighted layers that read this axis as input channels.
    pub consumers: Vec<usize>,
    /// The axis is the network output (logits).
    pub is_output: bool,
    /// The axis is the network input (image channels).
    pub is_input: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub layers: Vec<LayerSpec>,
    /// `[C, H, W]` of one input example.
    pub input_shape: [usize; 3],
    pub classes: usize,
}

/// Structural problem found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub layers: Vec<String>,
    pub message: String,
}

impl NetworkGraph {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn weighted(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.weight_dims().is_some())
    }

    /// Output channel count of layer `idx` (or of the input for `None`).
    pub fn channels(&self, idx: Option<usize>) -> usize {
        let Some(idx) = idx else {
            return self.input_shape[0];
        };
        let layer = &self.layers[idx];
        match &layer.kind {
            LayerKind::ConvBlock(c) => c.out_channels,
            LayerKind::Dense(d) => d.out_features,
            _ => layer.inputs.first().map(|&p| self.channels(Some(p))).unwrap_or(self.input_shape[0]),
        }
    }

    /// Channel count seen by layer `idx` on its (first) input.
    pub fn input_channels(&self, idx: usize) -> usize {
        self.channels(self.layers[idx].inputs.first().copied())
    }

    /// `(C, H, W)` output of every layer; `H = W = 1` after global pooling.
    pub fn infer_shapes(&self) -> std::result::Result<Vec<(usize, usize, usize)>, String> {
        let [_, h0, w0] = self.input_shape;
        let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let src = |k: usize| -> std::result::Result<(usize, usize, usize), String> {
                match layer.inputs.get(k) {
                    None => Ok((self.input_shape[0], h0, w0)),
                    Some(&p) if p < i => Ok(shapes[p]),
                    Some(&p) => Err(format!("layer `{}` reads layer {p} which is not earlier", layer.name)),
                }
            };
            let (c, h, w) = src(0)?;
            let shape = match &layer.kind {
                LayerKind::ConvBlock(cs) => {
                    let oh = conv_output_dim(h, cs.kernel, cs.stride, cs.pad);
                    let ow = conv_output_dim(w, cs.kernel, cs.stride, cs.pad);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (cs.out_channels, oh, ow),
                        _ => return Err(format!("layer `{}`: kernel does not fit {h}x{w}", layer.name)),
                    }
                }
                LayerKind::Pool => {
                    if h < 2 || w < 2 {
                        return Err(format!("layer `{}`: cannot pool {h}x{w}", layer.name));
                    }
                    (c, h / 2, w / 2)
                }
                LayerKind::Add => {
                    for k in 1..layer.inputs.len() {
                        let other = src(k)?;
                        if (other.1, other.2) != (h, w) {
                            return Err(format!("layer `{}`: spatial mismatch between summands", layer.name));
                        }
                    }
                    (c, h, w)
                }
                LayerKind::GlobalPool { .. } => (c, 1, 1),
                LayerKind::Dense(d) => (d.out_features, 1, 1),
                LayerKind::SoftmaxCe => (c, h, w),
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Index of the layer whose value is the logits.
    pub fn logits_layer(&self) -> usize {
        let last = self.layers.len() - 1;
        match self.layers[last].kind {
            LayerKind::SoftmaxCe => self.layers[last].inputs.first().copied().unwrap_or(last),
            _ => last,
        }
    }

    /// Partition of activation channel axes. Entry `space_of[i]` is the space
    /// of layer `i`'s output.
    pub fn channel_spaces(&self) -> (Vec<ChannelSpace>, Vec<usize>) {
        // Node 0 is the network input, node i + 1 is layer i.
        let n = self.layers.len() + 1;
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let node_of = |inp: Option<&usize>| inp.map(|&p| p + 1).unwrap_or(0);
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::ConvBlock(_) | LayerKind::Dense(_) => {}
                _ => {
                    for k in 0..layer.inputs.len().max(1) {
                        let a = find(&mut parent, node_of(layer.inputs.get(k)));
                        let b = find(&mut parent, i + 1);
                        parent[b] = a;
                    }
                }
            }
        }
        let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
        let mut space_of_node = vec![0; n];
        for node in 0..n {
            let root = find(&mut parent, node);
            let next = ids.len();
            space_of_node[node] = *ids.entry(root).or_insert(next);
        }
        let mut spaces = vec![
            ChannelSpace {
                producers: Vec::new(),
                consumers: Vec::new(),
                is_output: false,
                is_input: false,
            };
            ids.len()
        ];
        spaces[space_of_node[0]].is_input = true;
        let out_node = self.logits_layer() + 1;
        spaces[space_of_node[out_node]].is_output = true;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weight_dims().is_some() {
                spaces[space_of_node[i + 1]].producers.push(i);
                spaces[space_of_node[node_of(layer.inputs.first())]].consumers.push(i);
            }
        }
        (spaces, space_of_node[1..].to_vec())
    }

    /// Space read by layer `idx` on its input.
    pub fn input_space(&self, idx: usize, space_of: &[usize], spaces: &[ChannelSpace]) -> usize {
        match self.layers[idx].inputs.first() {
            Some(&p) => space_of[p],
            None => spaces.iter().position(|s| s.is_input).expect("input space"),
        }
    }
}

/// A network: structure, parameters and the frozen starting size.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub graph: NetworkGraph,
    pub params: ParamStore,
    initial_weight_count: usize,
    initial_widths: BTreeMap<String, usize>,
    revision: u64,
}

impl Network {
    /// Wrap a graph and parameters; the current weight count becomes the
    /// frozen starting count `N`.
    pub fn new(graph: NetworkGraph, params: ParamStore) -> Result<Self> {
        let initial_widths = graph
            .weighted()
            .map(|(_, l)| (l.name.clone(), l.weight_dims().map(|d| d.out).unwrap_or(0)))
            .collect();
        let mut net = Self {
            graph,
            params,
            initial_weight_count: 0,
            initial_widths,
            revision: 0,
        };
        net.initial_weight_count = net.weight_count();
        let violations = validate(&net);
        if !violations.is_empty() {
            return Err(Error::Network(
                violations.iter().map(|v| v.message.clone()).collect::<Vec<_>>().join("; "),
            ));
        }
        Ok(net)
    }

    pub(crate) fn with_history(
        graph: NetworkGraph,
        params: ParamStore,
        initial_weight_count: usize,
        initial_widths: BTreeMap<String, usize>,
    ) -> Result<Self> {
        let mut net = Self::new(graph, params)?;
        net.initial_weight_count = initial_weight_count;
        net.initial_widths = initial_widths;
        Ok(net)
    }

    /// Weight elements in the network as constructed (`N`). Never changes.
    pub fn initial_weight_count(&self) -> usize {
        self.initial_weight_count
    }

    pub fn initial_widths(&self) -> &BTreeMap<String, usize> {
        &self.initial_widths
    }

    /// Weight elements currently present.
    pub fn weight_count(&self) -> usize {
        self.graph.weighted().filter_map(|(_, l)| l.weight_dims()).map(|d| d.count()).sum()
    }

    /// Bumped by every structural change.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub(crate) fn bump_revision(&mut self) {
        self.revision += 1;
    }

    pub fn bits(&self, layer: &str) -> Option<&[f32]> {
        self.params.role(layer, ParamRole::Bits).map(|t| t.data())
    }

    pub fn formats(&self, layer: &str) -> Option<Vec<QuantFormat>> {
        let b = self.params.role(layer, ParamRole::Bits)?;
        let e = self.params.role(layer, ParamRole::Exponent)?;
        Some(
            b.data()
                .iter()
                .zip(e.data())
                .map(|(&bits, &exponent)| QuantFormat { bits, exponent })
                .collect(),
        )
    }

    /// Output of a conv block's additive path on an all-zero input, using
    /// running statistics and including the activation, one value per
    /// channel. This is what a zero-bit channel emits downstream.
    pub fn zero_input_response(&self, layer: &str) -> Option<Vec<f32>> {
        let spec = self.graph.layer(layer)?;
        let LayerKind::ConvBlock(c) = &spec.kind else {
            return None;
        };
        let mut out = match self.params.role(layer, ParamRole::Bias) {
            Some(b) if c.bias => b.data().to_vec(),
            _ => vec![0.0; c.out_channels],
        };
        if c.batch_norm {
            let g = self.params.role(layer, ParamRole::NormScale)?.data();
            let b = self.params.role(layer, ParamRole::NormShift)?.data();
            let m = self.params.role(layer, ParamRole::RunningMean)?.data();
            let v = self.params.role(layer, ParamRole::RunningVar)?.data();
            for (ch, y) in out.iter_mut().enumerate() {
                let inv = 1.0 / ((v[ch] as f64) + NORM_EPS).sqrt();
                *y = (g[ch] as f64 * (*y as f64 - m[ch] as f64) * inv + b[ch] as f64) as f32;
            }
        }
        if c.relu {
            out.iter_mut().for_each(|y| *y = y.max(0.0));
        }
        Some(out)
    }

    /// Fold the batch statistics recorded by a training-mode forward pass
    /// into the running statistics.
    pub fn absorb_batch_stats(&mut self, pass: &ForwardPass) {
        for (layer_idx, node) in &pass.norm_nodes {
            let Some((mean, var)) = pass.graph.batch_stats(*node) else {
                continue;
            };
            let count = pass.graph.value(*node).len() / mean.len().max(1);
            let unbias = if count > 1 { count as f32 / (count as f32 - 1.0) } else { 1.0 };
            let name = self.graph.layers[*layer_idx].name.clone();
            let m = 1.0 - NORM_MOMENTUM;
            if let Some(rm) = self.params.get_mut(&param_key(&name, ParamRole::RunningMean)) {
                for (r, &b) in rm.data_mut().iter_mut().zip(mean) {
                    *r = NORM_MOMENTUM * *r + m * b;
                }
            }
            if let Some(rv) = self.params.get_mut(&param_key(&name, ParamRole::RunningVar)) {
                for (r, &b) in rv.data_mut().iter_mut().zip(var) {
                    *r = NORM_MOMENTUM * *r + m * b * unbias;
                }
            }
        }
    }

    /// Live channels of each weighted layer, in layer order.
    pub fn live_channels(&self) -> Vec<(String, usize)> {
        self.graph
            .weighted()
            .map(|(_, l)| (l.name.clone(), l.weight_dims().map(|d| d.out).unwrap_or(0)))
            .collect()
    }
}

/// Check every structural invariant; an empty list means the network is
/// well formed.
pub fn validate(net: &Network) -> Vec<Violation> {
    let g = &net.graph;
    let mut out = Vec::new();
    let mut push = |layers: Vec<&str>, message: String| {
        out.push(Violation {
            layers: layers.into_iter().map(String::from).collect(),
            message,
        })
    };
    if g.layers.is_empty() {
        push(vec![], "network has no layers".into());
        return out;
    }
    let mut consumed = vec![false; g.layers.len()];
    let mut structure_ok = true;
    for (i, layer) in g.layers.iter().enumerate() {
        for &p in &layer.inputs {
            if p >= i {
                push(vec![&layer.name], format!("layer `{}` reads layer {p}, which does not precede it", layer.name));
                structure_ok = false;
            } else {
                consumed[p] = true;
            }
        }
        let arity_ok = match layer.kind {
            LayerKind::Add => layer.inputs.len() >= 2,
            _ => layer.inputs.len() <= 1,
        };
        if !arity_ok {
            push(vec![&layer.name], format!("layer `{}` has {} producers", layer.name, layer.inputs.len()));
            structure_ok = false;
        }
        if layer.inputs.is_empty() && i != 0 {
            push(vec![&layer.name], format!("layer `{}` reads the network input but is not the first layer", layer.name));
        }
    }
    let outputs: Vec<&str> = g
        .layers
        .iter()
        .zip(&consumed)
        .filter(|(_, c)| !**c)
        .map(|(l, _)| l.name.as_str())
        .collect();
    if outputs.len() != 1 {
        push(outputs.clone(), format!("expected a single output layer, found {}", outputs.len()));
    }
    if !structure_ok {
        return out;
    }

    for (i, layer) in g.layers.iter().enumerate() {
        let producer = layer.inputs.first().copied();
        let producer_name = producer.map(|p| g.layers[p].name.as_str()).unwrap_or("input");
        if let Some(dims) = layer.weight_dims() {
            let have = g.channels(producer);
            if have != dims.inp {
                push(
                    vec![producer_name, &layer.name],
                    format!(
                        "`{producer_name}` produces {have} channels but `{}` expects {} input channels",
                        layer.name, dims.inp
                    ),
                );
            }
            if dims.out == 0 || dims.inp == 0 {
                push(vec![&layer.name], format!("layer `{}` has an empty weight tensor", layer.name));
            }
        }
        if let LayerKind::Add = layer.kind {
            let widths: Vec<usize> = layer.inputs.iter().map(|&p| g.channels(Some(p))).collect();
            if widths.windows(2).any(|w| w[0] != w[1]) {
                let names: Vec<&str> = std::iter::once(layer.name.as_str())
                    .chain(layer.inputs.iter().map(|&p| g.layers[p].name.as_str()))
                    .collect();
                push(names, format!("summation `{}` has branch widths {widths:?}", layer.name));
            }
        }
        check_params(net, i, &mut push);
    }
    if let Err(msg) = g.infer_shapes() {
        push(vec![], msg);
    }
    out
}

fn check_params(net: &Network, idx: usize, push: &mut impl FnMut(Vec<&str>, String)) {
    let layer = &net.graph.layers[idx];
    let Some(shape) = layer.weight_shape() else {
        return;
    };
    let dims = layer.weight_dims().expect("weighted layer");
    let name = layer.name.as_str();
    let mut expect = |role: ParamRole, want: Vec<usize>| match net.params.role(name, role) {
        Some(t) if t.shape() == want.as_slice() => {}
        Some(t) => push(
            vec![name],
            format!("`{name}.{}` has shape {:?}, expected {want:?}", role.suffix(), t.shape()),
        ),
        None => push(vec![name], format!("`{name}` is missing its {} tensor", role.suffix())),
    };
    expect(ParamRole::Weight, shape);
    if layer.is_quantized() {
        expect(ParamRole::Bits, vec![dims.out]);
        expect(ParamRole::Exponent, vec![dims.out]);
    }
    if let LayerKind::ConvBlock(c) = &layer.kind {
        if c.bias {
            expect(ParamRole::Bias, vec![dims.out]);
        }
        if c.batch_norm {
            for role in [ParamRole::NormScale, ParamRole::NormShift, ParamRole::RunningMean, ParamRole::RunningVar] {
                expect(role, vec![dims.out]);
            }
        }
    }
    if let Some(bits) = net.bits(name) {
        if bits.iter().any(|b| !(0.0..=B_MAX).contains(b)) {
            push(vec![name], format!("`{name}` has a bit depth outside [0, {B_MAX}]"));
        }
    }
}
