use std::collections::BTreeMap;

use super::{param_key, LayerKind, Network, ParamRole, PoolKind, NORM_EPS};
use crate::autodiff::{Graph, NormStats, Var};
use crate::error::{Error, Result};
use crate::quantizer::ChannelQuantizer;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, trainable parameters tracked for gradients.
    Train,
    /// Running statistics, everything constant.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Pass weights through their per-channel quantizers.
    pub quantize: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            quantize: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            quantize: true,
        }
    }
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub graph: Graph<f32>,
    pub logits: Var,
    /// Graph leaf for every trainable parameter, by store key.
    pub params: BTreeMap<String, Var>,
    /// `(layer index, node)` of every batch-statistics normalization.
    pub norm_nodes: Vec<(usize, Var)>,
}

/// Run `images` (`[N, C, H, W]`) through the network, recording the graph.
pub fn forward_network(net: &Network, images: &Tensor<f32>, opts: ForwardOptions) -> Result<ForwardPass> {
    let [c, h, w] = net.graph.input_shape;
    if images.rank() != 4 || images.shape()[1..] != [c, h, w] {
        return Err(Error::Network(format!(
            "input batch has shape {:?}, expected [N, {c}, {h}, {w}]",
            images.shape()
        )));
    }
    let train = opts.mode == Mode::Train;
    let mut g = Graph::new();
    let input = g.constant(images.swap_leading_axes())?;
    let mut params = BTreeMap::new();
    let mut norm_nodes = Vec::new();
    let mut values: Vec<Var> = Vec::with_capacity(net.graph.layers.len());

    let mut leaf = |g: &mut Graph<f32>, params: &mut BTreeMap<String, Var>, name: &str, role: ParamRole| -> Result<Var> {
        let key = param_key(name, role);
        let t = net
            .params
            .get(&key)
            .ok_or_else(|| Error::Network(format!("missing parameter `{key}`")))?;
        let v = g.leaf(t.clone(), train && role.trainable())?;
        params.insert(key, v);
        Ok(v)
    };

    for (i, layer) in net.graph.layers.iter().enumerate() {
        let src = |k: usize| layer.inputs.get(k).map(|&p| values[p]).unwrap_or(input);
        let x = src(0);
        let name = layer.name.as_str();
        let y = match &layer.kind {
            LayerKind::ConvBlock(spec) => {
                let wq = weights(&mut g, &mut params, &mut leaf, name, layer.is_quantized() && opts.quantize)?;
                let mut y = g.conv2d(x, wq, spec.stride, spec.pad)?;
                if spec.bias {
                    let b = leaf(&mut g, &mut params, name, ParamRole::Bias)?;
                    y = g.channel_bias(y, b)?;
                }
                if spec.batch_norm {
                    let gamma = leaf(&mut g, &mut params, name, ParamRole::NormScale)?;
                    let beta = leaf(&mut g, &mut params, name, ParamRole::NormShift)?;
                    y = if train {
                        let node = g.batch_norm(y, gamma, beta, NormStats::Batch, NORM_EPS)?;
                        norm_nodes.push((i, node));
                        node
                    } else {
                        let missing = || Error::Network(format!("`{name}` has no running statistics"));
                        let mean = net.params.role(name, ParamRole::RunningMean).ok_or_else(missing)?;
                        let var = net.params.role(name, ParamRole::RunningVar).ok_or_else(missing)?;
                        let stats = NormStats::Fixed {
                            mean: mean.data(),
                            var: var.data(),
                        };
                        g.batch_norm(y, gamma, beta, stats, NORM_EPS)?
                    };
                }
                if spec.relu {
                    y = g.relu(y)?;
                }
                y
            }
            LayerKind::Pool => g.max_pool2(x)?,
            LayerKind::Add => {
                let mut acc = x;
                for k in 1..layer.inputs.len() {
                    acc = g.add(acc, src(k))?;
                }
                acc
            }
            LayerKind::GlobalPool { pool } => match pool {
                PoolKind::Max => g.global_max_pool(x)?,
                PoolKind::Avg => g.global_avg_pool(x)?,
            },
            LayerKind::Dense(spec) => {
                let wq = weights(&mut g, &mut params, &mut leaf, name, layer.is_quantized() && opts.quantize)?;
                let y = g.dense(x, wq)?;
                if spec.output_scale != 1.0 {
                    g.scale(y, spec.output_scale as f64)?
                } else {
                    y
                }
            }
            LayerKind::SoftmaxCe => x,
        };
        values.push(y);
    }
    let logits = values[net.graph.logits_layer()];
    Ok(ForwardPass {
        graph: g,
        logits,
        params,
        norm_nodes,
    })
}

fn weights(
    g: &mut Graph<f32>,
    params: &mut BTreeMap<String, Var>,
    leaf: &mut impl FnMut(&mut Graph<f32>, &mut BTreeMap<String, Var>, &str, ParamRole) -> Result<Var>,
    name: &str,
    quantize: bool,
) -> Result<Var> {
    let w = leaf(g, params, name, ParamRole::Weight)?;
    if !quantize {
        return Ok(w);
    }
    let b = leaf(g, params, name, ParamRole::Bits)?;
    let e = leaf(g, params, name, ParamRole::Exponent)?;
    Ok(g.custom(&[w, b, e], Box::new(ChannelQuantizer))?)
}

/// Evaluation-mode logits, `[N, classes]`.
pub fn logits(net: &Network, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let pass = forward_network(net, images, ForwardOptions::eval())?;
    Ok(pass.graph.value(pass.logits).clone())
}
