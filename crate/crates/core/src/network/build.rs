use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    param_key, ConvSpec, DenseSpec, LayerKind, LayerSpec, Network, NetworkGraph, ParamRole, ParamStore, PoolKind,
};
use crate::error::Result;
use crate::quantizer::{init_format, B_INIT};
use crate::tensor::Tensor;

/// Channel widths of the residual image classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthConfig {
    pub prep: usize,
    pub layer1: usize,
    pub layer2: usize,
    pub layer3: usize,
}

impl Default for WidthConfig {
    fn default() -> Self {
        Self {
            prep: 64,
            layer1: 128,
            layer2: 256,
            layer3: 512,
        }
    }
}

impl WidthConfig {
    pub fn scaled(self, factor: f64) -> Self {
        let s = |w: usize| ((w as f64 * factor).round() as usize).max(1);
        Self {
            prep: s(self.prep),
            layer1: s(self.layer1),
            layer2: s(self.layer2),
            layer3: s(self.layer3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub seed: u64,
    pub b_init: f32,
    pub quantize_first_layer: bool,
    pub quantize_last_layer: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            b_init: B_INIT,
            quantize_first_layer: true,
            quantize_last_layer: true,
        }
    }
}

fn conv(name: &str, inp: usize, out: usize, input: Option<usize>) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::ConvBlock(ConvSpec {
            out_channels: out,
            in_channels: inp,
            kernel: 3,
            stride: 1,
            pad: 1,
            batch_norm: true,
            bias: false,
            relu: true,
            quantized: true,
        }),
        inputs: input.into_iter().collect(),
    }
}

fn plain(name: &str, kind: LayerKind, inputs: Vec<usize>) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind,
        inputs,
    }
}

/// Residual classifier for 3x32x32 images with ten classes:
/// prep, three pooled stages, two residual blocks, global max pool and a
/// bias-free dense head scaled by 1/8.
pub fn build_cifar_net(widths: &WidthConfig, opts: &BuildOptions) -> Result<Network> {
    let w = widths;
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut add = |l: LayerSpec| {
        layers.push(l);
        layers.len() - 1
    };
    let prep = add(conv("prep", 3, w.prep, None));
    let l1 = add(conv("layer1", w.prep, w.layer1, Some(prep)));
    let l1p = add(plain("layer1_pool", LayerKind::Pool, vec![l1]));
    let r1a = add(conv("res1a", w.layer1, w.layer1, Some(l1p)));
    let r1b = add(conv("res1b", w.layer1, w.layer1, Some(r1a)));
    let r1 = add(plain("res1_add", LayerKind::Add, vec![l1p, r1b]));
    let l2 = add(conv("layer2", w.layer1, w.layer2, Some(r1)));
    let l2p = add(plain("layer2_pool", LayerKind::Pool, vec![l2]));
    let l3 = add(conv("layer3", w.layer2, w.layer3, Some(l2p)));
    let l3p = add(plain("layer3_pool", LayerKind::Pool, vec![l3]));
    let r3a = add(conv("res3a", w.layer3, w.layer3, Some(l3p)));
    let r3b = add(conv("res3b", w.layer3, w.layer3, Some(r3a)));
    let r3 = add(plain("res3_add", LayerKind::Add, vec![l3p, r3b]));
    let gp = add(plain("global_pool", LayerKind::GlobalPool { pool: PoolKind::Max }, vec![r3]));
    let head = add(plain(
        "classifier",
        LayerKind::Dense(DenseSpec {
            out_features: 10,
            in_features: w.layer3,
            quantized: true,
            output_scale: 0.125,
        }),
        vec![gp],
    ));
    add(plain("loss", LayerKind::SoftmaxCe, vec![head]));

    if !opts.quantize_first_layer {
        if let LayerKind::ConvBlock(c) = &mut layers[prep].kind {
            c.quantized = false;
        }
    }
    if !opts.quantize_last_layer {
        if let LayerKind::Dense(d) = &mut layers[head].kind {
            d.quantized = false;
        }
    }
    let graph = NetworkGraph {
        layers,
        input_shape: [3, 32, 32],
        classes: 10,
    };
    init_network(graph, opts)
}

/// Allocate and initialize parameters for `graph`: uniform weights with
/// bound `1/sqrt(fan_in)`, identity normalization, and per-channel formats
/// fitted to the initial weights at `opts.b_init` bits.
pub fn init_network(graph: NetworkGraph, opts: &BuildOptions) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = ParamStore::default();
    for layer in &graph.layers {
        let (Some(dims), Some(shape)) = (layer.weight_dims(), layer.weight_shape()) else {
            continue;
        };
        let bound = 1.0 / (dims.per_channel() as f32).sqrt();
        let data: Vec<f32> = (0..dims.count()).map(|_| rng.gen_range(-bound..bound)).collect();
        let name = &layer.name;
        if layer.is_quantized() {
            let mut bits = Vec::with_capacity(dims.out);
            let mut exps = Vec::with_capacity(dims.out);
            for row in data.chunks(dims.per_channel()) {
                let f = init_format(row, opts.b_init)?;
                bits.push(f.bits);
                exps.push(f.exponent);
            }
            params.insert(param_key(name, ParamRole::Bits), Tensor::from_vec(bits));
            params.insert(param_key(name, ParamRole::Exponent), Tensor::from_vec(exps));
        }
        params.insert(param_key(name, ParamRole::Weight), Tensor::new(shape, data)?);
        if let LayerKind::ConvBlock(c) = &layer.kind {
            let o = c.out_channels;
            if c.bias {
                params.insert(param_key(name, ParamRole::Bias), Tensor::zeros([o]));
            }
            if c.batch_norm {
                params.insert(param_key(name, ParamRole::NormScale), Tensor::full([o], 1.0));
                params.insert(param_key(name, ParamRole::NormShift), Tensor::zeros([o]));
                params.insert(param_key(name, ParamRole::RunningMean), Tensor::zeros([o]));
                params.insert(param_key(name, ParamRole::RunningVar), Tensor::full([o], 1.0));
            }
        }
    }
    Network::new(graph, params)
}
