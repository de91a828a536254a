//! Illumination estimation: a 4-block enhancement network (the inference
//! path) and an 8-block self-calibrated network used only during training,
//! unrolled over a configurable number of weight-sharing stages.

use crate::autodiff::{BnState, Graph, NodeId};
use crate::cem;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;

/// Illumination clamp bounds; keep t away from 0 so k = 1/t stays bounded.
pub const T_MIN: f32 = 1e-4;
pub const T_MAX: f32 = 1.0;

/// One 3x3 convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Convolution followed by batch normalization (own running state) and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnLayer {
    pub conv: ConvLayer,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub bn: BnState,
}

/// The enhancement network: four 3→3 Conv+ReLU blocks with one additive skip
/// from the network input to the pre-clamp output.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhNetWeights {
    pub blocks: Vec<ConvLayer>,
}

/// The self-calibrated network: input block 3→16, six middle blocks 16→16
/// (all Conv+BN+ReLU), output convolution 16→3, with additive skips wrapping
/// the middle-block pairs (2,3), (4,5) and (6,7) in 1-based block numbering.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfCalWeights {
    pub input: ConvBnLayer,
    pub middle: Vec<ConvBnLayer>,
    pub output: ConvLayer,
}

impl ConvLayer {
    fn param_count(&self) -> usize {
        self.kernels.numel() + self.bias.numel()
    }
}

impl ConvBnLayer {
    fn param_count(&self) -> usize {
        self.conv.param_count() + self.gamma.numel() + self.beta.numel()
    }
}

impl EnhNetWeights {
    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ConvLayer::param_count).sum()
    }

    /// Register every layer in a graph, once; all stages share these nodes.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> EnhNetNodes {
        let blocks = self
            .blocks
            .iter()
            .map(|l| register_conv(g, l, trainable))
            .collect();
        EnhNetNodes { blocks }
    }

    /// Tensors in registration order, for optimizer bookkeeping.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|l| [&mut l.kernels, &mut l.bias])
            .collect()
    }

    /// Immutable view in the same order as [`EnhNetWeights::tensors_mut`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.blocks.iter().flat_map(|l| [&l.kernels, &l.bias]).collect()
    }
}

impl SelfCalWeights {
    pub fn param_count(&self) -> usize {
        self.input.param_count()
            + self.middle.iter().map(ConvBnLayer::param_count).sum::<usize>()
            + self.output.param_count()
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> SelfCalNodes {
        SelfCalNodes {
            input: register_conv_bn(g, &self.input, trainable),
            middle: self.middle.iter().map(|l| register_conv_bn(g, l, trainable)).collect(),
            output: register_conv(g, &self.output, trainable),
        }
    }

    /// Tensors in registration order (γ/β included, running stats excluded).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = conv_bn_tensors(&mut self.input);
        for l in &mut self.middle {
            out.extend(conv_bn_tensors(l));
        }
        out.push(&mut self.output.kernels);
        out.push(&mut self.output.bias);
        out
    }

    /// Immutable view in the same order as [`SelfCalWeights::tensors_mut`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = conv_bn_tensors_ref(&self.input);
        for l in &self.middle {
            out.extend(conv_bn_tensors_ref(l));
        }
        out.push(&self.output.kernels);
        out.push(&self.output.bias);
        out
    }
}

fn conv_bn_tensors(l: &mut ConvBnLayer) -> Vec<&mut Tensor> {
    vec![&mut l.conv.kernels, &mut l.conv.bias, &mut l.gamma, &mut l.beta]
}

fn conv_bn_tensors_ref(l: &ConvBnLayer) -> Vec<&Tensor> {
    vec![&l.conv.kernels, &l.conv.bias, &l.gamma, &l.beta]
}

/// Graph handles for one registered convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvNodes {
    pub kernels: NodeId,
    pub bias: NodeId,
}

/// Graph handles for one registered Conv+BN block.
#[derive(Clone, Copy, Debug)]
pub struct ConvBnNodes {
    pub kernels: NodeId,
    pub bias: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
}

/// Registered enhancement network.
pub struct EnhNetNodes {
    pub blocks: Vec<ConvNodes>,
}

impl EnhNetNodes {
    /// Parameter nodes in the same order as [`EnhNetWeights::tensors_mut`].
    pub fn node_list(&self) -> Vec<NodeId> {
        self.blocks.iter().flat_map(|b| [b.kernels, b.bias]).collect()
    }
}

/// Registered self-calibrated network.
pub struct SelfCalNodes {
    pub input: ConvBnNodes,
    pub middle: Vec<ConvBnNodes>,
    pub output: ConvNodes,
}

impl SelfCalNodes {
    /// Parameter nodes in the same order as [`SelfCalWeights::tensors_mut`].
    pub fn node_list(&self) -> Vec<NodeId> {
        let mut out = vec![self.input.kernels, self.input.bias, self.input.gamma, self.input.beta];
        for b in &self.middle {
            out.extend([b.kernels, b.bias, b.gamma, b.beta]);
        }
        out.extend([self.output.kernels, self.output.bias]);
        out
    }
}

fn register_conv(g: &mut Graph, l: &ConvLayer, trainable: bool) -> ConvNodes {
    let reg = |g: &mut Graph, t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
    ConvNodes { kernels: reg(g, &l.kernels), bias: reg(g, &l.bias) }
}

fn register_conv_bn(g: &mut Graph, l: &ConvBnLayer, trainable: bool) -> ConvBnNodes {
    let reg = |g: &mut Graph, t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
    ConvBnNodes {
        kernels: reg(g, &l.conv.kernels),
        bias: reg(g, &l.conv.bias),
        gamma: reg(g, &l.gamma),
        beta: reg(g, &l.beta),
    }
}

/// Fan-in-scaled uniform initialization U(−√(1/fan_in), +√(1/fan_in)) for
/// kernels, zero biases, γ = 1, β = 0. Deterministic per seed.
pub fn init_weights(seed: u64) -> (EnhNetWeights, SelfCalWeights) {
    let mut enh_rng = rng::stream(seed, "init/enhancement");
    let enh = EnhNetWeights {
        blocks: (0..4).map(|_| init_conv(&mut enh_rng, 3, 3)).collect(),
    };
    let mut sc_rng = rng::stream(seed, "init/selfcal");
    let selfcal = SelfCalWeights {
        input: init_conv_bn(&mut sc_rng, 3, 16),
        middle: (0..6).map(|_| init_conv_bn(&mut sc_rng, 16, 16)).collect(),
        output: init_conv(&mut sc_rng, 16, 3),
    };
    (enh, selfcal)
}

fn init_conv(rng: &mut impl Rng, ci: usize, co: usize) -> ConvLayer {
    let bound = (1.0 / (ci * 9) as f32).sqrt();
    let kernels: Vec<f32> = (0..co * ci * 9).map(|_| rng.gen_range(-bound..bound)).collect();
    ConvLayer {
        kernels: Tensor::new(vec![co, ci, 3, 3], kernels).expect("kernel shape"),
        bias: Tensor::zeros(vec![co]),
    }
}

fn init_conv_bn(rng: &mut impl Rng, ci: usize, co: usize) -> ConvBnLayer {
    ConvBnLayer {
        conv: init_conv(rng, ci, co),
        gamma: Tensor::full(vec![co], 1.0),
        beta: Tensor::zeros(vec![co]),
        bn: BnState::new(co),
    }
}

/// Illumination from one image: t = clamp(mean_c(v + conv_stack(v)), 1e-4, 1)
/// where the stack is four Conv+ReLU blocks.
pub fn enhancement_forward(g: &mut Graph, v: NodeId, nodes: &EnhNetNodes) -> Result<NodeId> {
    if let Some(&bad) = g.value(v).data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain(format!(
            "enhancement network input must lie in [0, 1], found {bad}"
        )));
    }
    let mut h = v;
    for block in &nodes.blocks {
        let c = g.conv3x3(h, block.kernels, block.bias)?;
        h = g.relu(c);
    }
    let raw = g.add(v, h)?;
    // Checked before the clamp, which would mask an overflow to infinity.
    if !g.value(raw).is_finite() {
        return Err(Error::Numeric("enhancement network produced non-finite activations".into()));
    }
    let m = g.channel_mean(raw)?;
    Ok(g.clamp(m, T_MIN, T_MAX))
}

/// Batch normalization mode for the self-calibrated network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Residual correction map from an intermediate enhanced image.
pub fn selfcal_forward(
    g: &mut Graph,
    z: NodeId,
    nodes: &SelfCalNodes,
    weights: &mut SelfCalWeights,
    mode: BnMode,
) -> Result<NodeId> {
    let mut h = conv_bn_relu(g, z, &nodes.input, &mut weights.input.bn, mode)?;
    for pair in 0..3 {
        let skip = h;
        for half in 0..2 {
            let idx = 2 * pair + half;
            h = conv_bn_relu(g, h, &nodes.middle[idx], &mut weights.middle[idx].bn, mode)?;
        }
        h = g.add(h, skip)?;
    }
    g.conv3x3(h, nodes.output.kernels, nodes.output.bias)
}

fn conv_bn_relu(
    g: &mut Graph,
    input: NodeId,
    nodes: &ConvBnNodes,
    bn: &mut BnState,
    mode: BnMode,
) -> Result<NodeId> {
    let c = g.conv3x3(input, nodes.kernels, nodes.bias)?;
    let n = match mode {
        BnMode::Train => g.batchnorm_train(c, nodes.gamma, nodes.beta, bn)?,
        BnMode::Infer => g.batchnorm_infer(c, nodes.gamma, nodes.beta, bn)?,
    };
    Ok(g.relu(n))
}

/// One unrolled training stage: stage input v, illumination t, intermediate
/// enhanced image z = x ⊘ t.
#[derive(Clone, Copy, Debug)]
pub struct Stage {
    pub v: NodeId,
    pub t: NodeId,
    pub z: NodeId,
}

/// All stages of one unrolled pass, in order.
pub struct StageTrace {
    pub stages: Vec<Stage>,
}

/// Unroll the stage recurrence: v_0 = x; t_s = enhancement(v_s);
/// z_s = x ⊘ t_s; v_{s+1} = clamp(x + selfcal(z_s), 0, 1). The correction map
/// only feeds the next stage's input, so the final stage records its (v, t, z)
/// without running the self-calibration net.
pub fn unroll(
    g: &mut Graph,
    x: NodeId,
    enh: &EnhNetNodes,
    sc_nodes: &SelfCalNodes,
    sc_weights: &mut SelfCalWeights,
    stages: usize,
) -> Result<StageTrace> {
    if stages < 1 {
        return Err(Error::Config(format!("stage count must be at least 1, got {stages}")));
    }
    let mut trace = Vec::with_capacity(stages);
    let mut v = x;
    for s in 0..stages {
        let t = enhancement_forward(g, v, enh)?;
        let z = cem::apply_baseline_node(g, x, t)?;
        trace.push(Stage { v, t, z });
        if s + 1 < stages {
            let gmap = selfcal_forward(g, z, sc_nodes, sc_weights, BnMode::Train)?;
            let shifted = g.add(x, gmap)?;
            v = g.clamp(shifted, 0.0, 1.0);
        }
    }
    Ok(StageTrace { stages: trace })
}

/// Inference-path illumination: a single enhancement pass, no self-calibration.
pub fn infer_illumination(x: &Tensor, ew: &EnhNetWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let nodes = ew.register(&mut g, false);
    let t = enhancement_forward(&mut g, xn, &nodes)?;
    Ok(g.value(t).clone())
}

/// Multiply–accumulate count for one inference pass at the given size:
/// four 3→3 blocks of 3x3 kernels.
pub fn inference_macs(height: usize, width: usize) -> u64 {
    4 * 81 * (height as u64) * (width as u64)
}
