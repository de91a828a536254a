//! Recorded-tape reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape: each operation validates shapes,
//! computes its output eagerly, and records what backward needs. Node ids are
//! topologically ordered by construction, so [`Graph::backward`] is a single
//! reverse sweep. Only the ops the enhancement pipeline needs are provided.

use crate::cem::{self, CrfVariant};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Per-layer batch-normalization state: running statistics plus the fixed
/// eps/momentum hyperparameters recorded in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    /// False until the first train-mode pass; inference before that errors.
    pub initialized: bool,
    pub eps: f32,
    pub momentum: f32,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op {
    Leaf,
    Conv3x3 { input: NodeId, kernels: NodeId, bias: NodeId },
    Relu { input: NodeId },
    /// Saved batch statistics, not the running ones: backward differentiates
    /// through the statistics actually used for normalization.
    BatchNormTrain { input: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f32>, var: Vec<f32>, eps: f32 },
    BatchNormInfer { input: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f32>, var: Vec<f32>, eps: f32 },
    AvgPool { input: NodeId, kernel: usize },
    DiffH { input: NodeId },
    DiffV { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f32 },
    AddConst { input: NodeId, offset: f32 },
    Abs { input: NodeId },
    Mean { input: NodeId },
    Sum { input: NodeId },
    ChannelMean { input: NodeId },
    ChannelMeans { input: NodeId },
    Index { input: NodeId, index: usize },
    Clamp { input: NodeId, lo: f32, hi: f32 },
    Recip { input: NodeId },
    DivBroadcast { num: NodeId, den: NodeId },
    /// Camera response applied to x with illumination t and parameters (a, b).
    /// Differentiable w.r.t. t, a, b; x is treated as data.
    Cem { x: NodeId, t: NodeId, a: NodeId, b: NodeId, variant: CrfVariant },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

/// Gradients produced by [`Graph::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, if the loss reaches it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Dense gradient: zeros when the loss does not reach the node.
    pub fn dense(&self, graph: &Graph, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(graph.value(id).shape().to_vec()),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Record a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Record a trainable leaf; backward always reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.params.push(id);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Zero-padded 3x3 cross-correlation plus per-output-channel bias.
    pub fn conv3x3(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ci, h, w) = self.value(input).chw()?;
        let kshape = self.value(kernels).shape().to_vec();
        let co = match kshape[..] {
            [co, kci, 3, 3] if kci == ci => co,
            _ => {
                return Err(Error::Shape(format!(
                    "conv3x3 kernels must be [C_out, {ci}, 3, 3], got {kshape:?}"
                )))
            }
        };
        if self.value(bias).shape() != [co] {
            return Err(Error::Shape(format!(
                "conv3x3 bias must be [{co}], got {:?}",
                self.value(bias).shape()
            )));
        }
        let mut out = vec![0.0f32; co * h * w];
        conv3x3_forward(
            self.value(input).data(),
            ci,
            h,
            w,
            self.value(kernels).data(),
            co,
            self.value(bias).data(),
            &mut out,
        );
        let value = Tensor::new(vec![co, h, w], out)?;
        Ok(self.push(Op::Conv3x3 { input, kernels, bias }, value))
    }

    /// Elementwise max(0, v); subgradient at 0 is 0.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| v.max(0.0));
        self.push(Op::Relu { input }, value)
    }

    /// Batch normalization over H×W per channel (batch size one), train mode.
    /// Normalizes with the current batch statistics and folds them into the
    /// running statistics with `state.momentum`.
    pub fn batchnorm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState,
    ) -> Result<NodeId> {
        let (c, h, w) = self.bn_validate(input, gamma, beta, state)?;
        let (mean, var) = batch_stats(self.value(input).data(), c, h * w);
        let m = state.momentum;
        for ch in 0..c {
            state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * mean[ch];
            state.running_var[ch] = (1.0 - m) * state.running_var[ch] + m * var[ch];
        }
        state.initialized = true;
        let mut out = vec![0.0f32; c * h * w];
        bn_forward(
            self.value(input).data(),
            c,
            h * w,
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            state.eps,
            &mut out,
        );
        let value = Tensor::new(vec![c, h, w], out)?;
        let eps = state.eps;
        Ok(self.push(Op::BatchNormTrain { input, gamma, beta, mean, var, eps }, value))
    }

    /// Batch normalization with frozen running statistics.
    pub fn batchnorm_infer(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &BnState,
    ) -> Result<NodeId> {
        if !state.initialized {
            return Err(Error::Numeric(
                "batchnorm inference requested before any running statistics were accumulated".into(),
            ));
        }
        let (c, h, w) = self.bn_validate(input, gamma, beta, state)?;
        let mut out = vec![0.0f32; c * h * w];
        bn_forward(
            self.value(input).data(),
            c,
            h * w,
            &state.running_mean,
            &state.running_var,
            self.value(gamma).data(),
            self.value(beta).data(),
            state.eps,
            &mut out,
        );
        let value = Tensor::new(vec![c, h, w], out)?;
        let op = Op::BatchNormInfer {
            input,
            gamma,
            beta,
            mean: state.running_mean.clone(),
            var: state.running_var.clone(),
            eps: state.eps,
        };
        Ok(self.push(op, value))
    }

    fn bn_validate(
        &self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &BnState,
    ) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.value(input).chw()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] || state.channels() != c {
            return Err(Error::Shape(format!(
                "batchnorm expects gamma/beta/state with {c} channels, got {:?}/{:?}/{}",
                self.value(gamma).shape(),
                self.value(beta).shape(),
                state.channels()
            )));
        }
        if state.eps <= 0.0 {
            return Err(Error::Domain(format!("batchnorm eps must be positive, got {}", state.eps)));
        }
        Ok((c, h, w))
    }

    /// Non-overlapping block mean with stride = kernel. Output dims are
    /// ceil(dim/kernel); trailing partial windows average their actual extent.
    pub fn avg_pool(&mut self, input: NodeId, kernel: usize) -> Result<NodeId> {
        if kernel < 1 {
            return Err(Error::Shape("avg_pool kernel must be at least 1".into()));
        }
        let (c, h, w) = self.value(input).chw()?;
        let (ho, wo) = (h.div_ceil(kernel), w.div_ceil(kernel));
        let mut out = vec![0.0f32; c * ho * wo];
        avg_pool_forward(self.value(input).data(), c, h, w, kernel, ho, wo, &mut out);
        let value = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(Op::AvgPool { input, kernel }, value))
    }

    /// Forward-difference spatial gradients (horizontal, vertical); the last
    /// column/row is 0 so shapes are preserved.
    pub fn spatial_gradient(&mut self, input: NodeId) -> Result<(NodeId, NodeId)> {
        let (c, h, w) = self.value(input).chw()?;
        let data = self.value(input).data();
        let mut dh = vec![0.0f32; c * h * w];
        let mut dv = vec![0.0f32; c * h * w];
        for ch in 0..c {
            let plane = &data[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w - 1 {
                    dh[ch * h * w + y * w + x] = plane[y * w + x + 1] - plane[y * w + x];
                }
            }
            for y in 0..h - 1 {
                for x in 0..w {
                    dv[ch * h * w + y * w + x] = plane[(y + 1) * w + x] - plane[y * w + x];
                }
            }
        }
        let shape = vec![c, h, w];
        let hnode = self.push(Op::DiffH { input }, Tensor::new(shape.clone(), dh)?);
        let vnode = self.push(Op::DiffV { input }, Tensor::new(shape, dv)?);
        Ok((hnode, vnode))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub { a, b }, value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul { a, b }, value))
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what} requires equal shapes, got {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        let value = self.value(input).map(|v| v * factor);
        self.push(Op::Scale { input, factor }, value)
    }

    pub fn add_const(&mut self, input: NodeId, offset: f32) -> NodeId {
        let value = self.value(input).map(|v| v + offset);
        self.push(Op::AddConst { input, offset }, value)
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(f32::abs);
        self.push(Op::Abs { input }, value)
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(input).mean() as f32);
        self.push(Op::Mean { input }, value)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.value(input).data().iter().map(|&v| f64::from(v)).sum();
        let value = Tensor::scalar(s as f32);
        self.push(Op::Sum { input }, value)
    }

    /// Mean over the channel axis: `[C, H, W]` → `[1, H, W]`.
    pub fn channel_mean(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(input).chw()?;
        let data = self.value(input).data();
        let mut out = vec![0.0f32; h * w];
        for ch in 0..c {
            for (o, &v) in out.iter_mut().zip(&data[ch * h * w..(ch + 1) * h * w]) {
                *o += v;
            }
        }
        let inv = 1.0 / c as f32;
        for o in &mut out {
            *o *= inv;
        }
        let value = Tensor::new(vec![1, h, w], out)?;
        Ok(self.push(Op::ChannelMean { input }, value))
    }

    /// Per-channel spatial mean: `[C, H, W]` → `[C]`.
    pub fn channel_means(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(input).chw()?;
        let data = self.value(input).data();
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let s: f64 = data[ch * h * w..(ch + 1) * h * w].iter().map(|&v| f64::from(v)).sum();
            out.push((s / (h * w) as f64) as f32);
        }
        let value = Tensor::new(vec![c], out)?;
        Ok(self.push(Op::ChannelMeans { input }, value))
    }

    /// Pick one element as a `[1]` tensor.
    pub fn index(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let n = self.value(input).numel();
        if index >= n {
            return Err(Error::Shape(format!("index {index} out of range for {n} elements")));
        }
        let value = Tensor::scalar(self.value(input).data()[index]);
        Ok(self.push(Op::Index { input, index }, value))
    }

    /// Clamp to `[lo, hi]`; gradient passes wherever lo ≤ input ≤ hi.
    pub fn clamp(&mut self, input: NodeId, lo: f32, hi: f32) -> NodeId {
        assert!(lo <= hi, "clamp bounds out of order: [{lo}, {hi}]");
        let value = self.value(input).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp { input, lo, hi }, value)
    }

    /// Elementwise reciprocal; requires strictly positive input.
    pub fn recip(&mut self, input: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.value(input).data().iter().find(|v| **v <= 0.0 || !v.is_finite()) {
            return Err(Error::Domain(format!(
                "reciprocal requires strictly positive finite input, found {bad}"
            )));
        }
        let value = self.value(input).map(|v| 1.0 / v);
        Ok(self.push(Op::Recip { input }, value))
    }

    /// `num[c] / den[0]` per channel: `[C, H, W] ⊘ [1, H, W]` → `[C, H, W]`.
    /// The denominator must be strictly positive.
    pub fn div_broadcast(&mut self, num: NodeId, den: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(num).chw()?;
        let dshape = self.value(den).shape();
        if dshape != [1, h, w] {
            return Err(Error::Shape(format!(
                "div_broadcast denominator must be [1, {h}, {w}], got {dshape:?}"
            )));
        }
        if let Some(&bad) = self.value(den).data().iter().find(|v| **v <= 0.0 || !v.is_finite()) {
            return Err(Error::Domain(format!(
                "div_broadcast denominator must be strictly positive, found {bad}"
            )));
        }
        let dv = self.value(den).data();
        let nv = self.value(num).data();
        let mut out = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                out[ch * h * w + i] = nv[ch * h * w + i] / dv[i];
            }
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(Op::DivBroadcast { num, den }, value))
    }

    /// Camera-response application node; the math lives in [`crate::cem`].
    pub(crate) fn cem_op(
        &mut self,
        x: NodeId,
        t: NodeId,
        a: NodeId,
        b: NodeId,
        variant: CrfVariant,
    ) -> Result<NodeId> {
        let (_, h, w) = self.value(x).chw()?;
        if self.value(t).shape() != [1, h, w] {
            return Err(Error::Shape(format!(
                "illumination must be [1, {h}, {w}], got {:?}",
                self.value(t).shape()
            )));
        }
        if self.value(a).numel() != 1 || self.value(b).numel() != 1 {
            return Err(Error::Shape("camera response parameters a, b must be scalar".into()));
        }
        let value = cem::forward(
            variant,
            self.value(x),
            self.value(t),
            self.value(a).item(),
            self.value(b).item(),
        )?;
        Ok(self.push(Op::Cem { x, t, a, b, variant }, value))
    }

    /// Reverse sweep from a scalar loss. Every node reachable from the loss
    /// gets a gradient; [`Gradients::dense`] reports zeros for the rest.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gv = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv3x3 { input, kernels, bias } => {
                let (ci, h, w) = self.value(*input).chw().expect("validated at record");
                let co = self.value(*kernels).shape()[0];
                conv3x3_grad_input(gv, self.value(*kernels).data(), ci, h, w, co, self.slot(grads, *input));
                conv3x3_grad_kernels(gv, self.value(*input).data(), ci, h, w, co, self.slot(grads, *kernels));
                let gb = self.slot(grads, *bias);
                for oc in 0..co {
                    let s: f64 = gv[oc * h * w..(oc + 1) * h * w].iter().map(|&v| f64::from(v)).sum();
                    gb[oc] += s as f32;
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let gi = self.slot(grads, *input);
                for i in 0..gv.len() {
                    if x[i] > 0.0 {
                        gi[i] += gv[i];
                    }
                }
            }
            Op::BatchNormTrain { input, gamma, beta, mean, var, eps } => {
                self.bn_train_backward(gv, *input, *gamma, *beta, mean, var, *eps, grads);
            }
            Op::BatchNormInfer { input, gamma, beta, mean, var, eps } => {
                let (c, h, w) = self.value(*input).chw().expect("validated at record");
                let hw = h * w;
                let x = self.value(*input).data();
                let gam = self.value(*gamma).data();
                {
                    let gi = self.slot(grads, *input);
                    for ch in 0..c {
                        let inv = 1.0 / (var[ch] + eps).sqrt();
                        let k = gam[ch] * inv;
                        for i in ch * hw..(ch + 1) * hw {
                            gi[i] += gv[i] * k;
                        }
                    }
                }
                {
                    let gg = self.slot(grads, *gamma);
                    for ch in 0..c {
                        let inv = f64::from(1.0 / (var[ch] + eps).sqrt());
                        let m = f64::from(mean[ch]);
                        let mut s = 0.0f64;
                        for i in ch * hw..(ch + 1) * hw {
                            s += f64::from(gv[i]) * (f64::from(x[i]) - m) * inv;
                        }
                        gg[ch] += s as f32;
                    }
                }
                let gb = self.slot(grads, *beta);
                for ch in 0..c {
                    let s: f64 = gv[ch * hw..(ch + 1) * hw].iter().map(|&v| f64::from(v)).sum();
                    gb[ch] += s as f32;
                }
            }
            Op::AvgPool { input, kernel } => {
                let (c, h, w) = self.value(*input).chw().expect("validated at record");
                let (ho, wo) = (h.div_ceil(*kernel), w.div_ceil(*kernel));
                let gi = self.slot(grads, *input);
                for ch in 0..c {
                    for oy in 0..ho {
                        let (y0, y1) = (oy * kernel, ((oy + 1) * kernel).min(h));
                        for ox in 0..wo {
                            let (x0, x1) = (ox * kernel, ((ox + 1) * kernel).min(w));
                            let share = gv[(ch * ho + oy) * wo + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    gi[(ch * h + y) * w + x] += share;
                                }
                            }
                        }
                    }
                }
            }
            Op::DiffH { input } => {
                let (c, h, w) = self.value(*input).chw().expect("validated at record");
                let gi = self.slot(grads, *input);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w - 1 {
                            let gd = gv[(ch * h + y) * w + x];
                            gi[(ch * h + y) * w + x + 1] += gd;
                            gi[(ch * h + y) * w + x] -= gd;
                        }
                    }
                }
            }
            Op::DiffV { input } => {
                let (c, h, w) = self.value(*input).chw().expect("validated at record");
                let gi = self.slot(grads, *input);
                for ch in 0..c {
                    for y in 0..h - 1 {
                        for x in 0..w {
                            let gd = gv[(ch * h + y) * w + x];
                            gi[(ch * h + y + 1) * w + x] += gd;
                            gi[(ch * h + y) * w + x] -= gd;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                add_into(self.slot(grads, *a), gv, 1.0);
                add_into(self.slot(grads, *b), gv, 1.0);
            }
            Op::Sub { a, b } => {
                add_into(self.slot(grads, *a), gv, 1.0);
                add_into(self.slot(grads, *b), gv, -1.0);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let ga = self.slot(grads, *a);
                for i in 0..gv.len() {
                    ga[i] += gv[i] * bv[i];
                }
                let gb = self.slot(grads, *b);
                for i in 0..gv.len() {
                    gb[i] += gv[i] * av[i];
                }
            }
            Op::Scale { input, factor } => add_into(self.slot(grads, *input), gv, *factor),
            Op::AddConst { input, .. } => add_into(self.slot(grads, *input), gv, 1.0),
            Op::Abs { input } => {
                let x = self.value(*input).data();
                let gi = self.slot(grads, *input);
                for i in 0..gv.len() {
                    if x[i] > 0.0 {
                        gi[i] += gv[i];
                    } else if x[i] < 0.0 {
                        gi[i] -= gv[i];
                    }
                }
            }
            Op::Mean { input } => {
                let n = self.value(*input).numel() as f32;
                let share = gv[0] / n;
                for d in self.slot(grads, *input) {
                    *d += share;
                }
            }
            Op::Sum { input } => {
                let share = gv[0];
                for d in self.slot(grads, *input) {
                    *d += share;
                }
            }
            Op::ChannelMean { input } => {
                let (c, h, w) = self.value(*input).chw().expect("validated at record");
                let share = 1.0 / c as f32;
                let gi = self.slot(grads, *input);
                for ch in 0..c {
                    for i in 0..h * w {
                        gi[ch * h * w + i] += gv[i] * share;
                    }
                }
            }
            Op::ChannelMeans { input } => {
                let (c, h, w) = self.value(*input).chw().expect("validated at record");
                let share = 1.0 / (h * w) as f32;
                let gi = self.slot(grads, *input);
                for ch in 0..c {
                    let gch = gv[ch] * share;
                    for i in 0..h * w {
                        gi[ch * h * w + i] += gch;
                    }
                }
            }
            Op::Index { input, index } => {
                self.slot(grads, *input)[*index] += gv[0];
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input).data();
                let (lo, hi) = (*lo, *hi);
                let gi = self.slot(grads, *input);
                for i in 0..gv.len() {
                    if x[i] >= lo && x[i] <= hi {
                        gi[i] += gv[i];
                    }
                }
            }
            Op::Recip { input } => {
                let out = self.nodes[id].value.data();
                let gi = self.slot(grads, *input);
                for i in 0..gv.len() {
                    gi[i] -= gv[i] * out[i] * out[i];
                }
            }
            Op::DivBroadcast { num, den } => {
                let (c, h, w) = self.value(*num).chw().expect("validated at record");
                let hw = h * w;
                let dv = self.value(*den).data().to_vec();
                let out = self.nodes[id].value.data().to_vec();
                {
                    let gn = self.slot(grads, *num);
                    for ch in 0..c {
                        for i in 0..hw {
                            gn[ch * hw + i] += gv[ch * hw + i] / dv[i];
                        }
                    }
                }
                let gd = self.slot(grads, *den);
                for ch in 0..c {
                    for i in 0..hw {
                        gd[i] -= gv[ch * hw + i] * out[ch * hw + i] / dv[i];
                    }
                }
            }
            Op::Cem { x, t, a, b, variant } => {
                let (dt, da, db) = cem::backward_contrib(
                    *variant,
                    self.value(*x),
                    self.value(*t),
                    self.value(*a).item(),
                    self.value(*b).item(),
                    g,
                )?;
                add_into(self.slot(grads, *t), dt.data(), 1.0);
                self.slot(grads, *a)[0] += da as f32;
                self.slot(grads, *b)[0] += db as f32;
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], id: NodeId) -> &'a mut [f32] {
        grads[id.0]
            .get_or_insert_with(|| Tensor::zeros(self.value(id).shape().to_vec()))
            .data_mut()
    }

    /// Re-evaluate the recorded program up to `target` in f64, overriding the
    /// values of leaf `leaf`. Used by the finite-difference oracle so its
    /// precision is not limited by the f32 forward pass.
    fn eval_f64(&self, target: NodeId, leaf: NodeId, leaf_values: &[f64]) -> Result<Vec<f64>> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(target.0 + 1);
        for id in 0..=target.0 {
            let node = &self.nodes[id];
            let shape = node.value.shape();
            let v: Vec<f64> = match &node.op {
                Op::Leaf => {
                    if id == leaf.0 {
                        leaf_values.to_vec()
                    } else {
                        node.value.data().iter().map(|&v| f64::from(v)).collect()
                    }
                }
                Op::Conv3x3 { input, kernels, bias } => {
                    let (ci, h, w) = self.value(*input).chw().expect("validated at record");
                    let co = self.value(*kernels).shape()[0];
                    conv3x3_forward_f64(&vals[input.0], ci, h, w, &vals[kernels.0], co, &vals[bias.0])
                }
                Op::Relu { input } => vals[input.0].iter().map(|&v| v.max(0.0)).collect(),
                Op::BatchNormTrain { input, gamma, beta, eps, .. } => {
                    // Batch statistics are a function of the perturbed input,
                    // so they are recomputed rather than replayed.
                    let (c, h, w) = self.value(*input).chw().expect("validated at record");
                    bn_forward_f64(&vals[input.0], c, h * w, &vals[gamma.0], &vals[beta.0], f64::from(*eps), None)
                }
                Op::BatchNormInfer { input, gamma, beta, mean, var, eps } => {
                    let (c, h, w) = self.value(*input).chw().expect("validated at record");
                    let stats: (Vec<f64>, Vec<f64>) = (
                        mean.iter().map(|&v| f64::from(v)).collect(),
                        var.iter().map(|&v| f64::from(v)).collect(),
                    );
                    bn_forward_f64(&vals[input.0], c, h * w, &vals[gamma.0], &vals[beta.0], f64::from(*eps), Some(stats))
                }
                Op::AvgPool { input, kernel } => {
                    let (c, h, w) = self.value(*input).chw().expect("validated at record");
                    let (ho, wo) = (h.div_ceil(*kernel), w.div_ceil(*kernel));
                    let src = &vals[input.0];
                    let mut out = vec![0.0f64; c * ho * wo];
                    for ch in 0..c {
                        for oy in 0..ho {
                            let (y0, y1) = (oy * kernel, ((oy + 1) * kernel).min(h));
                            for ox in 0..wo {
                                let (x0, x1) = (ox * kernel, ((ox + 1) * kernel).min(w));
                                let mut s = 0.0;
                                for y in y0..y1 {
                                    for x in x0..x1 {
                                        s += src[(ch * h + y) * w + x];
                                    }
                                }
                                out[(ch * ho + oy) * wo + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                            }
                        }
                    }
                    out
                }
                Op::DiffH { input } => {
                    let (c, h, w) = self.value(*input).chw().expect("validated at record");
                    let src = &vals[input.0];
                    let mut out = vec![0.0f64; c * h * w];
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w - 1 {
                                out[(ch * h + y) * w + x] = src[(ch * h + y) * w + x + 1] - src[(ch * h + y) * w + x];
                            }
                        }
                    }
                    out
                }
                Op::DiffV { input } => {
                    let (c, h, w) = self.value(*input).chw().expect("validated at record");
                    let src = &vals[input.0];
                    let mut out = vec![0.0f64; c * h * w];
                    for ch in 0..c {
                        for y in 0..h - 1 {
                            for x in 0..w {
                                out[(ch * h + y) * w + x] = src[(ch * h + y + 1) * w + x] - src[(ch * h + y) * w + x];
                            }
                        }
                    }
                    out
                }
                Op::Add { a, b } => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x + y).collect(),
                Op::Sub { a, b } => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x - y).collect(),
                Op::Mul { a, b } => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x * y).collect(),
                Op::Scale { input, factor } => {
                    let f = f64::from(*factor);
                    vals[input.0].iter().map(|&v| v * f).collect()
                }
                Op::AddConst { input, offset } => {
                    let o = f64::from(*offset);
                    vals[input.0].iter().map(|&v| v + o).collect()
                }
                Op::Abs { input } => vals[input.0].iter().map(|&v| v.abs()).collect(),
                Op::Mean { input } => {
                    vec![vals[input.0].iter().sum::<f64>() / vals[input.0].len() as f64]
                }
                Op::Sum { input } => vec![vals[input.0].iter().sum::<f64>()],
                Op::ChannelMean { input } => {
                    let (c, h, w) = self.value(*input).chw().expect("validated at record");
                    let src = &vals[input.0];
                    let mut out = vec![0.0f64; h * w];
                    for ch in 0..c {
                        for i in 0..h * w {
                            out[i] += src[ch * h * w + i];
                        }
                    }
                    for o in &mut out {
                        *o /= c as f64;
                    }
                    out
                }
                Op::ChannelMeans { input } => {
                    let (c, h, w) = self.value(*input).chw().expect("validated at record");
                    let src = &vals[input.0];
                    (0..c)
                        .map(|ch| src[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
                        .collect()
                }
                Op::Index { input, index } => vec![vals[input.0][*index]],
                Op::Clamp { input, lo, hi } => {
                    let (lo, hi) = (f64::from(*lo), f64::from(*hi));
                    vals[input.0].iter().map(|&v| v.clamp(lo, hi)).collect()
                }
                Op::Recip { input } => vals[input.0].iter().map(|&v| 1.0 / v).collect(),
                Op::DivBroadcast { num, den } => {
                    let (c, h, w) = self.value(*num).chw().expect("validated at record");
                    let hw = h * w;
                    let mut out = vec![0.0f64; c * hw];
                    for ch in 0..c {
                        for i in 0..hw {
                            out[ch * hw + i] = vals[num.0][ch * hw + i] / vals[den.0][i];
                        }
                    }
                    out
                }
                Op::Cem { x, t, a, b, variant } => {
                    let (c, h, w) = self.value(*x).chw().expect("validated at record");
                    let hw = h * w;
                    let (av, bv) = (vals[a.0][0], vals[b.0][0]);
                    let mut out = vec![0.0f64; c * hw];
                    for ch in 0..c {
                        for i in 0..hw {
                            out[ch * hw + i] = cem::value_f64(*variant, vals[x.0][ch * hw + i], vals[t.0][i], av, bv);
                        }
                    }
                    out
                }
            };
            debug_assert_eq!(v.len(), shape.iter().product::<usize>());
            vals.push(v);
        }
        Ok(vals.pop().expect("target evaluated"))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_train_backward(
        &self,
        gv: &[f32],
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f32],
        var: &[f32],
        eps: f32,
        grads: &mut [Option<Tensor>],
    ) {
        let (c, h, w) = self.value(input).chw().expect("validated at record");
        let n = (h * w) as f64;
        let x = self.value(input).data();
        let gam = self.value(gamma).data();
        for ch in 0..c {
            let mu = f64::from(mean[ch]);
            let inv = 1.0 / f64::from(var[ch] + eps).sqrt();
            let gmm = f64::from(gam[ch]);
            let plane = ch * h * w..(ch + 1) * h * w;

            let (mut s1, mut s2, mut sc, mut sg, mut sb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for i in plane.clone() {
                let dxhat = f64::from(gv[i]) * gmm;
                let centered = f64::from(x[i]) - mu;
                s1 += dxhat;
                s2 += dxhat * centered;
                sc += centered;
                sg += f64::from(gv[i]) * centered * inv;
                sb += f64::from(gv[i]);
            }
            let dvar = s2 * (-0.5) * inv * inv * inv;
            let dmean = -inv * s1 - 2.0 * dvar * sc / n;
            {
                let gi = self.slot(grads, input);
                for i in plane {
                    let centered = f64::from(x[i]) - mu;
                    let dxhat = f64::from(gv[i]) * gmm;
                    gi[i] += (dxhat * inv + dvar * 2.0 * centered / n + dmean / n) as f32;
                }
            }
            self.slot(grads, gamma)[ch] += sg as f32;
            self.slot(grads, beta)[ch] += sb as f32;
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked")
}

fn add_into(dst: &mut [f32], src: &[f32], factor: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

/// Output positions p in [p0, p1) such that p + d stays inside [0, len).
#[inline]
fn shift_bounds(len: usize, d: isize) -> (usize, usize) {
    let p0 = (-d).max(0) as usize;
    let p1 = (len as isize - d.max(0)).max(0) as usize;
    (p0, p1)
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_forward(inp: &[f32], ci: usize, h: usize, w: usize, ker: &[f32], co: usize, bias: &[f32], out: &mut [f32]) {
    let hw = h * w;
    for oc in 0..co {
        let plane = &mut out[oc * hw..(oc + 1) * hw];
        plane.fill(bias[oc]);
        for ic in 0..ci {
            let src = &inp[ic * hw..(ic + 1) * hw];
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let (y0, y1) = shift_bounds(h, dy);
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let (x0, x1) = shift_bounds(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let wgt = ker[((oc * ci + ic) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let s0 = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                        let srow = &src[s0..s0 + (x1 - x0)];
                        let drow = &mut plane[y * w + x0..y * w + x1];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
}

fn conv3x3_grad_input(gout: &[f32], ker: &[f32], ci: usize, h: usize, w: usize, co: usize, gin: &mut [f32]) {
    let hw = h * w;
    for ic in 0..ci {
        let gplane = &mut gin[ic * hw..(ic + 1) * hw];
        for oc in 0..co {
            let gsrc = &gout[oc * hw..(oc + 1) * hw];
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let (y0, y1) = shift_bounds(h, dy);
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let (x0, x1) = shift_bounds(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let wgt = ker[((oc * ci + ic) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let d0 = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                        let drow = &mut gplane[d0..d0 + (x1 - x0)];
                        let srow = &gsrc[y * w + x0..y * w + x1];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
}

fn conv3x3_grad_kernels(gout: &[f32], inp: &[f32], ci: usize, h: usize, w: usize, co: usize, gker: &mut [f32]) {
    let hw = h * w;
    for oc in 0..co {
        let gsrc = &gout[oc * hw..(oc + 1) * hw];
        for ic in 0..ci {
            let src = &inp[ic * hw..(ic + 1) * hw];
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let (y0, y1) = shift_bounds(h, dy);
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let (x0, x1) = shift_bounds(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0f64;
                    for y in y0..y1 {
                        let s0 = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                        let srow = &src[s0..s0 + (x1 - x0)];
                        let grow = &gsrc[y * w + x0..y * w + x1];
                        let mut row = 0.0f32;
                        for (a, b) in grow.iter().zip(srow) {
                            row += a * b;
                        }
                        acc += f64::from(row);
                    }
                    gker[((oc * ci + ic) * 3 + ky) * 3 + kx] += acc as f32;
                }
            }
        }
    }
}

/// Biased per-channel mean and variance over H×W, accumulated in f64.
fn batch_stats(inp: &[f32], c: usize, hw: usize) -> (Vec<f32>, Vec<f32>) {
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &inp[ch * hw..(ch + 1) * hw];
        let m: f64 = plane.iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64;
        let v: f64 = plane.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / hw as f64;
        mean.push(m as f32);
        var.push(v as f32);
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
fn bn_forward(inp: &[f32], c: usize, hw: usize, mean: &[f32], var: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let (m, g, b) = (mean[ch], gamma[ch], beta[ch]);
        for (o, &x) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(&inp[ch * hw..(ch + 1) * hw]) {
            *o = g * ((x - m) * inv) + b;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn avg_pool_forward(inp: &[f32], c: usize, h: usize, w: usize, k: usize, ho: usize, wo: usize, out: &mut [f32]) {
    for ch in 0..c {
        let plane = &inp[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1) = (oy * k, ((oy + 1) * k).min(h));
            for ox in 0..wo {
                let (x0, x1) = (ox * k, ((ox + 1) * k).min(w));
                let mut s = 0.0f64;
                for y in y0..y1 {
                    for &v in &plane[y * w + x0..y * w + x1] {
                        s += f64::from(v);
                    }
                }
                out[(ch * ho + oy) * wo + ox] = (s / ((y1 - y0) * (x1 - x0)) as f64) as f32;
            }
        }
    }
}

fn conv3x3_forward_f64(inp: &[f64], ci: usize, h: usize, w: usize, ker: &[f64], co: usize, bias: &[f64]) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0f64; co * hw];
    for oc in 0..co {
        let plane = &mut out[oc * hw..(oc + 1) * hw];
        plane.fill(bias[oc]);
        for ic in 0..ci {
            let src = &inp[ic * hw..(ic + 1) * hw];
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let (y0, y1) = shift_bounds(h, dy);
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let (x0, x1) = shift_bounds(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let wgt = ker[((oc * ci + ic) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let s0 = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                        for (d, s) in plane[y * w + x0..y * w + x1].iter_mut().zip(&src[s0..s0 + (x1 - x0)]) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// f64 batchnorm; `stats` of None means batch statistics computed from input.
fn bn_forward_f64(
    inp: &[f64],
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    stats: Option<(Vec<f64>, Vec<f64>)>,
) -> Vec<f64> {
    let mut out = vec![0.0f64; c * hw];
    for ch in 0..c {
        let plane = &inp[ch * hw..(ch + 1) * hw];
        let (m, v) = match &stats {
            Some((mean, var)) => (mean[ch], var[ch]),
            None => {
                let m = plane.iter().sum::<f64>() / hw as f64;
                let v = plane.iter().map(|x| (x - m).powi(2)).sum::<f64>() / hw as f64;
                (m, v)
            }
        };
        let inv = 1.0 / (v + eps).sqrt();
        for (o, &x) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(plane) {
            *o = gamma[ch] * ((x - m) * inv) + beta[ch];
        }
    }
    out
}

/// Central-difference gradient of a scalar-valued builder, one coordinate at
/// a time. The program is recorded once in f32, then re-evaluated in f64 so
/// finite-difference quality is not limited by single-precision rounding.
pub fn numeric_gradient<F>(mut build: F, point: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let pid = g.param(point.clone());
    let loss = build(&mut g, pid)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::Shape(format!(
            "gradcheck requires a scalar-valued function, got output shape {:?}",
            g.value(loss).shape()
        )));
    }
    let base: Vec<f64> = point.data().iter().map(|&v| f64::from(v)).collect();
    let mut out = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut probe = base.clone();
        probe[i] = base[i] + h;
        let fp = g.eval_f64(loss, pid, &probe)?[0];
        probe[i] = base[i] - h;
        let fm = g.eval_f64(loss, pid, &probe)?[0];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Relative error with denominator max(|a|, |b|, 1e-8).
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error between an analytic gradient and a numeric one.
pub fn max_rel_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(f64::from(a), n))
        .fold(0.0, f64::max)
}

/// Compare the analytic gradient of `build` at `point` against central finite
/// differences with step `h`; returns the maximum relative error.
pub fn gradcheck<F>(mut build: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let pid = g.param(point.clone());
    let loss = build(&mut g, pid)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::Shape(format!(
            "gradcheck requires a scalar-valued function, got output shape {:?}",
            g.value(loss).shape()
        )));
    }
    let grads = g.backward(loss)?;
    let analytic = grads.dense(&g, pid);
    let numeric = numeric_gradient(&mut build, point, h)?;
    Ok(max_rel_error(analytic.data(), &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: Vec<usize>, seed: u64, lo: f32, hi: f32) -> Tensor {
        let mut rng = crate::rng::stream(seed, "autodiff-test");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Direct nested-loop zero-padded cross-correlation.
    fn conv_oracle(inp: &Tensor, ker: &Tensor, bias: &Tensor) -> Tensor {
        let (ci, h, w) = inp.chw().unwrap();
        let co = ker.shape()[0];
        let mut out = vec![0.0f32; co * h * w];
        for oc in 0..co {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias.data()[oc];
                    for ic in 0..ci {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let (sy, sx) = (y + ky, x + kx);
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let kv = ker.data()[((oc * ci + ic) * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize];
                                acc += kv * inp.data()[(ic * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(oc * h + y as usize) * w + x as usize] = acc;
                }
            }
        }
        Tensor::new(vec![co, h, w], out).unwrap()
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(vec![1, 4, 5], 1, -1.0, 1.0));
        let mut kdata = vec![0.0f32; 9];
        kdata[4] = 1.0;
        let k = g.constant(Tensor::new(vec![1, 1, 3, 3], kdata).unwrap());
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv3x3(x, k, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(vec![2, 3, 3], 2, -1.0, 1.0));
        let k = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        let b = g.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
        let y = g.conv3x3(x, k, b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        for (seed, ci, co, h, w) in [(3, 1, 1, 4, 4), (4, 3, 2, 5, 7), (5, 4, 3, 1, 6), (6, 2, 2, 6, 1)] {
            let inp = rand_tensor(vec![ci, h, w], seed, -1.0, 1.0);
            let ker = rand_tensor(vec![co, ci, 3, 3], seed + 100, -1.0, 1.0);
            let bias = rand_tensor(vec![co], seed + 200, -1.0, 1.0);
            let mut g = Graph::new();
            let (x, k, b) = (g.constant(inp.clone()), g.constant(ker.clone()), g.constant(bias.clone()));
            let y = g.conv3x3(x, k, b).unwrap();
            let want = conv_oracle(&inp, &ker, &bias);
            for (got, want) in g.value(y).data().iter().zip(want.data()) {
                assert!((got - want).abs() < 1e-6, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![3, 4, 4]));
        let k = g.constant(Tensor::zeros(vec![2, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![2]));
        assert!(matches!(g.conv3x3(x, k, b), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x);
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.dense(&g, x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn batchnorm_constant_channel_goes_to_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 3, 3], 7.0));
        let gamma = g.constant(Tensor::full(vec![1], 1.0));
        let beta = g.constant(Tensor::zeros(vec![1]));
        let mut state = BnState::new(1);
        let y = g.batchnorm_train(x, gamma, beta, &mut state).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-4));
        assert!(state.initialized);
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(vec![2, 3, 3], 7, -1.0, 1.0));
        let gamma = g.constant(Tensor::zeros(vec![2]));
        let beta = g.constant(Tensor::new(vec![2], vec![0.25, -0.5]).unwrap());
        let mut state = BnState::new(2);
        let y = g.batchnorm_train(x, gamma, beta, &mut state).unwrap();
        assert!(g.value(y).channel(0).iter().all(|&v| v == 0.25));
        assert!(g.value(y).channel(1).iter().all(|&v| v == -0.5));
    }

    #[test]
    fn batchnorm_standardizes_against_two_pass_oracle() {
        let inp = rand_tensor(vec![2, 3, 3], 8, -2.0, 2.0);
        let mut g = Graph::new();
        let x = g.constant(inp.clone());
        let gamma = g.constant(Tensor::full(vec![2], 1.0));
        let beta = g.constant(Tensor::zeros(vec![2]));
        let mut state = BnState::new(2);
        let y = g.batchnorm_train(x, gamma, beta, &mut state).unwrap();
        for ch in 0..2 {
            // Two-pass oracle over the input channel.
            let plane: Vec<f64> = inp.channel(ch).iter().map(|&v| f64::from(v)).collect();
            let m = plane.iter().sum::<f64>() / plane.len() as f64;
            let var = plane.iter().map(|v| (v - m).powi(2)).sum::<f64>() / plane.len() as f64;
            for (out, v) in g.value(y).channel(ch).iter().zip(&plane) {
                let want = (v - m) / (var + 1e-5).sqrt();
                assert!((f64::from(*out) - want).abs() < 1e-5);
            }
            let got: Vec<f64> = g.value(y).channel(ch).iter().map(|&v| f64::from(v)).collect();
            let gm = got.iter().sum::<f64>() / got.len() as f64;
            let gv = got.iter().map(|v| (v - gm).powi(2)).sum::<f64>() / got.len() as f64;
            assert!(gm.abs() < 1e-6);
            assert!((gv - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_running_stats_blend_with_momentum() {
        let inp = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut state = BnState::new(1);
        let mut g = Graph::new();
        let x = g.constant(inp);
        let gamma = g.constant(Tensor::full(vec![1], 1.0));
        let beta = g.constant(Tensor::zeros(vec![1]));
        g.batchnorm_train(x, gamma, beta, &mut state).unwrap();
        // Batch mean 2.5, biased variance 1.25, blended from the (0, 1) start.
        assert!((state.running_mean[0] - 0.25).abs() < 1e-6);
        assert!((state.running_var[0] - (0.9 + 0.125)).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_infer_requires_initialized_stats() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 2]));
        let gamma = g.constant(Tensor::full(vec![1], 1.0));
        let beta = g.constant(Tensor::zeros(vec![1]));
        let state = BnState::new(1);
        assert!(matches!(g.batchnorm_infer(x, gamma, beta, &state), Err(Error::Numeric(_))));
    }

    #[test]
    fn avg_pool_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![2, 5, 6], 0.7));
        let y = g.avg_pool(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-6));

        let x2 = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y2 = g.avg_pool(x2, 2).unwrap();
        assert_eq!(g.value(y2).shape(), &[1, 1, 1]);
        assert!((g.value(y2).item() - 2.5).abs() < 1e-6);

        let x3 = g.constant(Tensor::zeros(vec![1, 2, 2]));
        assert!(g.avg_pool(x3, 0).is_err());
    }

    #[test]
    fn avg_pool_partial_windows_match_block_oracle() {
        let inp = rand_tensor(vec![1, 17, 17], 9, 0.0, 1.0);
        let mut g = Graph::new();
        let x = g.constant(inp.clone());
        let y = g.avg_pool(x, 16).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2]);
        for oy in 0..2 {
            for ox in 0..2 {
                let (y0, y1) = (oy * 16, (oy * 16 + 16).min(17));
                let (x0, x1) = (ox * 16, (ox * 16 + 16).min(17));
                let mut s = 0.0f64;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        s += f64::from(inp.data()[yy * 17 + xx]);
                    }
                }
                let want = s / ((y1 - y0) * (x1 - x0)) as f64;
                let got = f64::from(g.value(y).data()[oy * 2 + ox]);
                assert!((got - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn spatial_gradient_examples() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(vec![1, 3, 3], 0.4));
        let (dh, dv) = g.spatial_gradient(c).unwrap();
        assert!(g.value(dh).data().iter().all(|&v| v == 0.0));
        assert!(g.value(dv).data().iter().all(|&v| v == 0.0));

        let w = 5usize;
        let ramp: Vec<f32> = (0..3 * w).map(|i| (i % w) as f32 / w as f32).collect();
        let r = g.constant(Tensor::new(vec![1, 3, w], ramp).unwrap());
        let (dh, dv) = g.spatial_gradient(r).unwrap();
        for y in 0..3 {
            for x in 0..w {
                let want = if x < w - 1 { 1.0 / w as f32 } else { 0.0 };
                assert!((g.value(dh).data()[y * w + x] - want).abs() < 1e-6);
                assert_eq!(g.value(dv).data()[y * w + x], 0.0);
            }
        }
    }

    #[test]
    fn spatial_gradient_matches_elementwise_oracle() {
        let inp = rand_tensor(vec![1, 5, 5], 10, -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.constant(inp.clone());
        let (dh, dv) = g.spatial_gradient(x).unwrap();
        for y in 0..5 {
            for xx in 0..5 {
                let want_h = if xx < 4 { inp.data()[y * 5 + xx + 1] - inp.data()[y * 5 + xx] } else { 0.0 };
                let want_v = if y < 4 { inp.data()[(y + 1) * 5 + xx] - inp.data()[y * 5 + xx] } else { 0.0 };
                assert_eq!(g.value(dh).data()[y * 5 + xx], want_h);
                assert_eq!(g.value(dv).data()[y * 5 + xx], want_v);
            }
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_square_gives_2x() {
        let inp = rand_tensor(vec![2, 3], 11, -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.param(inp.clone());
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.dense(&g, x).data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let x = g.param(inp.clone());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        for (got, v) in grads.dense(&g, x).data().iter().zip(inp.data()) {
            assert!((got - 2.0 * v).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let used = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = g.sum(used);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.dense(&g, unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let point = rand_tensor(vec![1, 8, 8], 12, -1.0, 1.0);
        let ker = rand_tensor(vec![2, 1, 3, 3], 13, -0.5, 0.5);
        let bias = rand_tensor(vec![2], 14, -0.1, 0.1);
        let err = gradcheck(
            |g, x| {
                let k = g.constant(ker.clone());
                let b = g.constant(bias.clone());
                let c = g.conv3x3(x, k, b)?;
                let r = g.relu(c);
                let p = g.avg_pool(r, 3)?;
                Ok(g.sum(p))
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn gradcheck_sum_of_squares_is_tight() {
        let point = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = gradcheck(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn gradcheck_flags_doubled_gradient() {
        let point = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
        let build = |g: &mut Graph, x: NodeId| -> Result<NodeId> {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        };
        let mut g = Graph::new();
        let x = g.param(point.clone());
        let loss = build(&mut g, x).unwrap();
        let grads = g.backward(loss).unwrap();
        let doubled: Vec<f32> = grads.dense(&g, x).data().iter().map(|v| 2.0 * v).collect();
        let numeric = numeric_gradient(build, &point, 1e-3).unwrap();
        let err = max_rel_error(&doubled, &numeric);
        assert!((err - 0.5).abs() < 0.01, "expected ~0.5, got {err}");
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        let h = 1e-3;
        let tol = 1e-3;
        let img = rand_tensor(vec![2, 4, 5], 20, -1.0, 1.0);
        let pos = rand_tensor(vec![2, 4, 5], 21, 0.2, 1.0);
        let cases: Vec<(&str, Box<dyn FnMut(&mut Graph, NodeId) -> Result<NodeId>>, Tensor)> = vec![
            ("relu", Box::new(|g, x| { let r = g.relu(x); Ok(g.mean(r)) }), img.clone()),
            ("abs", Box::new(|g, x| { let r = g.abs(x); Ok(g.mean(r)) }), img.clone()),
            ("avg_pool", Box::new(|g, x| { let p = g.avg_pool(x, 3)?; Ok(g.sum(p)) }), img.clone()),
            (
                "spatial_gradient",
                Box::new(|g, x| {
                    let (dh, dv) = g.spatial_gradient(x)?;
                    let s1 = g.mul(dh, dh)?;
                    let s2 = g.mul(dv, dv)?;
                    let s = g.add(s1, s2)?;
                    Ok(g.mean(s))
                }),
                img.clone(),
            ),
            ("channel_mean", Box::new(|g, x| { let m = g.channel_mean(x)?; let sq = g.mul(m, m)?; Ok(g.sum(sq)) }), img.clone()),
            ("channel_means", Box::new(|g, x| { let m = g.channel_means(x)?; let sq = g.mul(m, m)?; Ok(g.sum(sq)) }), img.clone()),
            ("recip", Box::new(|g, x| { let r = g.recip(x)?; Ok(g.mean(r)) }), pos.clone()),
            ("index", Box::new(|g, x| { let i = g.index(x, 7)?; Ok(g.mul(i, i)?) }), img.clone()),
            ("scale_addconst", Box::new(|g, x| { let s = g.scale(x, -2.5); let t = g.add_const(s, 1.0); let sq = g.mul(t, t)?; Ok(g.mean(sq)) }), img.clone()),
        ];
        for (name, build, point) in cases {
            let err = gradcheck(build, &point, h).unwrap();
            assert!(err < tol, "{name}: max relative error {err}");
        }
    }

    #[test]
    fn div_broadcast_gradient_matches_finite_differences() {
        let num = rand_tensor(vec![3, 4, 4], 22, -1.0, 1.0);
        let den = rand_tensor(vec![1, 4, 4], 23, 0.3, 1.0);
        // Check w.r.t. the numerator.
        let den2 = den.clone();
        let err = gradcheck(
            move |g, x| {
                let d = g.constant(den2.clone());
                let q = g.div_broadcast(x, d)?;
                let sq = g.mul(q, q)?;
                Ok(g.mean(sq))
            },
            &num,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "numerator: {err}");
        // Check w.r.t. the denominator.
        let num2 = num.clone();
        let err = gradcheck(
            move |g, x| {
                let n = g.constant(num2.clone());
                let q = g.div_broadcast(n, x)?;
                let sq = g.mul(q, q)?;
                Ok(g.mean(sq))
            },
            &den,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "denominator: {err}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let inp = rand_tensor(vec![2, 5, 5], 24, -1.0, 1.0);
        let ker = rand_tensor(vec![3, 2, 3, 3], 25, -0.5, 0.5);
        let bias = rand_tensor(vec![3], 26, -0.2, 0.2);
        let (k2, b2) = (ker.clone(), bias.clone());
        let err = gradcheck(
            move |g, x| {
                let k = g.constant(k2.clone());
                let b = g.constant(b2.clone());
                let c = g.conv3x3(x, k, b)?;
                let sq = g.mul(c, c)?;
                Ok(g.mean(sq))
            },
            &inp,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "input: {err}");

        let (i2, b2) = (inp.clone(), bias.clone());
        let err = gradcheck(
            move |g, k| {
                let x = g.constant(i2.clone());
                let b = g.constant(b2.clone());
                let c = g.conv3x3(x, k, b)?;
                let sq = g.mul(c, c)?;
                Ok(g.mean(sq))
            },
            &ker,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "kernels: {err}");

        let (i2, k2) = (inp.clone(), ker.clone());
        let err = gradcheck(
            move |g, b| {
                let x = g.constant(i2.clone());
                let k = g.constant(k2.clone());
                let c = g.conv3x3(x, k, b)?;
                let sq = g.mul(c, c)?;
                Ok(g.mean(sq))
            },
            &bias,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "bias: {err}");
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let inp = rand_tensor(vec![2, 4, 4], 27, -1.0, 1.0);
        let gamma = rand_tensor(vec![2], 28, 0.5, 1.5);
        let beta = rand_tensor(vec![2], 29, -0.5, 0.5);
        // Standardization makes symmetric losses like mean(y²) nearly
        // constant in the input, so probe with a random-weighted projection.
        let probe = rand_tensor(vec![2, 4, 4], 33, -1.0, 1.0);

        let (g2, b2, p2) = (gamma.clone(), beta.clone(), probe.clone());
        let err = gradcheck(
            move |g, x| {
                let gm = g.constant(g2.clone());
                let bt = g.constant(b2.clone());
                let pw = g.constant(p2.clone());
                let mut state = BnState::new(2);
                let y = g.batchnorm_train(x, gm, bt, &mut state)?;
                let wy = g.mul(y, pw)?;
                Ok(g.mean(wy))
            },
            &inp,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "input: {err}");

        let (i2, b2, p2) = (inp.clone(), beta.clone(), probe.clone());
        let err = gradcheck(
            move |g, gm| {
                let x = g.constant(i2.clone());
                let bt = g.constant(b2.clone());
                let pw = g.constant(p2.clone());
                let mut state = BnState::new(2);
                let y = g.batchnorm_train(x, gm, bt, &mut state)?;
                let wy = g.mul(y, pw)?;
                Ok(g.mean(wy))
            },
            &gamma,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "gamma: {err}");

        let (i2, g2, p2) = (inp.clone(), gamma.clone(), probe.clone());
        let err = gradcheck(
            move |g, bt| {
                let x = g.constant(i2.clone());
                let gm = g.constant(g2.clone());
                let pw = g.constant(p2.clone());
                let mut state = BnState::new(2);
                let y = g.batchnorm_train(x, gm, bt, &mut state)?;
                let wy = g.mul(y, pw)?;
                Ok(g.mean(wy))
            },
            &beta,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "beta: {err}");
    }

    #[test]
    fn clamp_gradient_respects_boundaries() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![4], vec![-0.5, 0.2, 0.8, 1.5]).unwrap());
        let c = g.clamp(x, 0.0, 1.0);
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.dense(&g, x).data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn forward_ops_are_pure() {
        let inp = rand_tensor(vec![2, 6, 6], 30, -1.0, 1.0);
        let ker = rand_tensor(vec![2, 2, 3, 3], 31, -0.5, 0.5);
        let bias = rand_tensor(vec![2], 32, -0.1, 0.1);
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(inp.clone());
            let k = g.constant(ker.clone());
            let b = g.constant(bias.clone());
            let c = g.conv3x3(x, k, b).unwrap();
            let r = g.relu(c);
            let p = g.avg_pool(r, 4).unwrap();
            g.value(p).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        use proptest::prelude::*;
        proptest!(ProptestConfig::with_cases(32), |(
            data in proptest::collection::vec(-1.0f32..1.0, 8),
            alpha in -1.0f32..1.0,
            beta in -1.0f32..1.0,
        )| {
            let point = Tensor::new(vec![8], data).unwrap();
            let build = |g: &mut Graph, x: NodeId| -> (NodeId, NodeId) {
                let sq = g.mul(x, x).unwrap();
                let l1 = g.sum(sq);
                let l2 = g.mean(x);
                (l1, l2)
            };
            // Combined loss.
            let mut g = Graph::new();
            let x = g.param(point.clone());
            let (l1, l2) = build(&mut g, x);
            let s1 = g.scale(l1, alpha);
            let s2 = g.scale(l2, beta);
            let combined = g.add(s1, s2).unwrap();
            let gc = g.backward(combined).unwrap().dense(&g, x);
            // Separate losses on the same recorded graph.
            let g1 = g.backward(l1).unwrap().dense(&g, x);
            let g2 = g.backward(l2).unwrap().dense(&g, x);
            for i in 0..8 {
                let want = alpha * g1.data()[i] + beta * g2.data()[i];
                prop_assert!((gc.data()[i] - want).abs() <= 1e-6);
            }
        });
    }
}
