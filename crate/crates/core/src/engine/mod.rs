//! Desk-scale CPU execution of layer graphs in double precision.
//!
//! Forward passes record what reverse mode needs in a [`Trace`]; the
//! parameter store is never mutated by `forward` or `backward`. Parallel
//! kernels split work by output plane only, so results are bit-identical to
//! single-threaded execution.

pub mod ops;
mod tensor;
mod weights;

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use tensor::Tensor;
pub use weights::{Factorization, WeightInit, WeightStore};

use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerNode, NetworkGraph};
use ops::{ConvGeom, BN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// BatchNorm normalizes with mini-batch statistics.
    Train,
    /// BatchNorm is a fixed affine map from the running statistics.
    Inference,
}

pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
struct BnCache {
    mean: Vec<f64>,
    var: Vec<f64>,
    xhat: Tensor,
}

/// Activations of every node plus what reverse mode needs.
#[derive(Clone, Debug)]
pub struct Trace {
    pub outputs: IndexMap<String, Tensor>,
    /// Multiply-accumulates executed per weight layer (Conv, Deconv,
    /// FullyConnected); every other kind reports 0.
    pub macs: IndexMap<String, u64>,
    pub mode: Mode,
    bn: HashMap<String, BnCache>,
    argmax: HashMap<String, Vec<usize>>,
}

impl Trace {
    pub fn output(&self, node: &str) -> Option<&Tensor> {
        self.outputs.get(node)
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }
}

/// Extra inputs some layers need at run time.
#[derive(Clone, Debug, Default)]
pub struct Extras<'a> {
    /// ROIs in input-image coordinates, consumed by every `RoiPool` node.
    pub rois: Option<&'a [BBox]>,
}

fn vec_of(t: &Tensor) -> &[f64] {
    t.data()
}

fn geom(node: &LayerNode) -> ConvGeom {
    ConvGeom { kernel: node.kernel, stride: node.stride, pad: node.pad, groups: node.groups }
}

fn unsupported(node: &LayerNode, detail: &str) -> Error {
    Error::UnsupportedKind { node: node.name.clone(), kind: node.kind, detail: detail.into() }
}

pub fn forward(graph: &NetworkGraph, weights: &WeightStore, input: &Tensor, mode: Mode) -> Result<Trace> {
    forward_with(graph, weights, input, mode, &Extras::default())
}

pub fn forward_with(
    graph: &NetworkGraph,
    weights: &WeightStore,
    input: &Tensor,
    mode: Mode,
    extras: &Extras<'_>,
) -> Result<Trace> {
    if let Some(d) = crate::graph::validate(graph).into_iter().find(|d| {
        !matches!(
            d.kind,
            crate::graph::DiagnosticKind::ChannelOrSpatialMismatch | crate::graph::DiagnosticKind::NegativeDimension
        )
    }) {
        return Err(Error::InvalidGraph(d.to_string()));
    }
    if !input.is_finite() {
        return Err(Error::NonFiniteValue("input".into()));
    }
    let mut trace = Trace {
        outputs: IndexMap::with_capacity(graph.nodes.len()),
        macs: IndexMap::with_capacity(graph.nodes.len()),
        mode,
        bn: HashMap::new(),
        argmax: HashMap::new(),
    };
    for node in &graph.nodes {
        let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &trace.outputs[i.as_str()]).collect();
        let (out, macs) = forward_node(node, &ins, weights, mode, extras, &mut trace.bn, &mut trace.argmax, input)?;
        if !out.is_finite() {
            return Err(Error::NonFiniteValue(node.name.clone()));
        }
        trace.macs.insert(node.name.clone(), macs);
        trace.outputs.insert(node.name.clone(), out);
    }
    Ok(trace)
}

#[allow(clippy::too_many_arguments)]
fn forward_node(
    node: &LayerNode,
    ins: &[&Tensor],
    weights: &WeightStore,
    mode: Mode,
    extras: &Extras<'_>,
    bn: &mut HashMap<String, BnCache>,
    argmax: &mut HashMap<String, Vec<usize>>,
    input: &Tensor,
) -> Result<(Tensor, u64)> {
    let name = node.name.as_str();
    let mismatch = |detail: String| Error::ShapeMismatch { node: node.name.clone(), detail };
    let x = ins.first().copied();
    Ok(match node.kind {
        LayerKind::Input => (input.clone(), 0),
        LayerKind::Conv => {
            let x = x.expect("arity checked");
            let w = weights.require(name, "weight")?;
            let b = weights.require(name, "bias")?;
            let [c_out, cg_in, kh, kw] = w.shape();
            if Some(c_out) != node.out_channels || cg_in * node.groups != x.channels() || (kh, kw) != node.kernel {
                return Err(mismatch(format!("weight {:?} for input {:?}", w.shape(), x.shape())));
            }
            let [_, _, h, wd] = x.shape();
            if h + 2 * node.pad < kh || wd + 2 * node.pad < kw {
                return Err(Error::NegativeDimension {
                    node: node.name.clone(),
                    kernel: kh.max(kw),
                    padded: h.min(wd) + 2 * node.pad,
                });
            }
            ops::conv2d(x, w, Some(vec_of(b)), geom(node))
        }
        LayerKind::Deconv => {
            let x = x.expect("arity checked");
            let w = weights.require(name, "weight")?;
            let b = weights.require(name, "bias")?;
            let [c_in, cg_out, kh, kw] = w.shape();
            if c_in != x.channels() || Some(cg_out * node.groups) != node.out_channels || node.pad >= kh.min(kw) {
                return Err(mismatch(format!("weight {:?} for input {:?}", w.shape(), x.shape())));
            }
            ops::deconv2d(x, w, Some(vec_of(b)), geom(node))
        }
        LayerKind::MaxPool => {
            let x = x.expect("arity checked");
            let (y, arg) = ops::max_pool(x, geom(node));
            argmax.insert(node.name.clone(), arg);
            (y, 0)
        }
        LayerKind::Concat => {
            let [n, _, h, w] = ins[0].shape();
            if ins.iter().any(|t| t.batch() != n || t.shape()[2] != h || t.shape()[3] != w) {
                return Err(mismatch("concat inputs differ spatially".into()));
            }
            (ops::concat_channels(ins), 0)
        }
        LayerKind::EltwiseAdd => {
            let mut y = ins[0].clone();
            for t in &ins[1..] {
                if t.shape() != y.shape() {
                    return Err(mismatch(format!("add {:?} + {:?}", y.shape(), t.shape())));
                }
                y.add_assign(t);
            }
            (y, 0)
        }
        LayerKind::Negate => (x.expect("arity checked").map(|v| -v), 0),
        LayerKind::ReLU => (x.expect("arity checked").map(|v| v.max(0.0)), 0),
        LayerKind::ScaleBias => {
            let x = x.expect("arity checked");
            let s = weights.require(name, "scale")?;
            let b = weights.require(name, "bias")?;
            if s.numel() != x.channels() || b.numel() != x.channels() {
                return Err(mismatch(format!("{} channels, {} scales", x.channels(), s.numel())));
            }
            (ops::channel_affine(x, s.data(), b.data()), 0)
        }
        LayerKind::BatchNorm => {
            let x = x.expect("arity checked");
            let gamma = weights.require(name, "gamma")?.data();
            let beta = weights.require(name, "beta")?.data();
            if gamma.len() != x.channels() {
                return Err(mismatch(format!("{} channels, {} gammas", x.channels(), gamma.len())));
            }
            match mode {
                Mode::Train => {
                    let (mean, var) = ops::channel_stats(x);
                    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let shift: Vec<f64> = mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
                    let xhat = ops::channel_affine(x, &inv, &shift);
                    let y = ops::channel_affine(&xhat, gamma, beta);
                    bn.insert(node.name.clone(), BnCache { mean, var, xhat });
                    (y, 0)
                }
                Mode::Inference => {
                    let (scale, shift) = bn_affine(weights, name)?;
                    (ops::channel_affine(x, &scale, &shift), 0)
                }
            }
        }
        LayerKind::FullyConnected => {
            let x = x.expect("arity checked");
            let w = weights.require(name, "weight")?;
            let b = weights.require(name, "bias")?;
            if w.shape()[1] != x.item_len() || Some(w.shape()[0]) != node.out_channels {
                return Err(mismatch(format!("weight {:?} for input {:?}", w.shape(), x.shape())));
            }
            ops::fully_connected(x, w, b.data())
        }
        LayerKind::RoiPool => {
            let x = x.expect("arity checked");
            let rois = extras.rois.ok_or_else(|| unsupported(node, "forward needs ROIs (Extras::rois)"))?;
            (ops::roi_pool(x, rois, node.kernel, node.stride as f64), 0)
        }
        LayerKind::Slice => {
            let x = x.expect("arity checked");
            let (a, b) = node.slice.unwrap_or((0, 0));
            if b > x.channels() || a >= b {
                return Err(mismatch(format!("slice [{a}, {b}) of {} channels", x.channels())));
            }
            (ops::slice_channels(x, a, b), 0)
        }
    })
}

/// Inference-mode BatchNorm as `(scale, shift)`.
fn bn_affine(weights: &WeightStore, name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let gamma = weights.require(name, "gamma")?.data();
    let beta = weights.require(name, "beta")?.data();
    let mean = weights.require(name, "running_mean")?.data();
    let var = weights.require(name, "running_var")?.data();
    let scale: Vec<f64> = gamma.iter().zip(var).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect();
    let shift: Vec<f64> = beta.iter().zip(mean).zip(&scale).map(|((b, m), s)| b - m * s).collect();
    Ok((scale, shift))
}

/// Gradients for every parameter that received one, and for the input.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: WeightStore,
    pub input: Tensor,
    /// Gradient w.r.t. each node's output.
    pub nodes: IndexMap<String, Tensor>,
}

fn accumulate(grads: &mut IndexMap<String, Tensor>, name: &str, g: Tensor) {
    match grads.get_mut(name) {
        Some(t) => t.add_assign(&g),
        None => {
            grads.insert(name.to_string(), g);
        }
    }
}

/// Reverse-mode gradients given upstream gradients for any subset of nodes.
pub fn backward(
    graph: &NetworkGraph,
    weights: &WeightStore,
    trace: &Trace,
    output_grads: &IndexMap<String, Tensor>,
) -> Result<Gradients> {
    let mut grads: IndexMap<String, Tensor> = IndexMap::new();
    for (name, g) in output_grads {
        let out = trace.outputs.get(name).ok_or_else(|| Error::UnknownNode(name.clone()))?;
        if out.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                node: name.clone(),
                detail: format!("gradient {:?} for output {:?}", g.shape(), out.shape()),
            });
        }
        accumulate(&mut grads, name, g.clone());
    }
    let mut params = WeightStore::new();
    let mut input_grad = None;

    for node in graph.nodes.iter().rev() {
        let Some(dy) = grads.get(node.name.as_str()).cloned() else { continue };
        let name = node.name.as_str();
        let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &trace.outputs[i.as_str()]).collect();
        let push = |grads: &mut IndexMap<String, Tensor>, i: usize, g: Tensor| accumulate(grads, &node.inputs[i], g);
        match node.kind {
            LayerKind::Input => input_grad = Some(dy),
            LayerKind::Conv => {
                let w = weights.require(name, "weight")?;
                let g = ops::conv2d_backward(ins[0], w, &dy, geom(node));
                params.insert(name, "weight", g.dw);
                params.insert(name, "bias", Tensor::vector(g.db));
                push(&mut grads, 0, g.dx);
            }
            LayerKind::Deconv | LayerKind::RoiPool => return Err(unsupported(node, "forward-only layer")),
            LayerKind::MaxPool => {
                let arg = &trace.argmax[name];
                push(&mut grads, 0, ops::max_pool_backward(ins[0].shape(), arg, &dy));
            }
            LayerKind::Concat => {
                let mut start = 0;
                for (i, t) in ins.iter().enumerate() {
                    let c = t.channels();
                    push(&mut grads, i, ops::slice_channels(&dy, start, start + c));
                    start += c;
                }
            }
            LayerKind::EltwiseAdd => {
                for i in 0..ins.len() {
                    push(&mut grads, i, dy.clone());
                }
            }
            LayerKind::Negate => push(&mut grads, 0, dy.map(|v| -v)),
            LayerKind::ReLU => {
                let mut dx = dy;
                dx.data_mut().iter_mut().zip(ins[0].data()).for_each(|(d, &x)| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                push(&mut grads, 0, dx);
            }
            LayerKind::ScaleBias => {
                let s = weights.require(name, "scale")?;
                params.insert(name, "scale", Tensor::vector(ops::channel_sum(&dy, Some(ins[0]))));
                params.insert(name, "bias", Tensor::vector(ops::channel_sum(&dy, None)));
                let zero = vec![0.0; s.numel()];
                push(&mut grads, 0, ops::channel_affine(&dy, s.data(), &zero));
            }
            LayerKind::BatchNorm => {
                let gamma = weights.require(name, "gamma")?.data();
                match trace.mode {
                    Mode::Train => {
                        let cache = &trace.bn[name];
                        let (dx, dgamma, dbeta) = ops::batch_norm_backward(&cache.xhat, &cache.var, gamma, &dy);
                        params.insert(name, "gamma", Tensor::vector(dgamma));
                        params.insert(name, "beta", Tensor::vector(dbeta));
                        push(&mut grads, 0, dx);
                    }
                    Mode::Inference => {
                        let (scale, _) = bn_affine(weights, name)?;
                        let var = weights.require(name, "running_var")?.data();
                        let mean = weights.require(name, "running_mean")?.data();
                        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                        let shift: Vec<f64> = mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
                        let xhat = ops::channel_affine(ins[0], &inv, &shift);
                        params.insert(name, "gamma", Tensor::vector(ops::channel_sum(&dy, Some(&xhat))));
                        params.insert(name, "beta", Tensor::vector(ops::channel_sum(&dy, None)));
                        let zero = vec![0.0; scale.len()];
                        push(&mut grads, 0, ops::channel_affine(&dy, &scale, &zero));
                    }
                }
            }
            LayerKind::FullyConnected => {
                let w = weights.require(name, "weight")?;
                let (dx, dw, db) = ops::fully_connected_backward(ins[0], w, &dy);
                params.insert(name, "weight", dw);
                params.insert(name, "bias", Tensor::vector(db));
                push(&mut grads, 0, dx);
            }
            LayerKind::Slice => {
                let (a, _) = node.slice.unwrap_or((0, 0));
                let x = ins[0];
                let dx = Tensor::from_fn(x.shape(), |[n, c, h, w]| {
                    if c >= a && c - a < dy.channels() {
                        dy.at(n, c - a, h, w)
                    } else {
                        0.0
                    }
                });
                push(&mut grads, 0, dx);
            }
        }
    }
    let input_name = graph.input().ok_or_else(|| Error::InvalidGraph("no unique Input node".into()))?;
    let input = input_grad.unwrap_or_else(|| Tensor::zeros(trace.outputs[input_name].shape()));
    Ok(Gradients { params, input, nodes: grads })
}

/// Moves running BatchNorm statistics toward the batch statistics of a
/// train-mode trace: `running = m * running + (1 - m) * batch`, with the
/// unbiased batch variance.
pub fn update_running_stats(weights: &mut WeightStore, trace: &Trace, momentum: f64) {
    for (name, cache) in &trace.bn {
        let count = (cache.xhat.batch() * cache.xhat.plane()) as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        if let Some(rm) = weights.get_mut(name, "running_mean") {
            rm.data_mut().iter_mut().zip(&cache.mean).for_each(|(r, m)| *r = momentum * *r + (1.0 - momentum) * m);
        }
        if let Some(rv) = weights.get_mut(name, "running_var") {
            rv.data_mut()
                .iter_mut()
                .zip(&cache.var)
                .for_each(|(r, v)| *r = momentum * *r + (1.0 - momentum) * v * unbias);
        }
    }
}

/// Folds each inference-mode BatchNorm that directly follows a Conv (and is
/// its only consumer) into that conv. The folded conv takes the BatchNorm's
/// name so downstream references are unchanged.
pub fn fold_batchnorm(graph: &NetworkGraph, weights: &WeightStore) -> Result<(NetworkGraph, WeightStore)> {
    let mut nodes: Vec<LayerNode> = Vec::with_capacity(graph.nodes.len());
    let mut store = weights.clone();
    let mut folded: HashMap<String, String> = HashMap::new();
    for node in &graph.nodes {
        let mut node = node.clone();
        for i in node.inputs.iter_mut() {
            if let Some(n) = folded.get(i.as_str()) {
                *i = n.clone();
            }
        }
        let conv_src = (node.kind == LayerKind::BatchNorm)
            .then(|| graph.node(&node.inputs[0]))
            .flatten()
            .filter(|src| src.kind == LayerKind::Conv && graph.consumers(&src.name).len() == 1);
        if let Some(src) = conv_src {
            let (scale, shift) = bn_affine(weights, &node.name)?;
            let mut w = weights.require(&src.name, "weight")?.clone();
            let b = weights.require(&src.name, "bias")?;
            let per_oc = w.numel() / scale.len();
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                *v *= scale[i / per_oc];
            }
            let nb: Vec<f64> = b.data().iter().zip(&scale).zip(&shift).map(|((b, s), t)| b * s + t).collect();
            store.insert(&node.name, "weight", w);
            store.insert(&node.name, "bias", Tensor::vector(nb));
            let pos = nodes.iter().position(|n| n.name == src.name).expect("conv precedes its BatchNorm");
            let mut conv = nodes.remove(pos);
            conv.name = node.name.clone();
            nodes.push(conv);
            folded.insert(src.name.clone(), node.name.clone());
            continue;
        }
        nodes.push(node);
    }
    Ok((NetworkGraph { name: graph.name.clone(), input_shape: graph.input_shape, nodes }, store))
}
