//! Plateau-driven learning-rate decay and a small SGD loop.

use std::collections::VecDeque;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{self, ops, Mode, Tensor, WeightInit, WeightStore};
use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, LayerKind, LayerNode, NetworkGraph, TensorShape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub window: usize,
    pub terminate_below: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            base_lr: 0.1,
            decay_factor: 1.0 / 10f64.sqrt(),
            patience: 2000,
            window: 100,
            terminate_below: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerStep {
    pub lr: f64,
    pub smoothed: f64,
    pub decayed: bool,
    pub terminate: bool,
}

/// Decays the learning rate when the smoothed loss stops reaching new minima.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    pub decays: u32,
    pub best: f64,
    pub since_best: usize,
    recent: VecDeque<f64>,
    mean: f64,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig) -> Result<Self> {
        if !(config.decay_factor > 0.0 && config.decay_factor < 1.0) {
            return Err(Error::InvalidSpec(format!("decay factor {} outside (0, 1)", config.decay_factor)));
        }
        if config.patience == 0 || config.window == 0 || config.base_lr.is_nan() || config.base_lr < 0.0 {
            return Err(Error::InvalidSpec("patience and window must be positive, base_lr non-negative".into()));
        }
        Ok(Self { config, decays: 0, best: f64::INFINITY, since_best: 0, recent: VecDeque::new(), mean: 0.0 })
    }

    /// `base_lr * factor^decays`, evaluated directly.
    pub fn lr(&self) -> f64 {
        self.config.base_lr * self.config.decay_factor.powi(self.decays as i32)
    }

    pub fn smoothed(&self) -> f64 {
        self.mean
    }

    /// Feeds one raw loss. The moving average is updated incrementally, so a
    /// constant stream has a smoothed value exactly equal to that constant.
    pub fn step(&mut self, raw_loss: f64) -> Result<SchedulerStep> {
        if !raw_loss.is_finite() {
            return Err(Error::NonFiniteLoss(raw_loss));
        }
        if self.recent.len() == self.config.window {
            let old = self.recent.pop_front().expect("full window");
            self.mean += (raw_loss - old) / self.config.window as f64;
        } else {
            self.mean += (raw_loss - self.mean) / (self.recent.len() + 1) as f64;
        }
        self.recent.push_back(raw_loss);

        let mut decayed = false;
        if self.mean < self.best {
            self.best = self.mean;
            self.since_best = 0;
        } else {
            self.since_best += 1;
            if self.since_best >= self.config.patience {
                self.decays += 1;
                self.since_best = 0;
                decayed = true;
            }
        }
        let lr = self.lr();
        Ok(SchedulerStep { lr, smoothed: self.mean, decayed, terminate: lr < self.config.terminate_below })
    }
}

/// Labeled examples stacked along the batch dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.batch() != labels.len() || labels.is_empty() {
            return Err(Error::ShapeMismatch {
                node: "dataset".into(),
                detail: format!("{} inputs, {} labels", inputs.batch(), labels.len()),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let items: Vec<Tensor> = idx.iter().map(|&i| self.inputs.batch_slice(i, 1)).collect();
        let refs: Vec<&Tensor> = items.iter().collect();
        (Tensor::stack(&refs).expect("equal item shapes"), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scheduler: PlateauConfig,
    pub iterations: usize,
    pub seed: u64,
    /// Node producing `[batch, classes, 1, 1]` logits.
    pub output: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 16,
            momentum: 0.9,
            weight_decay: 5e-4,
            scheduler: PlateauConfig::default(),
            iterations: 200,
            seed: 0,
            output: "logits".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub loss: f64,
    pub smoothed_loss: f64,
    /// Learning rate used for this iteration's update.
    pub lr: f64,
    /// Decays so far, including one triggered by this iteration's loss.
    pub decay_events: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<HistoryRecord>,
    pub terminated: bool,
}

impl History {
    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Mean cross-entropy and gradients of a batch.
pub fn loss_and_grads(
    graph: &NetworkGraph,
    weights: &WeightStore,
    x: &Tensor,
    labels: &[usize],
    output: &str,
) -> Result<(f64, engine::Gradients, engine::Trace)> {
    let trace = engine::forward(graph, weights, x, Mode::Train)?;
    let logits = trace.output(output).ok_or_else(|| Error::UnknownNode(output.to_string()))?;
    let (loss, grad) = ops::softmax_cross_entropy(logits, labels);
    let mut up = IndexMap::new();
    up.insert(output.to_string(), grad);
    let grads = engine::backward(graph, weights, &trace, &up)?;
    Ok((loss, grads, trace))
}

/// Mean loss and accuracy over a whole dataset.
pub fn evaluate(
    graph: &NetworkGraph,
    weights: &WeightStore,
    data: &Dataset,
    output: &str,
    mode: Mode,
) -> Result<(f64, f64)> {
    let trace = engine::forward(graph, weights, &data.inputs, mode)?;
    let logits = trace.output(output).ok_or_else(|| Error::UnknownNode(output.to_string()))?;
    let (loss, _) = ops::softmax_cross_entropy(logits, &data.labels);
    let k = logits.item_len();
    let correct = data
        .labels
        .iter()
        .enumerate()
        .filter(|&(n, &y)| {
            let row = &logits.data()[n * k..(n + 1) * k];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == y
        })
        .count();
    Ok((loss, correct as f64 / data.len() as f64))
}

/// SGD with momentum and weight decay under the plateau scheduler.
///
/// Weight decay applies to parameters named `weight`. Batches are drawn by
/// walking seeded per-epoch permutations.
pub fn train(graph: &NetworkGraph, weights: &mut WeightStore, data: &Dataset, config: &TrainConfig) -> Result<History> {
    if config.batch == 0 || config.batch > data.len() {
        return Err(Error::InvalidSpec(format!("batch {} for {} examples", config.batch, data.len())));
    }
    let mut sched = PlateauScheduler::new(config.scheduler)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut velocity = WeightStore::new();
    let mut history = History::default();

    for iteration in 0..config.iterations {
        let mut idx = Vec::with_capacity(config.batch);
        while idx.len() < config.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let (x, labels) = data.gather(&idx);
        let lr = sched.lr();
        let (loss, grads, trace) = loss_and_grads(graph, weights, &x, &labels, &config.output)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        engine::update_running_stats(weights, &trace, engine::BN_MOMENTUM);
        for (node, param, g) in grads.params.iter() {
            let Some(w) = weights.get_mut(node, param) else { continue };
            let decay = if param == "weight" { config.weight_decay } else { 0.0 };
            if velocity.get(node, param).is_none() {
                velocity.insert(node, param, Tensor::zeros(w.shape()));
            }
            let v = velocity.get_mut(node, param).expect("just inserted");
            for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.data_mut().iter_mut()).zip(g.data()) {
                *vi = config.momentum * *vi - lr * (gi + decay * *wi);
                *wi += *vi;
            }
        }
        let s = sched.step(loss)?;
        history.records.push(HistoryRecord {
            iteration,
            loss,
            smoothed_loss: s.smoothed,
            lr,
            decay_events: sched.decays,
        });
        if s.terminate {
            history.terminated = true;
            break;
        }
    }
    Ok(history)
}

/// Two classes told apart by which half of the image is brighter.
pub fn toy_dataset(n: usize, shape: TensorShape, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let TensorShape { height, width, channels } = shape;
    let noise: Vec<f64> = (0..n * shape.numel()).map(|_| rng.gen_range(-0.25..0.25)).collect();
    let inputs = Tensor::from_fn([n, channels, height, width], |[b, c, y, x]| {
        let bright = (x < width / 2) == (labels[b] == 0);
        let base = if bright { 1.0 } else { -1.0 };
        base + noise[((b * channels + c) * height + y) * width + x]
    });
    Dataset::new(inputs, labels).expect("matching lengths")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyBlock {
    Relu,
    Crelu,
    Mcrelu,
}

impl std::str::FromStr for ToyBlock {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ToyBlock::Relu),
            "crelu" => Ok(ToyBlock::Crelu),
            "mcrelu" => Ok(ToyBlock::Mcrelu),
            _ => Err(Error::InvalidSpec(format!("unknown toy block `{s}` (relu, crelu, mcrelu)"))),
        }
    }
}

/// `conv3x3 -> activation -> maxpool -> fc(classes)` with the output node
/// named `logits`.
pub fn toy_net(block: ToyBlock, input: TensorShape, filters: usize, classes: usize) -> NetworkGraph {
    let mut b = GraphBuilder::new(format!("toy_{block:?}").to_lowercase(), "data", input);
    let c = b.push(LayerNode::conv("conv1", "data", 3, 1, filters));
    let act = match block {
        ToyBlock::Relu => b.push(LayerNode::unary("conv1/relu", LayerKind::ReLU, &c)),
        ToyBlock::Crelu | ToyBlock::Mcrelu => {
            let n = b.push(LayerNode::unary("conv1/neg", LayerKind::Negate, &c));
            let mut cat = b.push(LayerNode::concat("conv1/concat", &[&c, &n]));
            if block == ToyBlock::Mcrelu {
                cat = b.push(LayerNode::unary("conv1/scale", LayerKind::ScaleBias, &cat));
            }
            b.push(LayerNode::unary("conv1/relu", LayerKind::ReLU, &cat))
        }
    };
    let p = b.push(LayerNode::max_pool("pool1", &act, 2, 2));
    b.push(LayerNode::fc("logits", &p, classes));
    b.finish()
}

/// Rewrites every shared-bias C.ReLU unit (`x`, `negate(x)`, concat, no
/// ScaleBias) into its separate-bias form and sets parameters so that
/// outputs match: the producing conv's bias `b` moves to per-half biases
/// `[b, -b]` and scales are 1.
pub fn mcrelu_from_crelu(graph: &NetworkGraph, weights: &WeightStore) -> Result<(NetworkGraph, WeightStore)> {
    let mut nodes = Vec::with_capacity(graph.nodes.len() + 4);
    let mut out_weights = weights.clone();
    let mut renamed: IndexMap<String, String> = IndexMap::new();
    for node in &graph.nodes {
        let mut node = node.clone();
        for i in node.inputs.iter_mut() {
            if let Some(r) = renamed.get(i.as_str()) {
                *i = r.clone();
            }
        }
        let unit = (node.kind == LayerKind::Concat && node.inputs.len() == 2)
            .then(|| graph.node(&node.inputs[1]))
            .flatten()
            .filter(|neg| neg.kind == LayerKind::Negate && neg.inputs[0] == node.inputs[0])
            .is_some();
        let already_scaled =
            graph.consumers(&node.name).iter().any(|c| graph.node(c).map(|n| n.kind) == Some(LayerKind::ScaleBias));
        nodes.push(node.clone());
        if !unit || already_scaled {
            continue;
        }
        let src = &node.inputs[0];
        let bias = match graph.node(src) {
            Some(n) if n.kind == LayerKind::Conv => {
                let b = weights.require(src, "bias")?.clone();
                out_weights.insert(src, "bias", Tensor::vector(vec![0.0; b.numel()]));
                b.into_data()
            }
            _ => return Err(Error::InvalidSpec(format!("C.ReLU unit `{}` is not fed by a conv", node.name))),
        };
        let prefix = node.block().to_string();
        let scale_name = if prefix == node.name { format!("{}/scale", node.name) } else { format!("{prefix}/scale") };
        nodes.push(LayerNode::unary(scale_name.clone(), LayerKind::ScaleBias, &node.name));
        let both: Vec<f64> = bias.iter().copied().chain(bias.iter().map(|b| -b)).collect();
        out_weights.insert(&scale_name, "scale", Tensor::vector(vec![1.0; both.len()]));
        out_weights.insert(&scale_name, "bias", Tensor::vector(both));
        renamed.insert(node.name.clone(), scale_name);
    }
    let g = NetworkGraph { name: format!("{}_mcrelu", graph.name), input_shape: graph.input_shape, nodes };
    Ok((g, out_weights))
}

/// Seeded He initialization for a toy net.
pub fn toy_weights(graph: &NetworkGraph, seed: u64) -> Result<WeightStore> {
    WeightStore::init(graph, graph.input_shape, WeightInit::He { seed })
}
