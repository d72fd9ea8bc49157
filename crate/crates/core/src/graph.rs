//! Layer-graph intermediate representation.
//!
//! A [`NetworkGraph`] is a topologically ordered list of [`LayerNode`]s with a
//! nominal input shape. Every analytical module (cost, receptive field) and
//! the CPU engine consume this representation. Graphs serialize to a JSON
//! description that round-trips losslessly.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial extent and channel count of one feature map (batch excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "c")]
    pub channels: usize,
}

impl TensorShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn is_valid(&self) -> bool {
        self.height >= 1 && self.width >= 1 && self.channels >= 1
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl FromStr for TensorShape {
    type Err = Error;

    /// Parses `HxWxC`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(['x', 'X']).collect();
        if parts.len() != 3 {
            return Err(Error::InvalidGraph(format!("expected HxWxC, got `{s}`")));
        }
        let mut dims = [0usize; 3];
        for (d, p) in dims.iter_mut().zip(&parts) {
            *d = p.parse().map_err(|_| Error::InvalidGraph(format!("bad dimension `{p}` in `{s}`")))?;
        }
        let shape = TensorShape::new(dims[0], dims[1], dims[2]);
        if !shape.is_valid() {
            return Err(Error::InvalidGraph(format!("dimensions must be >= 1 in `{s}`")));
        }
        Ok(shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    Conv,
    Deconv,
    MaxPool,
    Concat,
    Negate,
    ScaleBias,
    ReLU,
    BatchNorm,
    FullyConnected,
    RoiPool,
    EltwiseAdd,
    /// Channel view `[start, end)` of its input. Free in every cost measure.
    Slice,
}

impl LayerKind {
    /// Kinds that carry an explicit `out_channels` attribute.
    pub fn has_out_channels(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Deconv | LayerKind::FullyConnected)
    }

    /// Kinds with a spatial window (kernel, stride, pad).
    pub fn is_spatial(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Deconv | LayerKind::MaxPool)
    }
}

fn one() -> usize {
    1
}

fn unit_kernel() -> (usize, usize) {
    (1, 1)
}

/// One layer of the graph.
///
/// For `RoiPool`, `kernel` is the pooled output grid and `stride` the feature
/// stride of the map it samples (ROI coordinates are divided by it).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default = "unit_kernel")]
    pub kernel: (usize, usize),
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
    #[serde(default)]
    pub out_channels: Option<usize>,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<(usize, usize)>,
}

impl LayerNode {
    fn base(name: impl Into<String>, kind: LayerKind, inputs: Vec<String>) -> Self {
        Self {
            name: name.into(),
            kind,
            kernel: (1, 1),
            stride: 1,
            pad: 0,
            out_channels: None,
            groups: 1,
            inputs,
            slice: None,
        }
    }

    pub fn input(name: impl Into<String>) -> Self {
        Self::base(name, LayerKind::Input, Vec::new())
    }

    /// Square convolution with "same"-style padding `k / 2`.
    pub fn conv(name: impl Into<String>, input: &str, k: usize, stride: usize, out: usize) -> Self {
        Self {
            kernel: (k, k),
            stride,
            pad: k / 2,
            out_channels: Some(out),
            ..Self::base(name, LayerKind::Conv, vec![input.to_string()])
        }
    }

    pub fn deconv(
        name: impl Into<String>,
        input: &str,
        k: usize,
        stride: usize,
        pad: usize,
        out: usize,
        groups: usize,
    ) -> Self {
        Self {
            kernel: (k, k),
            stride,
            pad,
            out_channels: Some(out),
            groups,
            ..Self::base(name, LayerKind::Deconv, vec![input.to_string()])
        }
    }

    pub fn max_pool(name: impl Into<String>, input: &str, k: usize, stride: usize) -> Self {
        Self { kernel: (k, k), stride, pad: k / 2, ..Self::base(name, LayerKind::MaxPool, vec![input.to_string()]) }
    }

    pub fn fc(name: impl Into<String>, input: &str, out: usize) -> Self {
        Self { out_channels: Some(out), ..Self::base(name, LayerKind::FullyConnected, vec![input.to_string()]) }
    }

    pub fn roi_pool(name: impl Into<String>, input: &str, grid: (usize, usize), feat_stride: usize) -> Self {
        Self { kernel: grid, stride: feat_stride, ..Self::base(name, LayerKind::RoiPool, vec![input.to_string()]) }
    }

    pub fn slice(name: impl Into<String>, input: &str, start: usize, end: usize) -> Self {
        Self { slice: Some((start, end)), ..Self::base(name, LayerKind::Slice, vec![input.to_string()]) }
    }

    pub fn concat(name: impl Into<String>, inputs: &[&str]) -> Self {
        Self::base(name, LayerKind::Concat, inputs.iter().map(|s| s.to_string()).collect())
    }

    pub fn add(name: impl Into<String>, inputs: &[&str]) -> Self {
        Self::base(name, LayerKind::EltwiseAdd, inputs.iter().map(|s| s.to_string()).collect())
    }

    /// Single-input shape-preserving layers (ReLU, Negate, BatchNorm, ScaleBias).
    pub fn unary(name: impl Into<String>, kind: LayerKind, input: &str) -> Self {
        Self::base(name, kind, vec![input.to_string()])
    }

    /// Cost-table row this node is accounted under: the name prefix before `/`.
    pub fn block(&self) -> &str {
        self.name.split('/').next().unwrap_or(&self.name)
    }
}

/// Immutable layer DAG plus the nominal input shape it was designed for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub name: String,
    #[serde(rename = "input")]
    pub input_shape: TensorShape,
    pub nodes: Vec<LayerNode>,
}

impl NetworkGraph {
    /// Name of the unique `Input` node, if there is exactly one.
    pub fn input(&self) -> Option<&str> {
        let mut it = self.nodes.iter().filter(|n| n.kind == LayerKind::Input);
        match (it.next(), it.next()) {
            (Some(n), None) => Some(&n.name),
            _ => None,
        }
    }

    pub fn node(&self, name: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Last node in topological order.
    pub fn output(&self) -> Option<&str> {
        self.nodes.last().map(|n| n.name.as_str())
    }

    /// Names of nodes that consume `name`.
    pub fn consumers(&self, name: &str) -> Vec<&str> {
        self.nodes.iter().filter(|n| n.inputs.iter().any(|i| i == name)).map(|n| n.name.as_str()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Incrementally assembles a graph; each method returns the new node's name.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    name: String,
    input_shape: TensorShape,
    nodes: Vec<LayerNode>,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, input_name: &str, input_shape: TensorShape) -> Self {
        Self { name: name.into(), input_shape, nodes: vec![LayerNode::input(input_name)] }
    }

    pub fn push(&mut self, node: LayerNode) -> String {
        let name = node.name.clone();
        self.nodes.push(node);
        name
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn finish(self) -> NetworkGraph {
        NetworkGraph { name: self.name, input_shape: self.input_shape, nodes: self.nodes }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiagnosticKind {
    NoInputNode,
    MultipleInputNodes,
    DuplicateName,
    UnresolvedInput,
    ForwardReference,
    CycleDetected,
    ArityMismatch,
    InvalidAttribute,
    GroupMismatch,
    ChannelOrSpatialMismatch,
    NegativeDimension,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub node: String,
    pub index: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {:?} at `{}`: {}", self.index, self.kind, self.node, self.message)
    }
}

fn diag(kind: DiagnosticKind, index: usize, node: &LayerNode, message: impl Into<String>) -> Diagnostic {
    Diagnostic { kind, node: node.name.clone(), index, message: message.into() }
}

/// Strongly connected components of the name-reference graph that contain a
/// cycle, each reported as the sorted list of member indices.
fn cyclic_components(graph: &NetworkGraph) -> Vec<Vec<usize>> {
    let mut index_by_name: HashMap<&str, usize> = HashMap::new();
    for (i, n) in graph.nodes.iter().enumerate() {
        index_by_name.entry(n.name.as_str()).or_insert(i);
    }
    let adj: Vec<Vec<usize>> = graph
        .nodes
        .iter()
        .map(|n| n.inputs.iter().filter_map(|i| index_by_name.get(i.as_str()).copied()).collect())
        .collect();

    // Iterative Tarjan.
    let n = adj.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut next = 0usize;
    let mut out = Vec::new();
    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        let mut work: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut child)) = work.last_mut() {
            if *child < adj[v].len() {
                let w = adj[v][*child];
                *child += 1;
                if index[w] == usize::MAX {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    work.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                work.pop();
                if let Some(&(parent, _)) = work.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack");
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    let self_loop = comp.len() == 1 && adj[v].contains(&v);
                    if comp.len() > 1 || self_loop {
                        comp.sort_unstable();
                        out.push(comp);
                    }
                }
            }
        }
    }
    out
}

fn structural_diagnostics(graph: &NetworkGraph) -> Vec<Diagnostic> {
    use DiagnosticKind::*;
    let mut out = Vec::new();

    let inputs: Vec<usize> =
        graph.nodes.iter().enumerate().filter(|(_, n)| n.kind == LayerKind::Input).map(|(i, _)| i).collect();
    match inputs.len() {
        0 => out.push(Diagnostic {
            kind: NoInputNode,
            node: String::new(),
            index: 0,
            message: "graph has no Input node".into(),
        }),
        1 => {}
        _ => {
            for &i in &inputs[1..] {
                out.push(diag(MultipleInputNodes, i, &graph.nodes[i], "second Input node"));
            }
        }
    }

    let cycles = cyclic_components(graph);
    let mut in_cycle = HashSet::new();
    for comp in &cycles {
        in_cycle.extend(comp.iter().copied());
        let first = comp[0];
        let names: Vec<&str> = comp.iter().map(|&i| graph.nodes[i].name.as_str()).collect();
        out.push(diag(CycleDetected, first, &graph.nodes[first], format!("cycle through {names:?}")));
    }

    let mut seen: HashMap<&str, usize> = HashMap::new();
    let all: HashSet<&str> = graph.nodes.iter().map(|n| n.name.as_str()).collect();
    for (i, node) in graph.nodes.iter().enumerate() {
        if seen.contains_key(node.name.as_str()) {
            out.push(diag(DuplicateName, i, node, "name already used"));
        }
        for inp in &node.inputs {
            if seen.contains_key(inp.as_str()) {
                continue;
            }
            if !all.contains(inp.as_str()) {
                out.push(diag(UnresolvedInput, i, node, format!("input `{inp}` does not exist")));
            } else if !in_cycle.contains(&i) {
                out.push(diag(ForwardReference, i, node, format!("input `{inp}` is defined later")));
            }
        }
        seen.entry(node.name.as_str()).or_insert(i);

        let n_in = node.inputs.len();
        let arity_ok = match node.kind {
            LayerKind::Input => n_in == 0,
            LayerKind::Concat => n_in >= 1,
            LayerKind::EltwiseAdd => n_in >= 2,
            _ => n_in == 1,
        };
        if !arity_ok {
            out.push(diag(ArityMismatch, i, node, format!("{:?} with {n_in} inputs", node.kind)));
        }

        let spatial = node.kind.is_spatial() || node.kind == LayerKind::RoiPool;
        if spatial && (node.kernel.0 == 0 || node.kernel.1 == 0 || node.stride == 0) {
            out.push(diag(InvalidAttribute, i, node, "kernel and stride must be >= 1"));
        }
        if node.groups == 0 {
            out.push(diag(InvalidAttribute, i, node, "groups must be >= 1"));
        }
        match (node.kind.has_out_channels(), node.out_channels) {
            (true, None) | (true, Some(0)) => {
                out.push(diag(InvalidAttribute, i, node, "out_channels must be set and >= 1"))
            }
            (false, Some(_)) => {
                out.push(diag(InvalidAttribute, i, node, "out_channels only valid on Conv/Deconv/FullyConnected"))
            }
            _ => {}
        }
        if node.kind == LayerKind::Slice {
            match node.slice {
                Some((s, e)) if s < e => {}
                _ => out.push(diag(InvalidAttribute, i, node, "slice needs a non-empty [start, end)")),
            }
        }
    }
    out
}

/// Shape of one node given its input shapes. Pure; no graph context.
pub fn node_output_shape(node: &LayerNode, ins: &[TensorShape]) -> Result<TensorShape> {
    let mismatch = |detail: String| Error::ChannelMismatch { node: node.name.clone(), detail };
    let first = || ins.first().copied().ok_or_else(|| Error::InvalidGraph(format!("`{}` has no inputs", node.name)));
    let window = |len: usize, k: usize| -> Result<usize> {
        let padded = len + 2 * node.pad;
        if padded < k {
            return Err(Error::NegativeDimension { node: node.name.clone(), kernel: k, padded });
        }
        Ok((padded - k) / node.stride + 1)
    };
    match node.kind {
        LayerKind::Input => Err(Error::InvalidGraph(format!("`{}` is an Input node", node.name))),
        LayerKind::Conv => {
            let s = first()?;
            let out = node.out_channels.unwrap_or(0);
            if s.channels % node.groups != 0 || !out.is_multiple_of(node.groups) {
                return Err(mismatch(format!(
                    "groups {} must divide input channels {} and output channels {}",
                    node.groups, s.channels, out
                )));
            }
            Ok(TensorShape::new(window(s.height, node.kernel.0)?, window(s.width, node.kernel.1)?, out))
        }
        LayerKind::Deconv => {
            let s = first()?;
            let out = node.out_channels.unwrap_or(0);
            if s.channels % node.groups != 0 || !out.is_multiple_of(node.groups) {
                return Err(mismatch(format!(
                    "groups {} must divide input channels {} and output channels {}",
                    node.groups, s.channels, out
                )));
            }
            let up = |len: usize, k: usize| -> Result<usize> {
                let full = (len - 1) * node.stride + k;
                if full <= 2 * node.pad {
                    return Err(Error::NegativeDimension {
                        node: node.name.clone(),
                        kernel: 2 * node.pad,
                        padded: full,
                    });
                }
                Ok(full - 2 * node.pad)
            };
            Ok(TensorShape::new(up(s.height, node.kernel.0)?, up(s.width, node.kernel.1)?, out))
        }
        LayerKind::MaxPool => {
            let s = first()?;
            Ok(TensorShape::new(window(s.height, node.kernel.0)?, window(s.width, node.kernel.1)?, s.channels))
        }
        LayerKind::Concat => {
            let s = first()?;
            if let Some(bad) = ins.iter().find(|t| t.height != s.height || t.width != s.width) {
                return Err(mismatch(format!("concat inputs {s} and {bad} differ spatially")));
            }
            Ok(TensorShape::new(s.height, s.width, ins.iter().map(|t| t.channels).sum()))
        }
        LayerKind::EltwiseAdd => {
            let s = first()?;
            if let Some(bad) = ins.iter().find(|t| **t != s) {
                return Err(mismatch(format!("add inputs {s} and {bad} differ")));
            }
            Ok(s)
        }
        LayerKind::Negate | LayerKind::ScaleBias | LayerKind::ReLU | LayerKind::BatchNorm => first(),
        LayerKind::FullyConnected => Ok(TensorShape::new(1, 1, node.out_channels.unwrap_or(0))),
        LayerKind::RoiPool => {
            let s = first()?;
            Ok(TensorShape::new(node.kernel.0, node.kernel.1, s.channels))
        }
        LayerKind::Slice => {
            let s = first()?;
            let (a, b) = node.slice.unwrap_or((0, 0));
            if b > s.channels || a >= b {
                return Err(mismatch(format!("slice [{a}, {b}) outside {} channels", s.channels)));
            }
            Ok(TensorShape::new(s.height, s.width, b - a))
        }
    }
}

/// Shape inference over the whole graph.
pub fn infer_shapes(graph: &NetworkGraph, input_shape: TensorShape) -> Result<IndexMap<String, TensorShape>> {
    let structural = structural_diagnostics(graph);
    if let Some(d) = structural.first() {
        return Err(Error::InvalidGraph(d.to_string()));
    }
    if !input_shape.is_valid() {
        return Err(Error::InvalidGraph(format!("input shape {input_shape} has a zero dimension")));
    }
    let mut shapes: IndexMap<String, TensorShape> = IndexMap::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let shape = if node.kind == LayerKind::Input {
            input_shape
        } else {
            let ins: Vec<TensorShape> = node.inputs.iter().map(|i| shapes[i.as_str()]).collect();
            node_output_shape(node, &ins)?
        };
        shapes.insert(node.name.clone(), shape);
    }
    Ok(shapes)
}

/// Every violated structural or shape invariant, ordered by node index.
/// Shape-level checks run only when the graph is structurally sound, and use
/// the graph's nominal input shape.
pub fn validate(graph: &NetworkGraph) -> Vec<Diagnostic> {
    let mut out = structural_diagnostics(graph);
    if out.is_empty() {
        let mut shapes: HashMap<&str, Option<TensorShape>> = HashMap::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            let shape = if node.kind == LayerKind::Input {
                Some(graph.input_shape)
            } else {
                let ins: Option<Vec<TensorShape>> = node.inputs.iter().map(|n| shapes[n.as_str()]).collect();
                // Downstream of an earlier failure: stay silent.
                ins.and_then(|ins| match node_output_shape(node, &ins) {
                    Ok(s) => Some(s),
                    Err(e) => {
                        let kind = match (&e, node.kind) {
                            (Error::NegativeDimension { .. }, _) => DiagnosticKind::NegativeDimension,
                            (_, LayerKind::Conv) | (_, LayerKind::Deconv) => DiagnosticKind::GroupMismatch,
                            _ => DiagnosticKind::ChannelOrSpatialMismatch,
                        };
                        out.push(diag(kind, i, node, e.to_string()));
                        None
                    }
                })
            };
            shapes.insert(node.name.as_str(), shape);
        }
    }
    out.sort_by_key(|d| d.index);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkGraph {
        let mut b = GraphBuilder::new("tiny", "data", TensorShape::new(8, 8, 3));
        b.push(LayerNode::conv("c1", "data", 1, 1, 16));
        b.finish()
    }

    #[test]
    fn one_by_one_conv_keeps_spatial_dims() {
        let shapes = infer_shapes(&tiny(), TensorShape::new(13, 7, 3)).unwrap();
        assert_eq!(shapes["c1"], TensorShape::new(13, 7, 16));
    }

    #[test]
    fn deconv_output_size() {
        let mut b = GraphBuilder::new("d", "data", TensorShape::new(33, 20, 384));
        b.push(LayerNode::deconv("up", "data", 4, 2, 1, 384, 384));
        let shapes = infer_shapes(&b.finish(), TensorShape::new(33, 20, 384)).unwrap();
        assert_eq!(shapes["up"], TensorShape::new(66, 40, 384));
    }

    #[test]
    fn kernel_larger_than_input_is_negative_dimension() {
        let mut b = GraphBuilder::new("n", "data", TensorShape::new(2, 2, 1));
        let mut c = LayerNode::conv("c", "data", 5, 1, 1);
        c.pad = 0;
        b.push(c);
        let err = infer_shapes(&b.finish(), TensorShape::new(2, 2, 1)).unwrap_err();
        assert!(matches!(err, Error::NegativeDimension { .. }));
    }

    #[test]
    fn concat_spatial_mismatch_is_one_diagnostic() {
        let mut b = GraphBuilder::new("bad", "data", TensorShape::new(264, 160, 32));
        b.push(LayerNode::max_pool("p", "data", 3, 2));
        b.push(LayerNode::concat("cat", &["data", "p"]));
        let g = b.finish();
        let d = validate(&g);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].kind, DiagnosticKind::ChannelOrSpatialMismatch);
        assert_eq!(d[0].node, "cat");
        let err = infer_shapes(&g, g.input_shape).unwrap_err();
        assert!(matches!(err, Error::ChannelMismatch { .. }));
    }

    #[test]
    fn two_node_cycle_is_one_diagnostic() {
        let g = NetworkGraph {
            name: "cyc".into(),
            input_shape: TensorShape::new(4, 4, 1),
            nodes: vec![
                LayerNode::input("data"),
                LayerNode::unary("a", LayerKind::ReLU, "b"),
                LayerNode::unary("b", LayerKind::ReLU, "a"),
            ],
        };
        let d = validate(&g);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].kind, DiagnosticKind::CycleDetected);
        assert_eq!(d[0].node, "a");
    }

    #[test]
    fn group_violation_detected() {
        let mut b = GraphBuilder::new("g", "data", TensorShape::new(4, 4, 6));
        let mut c = LayerNode::conv("c", "data", 3, 1, 8);
        c.groups = 4;
        b.push(c);
        let d = validate(&b.finish());
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::GroupMismatch);
    }

    #[test]
    fn structural_problems_are_ordered_by_index() {
        let g = NetworkGraph {
            name: "s".into(),
            input_shape: TensorShape::new(4, 4, 1),
            nodes: vec![
                LayerNode::input("data"),
                LayerNode::unary("x", LayerKind::ReLU, "missing"),
                LayerNode::unary("x", LayerKind::ReLU, "data"),
                LayerNode::fc("f", "data", 0),
            ],
        };
        let d = validate(&g);
        let kinds: Vec<_> = d.iter().map(|d| (d.index, d.kind)).collect();
        assert_eq!(
            kinds,
            vec![
                (1, DiagnosticKind::UnresolvedInput),
                (2, DiagnosticKind::DuplicateName),
                (3, DiagnosticKind::InvalidAttribute),
            ]
        );
    }

    #[test]
    fn shape_parse_and_display() {
        let s: TensorShape = "1056x640x3".parse().unwrap();
        assert_eq!(s, TensorShape::new(1056, 640, 3));
        assert_eq!(s.to_string(), "1056x640x3");
        assert!("10x0x3".parse::<TensorShape>().is_err());
        assert!("10x3".parse::<TensorShape>().is_err());
    }

    #[test]
    fn json_uses_hwc_field_names() {
        let json = tiny().to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["input"]["h"], 8);
        assert_eq!(v["nodes"][1]["kernel"], serde_json::json!([1, 1]));
        assert_eq!(NetworkGraph::from_json(&json).unwrap(), tiny());
    }
}
