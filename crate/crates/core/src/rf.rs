//! Receptive fields along every input-to-node path of a graph.
//!
//! Paths are not materialized. Each node carries a map from `(rf, jump)` to
//! the number of paths reaching it in that state, so a graph with millions of
//! paths costs as much as the number of distinct states.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::{self, Mode, Tensor, WeightInit, WeightStore};
use crate::error::{Error, Result};
use crate::graph::{infer_shapes, validate, LayerKind, LayerNode, NetworkGraph, TensorShape};

pub const DEFAULT_PATH_CAP: u128 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RfState {
    pub rf: u64,
    pub jump: u64,
}

impl Default for RfState {
    fn default() -> Self {
        RfState { rf: 1, jump: 1 }
    }
}

impl RfState {
    /// One `k`-tap layer with the given stride.
    pub fn step(self, kernel: u64, stride: u64) -> RfState {
        RfState { rf: self.rf + (kernel - 1) * self.jump, jump: self.jump * stride }
    }
}

/// RF of a plain chain of `(kernel, stride)` layers.
pub fn path_rf(layers: &[(usize, usize)]) -> RfState {
    layers.iter().fold(RfState::default(), |s, &(k, st)| s.step(k.max(1) as u64, st.max(1) as u64))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfDistribution {
    /// `(rf, path_count)` sorted by rf.
    pub entries: Vec<(u64, u128)>,
}

impl RfDistribution {
    pub fn total_paths(&self) -> u128 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn min(&self) -> Option<u64> {
        self.entries.first().map(|e| e.0)
    }

    pub fn max(&self) -> Option<u64> {
        self.entries.last().map(|e| e.0)
    }

    /// Path-weighted mean RF.
    pub fn mean(&self) -> f64 {
        let total = self.total_paths() as f64;
        self.entries.iter().map(|&(rf, n)| rf as f64 * n as f64).sum::<f64>() / total
    }

    /// One bar per rf value, scaled so the largest count spans `width`.
    pub fn histogram(&self, width: usize) -> String {
        let peak = self.entries.iter().map(|e| e.1).max().unwrap_or(1);
        let mut s = String::new();
        for &(rf, n) in &self.entries {
            let bar = ((n as f64 / peak as f64) * width as f64).round().max(1.0) as usize;
            let _ = writeln!(s, "{rf:>5} | {:<width$} {n}", "#".repeat(bar));
        }
        s
    }
}

type States = BTreeMap<RfState, u128>;

fn merge_into(dst: &mut States, src: &States) -> Result<()> {
    for (&k, &n) in src {
        let e = dst.entry(k).or_insert(0);
        *e = e.checked_add(n).ok_or(Error::PathExplosion { count: u128::MAX, cap: u128::MAX })?;
    }
    Ok(())
}

fn spatial_step(node: &LayerNode, s: RfState) -> Result<RfState> {
    let (kh, kw) = node.kernel;
    let k = kh.max(kw) as u64;
    let stride = node.stride.max(1) as u64;
    match node.kind {
        LayerKind::Deconv => {
            if !s.jump.is_multiple_of(stride) {
                return Err(Error::InvalidSpec(format!(
                    "`{}`: jump {} not divisible by upsampling stride {stride}",
                    node.name, s.jump
                )));
            }
            let taps = k.div_ceil(stride);
            Ok(RfState { rf: s.rf + (taps - 1) * s.jump, jump: s.jump / stride })
        }
        _ => Ok(s.step(k, stride)),
    }
}

/// Distribution of path receptive fields from the input to `node`.
///
/// `cap` bounds the total number of paths; exceeding it is a
/// `PathExplosion`.
pub fn rf_distribution(graph: &NetworkGraph, node: &str, cap: u128) -> Result<RfDistribution> {
    if let Some(d) = validate(graph).into_iter().next() {
        return Err(Error::InvalidGraph(d.to_string()));
    }
    let target = graph.index_of(node).ok_or_else(|| Error::UnknownNode(node.to_string()))?;
    let mut states: Vec<Option<States>> = vec![None; graph.nodes.len()];
    for (i, n) in graph.nodes.iter().enumerate().take(target + 1) {
        let mut cur = States::new();
        match n.kind {
            LayerKind::Input => {
                cur.insert(RfState::default(), 1);
            }
            LayerKind::FullyConnected | LayerKind::RoiPool => {
                if i == target || needed_by(graph, i, target) {
                    return Err(Error::UnsupportedKind {
                        node: n.name.clone(),
                        kind: n.kind,
                        detail: "receptive field is not local".into(),
                    });
                }
            }
            _ => {
                for inp in &n.inputs {
                    let j = graph.index_of(inp).expect("validated");
                    let src = states[j].as_ref().expect("topological order");
                    if n.kind.is_spatial() {
                        let mut stepped = States::new();
                        for (&s, &c) in src {
                            *stepped.entry(spatial_step(n, s)?).or_insert(0) += c;
                        }
                        merge_into(&mut cur, &stepped)?;
                    } else {
                        merge_into(&mut cur, src)?;
                    }
                }
            }
        }
        let total: u128 = cur.values().sum();
        if total > cap {
            return Err(Error::PathExplosion { count: total, cap });
        }
        states[i] = Some(cur);
    }
    let mut by_rf: BTreeMap<u64, u128> = BTreeMap::new();
    for (s, c) in states[target].take().unwrap_or_default() {
        *by_rf.entry(s.rf).or_insert(0) += c;
    }
    Ok(RfDistribution { entries: by_rf.into_iter().collect() })
}

/// Whether node `i` lies on some path into `target`.
fn needed_by(graph: &NetworkGraph, i: usize, target: usize) -> bool {
    let mut live = vec![false; graph.nodes.len()];
    live[target] = true;
    for t in (i..=target).rev() {
        if live[t] {
            for inp in &graph.nodes[t].inputs {
                if let Some(j) = graph.index_of(inp) {
                    live[j] = true;
                }
            }
        }
    }
    live[i]
}

/// Number of input columns that influence `node` at `position = (y, x)`.
///
/// The graph runs in inference mode with all-positive weights and every
/// `Negate` replaced by a pass-through, so any column whose stripe image
/// reaches the position leaves a strictly positive trace there.
pub fn empirical_rf(
    graph: &NetworkGraph,
    node: &str,
    input_shape: TensorShape,
    position: (usize, usize),
) -> Result<usize> {
    let mut g = graph.clone();
    for n in &mut g.nodes {
        if n.kind == LayerKind::Negate {
            n.kind = LayerKind::ReLU;
        }
    }
    let shapes = infer_shapes(&g, input_shape)?;
    let out = *shapes.get(node).ok_or_else(|| Error::UnknownNode(node.to_string()))?;
    if position.0 >= out.height || position.1 >= out.width {
        return Err(Error::InvalidSpec(format!("position {position:?} outside {out}")));
    }
    let weights = WeightStore::init(&g, input_shape, WeightInit::Positive)?;
    let TensorShape { height, width, channels } = input_shape;
    let x = Tensor::from_fn([width, channels, height, width], |[n, _, _, w]| if n == w { 1.0 } else { 0.0 });
    let trace = engine::forward(&g, &weights, &x, Mode::Inference)?;
    let y = &trace.outputs[node];
    let count = (0..width).filter(|&n| (0..y.channels()).any(|c| y.at(n, c, position.0, position.1) > 0.0)).count();
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    #[test]
    fn chains() {
        assert_eq!(path_rf(&[(3, 1)]).rf, 3);
        assert_eq!(path_rf(&[(3, 1), (3, 1)]).rf, 5);
        assert_eq!(path_rf(&[(1, 1); 9]), RfState::default());
        assert_eq!(path_rf(&[(7, 2), (3, 2), (3, 1)]), RfState { rf: 7 + 2 * 2 + 2 * 4, jump: 4 });
    }

    #[test]
    fn single_conv_matches_path_rf() {
        let mut b = GraphBuilder::new("c", "data", TensorShape::new(16, 16, 1));
        b.push(LayerNode::conv("c", "data", 5, 2, 2));
        let d = rf_distribution(&b.finish(), "c", DEFAULT_PATH_CAP).unwrap();
        assert_eq!(d.entries, vec![(5, 1)]);
    }

    #[test]
    fn cap_is_enforced() {
        let mut b = GraphBuilder::new("c", "data", TensorShape::new(8, 8, 1));
        let mut prev = "data".to_string();
        for i in 0..12 {
            let a = b.push(LayerNode::conv(format!("a{i}"), &prev, 1, 1, 1));
            let c = b.push(LayerNode::conv(format!("b{i}"), &prev, 3, 1, 1));
            prev = b.push(LayerNode::add(format!("s{i}"), &[&a, &c]));
        }
        let g = b.finish();
        assert_eq!(rf_distribution(&g, &prev, 4096).unwrap().total_paths(), 4096);
        assert!(matches!(rf_distribution(&g, &prev, 4095), Err(Error::PathExplosion { count: 4096, .. })));
    }

    #[test]
    fn empirical_two_convs() {
        let mut b = GraphBuilder::new("c", "data", TensorShape::new(9, 9, 1));
        b.push(LayerNode::conv("c1", "data", 3, 1, 1));
        b.push(LayerNode::conv("c2", "c1", 3, 1, 1));
        let g = b.finish();
        assert_eq!(empirical_rf(&g, "c1", g.input_shape, (4, 4)).unwrap(), 3);
        assert_eq!(empirical_rf(&g, "c2", g.input_shape, (4, 4)).unwrap(), 5);
        assert_eq!(empirical_rf(&g, "c2", g.input_shape, (0, 0)).unwrap(), 3);
    }
}
