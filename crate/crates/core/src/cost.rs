//! Parameter and multiply-accumulate accounting.
//!
//! `params` counts weights only; biases, scales and BatchNorm statistics are
//! tracked separately as `aux_params` and never enter table figures.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{infer_shapes, LayerKind, LayerNode, NetworkGraph, TensorShape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCost {
    pub params: u64,
    pub macs: u64,
    #[serde(default)]
    pub aux_params: u64,
}

impl std::ops::AddAssign for NodeCost {
    fn add_assign(&mut self, o: Self) {
        self.params += o.params;
        self.macs += o.macs;
        self.aux_params += o.aux_params;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    Exact,
    #[default]
    Table,
}

impl std::str::FromStr for Rounding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Rounding::Exact),
            "table" => Ok(Rounding::Table),
            _ => Err(Error::InvalidSpec(format!("rounding must be `table` or `exact`, got `{s}`"))),
        }
    }
}

/// Cost of a single node.
pub fn layer_cost(node: &LayerNode, ins: &[TensorShape], out: TensorShape) -> Result<NodeCost> {
    let input = || {
        ins.first()
            .copied()
            .ok_or_else(|| Error::ShapeMismatch { node: node.name.clone(), detail: "missing input shape".into() })
    };
    let (kh, kw) = (node.kernel.0 as u64, node.kernel.1 as u64);
    let cost = match node.kind {
        LayerKind::Conv | LayerKind::Deconv => {
            let c_in = input()?.channels as u64;
            let groups = node.groups as u64;
            let c_out = out.channels as u64;
            let params = kh * kw * (c_in / groups) * c_out;
            NodeCost { params, macs: params * out.spatial() as u64, aux_params: c_out }
        }
        LayerKind::FullyConnected => {
            let params = input()?.numel() as u64 * out.channels as u64;
            NodeCost { params, macs: params, aux_params: out.channels as u64 }
        }
        LayerKind::ScaleBias | LayerKind::BatchNorm => {
            NodeCost { aux_params: 2 * out.channels as u64, ..NodeCost::default() }
        }
        LayerKind::Input
        | LayerKind::MaxPool
        | LayerKind::Concat
        | LayerKind::Negate
        | LayerKind::ReLU
        | LayerKind::RoiPool
        | LayerKind::EltwiseAdd
        | LayerKind::Slice => NodeCost::default(),
    };
    Ok(cost)
}

/// One row of the structure table: every node sharing a `block/` prefix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub output: TensorShape,
    pub params: u64,
    pub macs: u64,
}

impl CostRow {
    pub fn params_text(&self) -> String {
        params_text(self.params)
    }

    pub fn mac_text(&self) -> String {
        mac_text(self.macs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_node: IndexMap<String, NodeCost>,
    pub totals: NodeCost,
    pub shapes: IndexMap<String, TensorShape>,
    pub rows: Vec<CostRow>,
    pub rounding: Rounding,
}

/// Tenths of a thousand: below 10K round up to 0.1K, otherwise nearest 1K.
fn params_tenths_k(p: u64) -> u64 {
    if p < 10_000 {
        p.div_ceil(100)
    } else {
        (p + 500) / 1000 * 10
    }
}

/// Table rendering of a parameter count (`2.4K`, `11K`); empty for zero.
pub fn params_text(p: u64) -> String {
    if p == 0 {
        return String::new();
    }
    let t = params_tenths_k(p);
    if p < 10_000 {
        format!("{}.{}K", t / 10, t % 10)
    } else {
        format!("{}K", t / 10)
    }
}

/// Table rendering of a MAC count, nearest million; empty for zero.
pub fn mac_text(m: u64) -> String {
    if m == 0 {
        String::new()
    } else {
        format!("{}M", mac_millions(m))
    }
}

fn mac_millions(m: u64) -> u64 {
    (m + 500_000) / 1_000_000
}

impl CostReport {
    /// Totals as the table prints them: the sum of the rounded row cells.
    pub fn table_totals(&self) -> (String, String) {
        let tenths: u64 = self.rows.iter().filter(|r| r.params > 0).map(|r| params_tenths_k(r.params)).sum();
        let macs: u64 = self.rows.iter().map(|r| mac_millions(r.macs)).sum();
        (format!("{}K", (tenths + 5) / 10), format!("{macs}M"))
    }

    pub fn output_shape(&self) -> Option<TensorShape> {
        self.shapes.values().last().copied()
    }

    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Aligned text table: name, output size, params, MAC.
    pub fn render_table(&self) -> String {
        let mut lines: Vec<[String; 4]> = Vec::with_capacity(self.rows.len() + 2);
        lines.push(["Name".into(), "Output".into(), "# params".into(), "MAC".into()]);
        let cell = |text: String, raw: u64| match self.rounding {
            Rounding::Table => text,
            Rounding::Exact if raw == 0 => String::new(),
            Rounding::Exact => format!("{raw} ({text})"),
        };
        for r in &self.rows {
            lines.push([
                r.name.clone(),
                r.output.to_string(),
                cell(r.params_text(), r.params),
                cell(r.mac_text(), r.macs),
            ]);
        }
        let (tp, tm) = self.table_totals();
        lines.push(["Total".into(), String::new(), cell(tp, self.totals.params), cell(tm, self.totals.macs)]);

        let mut widths = [0usize; 4];
        for l in &lines {
            for (w, c) in widths.iter_mut().zip(l) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}",
                l[0],
                l[1],
                l[2],
                l[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
            if i == 0 || i == lines.len() - 2 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 6));
            }
        }
        out
    }
}

/// Aggregates [`layer_cost`] over the shape-inferred graph.
pub fn graph_cost(graph: &NetworkGraph, input_shape: TensorShape, rounding: Rounding) -> Result<CostReport> {
    let shapes = infer_shapes(graph, input_shape)?;
    let mut per_node = IndexMap::with_capacity(graph.nodes.len());
    let mut totals = NodeCost::default();
    let mut rows: Vec<CostRow> = Vec::new();
    for node in &graph.nodes {
        let ins: Vec<TensorShape> = node.inputs.iter().map(|i| shapes[i.as_str()]).collect();
        let out = shapes[node.name.as_str()];
        let c = layer_cost(node, &ins, out)?;
        totals += c;
        per_node.insert(node.name.clone(), c);
        if node.kind == LayerKind::Input {
            continue;
        }
        match rows.iter_mut().find(|r| r.name == node.block()) {
            Some(r) => {
                r.params += c.params;
                r.macs += c.macs;
                r.output = out;
            }
            None => rows.push(CostRow { name: node.block().to_string(), output: out, params: c.params, macs: c.macs }),
        }
    }
    Ok(CostReport { per_node, totals, shapes, rows, rounding })
}

/// Shared CNN / RPN / classifier split of a detector, in GMAC.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmacBreakdown {
    pub shared_cnn: f64,
    pub rpn: f64,
    pub classifier: f64,
    pub total: f64,
    pub n_proposals: usize,
}

fn one_decimal(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

impl GmacBreakdown {
    /// Components rounded to one decimal, total as the sum of the rounded
    /// components (the table convention).
    pub fn rounded(&self) -> GmacBreakdown {
        let (s, r, c) = (one_decimal(self.shared_cnn), one_decimal(self.rpn), one_decimal(self.classifier));
        GmacBreakdown {
            shared_cnn: s,
            rpn: r,
            classifier: c,
            total: one_decimal(s + r + c),
            n_proposals: self.n_proposals,
        }
    }
}

/// Whole-detector cost. The RPN runs once on the feature map; the classifier
/// runs once per proposal.
pub fn detection_cost(
    feature_cost: &CostReport,
    rpn: &NetworkGraph,
    classifier: &NetworkGraph,
    n_proposals: usize,
) -> Result<GmacBreakdown> {
    let feat = feature_cost.output_shape().ok_or_else(|| Error::InvalidGraph("feature cost report is empty".into()))?;
    let rpn_cost = graph_cost(rpn, feat, Rounding::Exact)?;
    let per_roi = graph_cost(classifier, feat, Rounding::Exact)?;
    let g = |m: u64| m as f64 / 1e9;
    let shared_cnn = g(feature_cost.totals.macs);
    let rpn = g(rpn_cost.totals.macs);
    let classifier = g(per_roi.totals.macs) * n_proposals as f64;
    Ok(GmacBreakdown { shared_cnn, rpn, classifier, total: shared_cnn + rpn + classifier, n_proposals })
}
