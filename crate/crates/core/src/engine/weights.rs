//! Per-node parameter store and its binary file format.
//!
//! File layout: `u64` little-endian header length, UTF-8 JSON header, then
//! the payload of little-endian `f64` values. The header lists every tensor
//! as `{node, param, shape, offset, len}` (offset and len in `f64` elements)
//! and optionally a `factorized` map of `node -> {rank, original_shape}` for
//! low-rank layers.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::bilinear_kernel;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::graph::{infer_shapes, LayerKind, NetworkGraph};
use crate::lowrank::FactorizedFc;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factorization {
    pub rank: usize,
    pub original_shape: (usize, usize),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    tensors: IndexMap<String, IndexMap<String, Tensor>>,
    pub factorized: BTreeMap<String, Factorization>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    /// He-normal weights, zero biases, seeded.
    He { seed: u64 },
    /// Every weight `1 / fan_in`, zero biases: positive maps stay positive.
    Positive,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    node: String,
    param: String,
    shape: [usize; 4],
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<HeaderEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    factorized: BTreeMap<String, Factorization>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, node: &str, param: &str) -> Option<&Tensor> {
        self.tensors.get(node).and_then(|m| m.get(param))
    }

    pub fn get_mut(&mut self, node: &str, param: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(node).and_then(|m| m.get_mut(param))
    }

    pub fn require(&self, node: &str, param: &str) -> Result<&Tensor> {
        self.get(node, param).ok_or_else(|| Error::WeightStore(format!("missing `{node}.{param}`")))
    }

    pub fn insert(&mut self, node: &str, param: &str, t: Tensor) {
        self.tensors.entry(node.to_string()).or_default().insert(param.to_string(), t);
    }

    pub fn node(&self, node: &str) -> Option<&IndexMap<String, Tensor>> {
        self.tensors.get(node)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &Tensor)> {
        self.tensors.iter().flat_map(|(n, m)| m.iter().map(move |(p, t)| (n.as_str(), p.as_str(), t)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &str, &mut Tensor)> {
        self.tensors.iter_mut().flat_map(|(n, m)| m.iter_mut().map(move |(p, t)| (n.as_str(), p.as_str(), t)))
    }

    pub fn len(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters for every node of `graph` at the given input shape.
    pub fn init(graph: &NetworkGraph, input_shape: crate::graph::TensorShape, init: WeightInit) -> Result<Self> {
        let shapes = infer_shapes(graph, input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(match init {
            WeightInit::He { seed } => seed,
            WeightInit::Positive => 0,
        });
        let mut store = WeightStore::new();
        let fill = |shape: [usize; 4], fan_in: usize, rng: &mut ChaCha8Rng| -> Tensor {
            match init {
                WeightInit::He { .. } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std > 0");
                    Tensor::from_fn(shape, |_| normal.sample(rng))
                }
                WeightInit::Positive => Tensor::filled(shape, 1.0 / fan_in as f64),
            }
        };
        for node in &graph.nodes {
            let input = node.inputs.first().map(|i| shapes[i.as_str()]);
            let out = shapes[node.name.as_str()];
            let name = node.name.as_str();
            match node.kind {
                LayerKind::Conv => {
                    let cin = input.expect("conv input").channels / node.groups;
                    let (kh, kw) = node.kernel;
                    store.insert(name, "weight", fill([out.channels, cin, kh, kw], cin * kh * kw, &mut rng));
                    store.insert(name, "bias", Tensor::vector(vec![0.0; out.channels]));
                }
                LayerKind::Deconv => {
                    let cin = input.expect("deconv input").channels;
                    let cg_out = out.channels / node.groups;
                    let (kh, kw) = node.kernel;
                    let k = if kh == kw { bilinear_kernel(kh) } else { vec![1.0 / (kh * kw) as f64; kh * kw] };
                    let w = Tensor::from_fn([cin, cg_out, kh, kw], |[_, _, y, x]| k[y * kw + x]);
                    store.insert(name, "weight", w);
                    store.insert(name, "bias", Tensor::vector(vec![0.0; out.channels]));
                }
                LayerKind::FullyConnected => {
                    let d_in = input.expect("fc input").numel();
                    store.insert(name, "weight", fill([out.channels, d_in, 1, 1], d_in, &mut rng));
                    store.insert(name, "bias", Tensor::vector(vec![0.0; out.channels]));
                }
                LayerKind::ScaleBias => {
                    store.insert(name, "scale", Tensor::vector(vec![1.0; out.channels]));
                    store.insert(name, "bias", Tensor::vector(vec![0.0; out.channels]));
                }
                LayerKind::BatchNorm => {
                    let c = out.channels;
                    store.insert(name, "gamma", Tensor::vector(vec![1.0; c]));
                    store.insert(name, "beta", Tensor::vector(vec![0.0; c]));
                    store.insert(name, "running_mean", Tensor::vector(vec![0.0; c]));
                    store.insert(name, "running_var", Tensor::vector(vec![1.0; c]));
                }
                _ => {}
            }
        }
        Ok(store)
    }

    /// Stores a factorized FC layer under `node/L` (first factor) and `node`
    /// (second factor plus bias), matching the graph rewrite's node names.
    pub fn insert_factorized(&mut self, node: &str, f: &FactorizedFc) {
        let (k, n) = (f.first.rows, f.first.cols);
        let m = f.second.rows;
        let low = format!("{node}/L");
        self.insert(&low, "weight", Tensor::new([k, n, 1, 1], f.first.data.clone()).expect("first factor"));
        self.insert(&low, "bias", Tensor::vector(vec![0.0; k]));
        self.insert(node, "weight", Tensor::new([m, k, 1, 1], f.second.data.clone()).expect("second factor"));
        self.insert(node, "bias", Tensor::vector(f.bias.clone()));
        self.factorized.insert(node.to_string(), Factorization { rank: f.rank, original_shape: f.original_shape });
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut entries = Vec::with_capacity(self.len());
        let mut offset = 0usize;
        for (node, param, t) in self.iter() {
            entries.push(HeaderEntry {
                node: node.into(),
                param: param.into(),
                shape: t.shape(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
        }
        let header = serde_json::to_vec(&Header { version: 1, tensors: entries, factorized: self.factorized.clone() })?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(offset * 8);
        for (_, _, t) in self.iter() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(Error::WeightStore(format!("implausible header length {len}")));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() % 8 != 0 {
            return Err(Error::WeightStore("payload is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> =
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut store = WeightStore { factorized: header.factorized, ..WeightStore::default() };
        for e in header.tensors {
            let end = e
                .offset
                .checked_add(e.len)
                .filter(|&end| end <= values.len())
                .ok_or_else(|| Error::WeightStore(format!("`{}.{}` runs past the payload", e.node, e.param)))?;
            let t = Tensor::new(e.shape, values[e.offset..end].to_vec())?;
            store.insert(&e.node, &e.param, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
