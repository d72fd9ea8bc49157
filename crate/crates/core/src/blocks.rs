//! Builders for the composite blocks and the complete networks.
//!
//! Every builder appends plain [`LayerNode`]s to a [`GraphBuilder`]; node
//! names are `block/part` so the cost model can regroup them into the rows
//! of the structure table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, LayerKind, LayerNode, NetworkGraph, TensorShape};
use crate::lowrank;

/// `1x1 - KxK - 1x1` block whose KxK conv is followed by modified C.ReLU:
/// negated copy concatenated, then per-channel scale and separate bias,
/// then ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McReluSpec {
    pub c_in: usize,
    /// Leading 1x1 width; `None` for a block that starts at the KxK conv.
    pub c_reduce: Option<usize>,
    pub c_mid: usize,
    /// Trailing 1x1 width; `None` leaves the doubled `2 * c_mid` as output.
    pub c_out: Option<usize>,
    pub k: usize,
    pub stride: usize,
    pub residual: bool,
}

impl McReluSpec {
    pub fn has_leading_1x1(&self) -> bool {
        self.c_reduce.is_some()
    }

    pub fn out_channels(&self) -> usize {
        self.c_out.unwrap_or(2 * self.c_mid)
    }

    fn check(&self) -> Result<()> {
        let positive = [Some(self.c_in), self.c_reduce, Some(self.c_mid), self.c_out, Some(self.k), Some(self.stride)];
        if positive.iter().flatten().any(|&v| v == 0) {
            return Err(Error::InvalidSpec(format!("mCReLU spec has a zero field: {self:?}")));
        }
        Ok(())
    }
}

/// Inception block with 1x1, 3x3, two-3x3 (factorized 5x5) and an optional
/// max-pool path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionSpec {
    pub c_in: usize,
    pub b1: usize,
    /// (reduce, out)
    pub b3: (usize, usize),
    /// (reduce, mid, out)
    pub b5: (usize, usize, usize),
    pub pool_proj: Option<usize>,
    pub c_out: usize,
    pub stride: usize,
    pub residual: bool,
}

impl InceptionSpec {
    /// Channels seen by the final 1x1.
    pub fn concat_channels(&self) -> usize {
        self.b1 + self.b3.1 + self.b5.2 + self.pool_proj.unwrap_or(0)
    }

    fn check(&self) -> Result<()> {
        let fields =
            [self.c_in, self.b1, self.b3.0, self.b3.1, self.b5.0, self.b5.1, self.b5.2, self.c_out, self.stride];
        if fields.contains(&0) || self.pool_proj == Some(0) {
            return Err(Error::InvalidSpec(format!("inception spec has a zero field: {self:?}")));
        }
        if self.pool_proj.is_some() != (self.stride != 1) {
            return Err(Error::InvalidSpec(format!(
                "pooling path must be present exactly when the block is strided (stride {}, pool {:?})",
                self.stride, self.pool_proj
            )));
        }
        Ok(())
    }
}

fn bn_relu(b: &mut GraphBuilder, prefix: &str, input: &str) -> String {
    let bn = b.push(LayerNode::unary(format!("{prefix}/bn"), LayerKind::BatchNorm, input));
    b.push(LayerNode::unary(format!("{prefix}/relu"), LayerKind::ReLU, &bn))
}

/// Pre-activation on the block input, shared by every path of the body.
fn block_input(b: &mut GraphBuilder, prefix: &str, input: &str, residual: bool) -> String {
    if residual {
        bn_relu(b, &format!("{prefix}/in"), input)
    } else {
        input.to_string()
    }
}

fn residual_join(
    b: &mut GraphBuilder,
    prefix: &str,
    input: &str,
    body: &str,
    same_shape: bool,
    stride: usize,
    out: usize,
) -> String {
    let shortcut = if same_shape {
        input.to_string()
    } else {
        b.push(LayerNode::conv(format!("{prefix}/proj"), input, 1, stride, out))
    };
    b.push(LayerNode::add(format!("{prefix}/add"), &[body, &shortcut]))
}

/// Appends an mCReLU block and returns its output node.
///
/// The block stride sits on the first conv (the leading 1x1 when present),
/// so every conv of a strided block runs at the output resolution.
pub fn append_mcrelu(b: &mut GraphBuilder, prefix: &str, input: &str, spec: &McReluSpec) -> Result<String> {
    spec.check()?;
    let mut x = block_input(b, prefix, input, spec.residual);
    let mut kxk_stride = spec.stride;
    if let Some(r) = spec.c_reduce {
        let c = b.push(LayerNode::conv(format!("{prefix}/1x1a"), &x, 1, spec.stride, r));
        x = bn_relu(b, &format!("{prefix}/1x1a"), &c);
        kxk_stride = 1;
    }
    let conv = b.push(LayerNode::conv(format!("{prefix}/conv"), &x, spec.k, kxk_stride, spec.c_mid));
    let bn = b.push(LayerNode::unary(format!("{prefix}/bn"), LayerKind::BatchNorm, &conv));
    let neg = b.push(LayerNode::unary(format!("{prefix}/neg"), LayerKind::Negate, &bn));
    let cat = b.push(LayerNode::concat(format!("{prefix}/concat"), &[&bn, &neg]));
    let scale = b.push(LayerNode::unary(format!("{prefix}/scale"), LayerKind::ScaleBias, &cat));
    let mut out = b.push(LayerNode::unary(format!("{prefix}/relu"), LayerKind::ReLU, &scale));
    if let Some(c_out) = spec.c_out {
        out = b.push(LayerNode::conv(format!("{prefix}/1x1b"), &out, 1, 1, c_out));
    }
    if spec.residual {
        let same = spec.stride == 1 && spec.c_in == spec.out_channels();
        out = residual_join(b, prefix, input, &out, same, spec.stride, spec.out_channels());
    }
    Ok(out)
}

/// Appends an Inception block and returns its output node.
pub fn append_inception(b: &mut GraphBuilder, prefix: &str, input: &str, spec: &InceptionSpec) -> Result<String> {
    spec.check()?;
    let s = spec.stride;
    let x = block_input(b, prefix, input, spec.residual);

    let p1 = b.push(LayerNode::conv(format!("{prefix}/1x1"), &x, 1, s, spec.b1));

    let r3 = b.push(LayerNode::conv(format!("{prefix}/3x3_reduce"), &x, 1, s, spec.b3.0));
    let a3 = bn_relu(b, &format!("{prefix}/3x3_reduce"), &r3);
    let p3 = b.push(LayerNode::conv(format!("{prefix}/3x3"), &a3, 3, 1, spec.b3.1));

    let r5 = b.push(LayerNode::conv(format!("{prefix}/5x5_reduce"), &x, 1, s, spec.b5.0));
    let a5 = bn_relu(b, &format!("{prefix}/5x5_reduce"), &r5);
    let m5 = b.push(LayerNode::conv(format!("{prefix}/5x5a"), &a5, 3, 1, spec.b5.1));
    let a5 = bn_relu(b, &format!("{prefix}/5x5a"), &m5);
    let p5 = b.push(LayerNode::conv(format!("{prefix}/5x5b"), &a5, 3, 1, spec.b5.2));

    let mut paths = vec![p1, p3, p5];
    if let Some(proj) = spec.pool_proj {
        let pool = b.push(LayerNode::max_pool(format!("{prefix}/pool"), &x, 3, s));
        paths.push(b.push(LayerNode::conv(format!("{prefix}/pool_proj"), &pool, 1, 1, proj)));
    }
    let refs: Vec<&str> = paths.iter().map(String::as_str).collect();
    let cat = b.push(LayerNode::concat(format!("{prefix}/concat"), &refs));
    let act = bn_relu(b, &format!("{prefix}/concat"), &cat);
    let mut out = b.push(LayerNode::conv(format!("{prefix}/out"), &act, 1, 1, spec.c_out));
    if spec.residual {
        let same = s == 1 && spec.c_in == spec.c_out;
        out = residual_join(b, prefix, input, &out, same, s, spec.c_out);
    }
    Ok(out)
}

/// Standalone mCReLU fragment with input node `input` (nominal 32x32 spatial).
pub fn build_mcrelu_block(spec: &McReluSpec) -> Result<NetworkGraph> {
    let mut b = GraphBuilder::new("mcrelu", "input", TensorShape::new(32, 32, spec.c_in));
    append_mcrelu(&mut b, "block", "input", spec)?;
    Ok(b.finish())
}

/// Standalone Inception fragment with input node `input` (nominal 32x32 spatial).
pub fn build_inception_block(spec: &InceptionSpec) -> Result<NetworkGraph> {
    let mut b = GraphBuilder::new("inception", "input", TensorShape::new(32, 32, spec.c_in));
    append_inception(&mut b, "block", "input", spec)?;
    Ok(b.finish())
}

fn mcrelu(c_in: usize, c_reduce: usize, c_mid: usize, c_out: usize, stride: usize) -> McReluSpec {
    McReluSpec { c_in, c_reduce: Some(c_reduce), c_mid, c_out: Some(c_out), k: 3, stride, residual: true }
}

fn inception(
    c_in: usize,
    b3: (usize, usize),
    b5: (usize, usize, usize),
    pool_proj: Option<usize>,
    c_out: usize,
) -> InceptionSpec {
    let stride = if pool_proj.is_some() { 2 } else { 1 };
    InceptionSpec { c_in, b1: 64, b3, b5, pool_proj, c_out, stride, residual: true }
}

/// Nominal detection input.
pub const PVANET_INPUT: TensorShape = TensorShape { height: 1056, width: 640, channels: 3 };

/// Block specs of the feature extractor in order, paired with their row names.
pub enum StageSpec {
    McRelu(McReluSpec),
    Inception(InceptionSpec),
}

pub fn pvanet_stages() -> Vec<(String, StageSpec)> {
    let mut v = Vec::new();
    v.push(("conv2_1".to_string(), StageSpec::McRelu(mcrelu(32, 24, 24, 64, 1))));
    for i in 2..=3 {
        v.push((format!("conv2_{i}"), StageSpec::McRelu(mcrelu(64, 24, 24, 64, 1))));
    }
    v.push(("conv3_1".to_string(), StageSpec::McRelu(mcrelu(64, 48, 48, 128, 2))));
    for i in 2..=4 {
        v.push((format!("conv3_{i}"), StageSpec::McRelu(mcrelu(128, 48, 48, 128, 1))));
    }
    v.push(("conv4_1".to_string(), StageSpec::Inception(inception(128, (48, 128), (24, 48, 48), Some(128), 256))));
    for i in 2..=4 {
        v.push((format!("conv4_{i}"), StageSpec::Inception(inception(256, (64, 128), (24, 48, 48), None, 256))));
    }
    v.push(("conv5_1".to_string(), StageSpec::Inception(inception(256, (96, 192), (32, 64, 64), Some(128), 384))));
    for i in 2..=4 {
        v.push((format!("conv5_{i}"), StageSpec::Inception(inception(384, (96, 192), (32, 64, 64), None, 384))));
    }
    v
}

/// The full feature-extraction network up to `convf`.
pub fn build_pvanet_feature_extractor() -> NetworkGraph {
    let mut b = GraphBuilder::new("pvanet", "data", PVANET_INPUT);
    let conv1 = McReluSpec { c_in: 3, c_reduce: None, c_mid: 16, c_out: None, k: 7, stride: 2, residual: false };
    let mut x = append_mcrelu(&mut b, "conv1_1", "data", &conv1).expect("conv1_1 spec");
    x = b.push(LayerNode::max_pool("pool1_1", &x, 3, 2));

    let mut conv3_4 = String::new();
    let mut conv4_4 = String::new();
    for (name, stage) in pvanet_stages() {
        x = match &stage {
            StageSpec::McRelu(s) => append_mcrelu(&mut b, &name, &x, s),
            StageSpec::Inception(s) => append_inception(&mut b, &name, &x, s),
        }
        .expect("built-in stage spec");
        match name.as_str() {
            "conv3_4" => conv3_4 = x.clone(),
            "conv4_4" => conv4_4 = x.clone(),
            _ => {}
        }
    }

    let down = b.push(LayerNode::max_pool("downscale", &conv3_4, 3, 2));
    let up = b.push(LayerNode::deconv("upscale", &x, 4, 2, 1, 384, 384));
    let cat = b.push(LayerNode::concat("concat", &[&down, &conv4_4, &up]));
    b.push(LayerNode::conv("convf", &cat, 1, 1, 512));
    b.finish()
}

pub const RPN_ANCHORS: usize = 42;
pub const RPN_FEED_CHANNELS: usize = 128;
pub const NUM_CLASSES: usize = 21;
pub const CONVF_SHAPE: TensorShape = TensorShape { height: 66, width: 40, channels: 512 };

/// RPN and classifier fragments, both rooted at an input node named `convf`.
///
/// When `compressed`, fc6 and fc7 are replaced by rank-512 factor pairs.
pub fn build_detection_heads(compressed: bool) -> (NetworkGraph, NetworkGraph) {
    let mut r = GraphBuilder::new("rpn", "convf", CONVF_SHAPE);
    let s = r.push(LayerNode::slice("rpn/slice", "convf", 0, RPN_FEED_CHANNELS));
    let c = r.push(LayerNode::conv("rpn_conv1", &s, 3, 1, 384));
    let a = r.push(LayerNode::unary("rpn_conv1/relu", LayerKind::ReLU, &c));
    r.push(LayerNode::conv("rpn_cls_score", &a, 1, 1, RPN_ANCHORS * 2));
    r.push(LayerNode::conv("rpn_bbox_pred", &a, 1, 1, RPN_ANCHORS * 4));

    let mut k = GraphBuilder::new("classifier", "convf", CONVF_SHAPE);
    let p = k.push(LayerNode::roi_pool("roi_pool", "convf", (6, 6), 16));
    let f6 = k.push(LayerNode::fc("fc6", &p, 4096));
    let a6 = k.push(LayerNode::unary("fc6/relu", LayerKind::ReLU, &f6));
    let f7 = k.push(LayerNode::fc("fc7", &a6, 4096));
    let a7 = k.push(LayerNode::unary("fc7/relu", LayerKind::ReLU, &f7));
    k.push(LayerNode::fc("cls_score", &a7, NUM_CLASSES));
    k.push(LayerNode::fc("bbox_pred", &a7, NUM_CLASSES * 4));

    let mut classifier = k.finish();
    if compressed {
        classifier = lowrank::rewrite_classifier(&classifier, 512).expect("head has fc6 and fc7").graph;
    }
    (r.finish(), classifier)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllCnnVariant {
    Original,
    Half,
    HalfCrelu,
    HalfMcrelu,
}

impl std::str::FromStr for AllCnnVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Self::Original),
            "half" => Ok(Self::Half),
            "half_crelu" => Ok(Self::HalfCrelu),
            "half_mcrelu" => Ok(Self::HalfMcrelu),
            _ => Err(Error::InvalidSpec(format!("unknown ALL-CNN variant `{s}`"))),
        }
    }
}

/// ALL-CNN-C for 32x32x3 inputs, ending at the 10-way 1x1 conv (the global
/// average pool that follows is free and omitted).
///
/// conv7 is unpadded so the last three layers run at 6x6.
pub fn build_allcnn_variant(variant: AllCnnVariant) -> NetworkGraph {
    const WIDTHS: [usize; 9] = [96, 96, 96, 192, 192, 192, 192, 192, 10];
    const KERNELS: [usize; 9] = [3, 3, 3, 3, 3, 3, 3, 1, 1];
    const STRIDES: [usize; 9] = [1, 1, 2, 1, 1, 2, 1, 1, 1];

    let name = match variant {
        AllCnnVariant::Original => "allcnn_c",
        AllCnnVariant::Half => "allcnn_c_half",
        AllCnnVariant::HalfCrelu => "allcnn_c_half_crelu",
        AllCnnVariant::HalfMcrelu => "allcnn_c_half_mcrelu",
    };
    let mut b = GraphBuilder::new(name, "data", TensorShape::new(32, 32, 3));
    let mut x = "data".to_string();
    for (i, ((&w, &k), &s)) in WIDTHS.iter().zip(&KERNELS).zip(&STRIDES).enumerate() {
        let layer = format!("conv{}", i + 1);
        let halved = i < 6 && variant != AllCnnVariant::Original;
        let width = if halved { w / 2 } else { w };
        let mut conv = LayerNode::conv(layer.clone(), &x, k, s, width);
        if i == 6 {
            conv.pad = 0;
        }
        x = b.push(conv);
        if i == 8 {
            break;
        }
        let crelu = halved && matches!(variant, AllCnnVariant::HalfCrelu | AllCnnVariant::HalfMcrelu);
        if crelu {
            let neg = b.push(LayerNode::unary(format!("{layer}/neg"), LayerKind::Negate, &x));
            x = b.push(LayerNode::concat(format!("{layer}/concat"), &[&x, &neg]));
            if variant == AllCnnVariant::HalfMcrelu {
                x = b.push(LayerNode::unary(format!("{layer}/scale"), LayerKind::ScaleBias, &x));
            }
        }
        x = b.push(LayerNode::unary(format!("{layer}/relu"), LayerKind::ReLU, &x));
    }
    b.finish()
}
