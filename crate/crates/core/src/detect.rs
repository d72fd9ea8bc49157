//! Anchors, proposal decoding, greedy NMS and bounding-box voting.
//!
//! Boxes use corner coordinates and the exclusive-area convention
//! (`area = (x2 - x1) * (y2 - y1)`, no `+1` pixel terms).

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn clip(&self, height: f64, width: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x2 >= self.x1 && self.y2 >= self.y1
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    #[serde(flatten)]
    pub bbox: BBox,
    pub scale_index: usize,
    pub ratio_index: usize,
}

pub const PVANET_SCALES: [f64; 6] = [32.0, 48.0, 80.0, 144.0, 256.0, 512.0];
pub const PVANET_RATIOS: [f64; 7] = [0.333, 0.5, 0.667, 1.0, 1.5, 2.0, 3.0];
pub const PVANET_FEAT_STRIDE: f64 = 16.0;

/// Anchors for every feature cell, ordered by (row, column, scale, ratio).
///
/// Width is `scale * sqrt(ratio)`, height `scale / sqrt(ratio)`; centers sit
/// at `(j + 0.5) * feat_stride`.
pub fn gen_anchors(scales: &[f64], ratios: &[f64], feat_stride: f64, feat_size: (usize, usize)) -> Vec<Anchor> {
    let (fh, fw) = feat_size;
    let mut out = Vec::with_capacity(fh * fw * scales.len() * ratios.len());
    for y in 0..fh {
        for x in 0..fw {
            let cx = (x as f64 + 0.5) * feat_stride;
            let cy = (y as f64 + 0.5) * feat_stride;
            for (si, &s) in scales.iter().enumerate() {
                for (ri, &r) in ratios.iter().enumerate() {
                    let w = s * r.sqrt();
                    let h = s / r.sqrt();
                    out.push(Anchor { bbox: BBox::from_center(cx, cy, w, h), scale_index: si, ratio_index: ri });
                }
            }
        }
    }
    out
}

/// Regression target `(tx, ty, tw, th)` in center-size parameterization.
pub type Delta = [f64; 4];

const EXP_GUARD: f64 = 50.0;

/// Applies deltas to anchors and clips to an `image = (H, W)` frame.
pub fn decode_boxes(anchors: &[BBox], deltas: &[Delta], image: (f64, f64)) -> Result<Vec<BBox>> {
    if anchors.len() != deltas.len() {
        return Err(Error::ShapeMismatch {
            node: "decode_boxes".into(),
            detail: format!("{} anchors vs {} deltas", anchors.len(), deltas.len()),
        });
    }
    anchors
        .iter()
        .zip(deltas)
        .map(|(a, d)| {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue("box delta".into()));
            }
            if let Some(&v) = [d[2], d[3]].iter().find(|v| **v > EXP_GUARD) {
                return Err(Error::OverflowGuard(v));
            }
            let (cx, cy) = a.center();
            let (w, h) = (a.width(), a.height());
            let b = BBox::from_center(cx + d[0] * w, cy + d[1] * h, w * d[2].exp(), h * d[3].exp());
            Ok(b.clip(image.0, image.1))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    #[serde(flatten)]
    pub bbox: BBox,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, class_id: usize) -> Self {
        Self { class_id, score, bbox }
    }

    /// One JSON line: `{class_id, score, x1, y1, x2, y2}`.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("detection serializes")
    }
}

/// Indices sorted by descending score; ties keep the lower index first.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    idx
}

/// Greedy NMS returning surviving indices into `dets`, best first.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64, pre_top_k: usize, post_top_k: usize) -> Vec<usize> {
    if post_top_k == 0 {
        return Vec::new();
    }
    let mut order = score_order(dets);
    order.truncate(pre_top_k);
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        let a = &dets[order[i]].bbox;
        keep.push(order[i]);
        if keep.len() == post_top_k {
            break;
        }
        for j in i + 1..order.len() {
            if !suppressed[j] && iou(a, &dets[order[j]].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Greedy descending-score suppression by IoU.
pub fn nms(dets: &[Detection], iou_threshold: f64, pre_top_k: usize, post_top_k: usize) -> Vec<Detection> {
    nms_indices(dets, iou_threshold, pre_top_k, post_top_k).into_iter().map(|i| dets[i]).collect()
}

/// Score multiplier for a voted box with fewer than `min_support` supporters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotePenalty {
    /// `support / min_support`.
    Linear,
    Constant(f64),
}

impl VotePenalty {
    pub fn factor(&self, support: usize, min_support: usize) -> f64 {
        match *self {
            VotePenalty::Linear => support as f64 / min_support as f64,
            VotePenalty::Constant(c) => c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteConfig {
    pub iou_threshold: f64,
    pub min_support: usize,
    pub penalty: VotePenalty,
}

impl Default for VoteConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.4, min_support: 5, penalty: VotePenalty::Linear }
    }
}

/// Single-pass box voting: each kept box moves to the score-weighted mean of
/// the pool boxes overlapping it by at least the threshold, and its score is
/// penalized when fewer than `min_support` boxes back it.
pub fn bbox_vote(kept: &[Detection], pool: &[Detection], cfg: &VoteConfig) -> Vec<Detection> {
    kept.iter()
        .map(|k| {
            let mut wsum = 0.0;
            let mut acc = [0.0; 4];
            let mut support = 0usize;
            for p in pool.iter().filter(|p| iou(&k.bbox, &p.bbox) >= cfg.iou_threshold) {
                support += 1;
                wsum += p.score;
                acc[0] += p.score * p.bbox.x1;
                acc[1] += p.score * p.bbox.y1;
                acc[2] += p.score * p.bbox.x2;
                acc[3] += p.score * p.bbox.y2;
            }
            let bbox =
                if wsum > 0.0 { BBox::new(acc[0] / wsum, acc[1] / wsum, acc[2] / wsum, acc[3] / wsum) } else { k.bbox };
            let score = if support < cfg.min_support {
                k.score * cfg.penalty.factor(support, cfg.min_support)
            } else {
                k.score
            };
            Detection { bbox, score, class_id: k.class_id }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub pre_nms_top_n: usize,
    pub nms_threshold: f64,
    pub post_nms_top_n: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { pre_nms_top_n: 12000, nms_threshold: 0.4, post_nms_top_n: 200 }
    }
}

/// Proposal layer: decode, clip, sort, keep the top `pre_nms_top_n`, NMS,
/// keep `post_nms_top_n`.
///
/// `scores` is `[1, 2A, h, w]` with background logits in channels `0..A` and
/// foreground in `A..2A`; `deltas` is `[1, 4A, h, w]` with anchor `a` at
/// channels `4a..4a + 4`. `anchors` follow [`gen_anchors`] order.
pub fn rpn_pipeline(
    scores: &Tensor,
    deltas: &Tensor,
    anchors: &[Anchor],
    image: (f64, f64),
    cfg: &ProposalConfig,
) -> Result<Vec<Detection>> {
    let [_, c2, h, w] = scores.shape();
    let a = c2 / 2;
    let bad = |detail: String| Error::ShapeMismatch { node: "rpn_pipeline".into(), detail };
    if c2 % 2 != 0 || deltas.shape() != [1, 4 * a, h, w] || scores.batch() != 1 {
        return Err(bad(format!("scores {:?} / deltas {:?}", scores.shape(), deltas.shape())));
    }
    if anchors.len() != a * h * w {
        return Err(bad(format!("{} anchors for {a}x{h}x{w} maps", anchors.len())));
    }
    let mut ds = Vec::with_capacity(anchors.len());
    let mut fg = Vec::with_capacity(anchors.len());
    for y in 0..h {
        for x in 0..w {
            for k in 0..a {
                let (bg, f) = (scores.at(0, k, y, x), scores.at(0, a + k, y, x));
                fg.push(1.0 / (1.0 + (bg - f).exp()));
                ds.push([0, 1, 2, 3].map(|d| deltas.at(0, 4 * k + d, y, x)));
            }
        }
    }
    let boxes: Vec<BBox> = anchors.iter().map(|an| an.bbox).collect();
    let decoded = decode_boxes(&boxes, &ds, image)?;
    let dets: Vec<Detection> = decoded.into_iter().zip(fg).map(|(b, s)| Detection::new(b, s, 1)).collect();
    Ok(nms(&dets, cfg.nms_threshold, cfg.pre_nms_top_n, cfg.post_nms_top_n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_conventions() {
        let a = gen_anchors(&[32.0], &[1.0], 16.0, (1, 1));
        assert_eq!(a[0].bbox, BBox::new(-8.0, -8.0, 24.0, 24.0));
        let a = gen_anchors(&[32.0], &[4.0], 16.0, (1, 1));
        assert_eq!((a[0].bbox.width(), a[0].bbox.height()), (64.0, 16.0));
        assert_eq!(a[0].bbox.area(), 1024.0);
        assert_eq!(gen_anchors(&PVANET_SCALES, &PVANET_RATIOS, 16.0, (1, 1)).len(), 42);
    }

    #[test]
    fn decode_identity_and_closed_form() {
        let a = [BBox::new(40.0, 10.0, 72.0, 26.0)];
        assert_eq!(decode_boxes(&a, &[[0.0; 4]], (100.0, 100.0)).unwrap(), a.to_vec());
        let b = decode_boxes(&a, &[[0.0, 0.0, 2f64.ln(), 0.0]], (100.0, 100.0)).unwrap();
        assert!((b[0].width() - 64.0).abs() < 1e-12);
        assert!(matches!(decode_boxes(&a, &[[0.0, 0.0, 51.0, 0.0]], (1.0, 1.0)), Err(Error::OverflowGuard(_))));
    }

    #[test]
    fn nms_basic_cases() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let one = [Detection::new(b, 0.3, 0)];
        assert_eq!(nms(&one, 0.4, 10, 10), one.to_vec());
        let two = [Detection::new(b, 0.8, 0), Detection::new(b, 0.9, 0)];
        assert_eq!(nms(&two, 0.4, 10, 10), vec![two[1]]);
    }

    #[test]
    fn vote_self_support_only() {
        let k = Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0), 0.9, 3);
        let out = bbox_vote(&[k], &[k], &VoteConfig::default());
        assert_eq!(out[0].bbox, k.bbox);
        assert!((out[0].score - 0.9 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn vote_five_coincident() {
        let k = Detection::new(BBox::new(1.0, 2.0, 11.0, 12.0), 0.5, 0);
        let out = bbox_vote(&[k], &[k; 5], &VoteConfig::default());
        assert!((out[0].bbox.x1 - 1.0).abs() < 1e-12 && (out[0].bbox.y2 - 12.0).abs() < 1e-12);
        assert_eq!(out[0].score, 0.5);
    }

    #[test]
    fn iou_degenerate_boxes() {
        let p = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn detection_json_line_fields() {
        let d = Detection::new(BBox::new(1.0, 2.0, 3.0, 4.0), 0.5, 7);
        let v: serde_json::Value = serde_json::from_str(&d.to_json_line()).unwrap();
        for key in ["class_id", "score", "x1", "y1", "x2", "y2"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: Detection = serde_json::from_str(&d.to_json_line()).unwrap();
        assert_eq!(back, d);
    }
}
