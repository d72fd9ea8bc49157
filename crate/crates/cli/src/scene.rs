//! Synthetic RPN outputs for `detect-sim --scene`.

use pvawb::detect::{gen_anchors, iou, Anchor, BBox, PVANET_FEAT_STRIDE, PVANET_RATIOS, PVANET_SCALES};
use pvawb::engine::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::{bad, Failure};

fn default_noise() -> f64 {
    0.5
}

fn default_gain() -> f64 {
    8.0
}

fn default_regress() -> bool {
    true
}

/// Ground-truth objects on an image. Each anchor's foreground logit is
/// `gain * best_iou + noise * U(-1, 1)`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    /// `(height, width)` in pixels.
    pub image: (f64, f64),
    pub objects: Vec<BBox>,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_gain")]
    pub gain: f64,
    /// Emit the exact regression target for anchors with IoU >= 0.5.
    #[serde(default = "default_regress")]
    pub regress: bool,
}

pub struct Maps {
    pub scores: Tensor,
    pub deltas: Tensor,
    pub anchors: Vec<Anchor>,
}

fn encode(a: &BBox, t: &BBox) -> [f64; 4] {
    let (acx, acy) = a.center();
    let (tcx, tcy) = t.center();
    [(tcx - acx) / a.width(), (tcy - acy) / a.height(), (t.width() / a.width()).ln(), (t.height() / a.height()).ln()]
}

impl Scene {
    pub fn render(&self, seed: u64) -> Result<Maps, Failure> {
        let (ih, iw) = self.image;
        if !(ih >= 1.0 && iw >= 1.0) {
            return Err(bad(format!("image size {ih}x{iw} must be at least 1x1")));
        }
        if let Some(o) = self.objects.iter().find(|o| !o.is_valid() || o.area() <= 0.0) {
            return Err(bad(format!("degenerate object {o:?}")));
        }
        let fh = (ih / PVANET_FEAT_STRIDE).ceil() as usize;
        let fw = (iw / PVANET_FEAT_STRIDE).ceil() as usize;
        let anchors = gen_anchors(&PVANET_SCALES, &PVANET_RATIOS, PVANET_FEAT_STRIDE, (fh, fw));
        let a = PVANET_SCALES.len() * PVANET_RATIOS.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scores = Tensor::zeros([1, 2 * a, fh, fw]);
        let mut deltas = Tensor::zeros([1, 4 * a, fh, fw]);
        for (i, an) in anchors.iter().enumerate() {
            let (y, x, k) = (i / (fw * a), (i / a) % fw, i % a);
            let best = self.objects.iter().map(|o| (iou(&an.bbox, o), o)).max_by(|p, q| p.0.total_cmp(&q.0));
            let overlap = best.map_or(0.0, |b| b.0);
            let fg = self.gain * overlap + self.noise * rng.gen_range(-1.0..1.0);
            let off = scores.offset(0, a + k, y, x);
            scores.data_mut()[off] = fg;
            if let Some((v, o)) = best {
                if self.regress && v >= 0.5 {
                    for (d, t) in encode(&an.bbox, o).into_iter().enumerate() {
                        let off = deltas.offset(0, 4 * k + d, y, x);
                        deltas.data_mut()[off] = t;
                    }
                }
            }
        }
        Ok(Maps { scores, deltas, anchors })
    }
}
