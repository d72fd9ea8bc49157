mod common;

use common::*;
use pvawb::detect::*;
use pvawb::engine::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dets(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..extent);
            let y = rng.gen_range(0.0..extent);
            let w = rng.gen_range(1.0..extent / 3.0);
            let h = rng.gen_range(1.0..extent / 3.0);
            // Coarse scores so that ties actually occur.
            let s = (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0;
            Detection::new(BBox::new(x, y, x + w, y + h), s, 0)
        })
        .collect()
}

#[test]
fn nms_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let n = rng.gen_range(1..=200);
        let dets = random_dets(&mut rng, n, 100.0);
        let pre = rng.gen_range(1..=n + 5);
        let post = rng.gen_range(1..=n + 5);
        assert_eq!(nms_indices(&dets, 0.4, pre, post), brute_nms(&dets, 0.4, pre, post));
    }
}

#[test]
fn nms_survivors_do_not_overlap() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dets = random_dets(&mut rng, 200, 60.0);
    let kept = nms(&dets, 0.3, 12000, 200);
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            assert!(iou(&kept[i].bbox, &kept[j].bbox) <= 0.3);
        }
    }
}

#[test]
fn voting_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = VoteConfig::default();
    for _ in 0..50 {
        let n = rng.gen_range(1..=120);
        let dets = random_dets(&mut rng, n, 60.0);
        let kept = nms(&dets, 0.4, 12000, 200);
        let got = bbox_vote(&kept, &dets, &cfg);
        let want = brute_vote(&kept, &dets, cfg.iou_threshold, cfg.min_support);
        assert_eq!(got.len(), kept.len());
        for (a, b) in got.iter().zip(&want) {
            for (x, y) in [
                (a.bbox.x1, b.bbox.x1),
                (a.bbox.y1, b.bbox.y1),
                (a.bbox.x2, b.bbox.x2),
                (a.bbox.y2, b.bbox.y2),
                (a.score, b.score),
            ] {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn voting_edge_cases() {
    let b = BBox::new(10.0, 10.0, 30.0, 40.0);
    let lone = [Detection::new(b, 0.8, 2)];
    let v = bbox_vote(&lone, &lone, &VoteConfig::default());
    assert_eq!(v[0].bbox, b);
    assert!((v[0].score - 0.8 / 5.0).abs() < 1e-15);

    let five = vec![Detection::new(b, 0.5, 2); 5];
    let v = bbox_vote(&five[..1], &five, &VoteConfig::default());
    assert_eq!(v[0].bbox, b);
    assert_eq!(v[0].score, 0.5);

    let cfg = VoteConfig { penalty: VotePenalty::Constant(0.25), ..VoteConfig::default() };
    assert_eq!(bbox_vote(&lone, &lone, &cfg)[0].score, 0.2);
}

#[test]
fn decode_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let anchors: Vec<BBox> = (0..300)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..500.0), rng.gen_range(0.0..400.0));
            BBox::new(x, y, x + rng.gen_range(4.0..200.0), y + rng.gen_range(4.0..200.0))
        })
        .collect();
    let deltas: Vec<Delta> = (0..300).map(|_| [0, 0, 0, 0].map(|_: i32| rng.gen_range(-1.0..1.0))).collect();
    let (ih, iw) = (480.0, 640.0);
    let got = decode_boxes(&anchors, &deltas, (ih, iw)).unwrap();
    for ((a, d), g) in anchors.iter().zip(&deltas).zip(&got) {
        let (w, h) = (a.x2 - a.x1, a.y2 - a.y1);
        let (cx, cy) = (a.x1 + w / 2.0 + d[0] * w, a.y1 + h / 2.0 + d[1] * h);
        let (nw, nh) = (w * d[2].exp(), h * d[3].exp());
        let want = [
            (cx - nw / 2.0).clamp(0.0, iw),
            (cy - nh / 2.0).clamp(0.0, ih),
            (cx + nw / 2.0).clamp(0.0, iw),
            (cy + nh / 2.0).clamp(0.0, ih),
        ];
        for (x, y) in [g.x1, g.y1, g.x2, g.y2].iter().zip(want) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn anchors_per_cell_and_area() {
    let a = gen_anchors(&PVANET_SCALES, &PVANET_RATIOS, PVANET_FEAT_STRIDE, (3, 4));
    assert_eq!(a.len(), 42 * 12);
    for an in &a {
        let s = PVANET_SCALES[an.scale_index];
        assert!((an.bbox.area() - s * s).abs() <= 1e-9 * s * s);
    }
    let near = |i: usize, want: (f64, f64)| {
        let (cx, cy) = a[i].bbox.center();
        (cx - want.0).abs() < 1e-12 && (cy - want.1).abs() < 1e-12
    };
    assert!(near(41, (8.0, 8.0)));
    assert!(near(42, (24.0, 8.0)));
    assert!(near(42 * 4, (8.0, 24.0)));
}

fn maps(a: usize, h: usize, w: usize, fg: impl Fn(usize, usize, usize) -> f64) -> (Tensor, Tensor) {
    let scores = Tensor::from_fn([1, 2 * a, h, w], |[_, c, y, x]| if c < a { 0.0 } else { fg(c - a, y, x) });
    (scores, Tensor::zeros([1, 4 * a, h, w]))
}

#[test]
fn uniform_scores_on_disjoint_anchors_keep_first_200() {
    let anchors = gen_anchors(&[8.0], &[1.0], 16.0, (20, 20));
    let (s, d) = maps(1, 20, 20, |_, _, _| 0.0);
    let p = rpn_pipeline(&s, &d, &anchors, (320.0, 320.0), &ProposalConfig::default()).unwrap();
    assert_eq!(p.len(), 200);
    for (i, det) in p.iter().enumerate() {
        assert_eq!(det.bbox, anchors[i].bbox);
    }
}

#[test]
fn planted_object_is_the_top_proposal() {
    let (fh, fw) = (16, 20);
    let anchors = gen_anchors(&PVANET_SCALES, &PVANET_RATIOS, 16.0, (fh, fw));
    let object = BBox::new(100.0, 60.0, 180.0, 140.0);
    let a = 42;
    let overlap: Vec<f64> = anchors.iter().map(|an| iou(&an.bbox, &object)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise: Vec<f64> = (0..anchors.len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let (s, d) = maps(a, fh, fw, |k, y, x| {
        let i = (y * fw + x) * a + k;
        8.0 * overlap[i] + noise[i]
    });
    let p = rpn_pipeline(&s, &d, &anchors, (256.0, 320.0), &ProposalConfig::default()).unwrap();
    assert!(p.len() <= 200);
    assert!(iou(&p[0].bbox, &object) > 0.5);
}

#[test]
fn pipeline_output_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let anchors = gen_anchors(&PVANET_SCALES, &PVANET_RATIOS, 16.0, (6, 5));
    for _ in 0..5 {
        let s = Tensor::from_fn([1, 84, 6, 5], |_| rng.gen_range(-3.0..3.0));
        let d = Tensor::from_fn([1, 168, 6, 5], |_| rng.gen_range(-0.5..0.5));
        let p = rpn_pipeline(&s, &d, &anchors, (96.0, 80.0), &ProposalConfig::default()).unwrap();
        assert!(p.len() <= 200);
        assert!(p.iter().all(|d| d.score >= 0.0 && d.score <= 1.0));
    }
}

#[test]
fn overflow_guard() {
    let a = [BBox::new(0.0, 0.0, 10.0, 10.0)];
    assert!(matches!(decode_boxes(&a, &[[0.0, 0.0, 0.0, 50.5]], (10.0, 10.0)), Err(pvawb::Error::OverflowGuard(_))));
    assert!(decode_boxes(&a, &[[0.0, 0.0, 0.0, 50.0]], (10.0, 10.0)).is_ok());
}

#[test]
fn detection_json_line_fields() {
    let d = Detection::new(BBox::new(1.0, 2.0, 3.0, 4.0), 0.5, 7);
    let v: serde_json::Value = serde_json::from_str(&d.to_json_line()).unwrap();
    assert_eq!(v, serde_json::json!({"class_id": 7, "score": 0.5, "x1": 1.0, "y1": 2.0, "x2": 3.0, "y2": 4.0}));
}
