mod common;

use common::power_singular_values;
use pvawb::blocks::build_detection_heads;
use pvawb::cost::{graph_cost, Rounding};
use pvawb::engine::{self, Mode, Tensor, WeightInit, WeightStore};
use pvawb::graph::{GraphBuilder, LayerNode, TensorShape};
use pvawb::lowrank::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut impl Rng, m: usize, n: usize) -> Matrix {
    Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
}

fn orthonormality(u: &Matrix) -> f64 {
    u.transpose().matmul(u).sub(&Matrix::identity(u.cols)).max_abs()
}

#[test]
fn closed_form_cases() {
    let d = svd(&Matrix::identity(3)).unwrap();
    assert_eq!(d.sigma, vec![1.0, 1.0, 1.0]);

    let u = [2.0, 0.0, 0.0];
    let v = [0.0, 3.0 / 2f64.sqrt(), 3.0 / 2f64.sqrt(), 0.0];
    let w = Matrix::from_fn(3, 4, |i, j| u[i] * v[j]);
    let d = svd(&w).unwrap();
    assert!((d.sigma[0] - 6.0).abs() < 1e-12);
    assert!(d.sigma[1..].iter().all(|s| s.abs() < 1e-12));
}

#[test]
fn random_8x5_against_power_iteration_and_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(85);
    let w = random_matrix(&mut rng, 8, 5);
    let d = svd(&w).unwrap();
    let rows: Vec<Vec<f64>> = (0..8).map(|i| (0..5).map(|j| w.get(i, j)).collect()).collect();
    let power = power_singular_values(&rows, 5);
    let na = nalgebra::DMatrix::from_fn(8, 5, |i, j| w.get(i, j)).singular_values();
    let mut na: Vec<f64> = na.iter().copied().collect();
    na.sort_by(|a, b| b.total_cmp(a));
    for k in 0..5 {
        assert!((d.sigma[k] - power[k]).abs() <= 1e-8, "{k}: {} vs {}", d.sigma[k], power[k]);
        assert!((d.sigma[k] - na[k]).abs() <= 1e-10);
    }
    assert!(orthonormality(&d.u) <= 1e-10);
    assert!(orthonormality(&d.v) <= 1e-10);
}

#[test]
fn compression_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random_matrix(&mut rng, 12, 7);
    let bias = vec![0.1; 12];
    let full = compress_fc(&w, &bias, 7).unwrap();
    assert!(full.dense().sub(&w).max_abs() <= 1e-10);

    let u: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r1 = Matrix::from_fn(6, 9, |i, j| u[i] * v[j]);
    let f = compress_fc(&r1, &[0.0; 6], 1).unwrap();
    assert!(f.dense().sub(&r1).max_abs() <= 1e-12);

    let w = random_matrix(&mut rng, 64, 64);
    let d = svd(&w).unwrap();
    let f = compress_fc(&w, &[0.0; 64], 8).unwrap();
    let err = f.dense().sub(&w).frobenius();
    assert!((err - tail_error(&d.sigma, 8)).abs() <= 1e-9);
    for _ in 0..200 {
        let a = random_matrix(&mut rng, 64, 8);
        let b = random_matrix(&mut rng, 8, 64);
        let scale = rng.gen_range(0.0..0.05);
        let perturbed_second = Matrix::from_fn(64, 8, |i, r| f.second.get(i, r) + scale * a.get(i, r));
        let perturbed_first = Matrix::from_fn(8, 64, |r, j| f.first.get(r, j) + scale * b.get(r, j));
        let other = perturbed_second.matmul(&perturbed_first);
        assert!(other.sub(&w).frobenius() >= err - 1e-9);
    }
}

#[test]
fn errors_and_options() {
    let w = Matrix::identity(3);
    assert!(compress_fc(&w, &[0.0; 3], 0).is_err());
    assert!(compress_fc(&w, &[0.0; 3], 4).is_err());
    assert!(compress_fc(&w, &[0.0; 2], 2).is_err());
    let mut nan = Matrix::identity(2);
    nan.set(0, 1, f64::NAN);
    assert!(svd(&nan).is_err());
}

#[test]
fn classifier_rewrite_costs() {
    let (_, dense) = build_detection_heads(false);
    let (_, small) = build_detection_heads(true);
    let feat = TensorShape::new(66, 40, 512);
    let a = graph_cost(&dense, feat, Rounding::Exact).unwrap().totals.macs;
    let b = graph_cost(&small, feat, Rounding::Exact).unwrap().totals.macs;
    assert_eq!((a as f64 / 1e5).round() / 10.0, 92.7);
    assert_eq!((b as f64 / 1e5).round() / 10.0, 16.2);
    assert!((b as f64 * 200.0 / 1e9 * 10.0).round() / 10.0 == 3.2);

    let full = rewrite_classifier(&dense, 4096).unwrap();
    assert_eq!(full.warnings.len(), 2);
    let c = graph_cost(&full.graph, feat, Rounding::Exact).unwrap().totals.macs;
    assert!(c > a);

    let (rpn, _) = build_detection_heads(false);
    assert!(matches!(rewrite_classifier(&rpn, 512), Err(pvawb::Error::MissingHead(_))));
}

#[test]
fn factorized_weights_run_in_the_engine() {
    let mut b = GraphBuilder::new("fc", "data", TensorShape::new(2, 3, 2));
    b.push(LayerNode::fc("fc", "data", 5));
    let g = b.finish();
    let mut w = WeightStore::init(&g, g.input_shape, WeightInit::He { seed: 2 }).unwrap();
    let dense = w.get("fc", "weight").unwrap();
    let m = Matrix::from_vec(5, 12, dense.data().to_vec()).unwrap();
    let bias = vec![0.3, -0.1, 0.0, 0.2, 0.5];
    w.insert("fc", "bias", Tensor::vector(bias.clone()));
    let rw = rewrite_fc_layers(&g, &["fc"], 3).unwrap();
    let mut fw = WeightStore::new();
    let f = compress_fc(&m, &bias, 3).unwrap();
    fw.insert_factorized("fc", &f);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn([4, 2, 2, 3], |_| rng.gen_range(-1.0..1.0));
    let y = &engine::forward(&rw.graph, &fw, &x, Mode::Inference).unwrap().outputs["fc"];
    let recon = f.dense();
    for n in 0..4 {
        let xi = &x.data()[n * 12..(n + 1) * 12];
        let want: Vec<f64> = recon.matvec(xi).iter().zip(&bias).map(|(a, b)| a + b).collect();
        for o in 0..5 {
            assert!((y.at(n, o, 0, 0) - want[o]).abs() <= 1e-10);
        }
        let direct = f.forward(xi);
        assert!(direct.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-10));
    }
}
