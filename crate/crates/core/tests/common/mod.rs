//! Independent reference implementations used by the integration and
//! acceptance tests. None of these call into the library's kernels.
#![allow(dead_code)]

use pvawb::detect::{BBox, Detection};
use pvawb::engine::Tensor;
use rand::Rng;

pub fn rand_tensor(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct convolution with bounds checks instead of a padded copy.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize, groups: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [cout, cgin, kh, kw] = w.shape();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let cgout = cout / groups;
    assert_eq!(cgin * groups, cin);
    let mut y = Tensor::zeros([n, cout, oh, ow]);
    let [_, c_, h_, w_] = y.shape();
    for bi in 0..n {
        for o in 0..cout {
            let g = o / cgout;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for ic in 0..cgin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, ic, ky, kx) * x.at(bi, g * cgin + ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    y.data_mut()[((bi * c_ + o) * h_ + oy) * w_ + ox] = acc;
                }
            }
        }
    }
    y
}

/// Transposed convolution by scattering each input into the output.
/// `w` is `[cin, cout / groups, kh, kw]`.
pub fn naive_deconv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize, groups: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [_, cgout, kh, kw] = w.shape();
    let cout = cgout * groups;
    let cgin = cin / groups;
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut y = Tensor::from_fn([n, cout, oh, ow], |[_, o, _, _]| b[o]);
    for bi in 0..n {
        for ic in 0..cin {
            let g = ic / cgin;
            for iy in 0..h {
                for ix in 0..wd {
                    for oc in 0..cgout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let o = g * cgout + oc;
                                let off = y.offset(bi, o, oy as usize, ox as usize);
                                y.data_mut()[off] += w.at(ic, oc, ky, kx) * x.at(bi, ic, iy, ix);
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn naive_max_pool(x: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    Tensor::from_fn([n, c, oh, ow], |[b, ch, oy, ox]| {
        let mut m = f64::NEG_INFINITY;
        for ky in 0..k {
            for kx in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let ix = (ox * stride + kx) as isize - pad as isize;
                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    m = m.max(x.at(b, ch, iy as usize, ix as usize));
                }
            }
        }
        m
    })
}

/// Central differences of `f` at `x` with step `h`.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let fp = f(&p);
            p[i] = x[i] - h;
            let fm = f(&p);
            p[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Relative error with a floor on the denominator so that entries whose
/// true gradient is near zero are compared absolutely at that scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)).fold(0.0, f64::max)
}

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| (hi1.min(hi2) - lo1.max(lo2)).max(0.0);
    let i = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    let u = area(a) + area(b) - i;
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

/// Survivors of greedy NMS by the recursive definition: a box survives iff
/// no surviving box ranked above it overlaps it by more than `thr`.
pub fn brute_nms(dets: &[Detection], thr: f64, pre: usize, post: usize) -> Vec<usize> {
    let n = dets.len();
    let mut rank: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n - 1 - i {
            let (a, b) = (rank[j], rank[j + 1]);
            let swap = dets[b].score > dets[a].score || (dets[b].score == dets[a].score && b < a);
            if swap {
                rank.swap(j, j + 1);
            }
        }
    }
    rank.truncate(pre);
    let mut survives = vec![false; rank.len()];
    for i in 0..rank.len() {
        survives[i] = (0..i).all(|j| !(survives[j] && iou_ref(&dets[rank[j]].bbox, &dets[rank[i]].bbox) > thr));
    }
    rank.iter().zip(&survives).filter(|(_, &s)| s).map(|(&i, _)| i).take(post).collect()
}

pub fn brute_vote(kept: &[Detection], pool: &[Detection], thr: f64, min_support: usize) -> Vec<Detection> {
    kept.iter()
        .map(|k| {
            let sup: Vec<&Detection> = pool.iter().filter(|p| iou_ref(&k.bbox, &p.bbox) >= thr).collect();
            let total: f64 = sup.iter().map(|p| p.score).sum();
            let avg = |f: fn(&BBox) -> f64| sup.iter().map(|p| p.score * f(&p.bbox)).sum::<f64>() / total;
            let bbox = if total > 0.0 {
                BBox::new(avg(|b| b.x1), avg(|b| b.y1), avg(|b| b.x2), avg(|b| b.y2))
            } else {
                k.bbox
            };
            let score = if sup.len() < min_support { k.score * sup.len() as f64 / min_support as f64 } else { k.score };
            Detection::new(bbox, score, k.class_id)
        })
        .collect()
}

/// ROI max pooling by scattering each feature cell into every bin that
/// contains it.
pub fn brute_roi_pool(f: &Tensor, roi: &BBox, grid: (usize, usize), stride: f64) -> Tensor {
    let [_, c, h, w] = f.shape();
    let (gh, gw) = grid;
    let y0 = (roi.y1 / stride).floor() as isize;
    let x0 = (roi.x1 / stride).floor() as isize;
    let rh = (((roi.y2 / stride).ceil() as isize) - y0).max(1) as f64;
    let rw = (((roi.x2 / stride).ceil() as isize) - x0).max(1) as f64;
    let bin_range = |i: usize, bins: usize, start: isize, len: f64, limit: usize| {
        let lo = (start + (i as f64 * len / bins as f64).floor() as isize).clamp(0, limit as isize - 1);
        let hi = (start + ((i + 1) as f64 * len / bins as f64).ceil() as isize).clamp(0, limit as isize);
        (lo, hi.max(lo + 1))
    };
    let mut out = Tensor::filled([1, c, gh, gw], f64::NEG_INFINITY);
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                for by in 0..gh {
                    let (ylo, yhi) = bin_range(by, gh, y0, rh, h);
                    if y < ylo || y >= yhi {
                        continue;
                    }
                    for bx in 0..gw {
                        let (xlo, xhi) = bin_range(bx, gw, x0, rw, w);
                        if x < xlo || x >= xhi {
                            continue;
                        }
                        let o = out.offset(0, ch, by, bx);
                        let v = f.at(0, ch, y as usize, x as usize);
                        if v > out.data()[o] {
                            out.data_mut()[o] = v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Top singular values via power iteration with deflation on `W^T W`.
pub fn power_singular_values(w: &[Vec<f64>], count: usize) -> Vec<f64> {
    let m = w.len();
    let n = w[0].len();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            g[i][j] = (0..m).map(|r| w[r][i] * w[r][j]).sum();
        }
    }
    let mut out = Vec::new();
    for t in 0..count {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7 + t * 3) % 11) as f64 / 10.0).collect();
        let mut lambda = 0.0;
        for _ in 0..20_000 {
            let mut nv: Vec<f64> = (0..n).map(|i| (0..n).map(|j| g[i][j] * v[j]).sum()).collect();
            let norm = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                lambda = 0.0;
                break;
            }
            nv.iter_mut().for_each(|x| *x /= norm);
            let diff = nv.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = nv;
            lambda = norm;
            if diff < 1e-15 {
                break;
            }
        }
        out.push(lambda.max(0.0).sqrt());
        for i in 0..n {
            for j in 0..n {
                g[i][j] -= lambda * v[i] * v[j];
            }
        }
    }
    out
}

use indexmap::IndexMap;
use pvawb::engine::{self, Mode, WeightStore};
use pvawb::graph::NetworkGraph;

/// FD step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of `L = sum_o <r_o, y_o>` (random `r_o`
/// per listed output) against central differences, over the input and
/// every parameter. Returns the largest relative error.
pub fn grad_check(
    graph: &NetworkGraph,
    weights: &WeightStore,
    x: &Tensor,
    mode: Mode,
    outputs: &[&str],
    rng: &mut impl Rng,
) -> f64 {
    let trace = engine::forward(graph, weights, x, mode).expect("forward");
    let mut up = IndexMap::new();
    for o in outputs {
        up.insert(o.to_string(), rand_tensor(rng, trace.outputs[*o].shape()));
    }
    let grads = engine::backward(graph, weights, &trace, &up).expect("backward");
    let loss = |w: &WeightStore, x: &Tensor| -> f64 {
        let t = engine::forward(graph, w, x, mode).expect("forward");
        up.iter().map(|(o, r)| t.outputs[o].data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()).sum()
    };

    let mut worst = {
        let mut f = |v: &[f64]| loss(weights, &Tensor::new(x.shape(), v.to_vec()).unwrap());
        let fd = finite_diff(&mut f, x.data(), FD_STEP);
        max_rel_err(grads.input.data(), &fd)
    };
    for (node, param, t) in weights.iter() {
        if param.starts_with("running_") {
            continue;
        }
        let analytic = grads.params.get(node, param).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut f = |v: &[f64]| {
            let mut w = weights.clone();
            w.insert(node, param, Tensor::new(t.shape(), v.to_vec()).unwrap());
            loss(&w, x)
        };
        let fd = finite_diff(&mut f, t.data(), FD_STEP);
        worst = worst.max(max_rel_err(&analytic, &fd));
    }
    worst
}
