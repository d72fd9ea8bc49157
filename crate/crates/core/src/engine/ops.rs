//! Per-layer kernels. Each forward kernel reports the multiplies it executed.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::detect::BBox;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_len(&self, len: usize, k: usize) -> usize {
        (len + 2 * self.pad - k) / self.stride + 1
    }
}

fn pad_input(x: &Tensor, pad: usize) -> Tensor {
    if pad == 0 {
        return x.clone();
    }
    let [n, c, h, w] = x.shape();
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros([n, c, ph, pw]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..h {
            let s = (plane * h + y) * w;
            let d = (plane * ph + y + pad) * pw + pad;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

/// Direct convolution over an explicitly zero-padded input.
///
/// `weight` is `[c_out, c_in / groups, kh, kw]`; every kernel tap is
/// executed at every output position, padding included.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&[f64]>, g: ConvGeom) -> (Tensor, u64) {
    let [n, c_in, _, _] = x.shape();
    let [c_out, cg_in, kh, kw] = weight.shape();
    debug_assert_eq!(cg_in * g.groups, c_in);
    let xp = pad_input(x, g.pad);
    let [_, _, ph, pw] = xp.shape();
    let oh = (ph - kh) / g.stride + 1;
    let ow = (pw - kw) / g.stride + 1;
    let cg_out = c_out / g.groups;
    let mut y = Tensor::zeros([n, c_out, oh, ow]);
    let xd = xp.data();
    let wd = weight.data();
    let s = g.stride;
    y.data_mut().par_chunks_mut(oh * ow).enumerate().for_each(|(plane, out)| {
        let (b, oc) = (plane / c_out, plane % c_out);
        let grp = oc / cg_out;
        for icg in 0..cg_in {
            let ic = grp * cg_in + icg;
            let xbase = (b * c_in + ic) * ph * pw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[((oc * cg_in + icg) * kh + ky) * kw + kx];
                    for oy in 0..oh {
                        let row = xbase + (oy * s + ky) * pw + kx;
                        let dst = &mut out[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d += wv * xd[row + ox * s];
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            out.iter_mut().for_each(|v| *v += bias[oc]);
        }
    });
    let macs = (n * c_out * cg_in * kh * kw * oh * ow) as u64;
    (y, macs)
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Vec<f64>,
}

pub fn conv2d_backward(x: &Tensor, weight: &Tensor, dy: &Tensor, g: ConvGeom) -> ConvGrads {
    let [n, c_in, h, w] = x.shape();
    let [c_out, cg_in, kh, kw] = weight.shape();
    let [_, _, oh, ow] = dy.shape();
    let xp = pad_input(x, g.pad);
    let [_, _, ph, pw] = xp.shape();
    let cg_out = c_out / g.groups;
    let s = g.stride;
    let xd = xp.data();
    let dyd = dy.data();
    let wd = weight.data();

    // dW and db, one output channel per task.
    let per_oc: Vec<(Vec<f64>, f64)> = (0..c_out)
        .into_par_iter()
        .map(|oc| {
            let grp = oc / cg_out;
            let mut dw = vec![0.0; cg_in * kh * kw];
            let mut db = 0.0;
            for b in 0..n {
                let dbase = (b * c_out + oc) * oh * ow;
                db += dyd[dbase..dbase + oh * ow].iter().sum::<f64>();
                for icg in 0..cg_in {
                    let xbase = (b * c_in + grp * cg_in + icg) * ph * pw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let row = xbase + (oy * s + ky) * pw + kx;
                                let drow = dbase + oy * ow;
                                for ox in 0..ow {
                                    acc += dyd[drow + ox] * xd[row + ox * s];
                                }
                            }
                            dw[(icg * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = vec![0.0; c_out];
    for (oc, (w_, b_)) in per_oc.into_iter().enumerate() {
        dw.data_mut()[oc * cg_in * kh * kw..(oc + 1) * cg_in * kh * kw].copy_from_slice(&w_);
        db[oc] = b_;
    }

    // dX on the padded grid, one (batch, input channel) plane per task.
    let mut dxp = Tensor::zeros([n, c_in, ph, pw]);
    dxp.data_mut().par_chunks_mut(ph * pw).enumerate().for_each(|(plane, out)| {
        let (b, ic) = (plane / c_in, plane % c_in);
        let grp = ic / cg_in;
        let icg = ic % cg_in;
        for ocg in 0..cg_out {
            let oc = grp * cg_out + ocg;
            let dbase = (b * c_out + oc) * oh * ow;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[((oc * cg_in + icg) * kh + ky) * kw + kx];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            out[(oy * s + ky) * pw + ox * s + kx] += wv * dyd[dbase + oy * ow + ox];
                        }
                    }
                }
            }
        }
    });
    let dx = Tensor::from_fn([n, c_in, h, w], |[b, c, y, x_]| dxp.at(b, c, y + g.pad, x_ + g.pad));
    ConvGrads { dx, dw, db }
}

/// Transposed convolution as a stride-1 convolution over the zero-upsampled
/// input with the spatially flipped kernel. `weight` is
/// `[c_in, c_out / groups, kh, kw]`; requires `pad < k`.
pub fn deconv2d(x: &Tensor, weight: &Tensor, bias: Option<&[f64]>, g: ConvGeom) -> (Tensor, u64) {
    let [n, c_in, h, w] = x.shape();
    let [_, cg_out, kh, kw] = weight.shape();
    let cg_in = c_in / g.groups;
    let c_out = cg_out * g.groups;
    let s = g.stride;
    let (eh, ew) = (kh - 1 - g.pad, kw - 1 - g.pad);
    let (zh, zw) = ((h - 1) * s + 1 + 2 * eh, (w - 1) * s + 1 + 2 * ew);
    let mut z = Tensor::zeros([n, c_in, zh, zw]);
    for b in 0..n {
        for c in 0..c_in {
            for y in 0..h {
                for x_ in 0..w {
                    let o = z.offset(b, c, eh + y * s, ew + x_ * s);
                    z.data_mut()[o] = x.at(b, c, y, x_);
                }
            }
        }
    }
    let flipped = Tensor::from_fn([c_out, cg_in, kh, kw], |[oc, icg, ky, kx]| {
        let grp = oc / cg_out;
        let ic = grp * cg_in + icg;
        weight.at(ic, oc % cg_out, kh - 1 - ky, kw - 1 - kx)
    });
    conv2d(&z, &flipped, bias, ConvGeom { kernel: (kh, kw), stride: 1, pad: 0, groups: g.groups })
}

/// Bilinear-interpolation kernel for a `k x k` stride-`k/2` upsampler.
pub fn bilinear_kernel(k: usize) -> Vec<f64> {
    let f = k.div_ceil(2) as f64;
    let c = if k % 2 == 1 { f - 1.0 } else { f - 0.5 };
    let mut out = Vec::with_capacity(k * k);
    for y in 0..k {
        for x in 0..k {
            out.push((1.0 - (y as f64 - c).abs() / f) * (1.0 - (x as f64 - c).abs() / f));
        }
    }
    out
}

/// Max-pool with implicit `-inf` padding. Returns the flat input index of
/// each output's first maximal element in scan order.
pub fn max_pool(x: &Tensor, g: ConvGeom) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    let (kh, kw) = g.kernel;
    let oh = g.out_len(h, kh);
    let ow = g.out_len(w, kw);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let mut i = 0;
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = x.offset(b, ch, iy as usize, ix as usize);
                            if x.data()[idx] > best {
                                best = x.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y.data_mut()[i] = best;
                    arg[i] = best_idx;
                    i += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward(x_shape: [usize; 4], arg: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    for (&a, &d) in arg.iter().zip(dy.data()) {
        dx.data_mut()[a] += d;
    }
    dx
}

/// Per-channel mean and biased variance over batch and space.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = x.shape();
    let p = x.plane();
    let m = (n * p) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let o = x.offset(b, ch, 0, 0);
            s += x.data()[o..o + p].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..n {
            let o = x.offset(b, ch, 0, 0);
            v += x.data()[o..o + p].iter().map(|t| (t - mu) * (t - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// `y = scale[c] * x + shift[c]`.
pub fn channel_affine(x: &Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
    let [_, c, _, _] = x.shape();
    let p = x.plane();
    let mut y = x.clone();
    for (i, chunk) in y.data_mut().chunks_mut(p).enumerate() {
        let ch = i % c;
        chunk.iter_mut().for_each(|v| *v = scale[ch] * *v + shift[ch]);
    }
    y
}

/// Sum over batch and space of `a * b` per channel (or of `a` when `b` is None).
pub fn channel_sum(a: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let c = a.channels();
    let p = a.plane();
    let mut out = vec![0.0; c];
    for (i, chunk) in a.data().chunks(p).enumerate() {
        let ch = i % c;
        out[ch] += match b {
            Some(b) => chunk.iter().zip(&b.data()[i * p..(i + 1) * p]).map(|(x, y)| x * y).sum::<f64>(),
            None => chunk.iter().sum::<f64>(),
        };
    }
    out
}

/// Train-mode batch-norm backward given the normalized activations.
pub fn batch_norm_backward(xhat: &Tensor, var: &[f64], gamma: &[f64], dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let c = xhat.channels();
    let p = xhat.plane();
    let m = (xhat.batch() * p) as f64;
    let dgamma = channel_sum(dy, Some(xhat));
    let dbeta = channel_sum(dy, None);
    let mut dx = Tensor::zeros(xhat.shape());
    for (i, chunk) in dx.data_mut().chunks_mut(p).enumerate() {
        let ch = i % c;
        let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
        let k = gamma[ch] * inv / m;
        for (j, d) in chunk.iter_mut().enumerate() {
            let idx = i * p + j;
            *d = k * (m * dy.data()[idx] - dbeta[ch] - xhat.data()[idx] * dgamma[ch]);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn concat_channels(xs: &[&Tensor]) -> Tensor {
    let [n, _, h, w] = xs[0].shape();
    let c: usize = xs.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for t in xs {
            let item = t.item_len();
            data.extend_from_slice(&t.data()[b * item..(b + 1) * item]);
        }
    }
    Tensor::new([n, c, h, w], data).expect("concat shape")
}

/// Channels `[start, end)` of every batch item.
pub fn slice_channels(x: &Tensor, start: usize, end: usize) -> Tensor {
    let [n, _, h, w] = x.shape();
    let p = h * w;
    let mut data = Vec::with_capacity(n * (end - start) * p);
    for b in 0..n {
        let o = x.offset(b, start, 0, 0);
        data.extend_from_slice(&x.data()[o..o + (end - start) * p]);
    }
    Tensor::new([n, end - start, h, w], data).expect("slice shape")
}

/// `y = W x + b` per batch item; `weight` is `[out, in, 1, 1]`, inputs
/// flattened in C, H, W order.
pub fn fully_connected(x: &Tensor, weight: &Tensor, bias: &[f64]) -> (Tensor, u64) {
    let n = x.batch();
    let d_in = x.item_len();
    let d_out = weight.shape()[0];
    let wd = weight.data();
    let mut y = Tensor::zeros([n, d_out, 1, 1]);
    y.data_mut().par_chunks_mut(d_out).enumerate().for_each(|(b, out)| {
        let xin = &x.data()[b * d_in..(b + 1) * d_in];
        for (o, v) in out.iter_mut().enumerate() {
            let row = &wd[o * d_in..(o + 1) * d_in];
            *v = row.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>() + bias[o];
        }
    });
    (y, (n * d_in * d_out) as u64)
}

pub fn fully_connected_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Vec<f64>) {
    let n = x.batch();
    let d_in = x.item_len();
    let d_out = weight.shape()[0];
    let wd = weight.data();
    let mut dx = Tensor::zeros(x.shape());
    for b in 0..n {
        for o in 0..d_out {
            let g = dy.data()[b * d_out + o];
            let row = &wd[o * d_in..(o + 1) * d_in];
            dx.data_mut()[b * d_in..(b + 1) * d_in].iter_mut().zip(row).for_each(|(d, w)| *d += g * w);
        }
    }
    let mut dw = Tensor::zeros(weight.shape());
    dw.data_mut().par_chunks_mut(d_in).enumerate().for_each(|(o, row)| {
        for b in 0..n {
            let g = dy.data()[b * d_out + o];
            row.iter_mut().zip(&x.data()[b * d_in..(b + 1) * d_in]).for_each(|(d, xv)| *d += g * xv);
        }
    });
    let db = (0..d_out).map(|o| (0..n).map(|b| dy.data()[b * d_out + o]).sum()).collect();
    (dx, dw, db)
}

/// Bin edges `[lo, hi)` of bin `i` out of `bins` over `[start, start + len)`,
/// clamped to `[0, limit)`; an emptied bin keeps a single source cell.
fn roi_bin(start: isize, len: usize, bins: usize, i: usize, limit: usize) -> (usize, usize) {
    let size = len as f64 / bins as f64;
    let lo = start + (i as f64 * size).floor() as isize;
    let hi = start + ((i + 1) as f64 * size).ceil() as isize;
    let lo = lo.clamp(0, limit as isize - 1) as usize;
    let hi = (hi.clamp(0, limit as isize) as usize).max(lo + 1);
    (lo, hi)
}

/// Quantized feature-map extent of an ROI: `[floor(x1/s), ceil(x2/s))`,
/// at least one cell wide.
pub fn roi_extent(a: f64, b: f64, feat_stride: f64) -> (isize, usize) {
    let lo = (a / feat_stride).floor() as isize;
    let hi = (b / feat_stride).ceil() as isize;
    (lo, (hi - lo).max(1) as usize)
}

/// ROI max-pooling of batch item 0 onto a fixed grid. Output `[rois, c, gh, gw]`.
pub fn roi_pool(features: &Tensor, rois: &[BBox], grid: (usize, usize), feat_stride: f64) -> Tensor {
    let [_, c, h, w] = features.shape();
    let (gh, gw) = grid;
    let mut out = Tensor::zeros([rois.len(), c, gh, gw]);
    let mut i = 0;
    for r in rois {
        let (y0, rh) = roi_extent(r.y1, r.y2, feat_stride);
        let (x0, rw) = roi_extent(r.x1, r.x2, feat_stride);
        for ch in 0..c {
            for by in 0..gh {
                let (ylo, yhi) = roi_bin(y0, rh, gh, by, h);
                for bx in 0..gw {
                    let (xlo, xhi) = roi_bin(x0, rw, gw, bx, w);
                    let mut m = f64::NEG_INFINITY;
                    for y in ylo..yhi {
                        for x in xlo..xhi {
                            m = m.max(features.at(0, ch, y, x));
                        }
                    }
                    out.data_mut()[i] = m;
                    i += 1;
                }
            }
        }
    }
    out
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits (each batch item flattened to one logit vector).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = logits.batch();
    let k = logits.item_len();
    assert_eq!(labels.len(), n, "one label per batch item");
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for b in 0..n {
        let z = &logits.data()[b * k..(b + 1) * k];
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + sum.ln();
        loss += lse - z[labels[b]];
        let g = &mut grad.data_mut()[b * k..(b + 1) * k];
        for (j, gv) in g.iter_mut().enumerate() {
            *gv = ((z[j] - lse).exp() - if j == labels[b] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}
