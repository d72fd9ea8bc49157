//! Truncated-SVD compression of fully-connected layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{infer_shapes, LayerKind, LayerNode, NetworkGraph};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                node: "matrix".into(),
                detail: format!("{} values for a {rows}x{cols} matrix", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec dimension");
        self.data.chunks(self.cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    fn from_columns(rows: usize, cols: &[Vec<f64>]) -> Matrix {
        Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
    }
}

/// Thin SVD: `w = u * diag(sigma) * v^T` with `p = min(m, n)` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self, rank: usize) -> Matrix {
        let k = rank.min(self.sigma.len());
        Matrix::from_fn(self.u.rows, self.v.rows, |i, j| {
            (0..k).map(|r| self.u.get(i, r) * self.sigma[r] * self.v.get(j, r)).sum()
        })
    }
}

const MAX_SWEEPS: usize = 80;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided (Hestenes) Jacobi on the columns of a tall matrix.
fn jacobi_tall(w: &Matrix) -> Result<Svd> {
    let (m, n) = (w.rows, w.cols);
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| w.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let norm2: f64 = w.data.iter().map(|x| x * x).sum();
    let eps = f64::EPSILON;
    // Columns below this squared norm are numerically zero.
    let floor = norm2 * (eps * eps) * (m.max(n) as f64);

    let mut converged = norm2 == 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha <= floor || beta <= floor || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for vecs in [&mut cols, &mut v] {
                    let (lo, hi) = vecs.split_at_mut(q);
                    for (a, b) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (x, y) = (*a, *b);
                        *a = c * x - s * y;
                        *b = s * x + c * y;
                    }
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::ConvergenceFailure(MAX_SWEEPS));
    }

    let mut order: Vec<(f64, usize)> = cols.iter().enumerate().map(|(j, c)| (dot(c, c).sqrt(), j)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let sigma: Vec<f64> = order.iter().map(|&(s, _)| s).collect();
    let mut u_cols: Vec<Option<Vec<f64>>> =
        order.iter().map(|&(s, j)| (s * s > floor).then(|| cols[j].iter().map(|x| x / s).collect())).collect();
    complete_orthonormal(m, &mut u_cols);
    let u_cols: Vec<Vec<f64>> = u_cols.into_iter().map(|c| c.expect("completed")).collect();
    let v_cols: Vec<Vec<f64>> = order.iter().map(|&(_, j)| v[j].clone()).collect();
    Ok(Svd { u: Matrix::from_columns(m, &u_cols), sigma, v: Matrix::from_columns(n, &v_cols) })
}

/// Fills the `None` slots with unit vectors orthogonal to every other column.
fn complete_orthonormal(m: usize, cols: &mut [Option<Vec<f64>>]) {
    let mut basis = 0usize;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        while basis < m {
            let mut e = vec![0.0; m];
            e[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for c in cols.iter().flatten() {
                    let d = dot(&e, c);
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = Some(e);
                break;
            }
        }
    }
}

/// Singular value decomposition, values sorted descending.
pub fn svd(w: &Matrix) -> Result<Svd> {
    if w.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteValue("svd input".into()));
    }
    if w.rows >= w.cols {
        jacobi_tall(w)
    } else {
        let t = jacobi_tall(&w.transpose())?;
        Ok(Svd { u: t.v, sigma: t.sigma, v: t.u })
    }
}

/// `sqrt(sum_{i >= k} sigma_i^2)`: the optimal rank-`k` Frobenius error.
pub fn tail_error(sigma: &[f64], k: usize) -> f64 {
    sigma.iter().skip(k).map(|s| s * s).sum::<f64>().sqrt()
}

/// A dense FC layer `y = W x + b` replaced by `y = second (first x) + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedFc {
    /// `k x n`, no bias.
    pub first: Matrix,
    /// `m x k`, carries the singular values.
    pub second: Matrix,
    pub bias: Vec<f64>,
    pub rank: usize,
    pub original_shape: (usize, usize),
}

impl FactorizedFc {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let h = self.first.matvec(x);
        let mut y = self.second.matvec(&h);
        y.iter_mut().zip(&self.bias).for_each(|(y, b)| *y += b);
        y
    }

    pub fn dense(&self) -> Matrix {
        self.second.matmul(&self.first)
    }

    /// Multiplies per input vector before and after factorization.
    pub fn macs(&self) -> (u64, u64) {
        let (m, n) = self.original_shape;
        ((m * n) as u64, (self.rank * (m + n)) as u64)
    }
}

pub fn compress_fc(w: &Matrix, bias: &[f64], rank: usize) -> Result<FactorizedFc> {
    let (m, n) = (w.rows, w.cols);
    if rank == 0 || rank > m.min(n) {
        return Err(Error::InvalidSpec(format!("rank {rank} outside 1..={}", m.min(n))));
    }
    if bias.len() != m {
        return Err(Error::ShapeMismatch {
            node: "fc".into(),
            detail: format!("bias of {} for {m} outputs", bias.len()),
        });
    }
    let d = svd(w)?;
    let first = Matrix::from_fn(rank, n, |r, j| d.v.get(j, r));
    let second = Matrix::from_fn(m, rank, |i, r| d.u.get(i, r) * d.sigma[r]);
    Ok(FactorizedFc { first, second, bias: bias.to_vec(), rank, original_shape: (m, n) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rewrite {
    pub graph: NetworkGraph,
    pub warnings: Vec<String>,
}

/// Replaces each named FC layer by `name/L` (to `rank`) followed by `name`
/// (back to the original width). Consumers keep referring to `name`.
pub fn rewrite_fc_layers(graph: &NetworkGraph, targets: &[&str], rank: usize) -> Result<Rewrite> {
    let shapes = infer_shapes(graph, graph.input_shape)?;
    let mut warnings = Vec::new();
    for t in targets {
        match graph.node(t) {
            Some(n) if n.kind == LayerKind::FullyConnected => {}
            _ => return Err(Error::MissingHead(format!("no fully-connected layer `{t}`"))),
        }
    }
    let mut nodes = Vec::with_capacity(graph.nodes.len() + targets.len());
    for node in &graph.nodes {
        if !targets.contains(&node.name.as_str()) {
            nodes.push(node.clone());
            continue;
        }
        let n = shapes[node.inputs[0].as_str()].numel();
        let m = node.out_channels.unwrap_or(0);
        if rank == 0 || rank > m.min(n) {
            return Err(Error::InvalidSpec(format!("rank {rank} outside 1..={} for `{}`", m.min(n), node.name)));
        }
        if rank * (m + n) >= m * n {
            warnings.push(format!(
                "`{}`: rank {rank} factorization costs {} MAC vs {} dense",
                node.name,
                rank * (m + n),
                m * n
            ));
        }
        let low = format!("{}/L", node.name);
        nodes.push(LayerNode::fc(low.clone(), &node.inputs[0], rank));
        nodes.push(LayerNode::fc(node.name.clone(), &low, m));
    }
    Ok(Rewrite {
        graph: NetworkGraph { name: format!("{}_rank{rank}", graph.name), input_shape: graph.input_shape, nodes },
        warnings,
    })
}

/// Factorizes `fc6` and `fc7` of a classifier head.
pub fn rewrite_classifier(graph: &NetworkGraph, rank: usize) -> Result<Rewrite> {
    rewrite_fc_layers(graph, &["fc6", "fc7"], rank)
}
