use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pvawb::blocks::{build_allcnn_variant, build_detection_heads, build_pvanet_feature_extractor};
use pvawb::cost::{detection_cost, graph_cost, Rounding};
use pvawb::detect::{self, BBox, Detection};
use pvawb::graph::{self, NetworkGraph, TensorShape};
use pvawb::lowrank::{self, Matrix};
use pvawb::trainer::{self, PlateauConfig};

fn err(e: pvawb::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Shape3 = (usize, usize, usize);

fn shape(s: Shape3) -> TensorShape {
    TensorShape::new(s.0, s.1, s.2)
}

fn rounding(s: &str) -> PyResult<Rounding> {
    s.parse().map_err(err)
}

/// Layer graph of a network.
#[pyclass(name = "Graph", module = "pvawb", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGraph {
    inner: NetworkGraph,
}

#[pymethods]
impl PyGraph {
    /// pvanet, rpn, classifier, classifier-compressed or allcnn:<variant>.
    #[staticmethod]
    #[pyo3(signature = (name = "pvanet"))]
    fn build(name: &str) -> PyResult<Self> {
        let inner = match name {
            "pvanet" => build_pvanet_feature_extractor(),
            "rpn" => build_detection_heads(false).0,
            "classifier" => build_detection_heads(false).1,
            "classifier-compressed" => build_detection_heads(true).1,
            other => match other.strip_prefix("allcnn:") {
                Some(v) => build_allcnn_variant(v.parse().map_err(err)?),
                None => return Err(PyValueError::new_err(format!("unknown network `{other}`"))),
            },
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        NetworkGraph::from_json(text).map(|inner| Self { inner }).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn input_shape(&self) -> Shape3 {
        let s = self.inner.input_shape;
        (s.height, s.width, s.channels)
    }

    fn node_names(&self) -> Vec<String> {
        self.inner.nodes.iter().map(|n| n.name.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.nodes.len()
    }

    fn validate(&self) -> Vec<String> {
        graph::validate(&self.inner).iter().map(ToString::to_string).collect()
    }

    /// Ordered mapping node -> (h, w, c).
    #[pyo3(signature = (input = None))]
    fn infer_shapes<'py>(&self, py: Python<'py>, input: Option<Shape3>) -> PyResult<Bound<'py, PyDict>> {
        let shapes = graph::infer_shapes(&self.inner, input.map_or(self.inner.input_shape, shape)).map_err(err)?;
        let d = PyDict::new(py);
        for (n, s) in shapes {
            d.set_item(n, (s.height, s.width, s.channels))?;
        }
        Ok(d)
    }

    /// Per-row and total cost: `{"rows": [(name, (h, w, c), params, macs, params_text, mac_text)], "params": .., "macs": ..}`.
    #[pyo3(signature = (input = None, rounding = "table"))]
    fn cost<'py>(&self, py: Python<'py>, input: Option<Shape3>, rounding: &str) -> PyResult<Bound<'py, PyDict>> {
        let r = graph_cost(&self.inner, input.map_or(self.inner.input_shape, shape), self::rounding(rounding)?)
            .map_err(err)?;
        let rows: Vec<_> = r
            .rows
            .iter()
            .map(|row| {
                let o = row.output;
                (
                    row.name.clone(),
                    (o.height, o.width, o.channels),
                    row.params,
                    row.macs,
                    row.params_text(),
                    row.mac_text(),
                )
            })
            .collect();
        let (tp, tm) = r.table_totals();
        let d = PyDict::new(py);
        d.set_item("rows", rows)?;
        d.set_item("params", r.totals.params)?;
        d.set_item("macs", r.totals.macs)?;
        d.set_item("aux_params", r.totals.aux_params)?;
        d.set_item("table_totals", (tp, tm))?;
        Ok(d)
    }

    fn render_table(&self) -> PyResult<String> {
        graph_cost(&self.inner, self.inner.input_shape, Rounding::Table).map(|r| r.render_table()).map_err(err)
    }

    /// `[(rf, path_count)]` sorted by rf.
    #[pyo3(signature = (node, path_cap = 1_000_000_000_000))]
    fn rf_distribution(&self, node: &str, path_cap: u128) -> PyResult<Vec<(u64, u128)>> {
        pvawb::rf::rf_distribution(&self.inner, node, path_cap).map(|d| d.entries).map_err(err)
    }

    fn empirical_rf(&self, node: &str, input: Shape3, position: (usize, usize)) -> PyResult<usize> {
        pvawb::rf::empirical_rf(&self.inner, node, shape(input), position).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Graph({:?}, {} nodes, input {})", self.inner.name, self.inner.nodes.len(), self.inner.input_shape)
    }
}

/// `(rf, jump)` of a chain of `(kernel, stride)` layers.
#[pyfunction]
fn path_rf(layers: Vec<(usize, usize)>) -> (u64, u64) {
    let s = pvawb::rf::path_rf(&layers);
    (s.rf, s.jump)
}

/// `(shared_cnn, rpn, classifier, total)` GMAC at 1056x640. When `rounded`,
/// parts are rounded to one decimal and the total is their sum.
#[pyfunction]
#[pyo3(signature = (proposals = 200, compressed = false, rounded = true))]
fn detection_gmac(proposals: usize, compressed: bool, rounded: bool) -> PyResult<(f64, f64, f64, f64)> {
    let feat =
        graph_cost(&build_pvanet_feature_extractor(), pvawb::blocks::PVANET_INPUT, Rounding::Table).map_err(err)?;
    let (rpn, cls) = build_detection_heads(compressed);
    let mut b = detection_cost(&feat, &rpn, &cls, proposals).map_err(err)?;
    if rounded {
        b = b.rounded();
    }
    Ok((b.shared_cnn, b.rpn, b.classifier, b.total))
}

type CellDiff = (String, String, String, String);

/// `(cells_checked, [(row, column, expected, actual)])` against the built-in fixture.
#[pyfunction]
fn verify() -> PyResult<(usize, Vec<CellDiff>)> {
    let r = pvawb::verify::verify(&pvawb::verify::VerifyFixture::builtin(), Rounding::Table).map_err(err)?;
    Ok((r.cells_checked, r.diffs.into_iter().map(|d| (d.row, d.column, d.expected, d.actual)).collect()))
}

type Box4 = (f64, f64, f64, f64);

fn bbox(b: Box4) -> BBox {
    BBox::new(b.0, b.1, b.2, b.3)
}

fn unbox(b: &BBox) -> Box4 {
    (b.x1, b.y1, b.x2, b.y2)
}

#[pyfunction]
fn iou(a: Box4, b: Box4) -> f64 {
    detect::iou(&bbox(a), &bbox(b))
}

fn detections(boxes: Vec<Box4>, scores: Vec<f64>) -> PyResult<Vec<Detection>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err(format!("{} boxes but {} scores", boxes.len(), scores.len())));
    }
    Ok(boxes.into_iter().zip(scores).map(|(b, s)| Detection::new(bbox(b), s, 0)).collect())
}

/// Indices of the kept boxes in output order.
#[pyfunction]
#[pyo3(signature = (boxes, scores, iou_threshold = 0.4, pre_top_k = 12000, post_top_k = 200))]
fn nms(
    boxes: Vec<Box4>,
    scores: Vec<f64>,
    iou_threshold: f64,
    pre_top_k: usize,
    post_top_k: usize,
) -> PyResult<Vec<usize>> {
    Ok(detect::nms_indices(&detections(boxes, scores)?, iou_threshold, pre_top_k, post_top_k))
}

/// Votes `kept` boxes against `pool`; returns `[(box, score)]`.
#[pyfunction]
#[pyo3(signature = (kept_boxes, kept_scores, pool_boxes, pool_scores, iou_threshold = 0.4, min_support = 5))]
fn bbox_vote(
    kept_boxes: Vec<Box4>,
    kept_scores: Vec<f64>,
    pool_boxes: Vec<Box4>,
    pool_scores: Vec<f64>,
    iou_threshold: f64,
    min_support: usize,
) -> PyResult<Vec<(Box4, f64)>> {
    let cfg = detect::VoteConfig { iou_threshold, min_support, ..detect::VoteConfig::default() };
    let v = detect::bbox_vote(&detections(kept_boxes, kept_scores)?, &detections(pool_boxes, pool_scores)?, &cfg);
    Ok(v.iter().map(|d| (unbox(&d.bbox), d.score)).collect())
}

/// Anchor boxes in (y, x, scale, ratio) order; defaults are the PVANet lists.
#[pyfunction]
#[pyo3(signature = (feat_h, feat_w, feat_stride = 16.0, scales = None, ratios = None))]
fn gen_anchors(
    feat_h: usize,
    feat_w: usize,
    feat_stride: f64,
    scales: Option<Vec<f64>>,
    ratios: Option<Vec<f64>>,
) -> Vec<Box4> {
    let scales = scales.unwrap_or_else(|| detect::PVANET_SCALES.to_vec());
    let ratios = ratios.unwrap_or_else(|| detect::PVANET_RATIOS.to_vec());
    detect::gen_anchors(&scales, &ratios, feat_stride, (feat_h, feat_w)).iter().map(|a| unbox(&a.bbox)).collect()
}

type Rows = Vec<Vec<f64>>;

fn matrix(rows: Rows) -> PyResult<Matrix> {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Matrix::from_vec(m, n, rows.concat()).map_err(err)
}

fn rows(m: &Matrix) -> Rows {
    m.data.chunks(m.cols).map(<[f64]>::to_vec).collect()
}

/// Thin SVD `(u, sigma, v)` with `w = u diag(sigma) v^T`.
#[pyfunction]
fn svd(w: Rows) -> PyResult<(Rows, Vec<f64>, Rows)> {
    let d = lowrank::svd(&matrix(w)?).map_err(err)?;
    Ok((rows(&d.u), d.sigma, rows(&d.v)))
}

/// Rank-k factors `(first, second)` with `w ~= second @ first`.
#[pyfunction]
fn compress_fc(w: Rows, bias: Vec<f64>, rank: usize) -> PyResult<(Rows, Rows)> {
    let f = lowrank::compress_fc(&matrix(w)?, &bias, rank).map_err(err)?;
    Ok((rows(&f.first), rows(&f.second)))
}

#[pyfunction]
fn tail_error(sigma: Vec<f64>, k: usize) -> f64 {
    lowrank::tail_error(&sigma, k)
}

/// Reduce-on-plateau learning-rate schedule.
#[pyclass(name = "PlateauScheduler", module = "pvawb")]
struct PyScheduler {
    inner: trainer::PlateauScheduler,
}

#[pymethods]
impl PyScheduler {
    #[new]
    #[pyo3(signature = (base_lr = 0.1, decay_factor = None, patience = 2000, window = 100, terminate_below = 1e-4))]
    fn new(
        base_lr: f64,
        decay_factor: Option<f64>,
        patience: usize,
        window: usize,
        terminate_below: f64,
    ) -> PyResult<Self> {
        let d = PlateauConfig::default();
        let cfg = PlateauConfig {
            base_lr,
            decay_factor: decay_factor.unwrap_or(d.decay_factor),
            patience,
            window,
            terminate_below,
        };
        trainer::PlateauScheduler::new(cfg).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr()
    }

    #[getter]
    fn smoothed(&self) -> f64 {
        self.inner.smoothed()
    }

    /// Feeds one raw loss; returns `(lr, smoothed, decayed, terminate)`.
    fn step(&mut self, loss: f64) -> PyResult<(f64, f64, bool, bool)> {
        let s = self.inner.step(loss).map_err(err)?;
        Ok((s.lr, s.smoothed, s.decayed, s.terminate))
    }
}

#[pymodule]
#[pyo3(name = "pvawb")]
fn pvawb_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyScheduler>()?;
    m.add_function(wrap_pyfunction!(path_rf, m)?)?;
    m.add_function(wrap_pyfunction!(detection_gmac, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(bbox_vote, m)?)?;
    m.add_function(wrap_pyfunction!(gen_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(compress_fc, m)?)?;
    m.add_function(wrap_pyfunction!(tail_error, m)?)?;
    Ok(())
}
