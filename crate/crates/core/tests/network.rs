use pvawb::blocks::*;
use pvawb::cost::{detection_cost, graph_cost, Rounding};
use pvawb::engine::{self, Mode, Tensor, WeightInit, WeightStore};
use pvawb::graph::{infer_shapes, validate, LayerKind, NetworkGraph, TensorShape};

fn table() -> pvawb::cost::CostReport {
    graph_cost(&build_pvanet_feature_extractor(), PVANET_INPUT, Rounding::Table).unwrap()
}

#[test]
fn shapes_of_named_rows() {
    let r = table();
    let shape = |n: &str| r.row(n).unwrap().output.to_string();
    assert_eq!(shape("conv1_1"), "528x320x32");
    assert_eq!(shape("conv5_4"), "33x20x384");
    assert_eq!(shape("concat"), "66x40x768");
    assert_eq!(shape("convf"), "66x40x512");
    assert_eq!(r.rows.len(), 21);
}

#[test]
fn block_fragments_cost_like_their_rows() {
    let cost = |g: NetworkGraph| graph_cost(&g, g.input_shape, Rounding::Table).unwrap().totals.params;
    let conv2_1 =
        McReluSpec { c_in: 32, c_reduce: Some(24), c_mid: 24, c_out: Some(64), k: 3, stride: 1, residual: true };
    assert_eq!(cost(build_mcrelu_block(&conv2_1).unwrap()), 9_024 + 2_048);
    let conv2_2 = McReluSpec { c_in: 64, ..conv2_1 };
    let g = build_mcrelu_block(&conv2_2).unwrap();
    assert!(g.nodes.iter().all(|n| !n.name.ends_with("/proj")));
    assert_eq!(pvawb::cost::params_text(cost(g)), "9.8K");
    let conv1 = McReluSpec { c_in: 3, c_reduce: None, c_mid: 16, c_out: None, k: 7, stride: 2, residual: false };
    assert_eq!(cost(build_mcrelu_block(&conv1).unwrap()), 2_352);

    let r = table();
    let inc = |spec: InceptionSpec, row: &str| {
        let g = build_inception_block(&spec).unwrap();
        assert_eq!(cost(g), r.row(row).unwrap().params, "{row}");
    };
    let stages = pvanet_stages();
    for (name, stage) in stages {
        if let StageSpec::Inception(s) = stage {
            inc(s, &name);
        }
    }
    assert_eq!(r.row("conv4_1").unwrap().params_text(), "247K");
    assert_eq!(r.row("conv4_1").unwrap().mac_text(), "653M");
    assert_eq!(r.row("conv5_1").unwrap().params_text(), "573K");
}

#[test]
fn stride_two_layers_halve_exactly() {
    let g = build_pvanet_feature_extractor();
    let shapes = infer_shapes(&g, PVANET_INPUT).unwrap();
    for n in g.nodes.iter().filter(|n| n.kind.is_spatial() && n.kind != LayerKind::Deconv && n.stride == 2) {
        let i = shapes[n.inputs[0].as_str()];
        let o = shapes[n.name.as_str()];
        assert_eq!((o.height, o.width), (i.height / 2, i.width / 2), "{}", n.name);
    }
}

#[test]
fn detection_breakdowns() {
    let r = table();
    let (rpn, cls) = build_detection_heads(false);
    let b = detection_cost(&r, &rpn, &cls, 200).unwrap().rounded();
    assert_eq!([b.shared_cnn, b.rpn, b.classifier, b.total], [7.9, 1.4, 18.5, 27.8]);
    let (_, small) = build_detection_heads(true);
    let c = detection_cost(&r, &rpn, &small, 200).unwrap().rounded();
    assert_eq!([c.classifier, c.total], [3.2, 12.5]);
    assert_eq!(detection_cost(&r, &rpn, &cls, 0).unwrap().classifier, 0.0);
    assert!(validate(&rpn).is_empty() && validate(&cls).is_empty() && validate(&small).is_empty());
    let out = graph_cost(&cls, CONVF_SHAPE, Rounding::Exact).unwrap();
    assert_eq!(out.output_shape().unwrap().channels, 84);
}

#[test]
fn allcnn_variants() {
    let cost = |v: &str| {
        let g = build_allcnn_variant(v.parse().unwrap());
        graph_cost(&g, g.input_shape, Rounding::Exact).unwrap()
    };
    let within = |got: u64, want: f64| ((got as f64 / 1e6) - want).abs() <= 0.1 * want;
    assert!(within(cost("original").totals.macs, 270.0));
    assert!(within(cost("half").totals.macs, 72.0));
    let c = cost("half_crelu");
    let m = cost("half_mcrelu");
    assert!(within(m.totals.macs, 140.0));
    assert_eq!(c.totals.macs, m.totals.macs);
    assert_eq!(c.totals.params, m.totals.params);
    let g = build_allcnn_variant(AllCnnVariant::HalfMcrelu);
    let shapes = infer_shapes(&g, g.input_shape).unwrap();
    let extra: u64 = g
        .nodes
        .iter()
        .filter(|n| n.kind == LayerKind::ScaleBias)
        .map(|n| 2 * shapes[n.name.as_str()].channels as u64)
        .sum();
    assert_eq!(m.totals.aux_params - c.totals.aux_params, extra);
}

#[test]
fn quadrupling_input_area_quadruples_spatial_macs() {
    let g = build_pvanet_feature_extractor();
    let small = graph_cost(&g, TensorShape::new(128, 96, 3), Rounding::Exact).unwrap();
    let big = graph_cost(&g, TensorShape::new(256, 192, 3), Rounding::Exact).unwrap();
    assert_eq!(small.totals.params, big.totals.params);
    for (name, c) in &small.per_node {
        assert_eq!(big.per_node[name].macs, 4 * c.macs, "{name}");
    }
}

#[test]
fn engine_counts_the_cost_model_macs() {
    let g = build_pvanet_feature_extractor();
    let input = TensorShape::new(64, 64, 3);
    let cost = graph_cost(&g, input, Rounding::Exact).unwrap();
    let w = WeightStore::init(&g, input, WeightInit::He { seed: 1 }).unwrap();
    let x = Tensor::filled([1, 3, 64, 64], 0.5);
    let t = engine::forward(&g, &w, &x, Mode::Inference).unwrap();
    for (name, c) in &cost.per_node {
        assert_eq!(t.macs[name.as_str()], c.macs, "{name}");
    }
    assert_eq!(t.outputs["convf"].shape(), [1, 512, 4, 4]);
}

#[test]
fn graph_json_roundtrip() {
    let g = build_pvanet_feature_extractor();
    let back = NetworkGraph::from_json(&g.to_json().unwrap()).unwrap();
    assert_eq!(back, g);
    assert_eq!(infer_shapes(&g, PVANET_INPUT).unwrap(), infer_shapes(&back, PVANET_INPUT).unwrap());
}
