//! Prints the feature-extractor cost table and the detection GMAC breakdown.

use pvawb::blocks::{build_detection_heads, build_pvanet_feature_extractor, PVANET_INPUT};
use pvawb::cost::{detection_cost, graph_cost, Rounding};

fn main() -> pvawb::Result<()> {
    let g = build_pvanet_feature_extractor();
    let report = graph_cost(&g, PVANET_INPUT, Rounding::Table)?;
    print!("{}", report.render_table());
    for compressed in [false, true] {
        let (rpn, cls) = build_detection_heads(compressed);
        let b = detection_cost(&report, &rpn, &cls, 200)?.rounded();
        println!(
            "compressed={compressed}: shared {:.1} rpn {:.1} classifier {:.1} total {:.1} GMAC",
            b.shared_cnn, b.rpn, b.classifier, b.total
        );
    }
    Ok(())
}
