//! Cell-by-cell comparison of the built network against the published
//! structure table.

use serde::{Deserialize, Serialize};

use crate::blocks::{build_detection_heads, build_pvanet_feature_extractor};
use crate::cost::{detection_cost, graph_cost, CostReport, GmacBreakdown, Rounding};
use crate::error::{Error, Result};
use crate::graph::TensorShape;

pub const STRUCTURE_TABLE_JSON: &str = include_str!("../fixtures/structure_table.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureRow {
    pub name: String,
    pub output_size: String,
    pub params_text: String,
    pub mac_text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureTotals {
    pub params_text: String,
    pub mac_text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureGmac {
    pub shared_cnn: f64,
    pub rpn: f64,
    pub classifier: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureBreakdowns {
    pub proposals: usize,
    pub full: FixtureGmac,
    pub compressed: FixtureGmac,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyFixture {
    pub input: String,
    pub rows: Vec<FixtureRow>,
    pub totals: FixtureTotals,
    pub gmac: FixtureBreakdowns,
}

impl VerifyFixture {
    pub fn builtin() -> Self {
        serde_json::from_str(STRUCTURE_TABLE_JSON).expect("checked-in fixture parses")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDiff {
    pub row: String,
    pub column: String,
    pub expected: String,
    pub actual: String,
}

/// Raw integers next to their table renderings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub params_text: String,
    pub mac_text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub cells_checked: usize,
    pub diffs: Vec<CellDiff>,
    pub full: GmacBreakdown,
    pub compressed: GmacBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<Vec<ExactRow>>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.diffs.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(rows) = &self.exact {
            for r in rows {
                s.push_str(&format!(
                    "{:<10} {:>9} {:>7} {:>12} {:>6}\n",
                    r.name, r.params, r.params_text, r.macs, r.mac_text
                ));
            }
        }
        for d in &self.diffs {
            s.push_str(&format!("MISMATCH {}.{}: expected `{}`, got `{}`\n", d.row, d.column, d.expected, d.actual));
        }
        s.push_str(&format!("{} cells checked, {} mismatches\n", self.cells_checked, self.diffs.len()));
        s
    }
}

struct Differ {
    cells: usize,
    diffs: Vec<CellDiff>,
}

impl Differ {
    fn cell(&mut self, row: &str, column: &str, expected: &str, actual: &str) {
        self.cells += 1;
        if expected != actual {
            self.diffs.push(CellDiff {
                row: row.into(),
                column: column.into(),
                expected: expected.into(),
                actual: actual.into(),
            });
        }
    }

    fn gmac(&mut self, row: &str, expected: &FixtureGmac, actual: &GmacBreakdown) {
        for (col, e, a) in [
            ("shared_cnn", expected.shared_cnn, actual.shared_cnn),
            ("rpn", expected.rpn, actual.rpn),
            ("classifier", expected.classifier, actual.classifier),
            ("total", expected.total, actual.total),
        ] {
            self.cell(row, col, &format!("{e:.1}"), &format!("{a:.1}"));
        }
    }
}

/// Builds the network and heads, costs them with table rounding and diffs
/// every cell. `Rounding::Exact` additionally attaches the raw counts.
pub fn verify(fixture: &VerifyFixture, rounding: Rounding) -> Result<VerifyReport> {
    let graph = build_pvanet_feature_extractor();
    let report: CostReport = graph_cost(&graph, fixture.input.parse::<TensorShape>()?, Rounding::Table)?;
    let mut d = Differ { cells: 0, diffs: Vec::new() };

    for row in &fixture.rows {
        match report.row(&row.name) {
            Some(r) => {
                d.cell(&row.name, "output_size", &row.output_size, &r.output.to_string());
                d.cell(&row.name, "params", &row.params_text, &r.params_text());
                d.cell(&row.name, "mac", &row.mac_text, &r.mac_text());
            }
            None => d.cell(&row.name, "row", "present", "missing"),
        }
    }
    for r in &report.rows {
        if !fixture.rows.iter().any(|f| f.name == r.name) {
            d.cell(&r.name, "row", "absent", "present");
        }
    }
    let (tp, tm) = report.table_totals();
    d.cell("Total", "params", &fixture.totals.params_text, &tp);
    d.cell("Total", "mac", &fixture.totals.mac_text, &tm);

    let n = fixture.gmac.proposals;
    if n == 0 {
        return Err(Error::InvalidSpec("fixture proposals must be positive".into()));
    }
    let (rpn, cls) = build_detection_heads(false);
    let full = detection_cost(&report, &rpn, &cls, n)?.rounded();
    let (_, cls_c) = build_detection_heads(true);
    let compressed = detection_cost(&report, &rpn, &cls_c, n)?.rounded();
    d.gmac("full", &fixture.gmac.full, &full);
    d.gmac("compressed", &fixture.gmac.compressed, &compressed);

    let exact = (rounding == Rounding::Exact).then(|| {
        report
            .rows
            .iter()
            .map(|r| ExactRow {
                name: r.name.clone(),
                params: r.params,
                macs: r.macs,
                params_text: r.params_text(),
                mac_text: r.mac_text(),
            })
            .collect()
    });
    Ok(VerifyReport { cells_checked: d.cells, diffs: d.diffs, full, compressed, exact })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_fixture_has_no_diffs() {
        let r = verify(&VerifyFixture::builtin(), Rounding::Table).unwrap();
        assert!(r.ok(), "{}", r.render());
        assert_eq!(r.cells_checked, 21 * 3 + 2 + 8);
    }

    #[test]
    fn one_perturbed_cell_one_diff() {
        let mut f = VerifyFixture::builtin();
        f.rows[4].mac_text = "415M".into();
        let r = verify(&f, Rounding::Exact).unwrap();
        assert_eq!(r.diffs.len(), 1);
        assert_eq!(r.diffs[0].row, "conv2_3");
        assert!(r.exact.is_some());
    }
}
