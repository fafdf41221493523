//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use parsimix_core::design::build_model_matrices;
use parsimix_core::{parse_formula, simulate_lmm, ContrastScheme, Dataset, FormulaAst, ModelMatrices, TruthSpec};

pub const SMALL_SPEC: &str = include_str!("../../../specs/small.json");
pub const KB_SPEC: &str = include_str!("../../../specs/kb.json");

pub const SMALL_MAXIMAL: &str = "Y ~ 1 + A*B + (1 + A*B | Subject) + (1 + A*B | Item)";
pub const SMALL_TARGET: &str = "Y ~ 1 + A*B + (1 | Subject) + (1 + A | Item)";
pub const KB_MAXIMAL: &str = "Y ~ 1 + S*P*C + (1 + S*P*C | Subject) + (1 + S*P*C | Item)";

pub struct Fixture {
    pub data: Arc<Dataset>,
    pub formula: FormulaAst,
    pub matrices: ModelMatrices,
}

pub fn dataset(spec: &str) -> Arc<Dataset> {
    let truth: TruthSpec = serde_json::from_str(spec).expect("valid truth spec");
    Arc::new(simulate_lmm(&truth).expect("simulation succeeds"))
}

pub fn fixture(spec: &str, formula: &str) -> Fixture {
    let data = dataset(spec);
    let formula = parse_formula(formula).expect("valid formula");
    let matrices = build_model_matrices(&formula, &data, &ContrastScheme::default()).expect("model matrices");
    Fixture { data, formula, matrices }
}
