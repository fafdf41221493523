//! Linear mixed models with crossed random effects.
//!
//! Models are fitted through the relative Cholesky-factor parameterization
//! of the random-effects covariance, diagnosed for overparameterization with
//! a principal-components analysis of each grouping factor's covariance
//! factor, and reduced to a parsimonious random-effects structure by an
//! auditable sequence of likelihood-ratio steps.

pub mod covparam;
pub mod design;
pub mod error;
pub mod fitter;
pub mod formula;
pub mod inference;
mod linalg;
pub mod repca;
pub mod selection;
pub mod simulate;

pub use covparam::{CovarianceSummary, ThetaLayout};
pub use design::{ContrastKind, ContrastScheme, Dataset, ModelMatrices};
pub use error::{Error, ParseError, Result};
pub use fitter::{Criterion, Fit, FitOptions, FitResult};
pub use formula::{parse_formula, FormulaAst, RandomTerm, Term};
pub use inference::{lr_test, LrtResult};
pub use repca::{repca, RePcaResult};
pub use selection::{run_workflow, SelectionConfig, SelectionTrace};
pub use simulate::{simulate_lmm, TruthSpec};
