use parsimix_core::covparam::DEFAULT_SINGULAR_TOL;
use parsimix_core::design::DataFingerprint;
use parsimix_core::fitter::OPTIMIZER_NAME;
use parsimix_core::inference::{fixed_effects_table, information_criteria, FixedEffectRow};
use parsimix_core::selection::SelectionTrace;
use parsimix_core::{ContrastScheme, Criterion, Error, Fit, RePcaResult, TruthSpec};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: String,
    pub tool: Tool,
    pub command: String,
    pub config: ConfigEcho,
    pub data: Option<DataSummary>,
    pub fit: Option<FitPayload>,
    pub repca: Option<RePcaResult>,
    pub trace: Option<SelectionTrace>,
    pub simulation: Option<SimulationPayload>,
    pub warnings: Vec<String>,
    pub error: Option<ErrorPayload>,
    pub timing: Timing,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tool {
    pub name: String,
    pub version: String,
}

/// Every setting that can influence a result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub formula: Option<String>,
    pub criterion: Criterion,
    pub contrasts: ContrastScheme,
    pub optimizer: String,
    pub max_evals: Option<usize>,
    pub ftol_rel: f64,
    pub xtol_abs: f64,
    pub singular_tol: f64,
    pub boundary_tol: f64,
    pub dim_tol: f64,
    pub alpha: Option<f64>,
    pub prune_threshold: Option<f64>,
    pub max_steps: Option<usize>,
    pub maximal_max_evals: Option<usize>,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl ConfigEcho {
    pub fn new(criterion: Criterion, contrasts: ContrastScheme, seed: u64) -> Self {
        let defaults = parsimix_core::FitOptions::default();
        ConfigEcho {
            formula: None,
            criterion,
            contrasts,
            optimizer: OPTIMIZER_NAME.to_string(),
            max_evals: defaults.max_evals,
            ftol_rel: defaults.ftol_rel,
            xtol_abs: defaults.xtol_abs,
            singular_tol: DEFAULT_SINGULAR_TOL,
            boundary_tol: defaults.boundary_tol,
            dim_tol: parsimix_core::repca::DEFAULT_DIM_TOL,
            alpha: None,
            prune_threshold: None,
            max_steps: None,
            maximal_max_evals: None,
            seed,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSummary {
    pub source: String,
    #[serde(flatten)]
    pub fingerprint: DataFingerprint,
    pub dropped_rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomEffectsGroup {
    pub group: String,
    pub columns: Vec<String>,
    pub sd: Vec<f64>,
    /// Lower-triangle correlations within correlated terms.
    pub correlations: Vec<CorrelationEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub a: String,
    pub b: String,
    pub r: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitPayload {
    pub formula: String,
    pub n_obs: usize,
    pub n_fixed: usize,
    pub n_theta: usize,
    pub n_params: usize,
    pub criterion: Criterion,
    pub deviance: f64,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
    pub singular: bool,
    pub n_evals: usize,
    pub budget: usize,
    pub sigma: f64,
    pub theta: Vec<f64>,
    pub boundary_flags: Vec<bool>,
    pub fixed_effects: Vec<FixedEffectRow>,
    pub random_effects: Vec<RandomEffectsGroup>,
}

impl FitPayload {
    pub fn of(fit: &Fit) -> Result<Self, Error> {
        let ic = information_criteria(fit);
        let fixed = fixed_effects_table(fit).map(|t| t.rows).unwrap_or_default();
        let summaries = fit.covariance_summaries()?;
        let labels = fit.factor_labels();
        let mut random_effects = Vec::new();
        for (f, factor) in fit.matrices.factors.iter().enumerate() {
            let s = &summaries[f];
            let cols = &labels[f];
            let mut correlations = Vec::new();
            for &b in &factor.blocks {
                let blk = &fit.matrices.blocks[b];
                if !blk.correlated {
                    continue;
                }
                for i in 0..blk.d {
                    for j in 0..i {
                        let (gi, gj) = (blk.offset + i, blk.offset + j);
                        correlations.push(CorrelationEntry {
                            a: cols[gj].clone(),
                            b: cols[gi].clone(),
                            r: s.cor[gi][gj],
                        });
                    }
                }
            }
            random_effects.push(RandomEffectsGroup {
                group: factor.name.clone(),
                columns: cols.clone(),
                sd: s.sd.clone(),
                correlations,
            });
        }
        Ok(FitPayload {
            formula: fit.formula.to_string(),
            n_obs: fit.matrices.n(),
            n_fixed: fit.matrices.p(),
            n_theta: fit.n_theta(),
            n_params: fit.n_params(),
            criterion: fit.result.criterion,
            deviance: fit.result.deviance,
            loglik: fit.result.loglik,
            aic: ic.aic,
            bic: ic.bic,
            converged: fit.result.converged,
            singular: fit.result.singular,
            n_evals: fit.result.n_evals,
            budget: fit.result.budget,
            sigma: fit.result.sigma,
            theta: fit.result.theta.clone(),
            boundary_flags: fit.result.boundary_flags.clone(),
            fixed_effects: fixed,
            random_effects,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationPayload {
    pub spec: TruthSpec,
    pub output: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_seconds: f64,
}

impl Report {
    pub fn new(command: &str, config: ConfigEcho) -> Self {
        Report {
            schema_version: SCHEMA_VERSION.to_string(),
            tool: Tool {
                name: env!("CARGO_PKG_NAME").to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
            command: command.to_string(),
            config,
            data: None,
            fit: None,
            repca: None,
            trace: None,
            simulation: None,
            warnings: Vec::new(),
            error: None,
            timing: Timing { elapsed_seconds: 0.0 },
        }
    }

    pub fn write_json(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(path, text)
    }
}
