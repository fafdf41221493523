//! Model fitting: profiled deviance minimized over θ under bound constraints.

mod nelder_mead;
mod pls;

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use nelder_mead::{minimize, NelderMeadOptions, NelderMeadOutcome};
pub use pls::{profiled_deviance, Criterion, DevianceEvaluator, PlsSolution};

use crate::covparam::{cov_to_sd_cor, lambda_to_cov, CovarianceSummary, DEFAULT_SINGULAR_TOL};
use crate::design::{build_model_matrices, ContrastScheme, Dataset, ModelMatrices};
use crate::error::{Error, Result};
use crate::formula::FormulaAst;
use crate::linalg::{semidefinite_cholesky, singular_values};

pub const OPTIMIZER_NAME: &str = "bounded Nelder-Mead (adaptive coefficients, sign-folded diagonals, box projection)";

/// Evaluation budget used when none is given: max(10·|θ|², 2000).
pub fn default_budget(n_theta: usize) -> usize {
    (10 * n_theta * n_theta).max(2000)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub criterion: Criterion,
    /// Overrides [`default_budget`].
    pub max_evals: Option<usize>,
    pub ftol_rel: f64,
    pub xtol_abs: f64,
    pub init_step: f64,
    pub restarts: usize,
    /// A factor's Λ is singular when its smallest singular value falls below
    /// this fraction of the largest.
    pub singular_tol: f64,
    /// Diagonal θ entries at or below this value are flagged as on the boundary.
    pub boundary_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        let nm = NelderMeadOptions::default();
        FitOptions {
            criterion: Criterion::Reml,
            max_evals: None,
            ftol_rel: nm.ftol_rel,
            xtol_abs: nm.xtol_abs,
            init_step: nm.init_step,
            restarts: nm.restarts,
            singular_tol: DEFAULT_SINGULAR_TOL,
            boundary_tol: DEFAULT_SINGULAR_TOL,
        }
    }
}

impl FitOptions {
    pub fn with_criterion(criterion: Criterion) -> Self {
        FitOptions {
            criterion,
            ..Default::default()
        }
    }

    pub fn budget(&self, n_theta: usize) -> usize {
        self.max_evals.unwrap_or_else(|| default_budget(n_theta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub deviance: f64,
    pub loglik: f64,
    pub criterion: Criterion,
    pub n_evals: usize,
    pub budget: usize,
    pub converged: bool,
    pub boundary_flags: Vec<bool>,
    pub singular: bool,
    /// Per grouping factor, in model order.
    pub factor_singular: Vec<bool>,
    /// (R_X R_X')⁻¹; multiply by σ² for the fixed-effects covariance.
    pub beta_vcov_unscaled: Vec<Vec<f64>>,
    pub ridged: bool,
}

impl FitResult {
    pub fn beta_vcov(&self) -> DMatrix<f64> {
        let p = self.beta.len();
        let s2 = self.sigma * self.sigma;
        DMatrix::from_fn(p, p, |i, j| self.beta_vcov_unscaled[i][j] * s2)
    }
}

fn finish(
    ev: &DevianceEvaluator,
    theta: Vec<f64>,
    criterion: Criterion,
    n_evals: usize,
    budget: usize,
    converged: bool,
    opts: &FitOptions,
) -> Result<FitResult> {
    let sol = ev.solve(&theta, criterion)?;
    let n = ev.n() as f64;
    let p = ev.p() as f64;
    let denom = match criterion {
        Criterion::Ml => n,
        Criterion::Reml => n - p,
    };
    let sigma = (sol.pwrss / denom).sqrt();

    let factor_singular: Vec<bool> = ev
        .factor_lambdas(&theta)
        .iter()
        .map(|lam| is_singular(lam, opts.singular_tol))
        .collect();
    let boundary_flags = ev
        .layout()
        .diagonal_mask()
        .iter()
        .zip(&theta)
        .map(|(&diag, &t)| diag && t <= opts.boundary_tol)
        .collect();

    let pdim = sol.rx.nrows();
    let vcov = if pdim > 0 {
        let rinv = sol
            .rx
            .clone()
            .try_inverse()
            .ok_or(Error::NotPositiveDefinite)?;
        rinv.transpose() * rinv
    } else {
        DMatrix::zeros(0, 0)
    };
    Ok(FitResult {
        beta: sol.beta,
        sigma,
        deviance: sol.deviance,
        loglik: -0.5 * sol.deviance,
        criterion,
        n_evals,
        budget,
        converged,
        boundary_flags,
        singular: factor_singular.iter().any(|&s| s),
        factor_singular,
        beta_vcov_unscaled: (0..pdim).map(|i| (0..pdim).map(|j| vcov[(i, j)]).collect()).collect(),
        ridged: sol.ridged,
        theta,
    })
}

/// Singular when the smallest singular value is below `tol` times the largest.
pub fn is_singular(lambda: &DMatrix<f64>, tol: f64) -> bool {
    let sv = singular_values(lambda);
    match (sv.first(), sv.last()) {
        (Some(&max), Some(&min)) => max <= 0.0 || min < tol * max,
        _ => false,
    }
}

/// Minimizes the profiled deviance over θ from `init`.
pub fn optimize(mm: &ModelMatrices, init: &[f64], opts: &FitOptions) -> Result<FitResult> {
    let ev = DevianceEvaluator::new(mm)?;
    optimize_with(&ev, init, &vec![None; init.len()], opts)
}

/// As [`optimize`], holding every θ entry with `fixed[i] = Some(v)` at `v`.
pub fn optimize_with(
    ev: &DevianceEvaluator,
    init: &[f64],
    fixed: &[Option<f64>],
    opts: &FitOptions,
) -> Result<FitResult> {
    let layout = ev.layout();
    if layout.is_empty() {
        return Err(Error::NoRandomTerms);
    }
    if fixed.len() != layout.len() {
        return Err(Error::Dimension("fixed mask length".into()));
    }
    layout.check_bounds(init)?;
    let mut base = init.to_vec();
    for (b, f) in base.iter_mut().zip(fixed) {
        if let Some(v) = f {
            *b = *v;
        }
    }
    layout.check_bounds(&base)?;

    // A diagonal entry is searched over the whole real line when flipping
    // its column cannot disturb a fixed value; the result is folded back.
    let columns = theta_columns(layout);
    let foldable: Vec<bool> = columns
        .iter()
        .map(|col| col.iter().all(|&i| fixed[i].map_or(true, |v| v == 0.0)))
        .collect();
    let mut lower_all = layout.lower_bounds();
    for (col, &fold) in columns.iter().zip(&foldable) {
        if fold {
            lower_all[col[0]] = f64::NEG_INFINITY;
        }
    }
    let free: Vec<usize> = (0..layout.len()).filter(|&i| fixed[i].is_none()).collect();
    let lower: Vec<f64> = free.iter().map(|&i| lower_all[i]).collect();
    let x0: Vec<f64> = free.iter().map(|&i| base[i]).collect();
    let budget = opts.budget(free.len());
    let nm = NelderMeadOptions {
        max_evals: budget,
        ftol_rel: opts.ftol_rel,
        xtol_abs: opts.xtol_abs,
        init_step: opts.init_step,
        restarts: opts.restarts,
    };
    let criterion = opts.criterion;
    let mut theta = base.clone();
    let objective = |x: &[f64]| {
        for (k, &i) in free.iter().enumerate() {
            theta[i] = x[k];
        }
        ev.deviance_unchecked(&theta, criterion).unwrap_or(f64::INFINITY)
    };
    let out = minimize(objective, &x0, &lower, &nm);
    if !out.f.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    let mut theta = base;
    for (k, &i) in free.iter().enumerate() {
        theta[i] = out.x[k];
    }
    for col in &columns {
        if theta[col[0]] < 0.0 {
            for &i in col {
                theta[i] = -theta[i];
            }
        }
    }
    let converged = out.converged && out.evals <= budget;
    finish(ev, theta, criterion, out.evals, budget, converged, opts)
}

/// θ indices of each column of every Λ block, diagonal entry first.
fn theta_columns(layout: &crate::covparam::ThetaLayout) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for (b, &d) in layout.dims().iter().enumerate() {
        let mut k = layout.offset(b);
        for c in 0..d {
            out.push((k..k + d - c).collect());
            k += d - c;
        }
    }
    out
}

/// A fitted model together with the inputs that produced it.
#[derive(Debug, Clone)]
pub struct Fit {
    pub formula: FormulaAst,
    pub data: Arc<Dataset>,
    pub matrices: Arc<ModelMatrices>,
    pub evaluator: Arc<DevianceEvaluator>,
    pub options: FitOptions,
    pub result: FitResult,
}

impl Fit {
    pub fn n_theta(&self) -> usize {
        self.result.theta.len()
    }

    /// Total parameter count: fixed effects, θ and the residual variance.
    pub fn n_params(&self) -> usize {
        self.matrices.p() + self.n_theta() + 1
    }

    /// Block-diagonal Λ for each grouping factor.
    pub fn factor_lambdas(&self) -> Vec<DMatrix<f64>> {
        self.evaluator.factor_lambdas(&self.result.theta)
    }

    /// Column labels of each grouping factor's Λ.
    pub fn factor_labels(&self) -> Vec<Vec<String>> {
        self.matrices
            .factors
            .iter()
            .map(|f| {
                f.blocks
                    .iter()
                    .flat_map(|&b| self.matrices.blocks[b].labels.iter().cloned())
                    .collect()
            })
            .collect()
    }

    /// Standard deviations and correlations per grouping factor, in response units.
    pub fn covariance_summaries(&self) -> Result<Vec<CovarianceSummary>> {
        self.factor_lambdas()
            .iter()
            .map(|lam| cov_to_sd_cor(&lambda_to_cov(lam, self.result.sigma)))
            .collect()
    }

    /// Relative standard deviation (units of σ) of every random-effects column,
    /// per grouping factor.
    pub fn relative_sds(&self) -> Vec<Vec<f64>> {
        self.factor_lambdas()
            .iter()
            .map(|lam| (0..lam.nrows()).map(|i| lam.row(i).norm()).collect())
            .collect()
    }
}

/// Builds matrices for `formula` on `data` and fits from the identity start.
pub fn fit(formula: &FormulaAst, data: Arc<Dataset>, contrasts: &ContrastScheme, opts: &FitOptions) -> Result<Fit> {
    fit_from(formula, data, contrasts, opts, None)
}

/// As [`fit`] with an optional starting θ.
pub fn fit_from(
    formula: &FormulaAst,
    data: Arc<Dataset>,
    contrasts: &ContrastScheme,
    opts: &FitOptions,
    init: Option<Vec<f64>>,
) -> Result<Fit> {
    let mm = Arc::new(build_model_matrices(formula, &data, contrasts)?);
    let ev = Arc::new(DevianceEvaluator::new(&mm)?);
    let init = init.unwrap_or_else(|| ev.layout().initial());
    let result = optimize_with(&ev, &init, &vec![None; init.len()], opts)?;
    Ok(Fit {
        formula: formula.clone(),
        data,
        matrices: mm,
        evaluator: ev,
        options: opts.clone(),
        result,
    })
}

/// Refits with a new formula, dataset or options, warm-starting θ from the
/// components the models share. An unchanged model returns `fit` itself.
pub fn refit(
    fit: &Fit,
    formula: Option<&FormulaAst>,
    data: Option<Arc<Dataset>>,
    opts: Option<&FitOptions>,
) -> Result<Fit> {
    let formula = formula.unwrap_or(&fit.formula);
    let data = data.unwrap_or_else(|| fit.data.clone());
    let opts = opts.unwrap_or(&fit.options);
    if *formula == fit.formula && data.fingerprint() == fit.matrices.fingerprint && *opts == fit.options {
        return Ok(fit.clone());
    }
    let mm = Arc::new(build_model_matrices(formula, &data, &fit.matrices.contrasts)?);
    let ev = Arc::new(DevianceEvaluator::new(&mm)?);
    let init = warm_start(fit, &mm);
    let result = optimize_with(&ev, &init, &vec![None; init.len()], opts)?;
    Ok(Fit {
        formula: formula.clone(),
        data,
        matrices: mm,
        evaluator: ev,
        options: opts.clone(),
        result,
    })
}

/// Starting θ for `mm` taken from the relative covariance of `fit`; columns
/// the old model lacks start at unit variance and zero covariance.
pub fn warm_start(fit: &Fit, mm: &ModelMatrices) -> Vec<f64> {
    let lambdas = fit.factor_lambdas();
    let labels = fit.factor_labels();
    let rel_cov: Vec<DMatrix<f64>> = lambdas.iter().map(|l| l * l.transpose()).collect();
    let lookup = |group: &str, label: &str| -> Option<(usize, usize)> {
        let f = fit.matrices.factors.iter().position(|g| g.name == group)?;
        let i = labels[f].iter().position(|l| l == label)?;
        Some((f, i))
    };
    let mut theta = Vec::new();
    for blk in &mm.blocks {
        let d = blk.d;
        let pos: Vec<Option<(usize, usize)>> = blk.labels.iter().map(|l| lookup(&blk.group, l)).collect();
        let sub = DMatrix::from_fn(d, d, |i, j| match (pos[i], pos[j]) {
            (Some((fa, a)), Some((fb, b))) if fa == fb => rel_cov[fa][(a, b)],
            _ if i == j => 1.0,
            _ => 0.0,
        });
        let l = semidefinite_cholesky(&sub);
        theta.extend(crate::covparam::lambda_to_theta(&l));
    }
    theta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Column;
    use crate::formula::parse_formula;

    fn one_way(y: &[f64], per: usize) -> Arc<Dataset> {
        let g: Vec<String> = (0..y.len()).map(|i| format!("g{}", i / per)).collect();
        Arc::new(Dataset::new(vec![Column::numeric("Y", y.to_vec()), Column::factor("G", &g)]).unwrap())
    }

    #[test]
    fn one_way_reml_matches_anova() {
        let data = one_way(&[0.5, 1.5, 1.5, 2.5, 2.5, 3.5], 2);
        let f = parse_formula("Y ~ 1 + (1 | G)").unwrap();
        let fit = fit(&f, data, &ContrastScheme::default(), &FitOptions::default()).unwrap();
        let r = &fit.result;
        assert!(r.converged);
        let s2 = r.sigma * r.sigma;
        let sb2 = s2 * r.theta[0] * r.theta[0];
        assert!((s2 - 0.5).abs() < 1e-6, "sigma2 {}", s2);
        assert!((sb2 - 0.75).abs() < 1e-6, "sigma_b2 {}", sb2);
        assert!(!r.singular);
    }

    #[test]
    fn msb_below_msw_hits_the_boundary() {
        // group means identical: MSB = 0
        let data = one_way(&[1.0, 3.0, 3.0, 1.0, 2.0, 2.0], 2);
        let f = parse_formula("Y ~ 1 + (1 | G)").unwrap();
        let fit = fit(&f, data, &ContrastScheme::default(), &FitOptions::default()).unwrap();
        assert_eq!(fit.result.theta[0], 0.0);
        assert!(fit.result.singular);
        assert_eq!(fit.result.boundary_flags, vec![true]);
    }

    #[test]
    fn refit_identity_and_warm_start() {
        let data = one_way(&[0.5, 1.5, 1.5, 2.5, 2.5, 3.5, 0.1, 0.9], 2);
        let f = parse_formula("Y ~ 1 + (1 | G)").unwrap();
        let a = fit(&f, data, &ContrastScheme::default(), &FitOptions::default()).unwrap();
        let b = refit(&a, None, None, None).unwrap();
        assert_eq!(a.result, b.result);

        let ml = FitOptions::with_criterion(Criterion::Ml);
        let c = refit(&a, None, None, Some(&ml)).unwrap();
        assert_eq!(c.result.criterion, Criterion::Ml);
        let again = optimize(&a.matrices, &a.result.theta, &FitOptions::default()).unwrap();
        assert!((again.deviance - a.result.deviance).abs() < 1e-6);
        assert!(again.deviance <= a.result.deviance + 1e-12);
    }

    #[test]
    fn empty_random_structure_is_an_error() {
        let data = one_way(&[0.5, 1.5, 1.5, 2.5], 2);
        let f = parse_formula("Y ~ 1").unwrap();
        assert!(matches!(
            fit(&f, data, &ContrastScheme::default(), &FitOptions::default()),
            Err(Error::NoRandomTerms)
        ));
    }

    #[test]
    fn budget_exhaustion_is_reported_not_fatal() {
        let data = one_way(&[0.5, 1.5, 1.5, 2.5, 2.5, 3.5, 0.1, 0.9], 2);
        let f = parse_formula("Y ~ 1 + (1 | G)").unwrap();
        let opts = FitOptions {
            max_evals: Some(3),
            ..Default::default()
        };
        let r = fit(&f, data, &ContrastScheme::default(), &opts).unwrap().result;
        assert!(!r.converged);
        assert!(r.deviance.is_finite());
    }
}
