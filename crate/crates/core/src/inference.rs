//! Likelihood-ratio tests, information criteria and fixed-effects summaries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::design::ModelMatrices;
use crate::error::{Error, Result};
use crate::fitter::{refit, Criterion, Fit, FitOptions};
use crate::formula::{Component, FormulaAst};

/// Upper-tail probability of the central χ² distribution with `df`
/// degrees of freedom. With `df = 0` the comparison is degenerate: the
/// result is 1 for a zero statistic and 0 otherwise.
pub fn chisq_p_value(chisq: f64, df: usize) -> f64 {
    if df == 0 {
        return if chisq <= 0.0 { 1.0 } else { 0.0 };
    }
    if chisq <= 0.0 {
        return 1.0;
    }
    if chisq.is_infinite() {
        return 0.0;
    }
    statrs::function::gamma::gamma_ur(df as f64 / 2.0, chisq / 2.0).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub chisq: f64,
    pub df: usize,
    pub p_value: f64,
    pub criterion: Criterion,
    /// Both models were refitted under ML before comparison.
    pub refit_ml: bool,
    /// Zero degrees of freedom.
    pub degenerate: bool,
    pub deviance_small: f64,
    pub deviance_large: f64,
}

/// Column-level nesting: every fixed-effects column, random-effects column
/// and correlation pair of `small` also appears in `large`.
pub fn check_nested(small: &ModelMatrices, large: &ModelMatrices) -> Result<()> {
    let fixed_large: BTreeSet<&String> = large.x_labels.iter().collect();
    if let Some(l) = small.x_labels.iter().find(|l| !fixed_large.contains(l)) {
        return Err(Error::NotNested(format!("fixed-effects column `{}` missing from the larger model", l)));
    }
    let (cols_s, pairs_s) = random_structure(small);
    let (cols_l, pairs_l) = random_structure(large);
    if let Some(c) = cols_s.difference(&cols_l).next() {
        return Err(Error::NotNested(format!("random-effects column `{}|{}` missing from the larger model", c.1, c.0)));
    }
    if let Some(p) = pairs_s.difference(&pairs_l).next() {
        return Err(Error::NotNested(format!(
            "correlation `{}` ~ `{}` for `{}` missing from the larger model",
            p.1, p.2, p.0
        )));
    }
    Ok(())
}

type ColumnKey = (String, String);
type PairKey = (String, String, String);

fn random_structure(mm: &ModelMatrices) -> (BTreeSet<ColumnKey>, BTreeSet<PairKey>) {
    let mut cols = BTreeSet::new();
    let mut pairs = BTreeSet::new();
    for b in &mm.blocks {
        for (i, li) in b.labels.iter().enumerate() {
            cols.insert((b.group.clone(), li.clone()));
            for lj in &b.labels[..i] {
                let (a, c) = if li < lj { (li, lj) } else { (lj, li) };
                pairs.insert((b.group.clone(), a.clone(), c.clone()));
            }
        }
    }
    (cols, pairs)
}

/// Component-level nesting on formulas: fixed terms, random components per
/// grouping factor and within-term correlations.
pub fn formula_nested(small: &FormulaAst, large: &FormulaAst) -> bool {
    if small.response != large.response || (small.intercept && !large.intercept) {
        return false;
    }
    if !small.fixed.iter().all(|t| large.fixed.contains(t)) {
        return false;
    }
    let comps = |f: &FormulaAst| -> BTreeSet<(String, Component)> {
        f.random
            .iter()
            .flat_map(|r| r.components().into_iter().map(move |c| (r.group.clone(), c)))
            .collect()
    };
    let pairs = |f: &FormulaAst| -> BTreeSet<(String, Component, Component)> {
        let mut out = BTreeSet::new();
        for r in f.random.iter().filter(|r| r.correlated) {
            let cs = r.components();
            for i in 0..cs.len() {
                for j in 0..i {
                    let (a, b) = if cs[i] < cs[j] { (&cs[i], &cs[j]) } else { (&cs[j], &cs[i]) };
                    out.insert((r.group.clone(), a.clone(), b.clone()));
                }
            }
        }
        out
    };
    comps(small).is_subset(&comps(large)) && pairs(small).is_subset(&pairs(large))
}

/// Likelihood-ratio test of `small` against `large`.
///
/// Models differing only in random effects are compared under REML when
/// both were fitted that way; otherwise both are refitted under ML.
pub fn lr_test(small: &Fit, large: &Fit) -> Result<LrtResult> {
    if small.matrices.fingerprint != large.matrices.fingerprint || small.formula.response != large.formula.response {
        return Err(Error::DataMismatch);
    }
    check_nested(&small.matrices, &large.matrices)?;
    let df = large
        .n_params()
        .checked_sub(small.n_params())
        .ok_or_else(|| Error::NotNested("smaller model has more parameters".into()))?;

    let same_fixed = small.matrices.x_labels == large.matrices.x_labels;
    let (cs, cl) = (small.result.criterion, large.result.criterion);
    let (ds, dl, criterion, refit_ml) = if cs == cl && (cs == Criterion::Ml || same_fixed) {
        (small.result.deviance, large.result.deviance, cs, false)
    } else {
        let ml = FitOptions {
            criterion: Criterion::Ml,
            ..small.options.clone()
        };
        let s = refit(small, None, None, Some(&ml))?;
        let mlopts = FitOptions {
            criterion: Criterion::Ml,
            ..large.options.clone()
        };
        let l = refit(large, None, None, Some(&mlopts))?;
        (s.result.deviance, l.result.deviance, Criterion::Ml, true)
    };
    let chisq = (ds - dl).max(0.0);
    Ok(LrtResult {
        chisq,
        df,
        p_value: chisq_p_value(chisq, df),
        criterion,
        refit_ml,
        degenerate: df == 0,
        deviance_small: ds,
        deviance_large: dl,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformationCriteria {
    pub aic: f64,
    pub bic: f64,
    /// p + |θ| + 1
    pub k: usize,
    pub n: usize,
}

pub fn information_criteria_from(deviance: f64, k: usize, n: usize) -> InformationCriteria {
    InformationCriteria {
        aic: deviance + 2.0 * k as f64,
        bic: deviance + k as f64 * (n as f64).ln(),
        k,
        n,
    }
}

pub fn information_criteria(fit: &Fit) -> InformationCriteria {
    information_criteria_from(fit.result.deviance, fit.n_params(), fit.matrices.n())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffectRow {
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffectsTable {
    pub rows: Vec<FixedEffectRow>,
}

const WALD_Z: f64 = 1.96;

/// Estimates with standard errors from σ̂²(R_X'R_X)⁻¹ and 95% Wald intervals.
pub fn fixed_effects_table(fit: &Fit) -> Result<FixedEffectsTable> {
    let vcov = fit.result.beta_vcov();
    let mut rows = Vec::with_capacity(fit.result.beta.len());
    for (j, (&est, label)) in fit.result.beta.iter().zip(&fit.matrices.x_labels).enumerate() {
        let var = vcov[(j, j)];
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let se = var.sqrt();
        rows.push(FixedEffectRow {
            term: label.clone(),
            estimate: est,
            std_error: se,
            t_value: est / se,
            ci_lower: est - WALD_Z * se,
            ci_upper: est + WALD_Z * se,
        });
    }
    Ok(FixedEffectsTable { rows })
}
