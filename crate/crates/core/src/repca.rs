//! Principal components of each grouping factor's relative covariance factor.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::Fit;
use crate::linalg::singular_values;

pub const DEFAULT_DIM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPca {
    pub group: String,
    /// Random-effects columns of this factor, in Λ order.
    pub columns: Vec<String>,
    /// Singular values of Λ, descending (relative-SD units).
    pub singular_values: Vec<f64>,
    pub proportions: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub dim: usize,
    /// Number of singular values at or above `singular_tol` times the largest.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RePcaResult {
    pub tol: f64,
    pub singular_tol: f64,
    pub factors: Vec<FactorPca>,
}

impl RePcaResult {
    pub fn dims(&self) -> Vec<(String, usize)> {
        self.factors.iter().map(|f| (f.group.clone(), f.dim)).collect()
    }
}

/// Smallest `m` (1-based) with `cumulative[m-1] >= 1 - tol`; 0 for an empty
/// or all-zero sequence.
pub fn effective_dimensionality(cumulative: &[f64], tol: f64) -> usize {
    cumulative
        .iter()
        .position(|&c| c >= 1.0 - tol)
        .map_or(0, |i| i + 1)
}

/// Decomposes one factor's Λ.
pub fn factor_pca(
    group: &str,
    columns: Vec<String>,
    lambda: &DMatrix<f64>,
    tol: f64,
    singular_tol: f64,
) -> FactorPca {
    let sv = singular_values(lambda);
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let (proportions, cumulative) = if total > 0.0 {
        let props: Vec<f64> = sv.iter().map(|s| s * s / total).collect();
        let mut acc = 0.0;
        let mut cum: Vec<f64> = props
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        // Pin the final entry against accumulated roundoff.
        if let Some(last) = cum.last_mut() {
            *last = 1.0;
        }
        (props, cum)
    } else {
        (vec![0.0; sv.len()], vec![0.0; sv.len()])
    };
    let max = sv.first().copied().unwrap_or(0.0);
    let rank = if max > 0.0 {
        sv.iter().filter(|&&s| s >= singular_tol * max).count()
    } else {
        0
    };
    FactorPca {
        group: group.to_string(),
        columns,
        dim: effective_dimensionality(&cumulative, tol),
        singular_values: sv,
        proportions,
        cumulative,
        rank,
    }
}

pub fn repca(fit: &Fit, tol: f64) -> Result<RePcaResult> {
    if fit.matrices.blocks.is_empty() {
        return Err(Error::NoRandomTerms);
    }
    let labels = fit.factor_labels();
    let factors = fit
        .factor_lambdas()
        .iter()
        .zip(labels)
        .zip(&fit.matrices.factors)
        .map(|((lam, cols), f)| factor_pca(&f.name, cols, lam, tol, fit.options.singular_tol))
        .collect();
    Ok(RePcaResult {
        tol,
        singular_tol: fit.options.singular_tol,
        factors,
    })
}
