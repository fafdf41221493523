//! Relative Cholesky-factor parameterization of random-effects covariances.
//!
//! Each random-effects block of dimension `d` is parameterized by the
//! `d(d+1)/2` entries on and below the diagonal of a lower-triangular factor
//! Λ, filled column by column. The block covariance is `σ²ΛΛ'`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of covariance parameters for a `d`-dimensional correlated block.
pub fn count_params(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Maximal variance-covariance parameter count per random factor, summed
/// over factors. Each entry is the product of that factor's within-unit
/// level counts.
pub fn max_params_for_design(level_products: &[usize]) -> usize {
    level_products.iter().map(|&m| count_params(m)).sum()
}

/// As [`max_params_for_design`] plus one for the residual variance.
pub fn total_covariance_params(level_products: &[usize]) -> usize {
    max_params_for_design(level_products) + 1
}

/// Places θ on and below the diagonal in column-major order.
pub fn theta_to_lambda(theta: &[f64], d: usize) -> Result<DMatrix<f64>> {
    if theta.len() != count_params(d) {
        return Err(Error::Dimension(format!(
            "theta has {} entries, a {}-dimensional block needs {}",
            theta.len(),
            d,
            count_params(d)
        )));
    }
    let mut l = DMatrix::zeros(d, d);
    fill_lower(&mut l, theta);
    Ok(l)
}

/// Writes `theta` into the lower triangle of `l`, column by column.
pub(crate) fn fill_lower(l: &mut DMatrix<f64>, theta: &[f64]) {
    let d = l.nrows();
    let mut k = 0;
    for j in 0..d {
        for i in j..d {
            l[(i, j)] = theta[k];
            k += 1;
        }
    }
}

/// Inverse of [`theta_to_lambda`].
pub fn lambda_to_theta(lambda: &DMatrix<f64>) -> Vec<f64> {
    let d = lambda.nrows();
    let mut out = Vec::with_capacity(count_params(d));
    for j in 0..d {
        for i in j..d {
            out.push(lambda[(i, j)]);
        }
    }
    out
}

/// `σ²ΛΛ'`, symmetrized by construction.
pub fn lambda_to_cov(lambda: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    let d = lambda.nrows();
    let s2 = sigma * sigma;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let mut acc = 0.0;
            for k in 0..=j {
                acc += lambda[(i, k)] * lambda[(j, k)];
            }
            let v = s2 * acc;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Standard deviations and correlations of one covariance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSummary {
    pub sd: Vec<f64>,
    /// `None` where a standard deviation is zero and the correlation is undefined.
    pub cor: Vec<Vec<Option<f64>>>,
    pub singular: bool,
}

pub fn cov_to_sd_cor(cov: &DMatrix<f64>) -> Result<CovarianceSummary> {
    let d = cov.nrows();
    if cov.ncols() != d {
        return Err(Error::Dimension("covariance must be square".into()));
    }
    let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for i in 0..d {
        for j in 0..i {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::NotPsd(format!("asymmetric at ({}, {})", i, j)));
            }
        }
    }
    let sd: Vec<f64> = (0..d).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let mut singular = false;
    let mut cor = vec![vec![None; d]; d];
    for i in 0..d {
        for j in 0..d {
            if sd[i] == 0.0 || sd[j] == 0.0 {
                singular = true;
                continue;
            }
            cor[i][j] = Some(if i == j {
                1.0
            } else {
                (cov[(i, j)] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
            });
        }
    }
    if !singular && d > 1 {
        // ±1 correlations and other rank deficiencies.
        singular = is_rank_deficient(cov, DEFAULT_SINGULAR_TOL * DEFAULT_SINGULAR_TOL);
    }
    Ok(CovarianceSummary { sd, cor, singular })
}

/// Relative singular-value threshold below which a Λ block is singular.
pub const DEFAULT_SINGULAR_TOL: f64 = 1e-4;

fn is_rank_deficient(sym: &DMatrix<f64>, rel_tol: f64) -> bool {
    let ev = sym.clone().symmetric_eigenvalues();
    let max = ev.iter().cloned().fold(0.0f64, f64::max);
    max <= 0.0 || ev.iter().any(|&e| e < rel_tol * max)
}

/// Offsets of each block's parameters inside the concatenated θ vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThetaLayout {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    len: usize,
}

impl ThetaLayout {
    pub fn new(dims: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut len = 0;
        for &d in dims {
            offsets.push(len);
            len += count_params(d);
        }
        ThetaLayout {
            dims: dims.to_vec(),
            offsets,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn block<'a>(&self, theta: &'a [f64], b: usize) -> &'a [f64] {
        &theta[self.offsets[b]..self.offsets[b] + count_params(self.dims[b])]
    }

    pub fn offset(&self, b: usize) -> usize {
        self.offsets[b]
    }

    /// True for θ entries that sit on a diagonal of Λ.
    pub fn diagonal_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.len);
        for &d in &self.dims {
            for j in 0..d {
                for i in j..d {
                    mask.push(i == j);
                }
            }
        }
        mask
    }

    /// Zero for diagonal entries, −∞ elsewhere.
    pub fn lower_bounds(&self) -> Vec<f64> {
        self.diagonal_mask()
            .into_iter()
            .map(|diag| if diag { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    }

    /// Identity Λ for every block.
    pub fn initial(&self) -> Vec<f64> {
        self.diagonal_mask()
            .into_iter()
            .map(|diag| if diag { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn check_bounds(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.len {
            return Err(Error::Dimension(format!(
                "theta has {} entries, layout needs {}",
                theta.len(),
                self.len
            )));
        }
        for (k, (t, diag)) in theta.iter().zip(self.diagonal_mask()).enumerate() {
            if !t.is_finite() || (diag && *t < 0.0) {
                return Err(Error::Bounds(format!("theta[{}] = {}", k, t)));
            }
        }
        Ok(())
    }

    pub fn lambdas(&self, theta: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        (0..self.dims.len())
            .map(|b| theta_to_lambda(self.block(theta, b), self.dims[b]))
            .collect()
    }
}
