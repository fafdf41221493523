//! Penalized least squares for a fixed θ and the profiled deviance.
//!
//! For relative covariance factor Λ(θ) the random-effects modes `u` and
//! fixed effects `β` minimize `‖y − Xβ − ZΛu‖² + ‖u‖²`. The bordered normal
//! equations are factored with the grouping factor of largest dimension
//! eliminated level by level (its block of `Λ'Z'ZΛ + I` is block diagonal),
//! leaving a dense Schur complement over the remaining random effects, the
//! fixed effects and the response.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covparam::{fill_lower, ThetaLayout};
use crate::design::ModelMatrices;
use crate::error::{Error, Result};
use crate::linalg::{backward_solve_transposed, cholesky_in_place};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Criterion {
    #[serde(rename = "ML")]
    Ml,
    #[serde(rename = "REML")]
    Reml,
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Ml => "ML",
            Criterion::Reml => "REML",
        })
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml" => Ok(Criterion::Ml),
            "reml" => Ok(Criterion::Reml),
            other => Err(Error::Config(format!("unknown criterion `{}`", other))),
        }
    }
}

/// Everything the PLS solve yields at one θ.
#[derive(Debug, Clone)]
pub struct PlsSolution {
    pub deviance: f64,
    /// log det(Λ'Z'ZΛ + I)
    pub ld_l2: f64,
    /// log det of the fixed-effects block after eliminating random effects
    pub ld_rx2: f64,
    /// Penalized residual sum of squares.
    pub pwrss: f64,
    pub beta: Vec<f64>,
    /// Lower Cholesky factor of the fixed-effects block.
    pub rx: DMatrix<f64>,
    /// True when the ridge retry was needed.
    pub ridged: bool,
}

const SYRK_BLOCK: usize = 64;

/// Per-factor geometry of the rest (non-eliminated) coordinates.
#[derive(Debug, Clone)]
struct RestFactor {
    factor: usize,
    offset: usize,
    dim: usize,
    levels: usize,
}

/// θ-independent cross products, computed once per model.
#[derive(Debug, Clone)]
pub struct DevianceEvaluator {
    layout: ThetaLayout,
    n: usize,
    p: usize,
    /// Factor eliminated level by level.
    elim: Option<usize>,
    elim_dim: usize,
    elim_levels: usize,
    rest: Vec<RestFactor>,
    rest_q: usize,
    /// Dimension of the dense part: rest random effects + p + 1.
    m: usize,
    /// Per level of the eliminated factor: Z_j'Z_j (D × D).
    a0: Vec<DMatrix<f64>>,
    /// Per level of the eliminated factor: Z_j'W_j (D × m).
    c0: Vec<DMatrix<f64>>,
    /// W'W over the dense coordinates (m × m).
    r0: DMatrix<f64>,
    /// Factor dims and the blocks (offset within factor, θ offset, d).
    factor_blocks: Vec<Vec<(usize, usize, usize)>>,
    factor_dims: Vec<usize>,
}

impl DevianceEvaluator {
    pub fn new(mm: &ModelMatrices) -> Result<Self> {
        let n = mm.n();
        let p = mm.p();
        if mm.x.nrows() != n {
            return Err(Error::Dimension("X and y row counts differ".into()));
        }
        let layout = ThetaLayout::new(&mm.block_dims());
        let nf = mm.factors.len();

        let factor_dims: Vec<usize> = mm.factors.iter().map(|f| f.dim).collect();
        let mut factor_blocks = vec![Vec::new(); nf];
        for (b, blk) in mm.blocks.iter().enumerate() {
            if blk.values.nrows() != n {
                return Err(Error::Dimension("Z block row count differs from y".into()));
            }
            factor_blocks[blk.factor].push((blk.offset, layout.offset(b), blk.d));
        }

        // Per-row dense values of each factor (D_f values).
        let row_values: Vec<DMatrix<f64>> = (0..nf)
            .map(|f| {
                let mut v = DMatrix::zeros(n, factor_dims[f]);
                for &b in &mm.factors[f].blocks {
                    let blk = &mm.blocks[b];
                    for c in 0..blk.d {
                        for i in 0..n {
                            v[(i, blk.offset + c)] = blk.values[(i, c)];
                        }
                    }
                }
                v
            })
            .collect();

        let elim = (0..nf).max_by_key(|&f| (mm.factors[f].n_levels() * factor_dims[f], std::cmp::Reverse(f)));
        let mut rest = Vec::new();
        let mut rest_q = 0;
        for f in 0..nf {
            if Some(f) == elim {
                continue;
            }
            let levels = mm.factors[f].n_levels();
            rest.push(RestFactor {
                factor: f,
                offset: rest_q,
                dim: factor_dims[f],
                levels,
            });
            rest_q += levels * factor_dims[f];
        }
        let m = rest_q + p + 1;

        // Sparse row of W: (index, value) pairs.
        let w_row = |i: usize, buf: &mut Vec<(usize, f64)>| {
            buf.clear();
            for rf in &rest {
                let lvl = mm.factors[rf.factor].codes[i];
                let base = rf.offset + lvl * rf.dim;
                for c in 0..rf.dim {
                    buf.push((base + c, row_values[rf.factor][(i, c)]));
                }
            }
            for j in 0..p {
                buf.push((rest_q + j, mm.x[(i, j)]));
            }
            buf.push((m - 1, mm.y[i]));
        };

        let mut r0 = DMatrix::zeros(m, m);
        let mut buf = Vec::new();
        for i in 0..n {
            w_row(i, &mut buf);
            for &(a, va) in &buf {
                for &(b, vb) in &buf {
                    if b <= a {
                        r0[(a, b)] += va * vb;
                    }
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                r0[(b, a)] = r0[(a, b)];
            }
        }

        let (elim_dim, elim_levels, a0, c0) = match elim {
            Some(e) => {
                let d = factor_dims[e];
                let k = mm.factors[e].n_levels();
                let mut a0 = vec![DMatrix::zeros(d, d); k];
                let mut c0 = vec![DMatrix::zeros(d, m); k];
                for i in 0..n {
                    let lvl = mm.factors[e].codes[i];
                    let z = row_values[e].row(i);
                    for a in 0..d {
                        for b in 0..d {
                            a0[lvl][(a, b)] += z[a] * z[b];
                        }
                    }
                    w_row(i, &mut buf);
                    for a in 0..d {
                        for &(col, v) in &buf {
                            c0[lvl][(a, col)] += z[a] * v;
                        }
                    }
                }
                (d, k, a0, c0)
            }
            None => (0, 0, Vec::new(), Vec::new()),
        };

        Ok(DevianceEvaluator {
            layout,
            n,
            p,
            elim,
            elim_dim,
            elim_levels,
            rest,
            rest_q,
            m,
            a0,
            c0,
            r0,
            factor_blocks,
            factor_dims,
        })
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Assembles the D_f × D_f block-diagonal Λ of every grouping factor.
    pub fn factor_lambdas(&self, theta: &[f64]) -> Vec<DMatrix<f64>> {
        self.factor_dims
            .iter()
            .zip(&self.factor_blocks)
            .map(|(&dim, blocks)| {
                let mut lam = DMatrix::zeros(dim, dim);
                for &(off, toff, d) in blocks {
                    let mut sub = DMatrix::zeros(d, d);
                    fill_lower(&mut sub, &theta[toff..toff + d * (d + 1) / 2]);
                    lam.view_mut((off, off), (d, d)).copy_from(&sub);
                }
                lam
            })
            .collect()
    }

    pub fn deviance(&self, theta: &[f64], criterion: Criterion) -> Result<f64> {
        self.solve(theta, criterion).map(|s| s.deviance)
    }

    pub fn solve(&self, theta: &[f64], criterion: Criterion) -> Result<PlsSolution> {
        self.layout.check_bounds(theta)?;
        self.solve_unchecked(theta, criterion)
    }

    /// Negative diagonal entries are accepted: flipping the sign of a column
    /// of Λ leaves ΛΛ' and hence every quantity here unchanged.
    pub(crate) fn deviance_unchecked(&self, theta: &[f64], criterion: Criterion) -> Result<f64> {
        self.solve_unchecked(theta, criterion).map(|s| s.deviance)
    }

    fn solve_unchecked(&self, theta: &[f64], criterion: Criterion) -> Result<PlsSolution> {
        if theta.len() != self.layout.len() {
            return Err(Error::Dimension(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                self.layout.len()
            )));
        }
        let lambdas = self.factor_lambdas(theta);
        let m = self.m;

        // Eliminate the largest factor level by level.
        let mut ld_l2 = 0.0;
        let mut s = self.r0.clone();
        if let Some(e) = self.elim {
            let d = self.elim_dim;
            let lam = &lambdas[e];
            let lam_t = lam.transpose();
            // Column j·d + a holds row a of G_j = L_j⁻¹ Λ' C_j.
            let mut g = DMatrix::zeros(m, self.elim_levels * d);
            let mut b = DMatrix::zeros(d, d);
            let mut tmp = DMatrix::zeros(d, d);
            let mut lc = DMatrix::zeros(d, m);
            for j in 0..self.elim_levels {
                // B_j = Λ' A_j Λ + I
                tmp.gemm(1.0, &self.a0[j], lam, 0.0);
                b.gemm(1.0, &lam_t, &tmp, 0.0);
                for a in 0..d {
                    b[(a, a)] += 1.0;
                }
                if !cholesky_in_place(&mut b) {
                    return Err(Error::NotPositiveDefinite);
                }
                for a in 0..d {
                    ld_l2 += 2.0 * b[(a, a)].ln();
                }
                lc.gemm(1.0, &lam_t, &self.c0[j], 0.0);
                let bl = b.as_slice();
                let lcs = lc.as_mut_slice();
                let gs = g.as_mut_slice();
                for col in 0..m {
                    let v = &mut lcs[col * d..col * d + d];
                    for a in 0..d {
                        let mut acc = v[a];
                        for c in 0..a {
                            acc -= bl[c * d + a] * v[c];
                        }
                        let x = acc / bl[a * d + a];
                        v[a] = x;
                        gs[(j * d + a) * m + col] = x;
                    }
                }
            }
            // S = R0 − G'G, lower triangle by column blocks, then mirrored.
            let gt = g.transpose();
            let mut c = 0;
            while c < m {
                let w = SYRK_BLOCK.min(m - c);
                s.view_mut((c, c), (m - c, w))
                    .gemm(-1.0, &g.rows(c, m - c), &gt.columns(c, w), 1.0);
                c += w;
            }
            for j in 0..m {
                for i in j + 1..m {
                    s[(j, i)] = s[(i, j)];
                }
            }
        }

        // Congruence with T = blockdiag(I ⊗ Λ_f, I_p, 1) on the rest factors.
        for rf in &self.rest {
            let lam = &lambdas[rf.factor];
            let lam_t = lam.transpose();
            for lvl in 0..rf.levels {
                let start = rf.offset + lvl * rf.dim;
                let cols = s.columns(start, rf.dim) * lam;
                s.columns_mut(start, rf.dim).copy_from(&cols);
            }
            for lvl in 0..rf.levels {
                let start = rf.offset + lvl * rf.dim;
                let rows = &lam_t * s.rows(start, rf.dim);
                s.rows_mut(start, rf.dim).copy_from(&rows);
            }
        }
        for i in 0..self.rest_q {
            s[(i, i)] += 1.0;
        }

        let mut ridged = false;
        let mut l = s.clone();
        if !cholesky_in_place(&mut l) {
            let scale = (0..m - 1).map(|i| s[(i, i)].abs()).fold(0.0, f64::max);
            for i in 0..m - 1 {
                s[(i, i)] += 1e-10 * scale.max(1.0);
            }
            l = s;
            ridged = true;
            if !cholesky_in_place(&mut l) {
                return Err(Error::NotPositiveDefinite);
            }
        }

        for i in 0..self.rest_q {
            ld_l2 += 2.0 * l[(i, i)].ln();
        }
        let p = self.p;
        let mut ld_rx2 = 0.0;
        for i in self.rest_q..self.rest_q + p {
            ld_rx2 += 2.0 * l[(i, i)].ln();
        }
        let ryy = l[(m - 1, m - 1)];
        let pwrss = ryy * ryy;

        let mut rx = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in 0..=i {
                rx[(i, j)] = l[(self.rest_q + i, self.rest_q + j)];
            }
        }
        let mut beta: Vec<f64> = (0..p).map(|j| l[(m - 1, self.rest_q + j)]).collect();
        backward_solve_transposed(&rx, &mut beta);

        let n = self.n as f64;
        let deviance = match criterion {
            Criterion::Ml => ld_l2 + n * (1.0 + (2.0 * std::f64::consts::PI * pwrss / n).ln()),
            Criterion::Reml => {
                let nmp = n - p as f64;
                ld_l2 + ld_rx2 + nmp * (1.0 + (2.0 * std::f64::consts::PI * pwrss / nmp).ln())
            }
        };
        Ok(PlsSolution {
            deviance,
            ld_l2,
            ld_rx2,
            pwrss,
            beta,
            rx,
            ridged,
        })
    }
}

/// Profiled deviance of `matrices` at `theta`.
pub fn profiled_deviance(theta: &[f64], matrices: &ModelMatrices, criterion: Criterion) -> Result<f64> {
    DevianceEvaluator::new(matrices)?.deviance(theta, criterion)
}
