//! Small dense helpers on column-major `DMatrix<f64>`.

use nalgebra::DMatrix;

const CHOL_BLOCK: usize = 64;

/// In-place lower Cholesky factorization. Returns `false` if a pivot is not
/// strictly positive. The strict upper triangle is left untouched.
pub(crate) fn cholesky_in_place(a: &mut DMatrix<f64>) -> bool {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut k = 0;
    while k < n {
        let nb = CHOL_BLOCK.min(n - k);
        if !factor_panel(a.as_mut_slice(), n, k, nb) {
            return false;
        }
        let rest = n - k - nb;
        if rest > 0 {
            // Trailing update A22 -= P P' on the lower triangle, one column block at a time.
            let p = a.view((k + nb, k), (rest, nb)).clone_owned();
            let pt = p.transpose();
            let mut c = 0;
            while c < rest {
                let w = CHOL_BLOCK.min(rest - c);
                a.view_mut((k + nb + c, k + nb + c), (rest - c, w)).gemm(
                    -1.0,
                    &p.rows(c, rest - c),
                    &pt.columns(c, w),
                    1.0,
                );
                c += w;
            }
        }
        k += nb;
    }
    true
}

/// Left-looking factorization of columns `k..k + nb`, rows `k..n`, assuming
/// contributions from columns before `k` are already subtracted.
fn factor_panel(data: &mut [f64], n: usize, k: usize, nb: usize) -> bool {
    for j in k..k + nb {
        for c in k..j {
            let ljc = data[c * n + j];
            if ljc == 0.0 {
                continue;
            }
            let (left, right) = data.split_at_mut(j * n);
            let src = &left[c * n + j..c * n + n];
            let dst = &mut right[j..n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d -= ljc * s;
            }
        }
        let piv = data[j * n + j];
        if !(piv > 0.0) || !piv.is_finite() {
            return false;
        }
        let r = piv.sqrt();
        data[j * n + j] = r;
        let inv = 1.0 / r;
        for v in &mut data[j * n + j + 1..j * n + n] {
            *v *= inv;
        }
    }
    true
}

/// Solves `L' x = b` in place for lower-triangular `l`.
pub(crate) fn backward_solve_transposed(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    for j in (0..n).rev() {
        let mut acc = b[j];
        for i in j + 1..n {
            acc -= l[(i, j)] * b[i];
        }
        b[j] = acc / l[(j, j)];
    }
}

/// Lower Cholesky factor of a symmetric positive semidefinite matrix,
/// with columns for (numerically) zero pivots set exactly to zero.
pub(crate) fn semidefinite_cholesky(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let tol = scale * 1e-12;
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tol {
            continue;
        }
        let r = d.sqrt();
        l[(j, j)] = r;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / r;
        }
    }
    l
}

/// Pivoted Cholesky of a PSD matrix: returns `F` (n × n, columns beyond the
/// numerical rank exactly zero) with `F F' = A` up to rounding, plus the rank.
/// Fails when a negative pivot below tolerance shows `A` is not PSD.
pub(crate) fn pivoted_cholesky(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize), String> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let tol = scale * 1e-12;
    let mut work = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut l = DMatrix::zeros(n, n);
    let mut rank = 0;
    for j in 0..n {
        // Choose the largest remaining diagonal.
        let (pj, dmax) = (j..n)
            .map(|i| (i, work[(i, i)]))
            .fold((j, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if dmax <= tol {
            if dmax < -1e-8 * scale.max(1.0) {
                return Err(format!("negative pivot {:e}", dmax));
            }
            break;
        }
        work.swap_rows(j, pj);
        work.swap_columns(j, pj);
        l.swap_rows(j, pj);
        perm.swap(j, pj);
        let r = dmax.sqrt();
        l[(j, j)] = r;
        for i in j + 1..n {
            l[(i, j)] = work[(i, j)] / r;
        }
        for c in j + 1..n {
            for i in c..n {
                let v = work[(i, c)] - l[(i, j)] * l[(c, j)];
                work[(i, c)] = v;
                work[(c, i)] = v;
            }
        }
        rank += 1;
    }
    // Undo the permutation on rows: A = P' L L' P.
    let mut f = DMatrix::zeros(n, n);
    for (row, &orig) in perm.iter().enumerate() {
        for c in 0..n {
            f[(orig, c)] = l[(row, c)];
        }
    }
    Ok((f, rank))
}

/// Singular values in descending order.
pub(crate) fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_matches_nalgebra() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0]);
        let mut l = a.clone();
        assert!(cholesky_in_place(&mut l));
        let want = a.clone().cholesky().unwrap().l();
        for i in 0..3 {
            for j in 0..=i {
                assert_relative_eq!(l[(i, j)], want[(i, j)], epsilon = 1e-12);
            }
        }
        let mut b = vec![1.0, 2.0, 3.0];
        let mut fb = nalgebra::DVector::from_vec(b.clone());
        want.solve_lower_triangular_mut(&mut fb);
        b.copy_from_slice(fb.as_slice());
        backward_solve_transposed(&want, &mut b);
        let x = nalgebra::DVector::from_vec(b);
        assert_relative_eq!(a * x, nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]), epsilon = 1e-12);

        let mut bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(!cholesky_in_place(&mut bad));
    }

    #[test]
    fn blocked_cholesky_on_a_large_matrix() {
        let n = 2 * CHOL_BLOCK + 37;
        let g = DMatrix::from_fn(n, n + 5, |i, j| (((i * 7 + j * 13) % 23) as f64 - 11.0) / 11.0);
        let a = &g * g.transpose() + DMatrix::identity(n, n);
        let mut l = a.clone();
        l[(0, n - 1)] = 42.0;
        assert!(cholesky_in_place(&mut l));
        assert_eq!(l[(0, n - 1)], 42.0);
        let want = a.cholesky().unwrap().l();
        for j in 0..n {
            for i in j..n {
                assert_relative_eq!(l[(i, j)], want[(i, j)], epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn pivoted_factor_of_rank_one() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (f, rank) = pivoted_cholesky(&a).unwrap();
        assert_eq!(rank, 1);
        assert_relative_eq!(&f * f.transpose(), a, epsilon = 1e-14);
        assert_eq!(f[(0, 1)], 0.0);
        assert_eq!(f[(1, 1)], 0.0);

        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 4.0, 2.0, 0.0, 2.0, 1.0]);
        let (f, rank) = pivoted_cholesky(&b).unwrap();
        assert_eq!(rank, 2);
        assert_relative_eq!(&f * f.transpose(), b, epsilon = 1e-14);

        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(pivoted_cholesky(&neg).is_err());
    }

    #[test]
    fn semidefinite_factor_zeroes_dead_columns() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = semidefinite_cholesky(&a);
        assert_relative_eq!(&l * l.transpose(), a, epsilon = 1e-14);
        assert_eq!(l[(1, 1)], 0.0);
    }
}
