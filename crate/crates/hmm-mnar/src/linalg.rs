//! Tiny dense linear-algebra helpers for the solver internals.
//!
//! Everything here works on row-major `&[f64]` slices. Problem sizes are
//! small (IRLS/Newton normal equations up to ~10 unknowns, observed-information
//! matrices up to ~100), so simple textbook algorithms are the right tool.

/// Solve the symmetric positive-definite system `a x = b` in place via
/// Cholesky. `a` is n x n row-major and is destroyed; on success `b` holds x.
///
/// Returns `Err(())` when a pivot collapses (matrix not positive definite to
/// working precision); callers decide how to surface that.
pub(crate) fn cholesky_solve(a: &mut [f64], b: &mut [f64]) -> Result<(), ()> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    // Factor: a = L L^T, storing L in the lower triangle.
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(());
                }
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    // Forward substitution: L y = b.
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= a[i * n + k] * b[k];
        }
        b[i] = sum / a[i * n + i];
    }
    // Back substitution: L^T x = y.
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in i + 1..n {
            sum -= a[k * n + i] * b[k];
        }
        b[i] = sum / a[i * n + i];
    }
    Ok(())
}

/// Invert a general n x n matrix by Gauss-Jordan with partial pivoting.
///
/// Returns the inverse, or `Err(column)` identifying the column whose pivot
/// degenerated — callers map that index back to a parameter name.
pub(crate) fn invert(a: &[f64], n: usize) -> Result<Vec<f64>, usize> {
    debug_assert_eq!(a.len(), n * n);
    let mut work = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        // Partial pivot: largest magnitude in this column at or below the diagonal.
        let mut pivot_row = col;
        let mut pivot_val = work[col * n + col].abs();
        for row in col + 1..n {
            let v = work[row * n + col].abs();
            if v > pivot_val {
                pivot_row = row;
                pivot_val = v;
            }
        }
        if !(pivot_val > 0.0) || !pivot_val.is_finite() {
            return Err(col);
        }
        if pivot_row != col {
            for j in 0..n {
                work.swap(col * n + j, pivot_row * n + j);
                inv.swap(col * n + j, pivot_row * n + j);
            }
        }
        let p = work[col * n + col];
        for j in 0..n {
            work[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = work[row * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                work[row * n + j] -= f * work[col * n + j];
                inv[row * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        // [[4,2],[2,3]] x = [2,5]  =>  x = (-0.5, 2).
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        let mut b = vec![2.0, 5.0];
        cholesky_solve(&mut a, &mut b).unwrap();
        assert!((b[0] + 0.5).abs() < 1e-14);
        assert!((b[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = vec![1.0, 2.0, 2.0, 1.0]; // eigenvalues 3, -1
        let mut b = vec![1.0, 1.0];
        assert!(cholesky_solve(&mut a, &mut b).is_err());
    }

    #[test]
    fn inverse_round_trip() {
        let a = vec![2.0, 1.0, 0.5, 1.0, 3.0, -1.0, 0.0, -1.0, 4.0];
        let inv = invert(&a, 3).unwrap();
        // a * inv = I
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * inv[k * 3 + j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((s - expect).abs() < 1e-12, "({i},{j}) = {s}");
            }
        }
    }

    #[test]
    fn inverse_reports_singular_column() {
        // Second column is a multiple of the first.
        let a = vec![1.0, 2.0, 2.0, 4.0];
        assert!(invert(&a, 2).is_err());
    }
}
