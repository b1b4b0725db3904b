//! Dense primal simplex for small linear programs `max cᵀx, Ax ≤ b, x ≥ 0`
//! with `b ≥ 0`, so the slack basis is feasible from the start.
//! Bland's rule keeps the degenerate pivots (common here, `b` has zeros)
//! from cycling.

use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome<T> {
    Optimal { value: T, x: Vec<T> },
    Unbounded,
}

pub fn maximize<T: Scalar>(c: &[T], a: &Matrix<T>, b: &[T]) -> LpOutcome<T> {
    let m = a.rows();
    let n = a.cols();
    assert_eq!(c.len(), n);
    assert_eq!(b.len(), m);
    assert!(
        b.iter().all(|&v| v >= T::zero()),
        "slack basis must be feasible"
    );

    // tableau rows: [A | I | b], objective row: [-c | 0 | 0]
    let width = n + m + 1;
    let mut tab = vec![T::zero(); (m + 1) * width];
    for i in 0..m {
        for j in 0..n {
            tab[i * width + j] = a[(i, j)];
        }
        tab[i * width + n + i] = T::one();
        tab[i * width + width - 1] = b[i];
    }
    for j in 0..n {
        tab[m * width + j] = -c[j];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    let eps = T::epsilon() * T::lit(1e3);

    for _ in 0..10_000 {
        let entering = (0..n + m).find(|&j| tab[m * width + j] < -eps);
        let Some(e) = entering else { break };
        let mut leave: Option<(usize, T)> = None;
        for i in 0..m {
            let coef = tab[i * width + e];
            if coef > eps {
                let ratio = tab[i * width + width - 1] / coef;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - eps || ((ratio - lr).abs() <= eps && basis[i] < basis[li]) {
                            Some((i, ratio))
                        } else {
                            Some((li, lr))
                        }
                    }
                };
            }
        }
        let Some((r, _)) = leave else {
            return LpOutcome::Unbounded;
        };
        let piv = tab[r * width + e];
        for j in 0..width {
            tab[r * width + j] /= piv;
        }
        for i in 0..=m {
            if i == r {
                continue;
            }
            let f = tab[i * width + e];
            if f != T::zero() {
                for j in 0..width {
                    let v = tab[r * width + j];
                    tab[i * width + j] -= f * v;
                }
            }
        }
        basis[r] = e;
    }

    let mut x = vec![T::zero(); n];
    for (i, &bv) in basis.iter().enumerate() {
        if bv < n {
            x[bv] = tab[i * width + width - 1];
        }
    }
    LpOutcome::Optimal {
        value: tab[m * width + width - 1],
        x,
    }
}

/// Largest margin `t` such that some `x ≥ 0` with `Σx ≤ 1` has `Mx ≥ t·1`,
/// capped at 1. Positive iff `Mx > 0` is strictly feasible over `x ≥ 0`.
pub fn strict_feasibility_margin<T: Scalar>(mat: &Matrix<T>) -> T {
    let k = mat.rows();
    let n = mat.cols();
    // variables (x_1..x_n, t); rows: t - (Mx)_i ≤ 0, Σx ≤ 1, t ≤ 1
    let mut a = Matrix::zeros(k + 2, n + 1);
    for i in 0..k {
        for j in 0..n {
            a[(i, j)] = -mat[(i, j)];
        }
        a[(i, n)] = T::one();
    }
    for j in 0..n {
        a[(k, j)] = T::one();
    }
    a[(k + 1, n)] = T::one();
    let mut b = vec![T::zero(); k + 2];
    b[k] = T::one();
    b[k + 1] = T::one();
    let mut c = vec![T::zero(); n + 1];
    c[n] = T::one();
    match maximize(&c, &a, &b) {
        LpOutcome::Optimal { value, .. } => value,
        LpOutcome::Unbounded => T::one(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_lp() {
        // max 3x + 5y, x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18 -> 36 at (2, 6)
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 2.0]]).unwrap();
        match maximize(&[3.0, 5.0], &a, &[4.0, 12.0, 18.0]) {
            LpOutcome::Optimal { value, x } => {
                assert!((value - 36.0f64).abs() < 1e-12);
                assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 6.0).abs() < 1e-12);
            }
            LpOutcome::Unbounded => panic!("bounded problem"),
        }
    }

    #[test]
    fn unbounded_detected() {
        let a = Matrix::from_rows(&[vec![-1.0, 1.0]]).unwrap();
        assert_eq!(maximize(&[1.0, 0.0], &a, &[1.0]), LpOutcome::Unbounded);
    }

    #[test]
    fn margins() {
        let id: Matrix<f64> = Matrix::identity(3);
        assert!(strict_feasibility_margin(&id) > 0.3);
        let bad: Matrix<f64> = Matrix::from_rows(&[vec![1.0, -2.0], vec![-2.0, 1.0]]).unwrap();
        assert!(strict_feasibility_margin(&bad).abs() < 1e-12);
    }
}
