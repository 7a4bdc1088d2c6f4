//! Lawson–Hanson active-set nonnegative least squares for small dense problems.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    /// Indices held at zero by the nonnegativity constraint.
    pub active: Vec<usize>,
    pub iterations: usize,
}

/// Least-squares solve restricted to `columns`, through a pseudo-inverse so that
/// rank-deficient column subsets still return the minimum-norm solution.
fn restricted_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, columns: &[usize]) -> DVector<f64> {
    let sub = a.select_columns(columns);
    let svd = sub.svd(true, true);
    let eps = svd.singular_values.max() * 1e-12 * (a.nrows().max(a.ncols()) as f64);
    let sol = svd
        .solve(b, eps)
        .unwrap_or_else(|_| DVector::zeros(columns.len()));
    let mut full = DVector::zeros(a.ncols());
    for (k, &j) in columns.iter().enumerate() {
        full[j] = sol[k];
    }
    full
}

/// Minimises `‖A x − b‖²` subject to `x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> NnlsSolution {
    let p = a.ncols();
    let scale = a.amax().max(1e-300) * b.amax().max(1e-300);
    let tol = 1e-12 * scale * a.nrows() as f64;
    let mut x = DVector::zeros(p);
    let mut passive = vec![false; p];
    let max_iter = 30 * p.max(1);
    let mut iterations = 0;

    loop {
        let w = a.tr_mul(&(b - a * &x));
        let candidate = (0..p)
            .filter(|j| !passive[*j] && w[*j] > tol)
            .max_by(|i, j| w[*i].total_cmp(&w[*j]));
        let Some(j) = candidate else { break };
        if iterations >= max_iter {
            break;
        }
        passive[j] = true;

        loop {
            iterations += 1;
            let cols: Vec<usize> = (0..p).filter(|i| passive[*i]).collect();
            let s = restricted_lstsq(a, b, &cols);
            if cols.iter().all(|i| s[*i] > 0.0) {
                x = s;
                break;
            }
            let alpha = cols
                .iter()
                .filter(|i| s[**i] <= 0.0)
                .map(|i| x[*i] / (x[*i] - s[*i]))
                .fold(f64::INFINITY, f64::min);
            x += (&s - &x) * alpha;
            for i in cols {
                if x[i] <= 1e-15 * x.amax().max(1.0) {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if iterations >= max_iter || !passive.iter().any(|v| *v) {
                break;
            }
        }
    }

    NnlsSolution {
        active: (0..p).filter(|i| !passive[*i]).collect(),
        x,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_solution_when_positive() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0]);
        let truth = DVector::from_column_slice(&[2.0, 3.0]);
        let b = &a * &truth;
        let sol = nnls(&a, &b);
        assert!((sol.x - truth).amax() < 1e-12);
        assert!(sol.active.is_empty());
    }

    #[test]
    fn clamps_negative_coefficient() {
        // unconstrained optimum has a negative second coefficient
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = DVector::from_column_slice(&[3.0, 2.0, 1.0]);
        let sol = nnls(&a, &b);
        assert_eq!(sol.active, vec![1]);
        assert!((sol.x[0] - 2.0).abs() < 1e-12);
        assert_eq!(sol.x[1], 0.0);
        // KKT: gradient component on the clamped coordinate is nonnegative
        let grad = a.tr_mul(&(&a * &sol.x - &b));
        assert!(grad[1] >= -1e-12);
        assert!(grad[0].abs() < 1e-12);
    }

    #[test]
    fn all_zero_when_target_negative() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_column_slice(&[-1.0, -2.0]);
        let sol = nnls(&a, &b);
        assert_eq!(sol.x, DVector::zeros(2));
        assert_eq!(sol.active, vec![0, 1]);
    }
}
