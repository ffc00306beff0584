//! Small dense factorizations used at mechanism scale.

use nalgebra::{DMatrix, DVector};

/// Relative threshold below which a pivot counts as zero.
const PIVOT_TOL: f64 = 1e-13;

/// Lower-triangular Cholesky factor of a small SPD matrix.
#[derive(Debug, Clone)]
pub struct DenseCholesky {
    l: DMatrix<f64>,
}

/// Factorizes `a = L Lᵀ`. On failure returns the index of the first pivot
/// that is not sufficiently positive.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DenseCholesky, usize> {
    let n = a.nrows();
    let scale = (0..n)
        .map(|i| a[(i, i)].abs())
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > PIVOT_TOL * scale) {
            return Err(j);
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(DenseCholesky { l })
}

impl DenseCholesky {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        x
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.l.nrows();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[(i, k)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }
}

/// LU-based solve of a small square system; `None` when numerically singular.
pub fn lu_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let lu = a.clone().full_piv_lu();
    let u = lu.u();
    let n = u.nrows();
    if n == 0 {
        return Some(b.clone());
    }
    let max = (0..n).map(|i| u[(i, i)].abs()).fold(0.0_f64, f64::max);
    let min = (0..n)
        .map(|i| u[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if !(min > PIVOT_TOL * 10.0 * max) {
        return None;
    }
    lu.solve(b)
}
