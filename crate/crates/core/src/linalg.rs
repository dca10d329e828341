//! Small dense helpers on top of nalgebra.
//!
//! Matrix norms: gradient and deviation reports use the Frobenius norm
//! everywhere; the operator norm appears only where a bound is stated in it
//! (sub-Gaussian proxies, the moment bound, the init range).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .fold(0.0_f64, |a, &b| a.max(b))
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn check_square(name: &str, m: &DMatrix<f64>, dim: usize) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::validation(format!(
            "{name} must be {dim}x{dim}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub fn check_finite_matrix(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if let Some((idx, x)) = m.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        let (r, c) = (idx % m.nrows(), idx / m.nrows());
        return Err(Error::validation(format!(
            "{name} has non-finite entry {x} at ({r}, {c})"
        )));
    }
    Ok(())
}

pub fn check_finite_vector(name: &str, v: &DVector<f64>) -> Result<()> {
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(Error::validation(format!(
            "{name} has non-finite entry {x} at index {i}"
        )));
    }
    Ok(())
}

/// Row-major nested vectors, the layout used in config files.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::validation("matrix rows have unequal lengths"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norms_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -4.0]));
        assert!((frobenius(&m) - 5.0).abs() < 1e-15);
        assert!((op_norm(&m) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let m = from_rows(&rows).unwrap();
        assert_eq!(m[(1, 0)], 3.0);
        assert_eq!(to_rows(&m), rows);
        assert!(from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
