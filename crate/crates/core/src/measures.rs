//! Token measures: Gaussian laws, empirical prompts, seeded samplers and a
//! sub-Gaussian tail diagnostic.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{check_finite_matrix, check_finite_vector, check_square};
use crate::rng::SeededStream;

/// Entrywise tolerance on `cov - cov^T`.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues in `[-PSD_TOL, 0)` are treated as exact zeros.
pub const PSD_TOL: f64 = 1e-10;

/// `N(mean, cov)` with a possibly rank-deficient covariance.
///
/// The sampling factor is pinned at construction: with `cov = Q diag(lambda) Q^T`
/// from the symmetric eigendecomposition, `factor = Q diag(sqrt(max(lambda, 0)))`
/// and a draw is `mean + factor * xi` with `xi ~ N(0, I)` read coordinate by
/// coordinate from the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        check_square("covariance", &cov, dim)?;
        check_finite_vector("mean", &mean)?;
        check_finite_matrix("covariance", &cov)?;
        for i in 0..dim {
            for j in 0..i {
                let gap = (cov[(i, j)] - cov[(j, i)]).abs();
                if gap > SYMMETRY_TOL {
                    return Err(Error::validation(format!(
                        "covariance is not symmetric: |C[{i},{j}] - C[{j},{i}]| = {gap:e}"
                    )));
                }
            }
        }
        let eig = SymmetricEigen::new(cov.clone());
        if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -PSD_TOL) {
            return Err(Error::validation(format!(
                "covariance is not positive semidefinite: eigenvalue {bad:e} < -{PSD_TOL:e}"
            )));
        }
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = eig.eigenvectors * DMatrix::from_diagonal(&roots);
        Ok(Self { mean, cov, factor })
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim)).expect("identity is PSD")
    }

    pub fn point_mass(mean: DVector<f64>) -> Result<Self> {
        let dim = mean.len();
        Self::new(mean, DMatrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn is_centered(&self) -> bool {
        self.mean.iter().all(|&x| x == 0.0)
    }

    /// One draw using an already-positioned generator.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi: Vec<f64> = (0..self.factor.ncols()).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = Vec::with_capacity(self.dim());
        push_affine(&self.mean, &self.factor, &xi, &mut out);
        DVector::from_vec(out)
    }

    pub fn sample(&self, n: usize, stream: SeededStream) -> Result<EmpiricalMeasure> {
        sample_gaussian(self, n, stream)
    }
}

/// Uniform measure on `L` tokens, stored row-major (token `k` is row `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    data: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("token dimension must be positive"));
        }
        if data.is_empty() {
            return Err(Error::validation("empty prompt: at least one token is required"));
        }
        if data.len() % dim != 0 {
            return Err(Error::validation(format!(
                "token buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::validation(format!(
                "token {} has a non-finite coordinate",
                i / dim
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::validation("tokens have unequal lengths"));
        }
        Self::new(dim, rows.concat())
    }

    pub fn from_matrix(tokens: &DMatrix<f64>) -> Result<Self> {
        let data = (0..tokens.nrows())
            .flat_map(|i| (0..tokens.ncols()).map(move |j| tokens[(i, j)]))
            .collect();
        Self::new(tokens.ncols(), data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn tokens(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.data)
    }

    /// `(L/(L+1)) mu_hat + (1/(L+1)) delta_z`: the prompt with `z` appended.
    pub fn with_token(&self, z: &[f64]) -> Result<Self> {
        if z.len() != self.dim {
            return Err(Error::validation(format!(
                "token of length {} appended to a prompt of dimension {}",
                z.len(),
                self.dim
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(z);
        Self::new(self.dim, data)
    }

    /// Rows permuted by `order` (a permutation of `0..len`).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        for &i in order {
            if i >= self.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::validation("not a permutation of the prompt rows"));
            }
        }
        if order.len() != self.len() {
            return Err(Error::validation("not a permutation of the prompt rows"));
        }
        let data = order.iter().flat_map(|&i| self.token(i).iter().copied()).collect();
        Self::new(self.dim, data)
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim);
        for z in self.tokens() {
            for (a, x) in acc.iter_mut().zip(z) {
                *a += x;
            }
        }
        acc / self.len() as f64
    }

    /// Unbiased sample covariance (`1/(L-1)`); zero for a single token.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.len();
        let m = self.mean();
        let mut acc = DMatrix::zeros(self.dim, self.dim);
        for z in self.tokens() {
            for i in 0..self.dim {
                for j in 0..self.dim {
                    acc[(i, j)] += (z[i] - m[i]) * (z[j] - m[j]);
                }
            }
        }
        if n > 1 {
            acc / (n - 1) as f64
        } else {
            acc
        }
    }
}

/// `n` i.i.d. draws of `g` from `stream`.
pub fn sample_gaussian(g: &GaussianMeasure, n: usize, stream: SeededStream) -> Result<EmpiricalMeasure> {
    sample_affine(g.mean(), g.factor(), n, stream)
}

/// `n` draws of `mean + factor * xi`, `xi ~ N(0, I_k)` with `k = factor.ncols()`.
pub fn sample_affine(
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
    n: usize,
    stream: SeededStream,
) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return Err(Error::validation("sample count must be at least 1"));
    }
    let dim = mean.len();
    if factor.nrows() != dim {
        return Err(Error::validation(format!(
            "factor has {} rows, mean has length {dim}",
            factor.nrows()
        )));
    }
    let k = factor.ncols();
    let mut rng = stream.rng();
    let mut xi = vec![0.0; k];
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        for x in xi.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        push_affine(mean, factor, &xi, &mut data);
    }
    EmpiricalMeasure::new(dim, data)
}

/// Appends `mean + factor * xi`, each coordinate as `mean_i + sum_j F_ij xi_j`
/// with the sum accumulated left to right.
fn push_affine(mean: &DVector<f64>, factor: &DMatrix<f64>, xi: &[f64], out: &mut Vec<f64>) {
    for i in 0..mean.len() {
        let dot: f64 = xi.iter().enumerate().map(|(j, x)| factor[(i, j)] * x).sum();
        out.push(mean[i] + dot);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TailRow {
    pub t: f64,
    pub empirical_tail: f64,
    pub bound: f64,
    pub stderr: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    pub n: usize,
    pub dim: usize,
    pub rows: Vec<TailRow>,
}

impl TailReport {
    pub fn any_violation(&self) -> bool {
        self.rows.iter().any(|r| r.violated)
    }
}

/// Compares `P(|z| >= t)` with the 1-sub-Gaussian envelope `exp(2d - t^2/16)`.
///
/// The envelope constants are specific to one maximal-inequality argument, so
/// this is a one-sided sanity check only. A violation is flagged when the
/// empirical tail exceeds the (clamped) bound by more than three binomial
/// standard errors evaluated at the bound.
pub fn subgaussian_tail_check(samples: &EmpiricalMeasure, d: usize, t_grid: &[f64]) -> Result<TailReport> {
    if d == 0 {
        return Err(Error::validation("dimension must be positive"));
    }
    if let Some(t) = t_grid.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(Error::validation(format!("tail grid point {t} must be finite and >= 0")));
    }
    let n = samples.len();
    let norms: Vec<f64> = samples
        .tokens()
        .map(|z| z.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let rows = t_grid
        .iter()
        .map(|&t| {
            let hits = norms.iter().filter(|&&r| r >= t).count();
            let empirical_tail = hits as f64 / n as f64;
            let bound = (2.0 * d as f64 - t * t / 16.0).exp();
            let p = bound.min(1.0);
            let stderr = (p * (1.0 - p) / n as f64).sqrt();
            TailRow {
                t,
                empirical_tail,
                bound,
                stderr,
                violated: empirical_tail > p + 3.0 * stderr,
            }
        })
        .collect();
    Ok(TailReport { n, dim: d, rows })
}
