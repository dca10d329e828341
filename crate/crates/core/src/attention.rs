//! Single-layer softmax attention acting on a token measure.
//!
//! For a prompt measure `mu` and a query `q` the layer returns the
//! `exp(z^T U q)`-weighted average of `V z` under `mu`. On an empirical
//! measure this is ordinary softmax attention; on `N(m, Gamma)` it collapses
//! to the affine map `V m + V Gamma U q`.
//!
//! Gradients are returned as their sufficient statistics: the softmax-weighted
//! mean token for `V` (every row of the Jacobian block) and, per output row
//! `i`, the `D x D` matrix `Cov_w(v_i^T z, z) q^T` for `U`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_finite_matrix, check_finite_vector, check_square};
use crate::measures::{EmpiricalMeasure, GaussianMeasure};

/// Merged parametrization `U = K^T Q`, `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl AttentionParams {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        let dim = u.nrows();
        check_square("U", &u, dim)?;
        check_square("V", &v, dim)?;
        check_finite_matrix("U", &u)?;
        check_finite_matrix("V", &v)?;
        Ok(Self { u, v })
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    /// Frobenius distance over the stacked pair `(U, V)`.
    pub fn distance(&self, other: &Self) -> f64 {
        let du = (&self.u - &other.u).norm_squared();
        let dv = (&self.v - &other.v).norm_squared();
        (du + dv).sqrt()
    }

    fn check_dim(&self, what: &str, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::validation(format!(
                "{what} has dimension {dim}, attention parameters have dimension {}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Raw key/query/value parametrization.
#[derive(Debug, Clone, PartialEq)]
pub struct KqvParams {
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl KqvParams {
    pub fn new(k: DMatrix<f64>, q: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        let dim = k.nrows();
        check_square("K", &k, dim)?;
        check_square("Q", &q, dim)?;
        check_square("V", &v, dim)?;
        check_finite_matrix("K", &k)?;
        check_finite_matrix("Q", &q)?;
        check_finite_matrix("V", &v)?;
        Ok(Self { k, q, v })
    }

    pub fn forward_empirical(&self, mu_hat: &EmpiricalMeasure, q: &QueryPoint) -> Result<DVector<f64>> {
        forward_empirical(&kqv_to_uv(self), mu_hat, q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryPoint {
    z: DVector<f64>,
}

impl QueryPoint {
    pub fn new(z: DVector<f64>) -> Result<Self> {
        check_finite_vector("query", &z)?;
        Ok(Self { z })
    }

    pub fn from_slice(z: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(z))
    }

    /// Masked in-context query `(x, 0)`.
    pub fn masked(x: &[f64]) -> Result<Self> {
        let mut z = DVector::zeros(x.len() + 1);
        z.rows_mut(0, x.len()).copy_from_slice(x);
        Self::new(z)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// Whether the query token also belongs to the prompt it attends over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryConvention {
    /// The query is a fresh point outside the empirical measure.
    #[default]
    Fresh,
    /// Attend over `(L/(L+1)) mu_hat + (1/(L+1)) delta_q`.
    IncludedInPrompt,
}

impl QueryConvention {
    /// Forward pass under this convention.
    pub fn forward(self, p: &AttentionParams, mu_hat: &EmpiricalMeasure, q: &QueryPoint) -> Result<DVector<f64>> {
        match self {
            QueryConvention::Fresh => forward_empirical(p, mu_hat, q),
            QueryConvention::IncludedInPrompt => {
                forward_empirical(p, &mu_hat.with_token(q.as_vector().as_slice())?, q)
            }
        }
    }
}

pub fn kqv_to_uv(p: &KqvParams) -> AttentionParams {
    AttentionParams {
        u: p.k.transpose() * &p.q,
        v: p.v.clone(),
    }
}

/// Normalized softmax of `logits`, shifted by the maximum before exponentiation.
pub fn softmax_weights(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Softmax-weighted statistics of one prompt seen from one query.
pub(crate) struct SoftmaxStats {
    weights: Vec<f64>,
    /// `sum_k w_k z_k`, accumulated relative to the first token.
    pub mean: Vec<f64>,
}

impl SoftmaxStats {
    /// `uq` is `U q`, so the logit of token `k` is `z_k . uq`.
    pub(crate) fn compute(tokens: &[f64], dim: usize, uq: &[f64], mut weights: Vec<f64>) -> Self {
        weights.clear();
        let mut max = f64::NEG_INFINITY;
        for z in tokens.chunks_exact(dim) {
            let l: f64 = z.iter().zip(uq).map(|(a, b)| a * b).sum();
            max = max.max(l);
            weights.push(l);
        }
        let mut total = 0.0;
        for w in weights.iter_mut() {
            *w = (*w - max).exp();
            total += *w;
        }
        let first = &tokens[..dim];
        let mut mean = vec![0.0; dim];
        for (w, z) in weights.iter_mut().zip(tokens.chunks_exact(dim)) {
            *w /= total;
            for ((m, x), x0) in mean.iter_mut().zip(z).zip(first) {
                *m += *w * (x - x0);
            }
        }
        for (m, x0) in mean.iter_mut().zip(first) {
            *m += x0;
        }
        Self { weights, mean }
    }

    /// `Cov_w(a^T z, z)`, the weighted covariance between the projection on
    /// `a` and the token itself.
    pub(crate) fn projected_covariance(&self, tokens: &[f64], a: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        let mut out = vec![0.0; dim];
        for (w, z) in self.weights.iter().zip(tokens.chunks_exact(dim)) {
            let proj: f64 = z.iter().zip(&self.mean).zip(a).map(|((x, m), ai)| (x - m) * ai).sum();
            let s = w * proj;
            for ((o, x), m) in out.iter_mut().zip(z).zip(&self.mean) {
                *o += s * (x - m);
            }
        }
        out
    }

    pub(crate) fn into_buffer(self) -> Vec<f64> {
        self.weights
    }
}

fn stats_for(p: &AttentionParams, mu_hat: &EmpiricalMeasure, q: &QueryPoint) -> Result<SoftmaxStats> {
    p.check_dim("prompt", mu_hat.dim())?;
    p.check_dim("query", q.dim())?;
    let uq = &p.u * q.as_vector();
    Ok(SoftmaxStats::compute(
        mu_hat.as_slice(),
        mu_hat.dim(),
        uq.as_slice(),
        Vec::with_capacity(mu_hat.len()),
    ))
}

/// Softmax attention output `sum_k softmax_k(z_k^T U q) V z_k`.
pub fn forward_empirical(p: &AttentionParams, mu_hat: &EmpiricalMeasure, q: &QueryPoint) -> Result<DVector<f64>> {
    let stats = stats_for(p, mu_hat, q)?;
    Ok(&p.v * DVector::from_vec(stats.mean))
}

/// Infinite-prompt output for `mu = N(m, Gamma)`: `V (m + Gamma U q)`.
pub fn forward_gaussian(p: &AttentionParams, g: &GaussianMeasure, q: &QueryPoint) -> Result<DVector<f64>> {
    p.check_dim("Gaussian measure", g.dim())?;
    p.check_dim("query", q.dim())?;
    Ok(&p.v * skewed_mean(p, g, q))
}

/// Mean of the exponentially tilted Gaussian `N(m + Gamma U q, Gamma)`.
pub(crate) fn skewed_mean(p: &AttentionParams, g: &GaussianMeasure, q: &QueryPoint) -> DVector<f64> {
    g.mean() + g.cov() * (&p.u * q.as_vector())
}

/// Law of the output when the query itself is drawn from `g`:
/// `N(V (I + Gamma U) m, (V Gamma U) Gamma (V Gamma U)^T)`.
pub fn pushforward_gaussian(p: &AttentionParams, g: &GaussianMeasure) -> Result<GaussianMeasure> {
    p.check_dim("Gaussian measure", g.dim())?;
    let gamma = g.cov();
    let lin = &p.v * gamma * &p.u;
    let mean = &p.v * (g.mean() + gamma * (&p.u * g.mean()));
    let cov = &lin * gamma * lin.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianMeasure::new(mean, cov)
}

/// Softmax-weighted mean token; the derivative of every output row `i` with
/// respect to row `v_i` of `V`.
pub fn grad_v_empirical(p: &AttentionParams, mu_hat: &EmpiricalMeasure, q: &QueryPoint) -> Result<DVector<f64>> {
    Ok(DVector::from_vec(stats_for(p, mu_hat, q)?.mean))
}

/// Derivative of output coordinate `row` with respect to `U`:
/// `(E_w[(v_i^T z) z] - E_w[v_i^T z] E_w[z]) q^T`.
pub fn grad_u_empirical(
    p: &AttentionParams,
    mu_hat: &EmpiricalMeasure,
    q: &QueryPoint,
    row: usize,
) -> Result<DMatrix<f64>> {
    if row >= p.dim() {
        return Err(Error::validation(format!(
            "output row {row} out of range for dimension {}",
            p.dim()
        )));
    }
    let stats = stats_for(p, mu_hat, q)?;
    let v_row: Vec<f64> = p.v.row(row).iter().copied().collect();
    let cov = stats.projected_covariance(mu_hat.as_slice(), &v_row);
    Ok(DVector::from_vec(cov) * q.as_vector().transpose())
}

/// Transfers a `U`-gradient to the raw factors: `(Q gU^T, K gU)`.
pub fn grad_kq_from_u(p: &KqvParams, g_u: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    (&p.q * g_u.transpose(), &p.k * g_u)
}
