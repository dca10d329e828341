//! In-context linear regression with a single softmax attention layer.
//!
//! A task draws `w ~ N(0, I_d)`; prompt tokens are `z = (x, w^T x + noise)`
//! with `x ~ N(0, Sigma)`, so each prompt is an i.i.d. sample of
//! `N(0, Gamma_w)`. The layer predicts the label of a masked query `(x, 0)`
//! from the last output coordinate and is scored with `1/2 (y_hat - y)^2`.
//!
//! Along the training flow of interest the parameters keep the block form
//! `U = [[A, 0], [0, 0]]`, `V = v e_{d+1} e_{d+1}^T`. On that block the
//! infinite-prompt prediction is `v w^T Sigma A x`, which gives
//!
//! ```text
//! R(A, v)   = 1/2 tr(Sigma M M^T) + 1/2 noise^2,   M = v A^T Sigma - I
//! dR/dA     = v Sigma M^T Sigma
//! dR/dv     = tr(Sigma M Sigma A)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::{AttentionParams, SoftmaxStats};
use crate::error::{Error, Result};
use crate::linalg::{check_finite_matrix, check_square, frobenius, max_asymmetry, op_norm};
use crate::measures::{GaussianMeasure, SYMMETRY_TOL};
use crate::par::{map_indexed, mean_and_stderr};
use crate::rng::SeededStream;

pub const BLOCK_SYMMETRY_TOL: f64 = 1e-10;
pub const THETA_NORM_TOL: f64 = 1e-10;
pub const MIN_W_DRAWS: usize = 1000;

/// Distribution over regression tasks: covariate covariance and label noise.
#[derive(Debug, Clone, PartialEq)]
pub struct IclModel {
    sigma: DMatrix<f64>,
    noise_std: f64,
    sigma_factor: DMatrix<f64>,
}

impl IclModel {
    pub fn new(sigma: DMatrix<f64>, noise_std: f64) -> Result<Self> {
        validate_sigma(&sigma)?;
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::validation(format!("noise_std must be finite and >= 0, got {noise_std}")));
        }
        let norm = op_norm(&sigma);
        if norm > 1.0 {
            log::warn!("|Sigma|_op = {norm:.4} > 1: outside the regime where the token law is 1-sub-Gaussian");
        }
        let sigma_factor = GaussianMeasure::new(DVector::zeros(sigma.nrows()), sigma.clone())?
            .factor()
            .clone();
        Ok(Self {
            sigma,
            noise_std,
            sigma_factor,
        })
    }

    pub fn noiseless(sigma: DMatrix<f64>) -> Result<Self> {
        Self::new(sigma, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn task(&self, w: DVector<f64>) -> Result<LinearIclTask> {
        LinearIclTask::new(self.sigma.clone(), w, self.noise_std)
    }

    /// Risk of the zero predictor, `1/2 tr(Sigma) + 1/2 noise^2`.
    pub fn null_risk(&self) -> f64 {
        0.5 * self.sigma.trace() + 0.5 * self.noise_std * self.noise_std
    }

    fn draw_covariate<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let xi: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..d).map(|j| self.sigma_factor[(i, j)] * xi[j]).sum();
        }
    }

    fn label<R: Rng + ?Sized>(&self, rng: &mut R, w: &DVector<f64>, x: &[f64]) -> f64 {
        let clean: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
        if self.noise_std > 0.0 {
            clean + self.noise_std * rng.sample::<f64, _>(StandardNormal)
        } else {
            clean
        }
    }
}

fn validate_sigma(sigma: &DMatrix<f64>) -> Result<()> {
    let d = sigma.nrows();
    if d == 0 {
        return Err(Error::validation("Sigma must be at least 1x1"));
    }
    check_square("Sigma", sigma, d)?;
    check_finite_matrix("Sigma", sigma)?;
    let asym = max_asymmetry(sigma);
    if asym > SYMMETRY_TOL {
        return Err(Error::validation(format!("Sigma is not symmetric (max gap {asym:e})")));
    }
    if sigma.clone().cholesky().is_none() {
        return Err(Error::validation("Sigma must be symmetric positive definite (invertible)"));
    }
    Ok(())
}

/// One regression task `(Sigma, w)` with optional label noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearIclTask {
    pub sigma: DMatrix<f64>,
    pub w: DVector<f64>,
    pub noise_std: f64,
}

impl LinearIclTask {
    pub fn new(sigma: DMatrix<f64>, w: DVector<f64>, noise_std: f64) -> Result<Self> {
        validate_sigma(&sigma)?;
        if w.len() != sigma.nrows() {
            return Err(Error::validation(format!(
                "w has length {}, Sigma is {}x{}",
                w.len(),
                sigma.nrows(),
                sigma.nrows()
            )));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::validation(format!("noise_std must be finite and >= 0, got {noise_std}")));
        }
        Ok(Self { sigma, w, noise_std })
    }
}

/// Token law of one task: `N(0, [[Sigma, Sigma w], [(Sigma w)^T, |w|_Sigma^2 + noise^2]])`.
pub fn gamma_w(task: &LinearIclTask) -> Result<GaussianMeasure> {
    let d = task.sigma.nrows();
    let sw = &task.sigma * &task.w;
    let mut cov = DMatrix::zeros(d + 1, d + 1);
    cov.view_mut((0, 0), (d, d)).copy_from(&task.sigma);
    for i in 0..d {
        cov[(i, d)] = sw[i];
        cov[(d, i)] = sw[i];
    }
    cov[(d, d)] = task.w.dot(&sw) + task.noise_std * task.noise_std;
    GaussianMeasure::new(DVector::zeros(d + 1), cov)
}

/// Regression coefficients `w ~ N(0, I_d)`.
pub fn sample_task(d: usize, stream: SeededStream) -> DVector<f64> {
    let mut rng = stream.rng();
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Sub-Gaussian proxy of the task's token law, `sqrt(max(|Sigma|_op, |w|^2))`.
pub fn sigma_mu(task: &LinearIclTask) -> f64 {
    op_norm(&task.sigma).max(task.w.norm_squared()).sqrt()
}

/// Block coordinates `U = [[A, 0], [0, 0]]`, `V = v e_{d+1} e_{d+1}^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub a: DMatrix<f64>,
    pub v: f64,
}

impl BlockParams {
    pub fn new(a: DMatrix<f64>, v: f64) -> Result<Self> {
        let d = a.nrows();
        check_square("A", &a, d)?;
        check_finite_matrix("A", &a)?;
        if !v.is_finite() {
            return Err(Error::validation("v must be finite"));
        }
        let asym = max_asymmetry(&a);
        if asym > BLOCK_SYMMETRY_TOL {
            return Err(Error::validation(format!("A must be symmetric (max gap {asym:e})")));
        }
        Ok(Self { a, v })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Embeds into full `(d+1) x (d+1)` attention parameters.
    pub fn to_full(&self) -> AttentionParams {
        let d = self.dim();
        let mut u = DMatrix::zeros(d + 1, d + 1);
        u.view_mut((0, 0), (d, d)).copy_from(&self.a);
        let mut v = DMatrix::zeros(d + 1, d + 1);
        v[(d, d)] = self.v;
        AttentionParams { u, v }
    }
}

/// How far full parameters are from the block form: Frobenius norm of every
/// entry outside the `A` block of `U` and outside the corner of `V`, and the
/// asymmetry of the `A` block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockDiagnostics {
    pub off_block_norm: f64,
    pub block_norm: f64,
    pub a_asymmetry: f64,
}

pub fn block_diagnostics(p: &AttentionParams) -> BlockDiagnostics {
    let n = p.dim();
    let d = n - 1;
    let mut off = 0.0;
    let mut on = 0.0;
    for i in 0..n {
        for j in 0..n {
            let u = p.u[(i, j)];
            if i < d && j < d {
                on += u * u;
            } else {
                off += u * u;
            }
            let v = p.v[(i, j)];
            if i == d && j == d {
                on += v * v;
            } else {
                off += v * v;
            }
        }
    }
    BlockDiagnostics {
        off_block_norm: off.sqrt(),
        block_norm: on.sqrt(),
        a_asymmetry: max_asymmetry(&p.u.view((0, 0), (d, d)).into_owned()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskEstimate {
    pub value: f64,
    /// Zero for closed forms.
    pub stderr: f64,
}

impl RiskEstimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGradient {
    pub a: DMatrix<f64>,
    pub v: f64,
}

fn check_block_dim(p: &BlockParams, model: &IclModel) -> Result<()> {
    if p.dim() != model.dim() {
        return Err(Error::validation(format!(
            "block parameters have dimension {}, Sigma has dimension {}",
            p.dim(),
            model.dim()
        )));
    }
    Ok(())
}

fn residual(p: &BlockParams, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let d = p.dim();
    p.a.transpose() * sigma * p.v - DMatrix::identity(d, d)
}

/// Closed-form infinite-prompt risk on the block.
pub fn risk_inf_block(p: &BlockParams, model: &IclModel) -> Result<RiskEstimate> {
    check_block_dim(p, model)?;
    let sigma = model.sigma();
    let m = residual(p, sigma);
    let value = 0.5 * (sigma * &m * m.transpose()).trace() + 0.5 * model.noise_std().powi(2);
    Ok(RiskEstimate::exact(value))
}

pub fn grad_risk_inf_block(p: &BlockParams, model: &IclModel) -> Result<BlockGradient> {
    check_block_dim(p, model)?;
    let sigma = model.sigma();
    let m = residual(p, sigma);
    let a = sigma * m.transpose() * sigma * p.v;
    let v = (sigma * &m * sigma * &p.a).trace();
    Ok(BlockGradient { a, v })
}

fn check_full_dim(params: &AttentionParams, model: &IclModel) -> Result<()> {
    if params.dim() != model.dim() + 1 {
        return Err(Error::validation(format!(
            "attention parameters have dimension {}, expected d+1 = {}",
            params.dim(),
            model.dim() + 1
        )));
    }
    Ok(())
}

/// Infinite-prompt risk at arbitrary `(U, V)`.
///
/// For fixed `w` the prediction is linear in the query, `g_w^T x` with
/// `g_w = U[:, :d]^T Gamma_w v_{d+1}`, so the query expectation is exact:
/// `1/2 (g_w - w)^T Sigma (g_w - w) + 1/2 noise^2`. The task expectation is
/// Monte Carlo over `n_w` draws.
pub fn risk_inf_full(
    params: &AttentionParams,
    model: &IclModel,
    n_w: usize,
    stream: SeededStream,
) -> Result<RiskEstimate> {
    check_full_dim(params, model)?;
    if n_w < MIN_W_DRAWS {
        return Err(Error::validation(format!("need at least {MIN_W_DRAWS} task draws, got {n_w}")));
    }
    let d = model.dim();
    let u_x = params.u.columns(0, d).into_owned();
    let v_last = params.v.row(d).transpose();
    let sigma = model.sigma();
    let per_task = map_indexed(n_w, |j| -> Result<f64> {
        let w = sample_task(d, stream.child(j as u64));
        let gamma = gamma_w(&model.task(w.clone())?)?;
        let g = u_x.transpose() * (gamma.cov() * &v_last);
        let diff = g - w;
        Ok(0.5 * diff.dot(&(sigma * &diff)) + 0.5 * model.noise_std().powi(2))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let (value, stderr) = mean_and_stderr(&per_task);
    Ok(RiskEstimate { value, stderr })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McBatch {
    pub n_tasks: usize,
    pub n_queries: usize,
}

impl McBatch {
    pub fn new(n_tasks: usize, n_queries: usize) -> Result<Self> {
        let b = Self { n_tasks, n_queries };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks < 2 || self.n_queries == 0 {
            return Err(Error::validation(format!(
                "Monte-Carlo batch needs n_tasks >= 2 and n_queries >= 1, got ({}, {})",
                self.n_tasks, self.n_queries
            )));
        }
        Ok(())
    }
}

/// Prompt, queries and labels of one sampled task.
///
/// Independent sub-streams feed `w`, the queries and the prompt, and the prompt
/// is drawn token by token, so a task at prompt length `L` shares its first
/// tokens with the same task at any longer prompt length.
struct TaskDraw {
    tokens: Vec<f64>,
    queries: Vec<f64>,
    labels: Vec<f64>,
}

fn draw_task(model: &IclModel, l: usize, n_queries: usize, stream: SeededStream) -> TaskDraw {
    let d = model.dim();
    let w = sample_task(d, stream.child(0));
    let mut rng = stream.child(1).rng();
    let mut queries = vec![0.0; n_queries * d];
    let mut labels = Vec::with_capacity(n_queries);
    for x in queries.chunks_exact_mut(d) {
        model.draw_covariate(&mut rng, x);
        labels.push(model.label(&mut rng, &w, x));
    }
    let mut rng = stream.child(2).rng();
    let mut tokens = vec![0.0; l * (d + 1)];
    for z in tokens.chunks_exact_mut(d + 1) {
        model.draw_covariate(&mut rng, &mut z[..d]);
        z[d] = model.label(&mut rng, &w, &z[..d]);
    }
    TaskDraw {
        tokens,
        queries,
        labels,
    }
}

struct TaskOutcome {
    loss: f64,
    grad: Option<(DMatrix<f64>, DVector<f64>)>,
}

/// Average query loss of one task and, optionally, its `(U, last row of V)` gradient.
fn evaluate_task(params: &AttentionParams, draw: &TaskDraw, with_grad: bool) -> TaskOutcome {
    let n = params.dim();
    let d = n - 1;
    let v_last: Vec<f64> = params.v.row(d).iter().copied().collect();
    let nq = draw.labels.len();
    let mut loss = 0.0;
    let mut g_u = DMatrix::zeros(n, n);
    let mut g_v = DVector::zeros(n);
    let mut uq = vec![0.0; n];
    let mut buf = Vec::with_capacity(draw.tokens.len() / n);
    for (x, &y) in draw.queries.chunks_exact(d).zip(&draw.labels) {
        for (i, o) in uq.iter_mut().enumerate() {
            *o = (0..d).map(|j| params.u[(i, j)] * x[j]).sum();
        }
        let stats = SoftmaxStats::compute(&draw.tokens, n, &uq, buf);
        let pred: f64 = stats.mean.iter().zip(&v_last).map(|(a, b)| a * b).sum();
        let err = pred - y;
        loss += 0.5 * err * err;
        if with_grad {
            for (g, m) in g_v.iter_mut().zip(&stats.mean) {
                *g += err * m;
            }
            let cov = stats.projected_covariance(&draw.tokens, &v_last);
            for i in 0..n {
                let c = err * cov[i];
                for j in 0..d {
                    g_u[(i, j)] += c * x[j];
                }
            }
        }
        buf = stats.into_buffer();
    }
    let scale = 1.0 / nq as f64;
    TaskOutcome {
        loss: loss * scale,
        grad: with_grad.then(|| (g_u * scale, g_v * scale)),
    }
}

fn check_finite_inputs(params: &AttentionParams, model: &IclModel, l: usize, batch: &McBatch) -> Result<()> {
    check_full_dim(params, model)?;
    batch.validate()?;
    if l == 0 {
        return Err(Error::validation("prompt length must be at least 1"));
    }
    Ok(())
}

/// Nested Monte Carlo of the finite-prompt risk: per task a fresh `w`, a
/// prompt of `L` tokens and `n_queries` queries; standard error across tasks.
pub fn risk_finite_mc(
    params: &AttentionParams,
    model: &IclModel,
    l: usize,
    batch: McBatch,
    stream: SeededStream,
) -> Result<RiskEstimate> {
    check_finite_inputs(params, model, l, &batch)?;
    let losses = map_indexed(batch.n_tasks, |t| {
        let draw = draw_task(model, l, batch.n_queries, stream.child(t as u64));
        evaluate_task(params, &draw, false).loss
    });
    let (value, stderr) = mean_and_stderr(&losses);
    Ok(RiskEstimate { value, stderr })
}

/// Monte-Carlo gradient of the finite-prompt risk, with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteGradient {
    pub risk: RiskEstimate,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub u_stderr: DMatrix<f64>,
    pub v_stderr: DMatrix<f64>,
}

/// Same samples as [`risk_finite_mc`] for equal arguments, so the two are
/// consistent under common random numbers. Only the last row of the
/// `V`-gradient can be nonzero since the prediction reads only that row.
pub fn grad_risk_finite_mc(
    params: &AttentionParams,
    model: &IclModel,
    l: usize,
    batch: McBatch,
    stream: SeededStream,
) -> Result<FiniteGradient> {
    check_finite_inputs(params, model, l, &batch)?;
    let outcomes = map_indexed(batch.n_tasks, |t| {
        let draw = draw_task(model, l, batch.n_queries, stream.child(t as u64));
        evaluate_task(params, &draw, true)
    });
    let n = params.dim();
    let tasks = outcomes.len() as f64;
    let mut sum_u = DMatrix::zeros(n, n);
    let mut sum_v = DVector::zeros(n);
    let mut sq_u = DMatrix::zeros(n, n);
    let mut sq_v = DVector::zeros(n);
    let mut losses = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let (gu, gv) = o.grad.as_ref().expect("gradient requested");
        sum_u += gu;
        sum_v += gv;
        sq_u += gu.component_mul(gu);
        sq_v += gv.component_mul(gv);
        losses.push(o.loss);
    }
    let mean_u = &sum_u / tasks;
    let mean_v = &sum_v / tasks;
    let se = |sq: f64, mean: f64| ((sq / tasks - mean * mean).max(0.0) * tasks / (tasks - 1.0) / tasks).sqrt();
    let u_stderr = DMatrix::from_fn(n, n, |i, j| se(sq_u[(i, j)], mean_u[(i, j)]));
    let mut v = DMatrix::zeros(n, n);
    let mut v_stderr = DMatrix::zeros(n, n);
    for j in 0..n {
        v[(n - 1, j)] = mean_v[j];
        v_stderr[(n - 1, j)] = se(sq_v[j], mean_v[j]);
    }
    let (value, stderr) = mean_and_stderr(&losses);
    Ok(FiniteGradient {
        risk: RiskEstimate { value, stderr },
        u: mean_u,
        v,
        u_stderr,
        v_stderr,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub alpha: f64,
    pub theta: DMatrix<f64>,
}

/// Small block initialization `V0 = alpha e e^T`, `U0 = alpha [[Theta Theta^T, 0], [0, 0]]`.
///
/// Requires `|Theta Theta^T|_F = 1`, `Theta Sigma != 0` and
/// `0 < alpha < sqrt(2) / (d^{1/4} |Sigma|_op)`.
pub fn init_params(cfg: &InitConfig, sigma: &DMatrix<f64>) -> Result<(AttentionParams, BlockParams)> {
    validate_sigma(sigma)?;
    let d = sigma.nrows();
    check_square("Theta", &cfg.theta, d)?;
    check_finite_matrix("Theta", &cfg.theta)?;
    let gram = &cfg.theta * cfg.theta.transpose();
    let norm = frobenius(&gram);
    if (norm - 1.0).abs() > THETA_NORM_TOL {
        return Err(Error::validation(format!(
            "initialization requires |Theta Theta^T|_F = 1, got {norm}"
        )));
    }
    if (&cfg.theta * sigma).iter().all(|&x| x == 0.0) {
        return Err(Error::validation("initialization requires Theta Sigma != 0"));
    }
    let upper = 2f64.sqrt() / ((d as f64).powf(0.25) * op_norm(sigma));
    if !(cfg.alpha > 0.0 && cfg.alpha < upper) {
        return Err(Error::validation(format!(
            "initialization requires 0 < alpha < sqrt(2)/(d^(1/4) |Sigma|_op) = {upper}, got {}",
            cfg.alpha
        )));
    }
    let block = BlockParams::new(gram * cfg.alpha, cfg.alpha)?;
    Ok((block.to_full(), block))
}

/// Bayes-optimal limit `A* = tr(Sigma^-2)^{-1/4} Sigma^-1`, `v* = tr(Sigma^-2)^{1/4}`.
pub fn optimal_params(sigma: &DMatrix<f64>) -> Result<(AttentionParams, BlockParams)> {
    validate_sigma(sigma)?;
    let inv = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::validation("Sigma is singular"))?
        .inverse();
    let inv = (&inv + inv.transpose()) * 0.5;
    let tr = inv.norm_squared();
    let block = BlockParams::new(inv * tr.powf(-0.25), tr.powf(0.25))?;
    Ok((block.to_full(), block))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    #[test]
    fn gamma_w_examples() {
        let sigma = diag(&[1.0, 0.5]);
        let g = gamma_w(&LinearIclTask::new(sigma.clone(), DVector::zeros(2), 0.0).unwrap()).unwrap();
        let mut expect = DMatrix::zeros(3, 3);
        expect.view_mut((0, 0), (2, 2)).copy_from(&sigma);
        assert_eq!(g.cov(), &expect);

        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let g = gamma_w(&LinearIclTask::new(DMatrix::identity(2, 2), e1, 0.0).unwrap()).unwrap();
        assert_eq!(g.cov()[(2, 2)], 1.0);
        assert_eq!(g.cov()[(0, 2)], 1.0);
        assert_eq!(g.cov()[(1, 2)], 0.0);

        let noisy = LinearIclTask::new(DMatrix::identity(2, 2), DVector::zeros(2), 0.5).unwrap();
        assert_eq!(gamma_w(&noisy).unwrap().cov()[(2, 2)], 0.25);
    }

    #[test]
    fn sigma_mu_examples() {
        let t = |s: DMatrix<f64>, w: Vec<f64>| LinearIclTask::new(s, DVector::from_vec(w), 0.0).unwrap();
        assert_eq!(sigma_mu(&t(DMatrix::identity(2, 2), vec![0.0, 0.0])), 1.0);
        assert!((sigma_mu(&t(DMatrix::identity(2, 2), vec![2.0, 0.0])) - 2.0).abs() < 1e-12);
        assert!((sigma_mu(&t(diag(&[1.0, 0.25]), vec![1.0, 1.0])) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn block_risk_anchors() {
        let model = IclModel::noiseless(diag(&[1.0, 0.25])).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, -0.2]);
        let r = risk_inf_block(&BlockParams::new(a.clone(), 0.0).unwrap(), &model).unwrap();
        assert!((r.value - 0.625).abs() < 1e-15);

        let inv = diag(&[1.0, 4.0]);
        let r = risk_inf_block(&BlockParams::new(inv * 0.5, 2.0).unwrap(), &model).unwrap();
        assert!(r.value.abs() < 1e-30);

        let g = grad_risk_inf_block(&BlockParams::new(a.clone(), 0.0).unwrap(), &model).unwrap();
        assert_eq!(g.a, DMatrix::zeros(2, 2));
        let expect = -(model.sigma() * model.sigma() * &a).trace();
        assert!((g.v - expect).abs() < 1e-15);
    }

    #[test]
    fn optimal_params_examples() {
        let (_, b) = optimal_params(&DMatrix::identity(2, 2)).unwrap();
        assert!((&b.a - DMatrix::identity(2, 2) * 2f64.powf(-0.25)).norm() < 1e-15);
        assert!((b.v - 2f64.powf(0.25)).abs() < 1e-15);

        let sigma = diag(&[1.0, 0.5]);
        let (full, b) = optimal_params(&sigma).unwrap();
        assert!((&b.a - diag(&[1.0, 2.0]) * 5f64.powf(-0.25)).norm() < 1e-14);
        assert!((b.v - 5f64.powf(0.25)).abs() < 1e-14);
        assert!((&sigma * &b.a * b.v - DMatrix::identity(2, 2)).norm() < 1e-14);
        assert_eq!(full.u[(2, 2)], 0.0);
        assert_eq!(full.v[(2, 2)], b.v);

        assert!(optimal_params(&diag(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn init_examples() {
        let sigma = DMatrix::identity(2, 2);
        let theta = DMatrix::identity(2, 2) * 2f64.powf(-0.25);
        let (full, b) = init_params(&InitConfig { alpha: 0.01, theta: theta.clone() }, &sigma).unwrap();
        assert!((&b.a - DMatrix::identity(2, 2) * (0.01 * 2f64.powf(-0.5))).norm() < 1e-17);
        assert_eq!(full.v[(2, 2)], 0.01);
        assert_eq!(full.u.row(2).iter().chain(full.u.column(2).iter()).filter(|x| **x != 0.0).count(), 0);

        assert!(init_params(&InitConfig { alpha: 0.0, theta: theta.clone() }, &sigma).is_err());
        assert!(init_params(&InitConfig { alpha: 1e-300, theta: theta.clone() }, &sigma).is_ok());
        let upper = 2f64.sqrt() / 2f64.powf(0.25);
        let err = init_params(&InitConfig { alpha: upper, theta: theta.clone() }, &sigma).unwrap_err();
        assert!(err.to_string().contains("alpha"));
        assert!(init_params(&InitConfig { alpha: 0.01, theta: DMatrix::identity(2, 2) }, &sigma).is_err());
    }

    #[test]
    fn zero_predictor_risks() {
        let model = IclModel::noiseless(diag(&[1.0, 0.25])).unwrap();
        let zero = AttentionParams::new(DMatrix::zeros(3, 3), DMatrix::zeros(3, 3)).unwrap();
        let r = risk_inf_full(&zero, &model, 20_000, SeededStream::from_seed(3)).unwrap();
        assert!((r.value - 0.625).abs() < 3.0 * r.stderr, "{r:?}");
        for l in [1, 16] {
            let r = risk_finite_mc(&zero, &model, l, McBatch::new(400, 4).unwrap(), SeededStream::from_seed(l as u64))
                .unwrap();
            assert!((r.value - 0.625).abs() < 3.0 * r.stderr, "L={l}: {r:?}");
        }
        let g = grad_risk_finite_mc(&zero, &model, 8, McBatch::new(10, 3).unwrap(), SeededStream::from_seed(1)).unwrap();
        assert_eq!(g.u, DMatrix::zeros(3, 3));
    }

    #[test]
    fn finite_gradient_only_touches_last_value_row() {
        let model = IclModel::noiseless(diag(&[1.0, 0.25])).unwrap();
        let (_, b) = optimal_params(model.sigma()).unwrap();
        let g = grad_risk_finite_mc(&b.to_full(), &model, 32, McBatch::new(8, 4).unwrap(), SeededStream::from_seed(2))
            .unwrap();
        for i in 0..2 {
            assert!(g.v.row(i).iter().all(|&x| x == 0.0));
        }
        // masked query: the last column of the U-gradient is identically zero
        assert!(g.u.column(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(IclModel::noiseless(diag(&[1.0, -1.0])).is_err());
        assert!(IclModel::new(DMatrix::identity(2, 2), -0.1).is_err());
        let model = IclModel::noiseless(DMatrix::identity(2, 2)).unwrap();
        let wrong = AttentionParams::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)).unwrap();
        assert!(risk_finite_mc(&wrong, &model, 4, McBatch { n_tasks: 4, n_queries: 1 }, SeededStream::from_seed(0)).is_err());
        let ok = AttentionParams::new(DMatrix::zeros(3, 3), DMatrix::zeros(3, 3)).unwrap();
        assert!(risk_inf_full(&ok, &model, 10, SeededStream::from_seed(0)).is_err());
        assert!(BlockParams::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]), 1.0).is_err());
    }
}
