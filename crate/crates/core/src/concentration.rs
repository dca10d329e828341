//! Monte-Carlo deviation of finite-prompt attention from its Gaussian
//! infinite-prompt limit, and empirical rate fitting.
//!
//! For every prompt length `L` on the grid, each replication draws a fresh
//! prompt of `L` tokens from `mu` and `n_query` fresh queries from `nu`; the
//! squared deviation is averaged over the queries inside the replication and
//! then over replications. The standard error is taken across replications.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::attention::{
    forward_empirical, forward_gaussian, grad_u_empirical, grad_v_empirical, skewed_mean, AttentionParams, QueryConvention,
    QueryPoint,
};
use crate::error::{Error, Result};
use crate::linalg::op_norm;
use crate::measures::{EmpiricalMeasure, GaussianMeasure};
use crate::par::{map_indexed, mean_and_stderr};
use crate::rng::SeededStream;

/// Slack on `|nu.cov|_op <= 1`.
pub const QUERY_COV_TOL: f64 = 1e-12;
pub const MIN_REPS: usize = 30;

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub l_grid: Vec<usize>,
    pub reps: usize,
    pub n_query: usize,
    /// Prompt token law.
    pub mu: GaussianMeasure,
    /// Query law; must be 1-sub-Gaussian (`|cov|_op <= 1`).
    pub nu: GaussianMeasure,
    pub params: AttentionParams,
    pub stream: SeededStream,
    pub convention: QueryConvention,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_grid.is_empty() {
            return Err(Error::validation("prompt-length grid is empty"));
        }
        if self.l_grid[0] < 2 {
            return Err(Error::validation(format!(
                "smallest prompt length must be >= 2, got {}",
                self.l_grid[0]
            )));
        }
        if let Some(w) = self.l_grid.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::validation(format!(
                "prompt-length grid must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if self.reps < MIN_REPS {
            return Err(Error::validation(format!(
                "at least {MIN_REPS} replications required, got {}",
                self.reps
            )));
        }
        if self.n_query == 0 {
            return Err(Error::validation("n_query must be at least 1"));
        }
        let dim = self.params.dim();
        if self.mu.dim() != dim || self.nu.dim() != dim {
            return Err(Error::validation(format!(
                "measure dimensions ({}, {}) do not match parameter dimension {dim}",
                self.mu.dim(),
                self.nu.dim()
            )));
        }
        let nu_op = op_norm(self.nu.cov());
        if nu_op > 1.0 + QUERY_COV_TOL {
            return Err(Error::validation(format!(
                "query law must be 1-sub-Gaussian: |cov|_op = {nu_op} > 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SweepKind {
    Output,
    GradV,
    GradU { row: usize },
}

impl SweepKind {
    pub fn label(&self) -> String {
        match self {
            SweepKind::Output => "output".into(),
            SweepKind::GradV => "grad_v".into(),
            SweepKind::GradU { row } => format!("grad_u_row{row}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    #[serde(rename = "L")]
    pub l: usize,
    pub mse: f64,
    pub stderr: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub n_query: usize,
    pub stream: SeededStream,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// CSV with columns `L,mse,stderr,reps`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for p in &self.points {
            wtr.serialize(p)?;
        }
        wtr.flush().map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Consecutive grid pairs `(L_i, L_{i+1})` whose decrease is not larger
    /// than `k` combined standard errors.
    pub fn non_decreasing_pairs(&self, k: f64) -> Vec<(usize, usize)> {
        self.points
            .windows(2)
            .filter(|w| {
                let gap = w[0].mse - w[1].mse;
                let se = (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
                gap <= k * se
            })
            .map(|w| (w[0].l, w[1].l))
            .collect()
    }
}

fn run_sweep<F>(cfg: &SweepConfig, kind: SweepKind, deviation: F) -> Result<SweepResult>
where
    F: Fn(&EmpiricalMeasure, &QueryPoint) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let reps = cfg.reps;
    let per_rep = map_indexed(cfg.l_grid.len() * reps, |item| -> Result<f64> {
        let l = cfg.l_grid[item / reps];
        let rep = (item % reps) as u64;
        let base = cfg.stream.path(&[l as u64, rep]);
        let prompt = cfg.mu.sample(l, base.child(0))?;
        let queries = cfg.nu.sample(cfg.n_query, base.child(1))?;
        let mut acc = 0.0;
        for z in queries.tokens() {
            let q = QueryPoint::from_slice(z)?;
            acc += match cfg.convention {
                QueryConvention::Fresh => deviation(&prompt, &q)?,
                QueryConvention::IncludedInPrompt => deviation(&prompt.with_token(z)?, &q)?,
            };
        }
        Ok(acc / cfg.n_query as f64)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;

    let points = cfg
        .l_grid
        .iter()
        .zip(per_rep.chunks_exact(reps))
        .map(|(&l, values)| {
            let (mse, stderr) = mean_and_stderr(values);
            SweepPoint { l, mse, stderr, reps }
        })
        .collect();
    Ok(SweepResult {
        kind,
        n_query: cfg.n_query,
        stream: cfg.stream,
        points,
    })
}

/// `E |T[mu_hat_L] - T[mu]|^2_{L2(nu)}` across the prompt-length grid.
pub fn output_deviation_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    let p = &cfg.params;
    run_sweep(cfg, SweepKind::Output, |prompt, q| {
        let finite = forward_empirical(p, prompt, q)?;
        let limit = forward_gaussian(p, &cfg.mu, q)?;
        Ok((finite - limit).norm_squared())
    })
}

/// Deviation of the softmax-weighted mean token from the tilted Gaussian mean
/// `m + Gamma U q`.
pub fn grad_v_deviation_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    let p = &cfg.params;
    run_sweep(cfg, SweepKind::GradV, |prompt, q| {
        let finite = grad_v_empirical(p, prompt, q)?;
        Ok((finite - skewed_mean(p, &cfg.mu, q)).norm_squared())
    })
}

/// Frobenius deviation of the row-`row` U-gradient from its Gaussian limit
/// `(Gamma v_row) q^T`.
pub fn grad_u_deviation_sweep(cfg: &SweepConfig, row: usize) -> Result<SweepResult> {
    let p = &cfg.params;
    if row >= p.dim() {
        return Err(Error::validation(format!("row {row} out of range for dimension {}", p.dim())));
    }
    let gamma_v: DVector<f64> = cfg.mu.cov() * p.v.row(row).transpose();
    run_sweep(cfg, SweepKind::GradU { row }, |prompt, q| {
        let finite = grad_u_empirical(p, prompt, q, row)?;
        let limit: DMatrix<f64> = &gamma_v * q.as_vector().transpose();
        Ok((finite - limit).norm_squared())
    })
}

/// Expected output deviation when `U = 0`: `tr(V Gamma V^T) / L`.
pub fn zero_u_output_mse(v: &DMatrix<f64>, mu: &GaussianMeasure, l: usize) -> f64 {
    (v * mu.cov() * v.transpose()).trace() / l as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ln mse` on `ln L`.
pub fn fit_loglog_rate(res: &SweepResult) -> Result<RateFit> {
    if res.points.len() < 3 {
        return Err(Error::validation(format!(
            "rate fit needs at least 3 grid points, got {}",
            res.points.len()
        )));
    }
    if let Some(p) = res.points.iter().find(|p| !(p.mse > 0.0)) {
        return Err(Error::validation(format!(
            "estimate at L = {} is {} so its logarithm is undefined; increase the replication count",
            p.l, p.mse
        )));
    }
    let xs: Vec<f64> = res.points.iter().map(|p| (p.l as f64).ln()).collect();
    let ys: Vec<f64> = res.points.iter().map(|p| p.mse.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    /// Monte-Carlo estimate of `(E_nu |T[mu](z)|^4)^{1/4}`.
    pub l4_norm: f64,
    pub stderr: f64,
    /// `2 |V Gamma U|_op sqrt(d)`.
    pub bound: f64,
    pub violated: bool,
}

/// Checks the fourth-moment envelope of the infinite-prompt output for a
/// centered Gaussian prompt law and a 1-sub-Gaussian query law.
pub fn moment_bound_check(
    p: &AttentionParams,
    g: &GaussianMeasure,
    nu: &GaussianMeasure,
    n: usize,
    stream: SeededStream,
) -> Result<MomentReport> {
    let dim = p.dim();
    if g.dim() != dim || nu.dim() != dim {
        return Err(Error::validation("measure dimensions do not match the parameters"));
    }
    if !g.is_centered() {
        return Err(Error::validation("moment bound applies to a centered prompt law (mean 0)"));
    }
    let nu_op = op_norm(nu.cov());
    if nu_op > 1.0 + QUERY_COV_TOL {
        return Err(Error::validation(format!(
            "query law must be 1-sub-Gaussian: |cov|_op = {nu_op} > 1"
        )));
    }
    if n < 2 {
        return Err(Error::validation("moment check needs at least 2 samples"));
    }
    let queries = nu.sample(n, stream)?;
    let fourth: Vec<f64> = queries
        .tokens()
        .map(|z| {
            let out = forward_gaussian(p, g, &QueryPoint::from_slice(z)?)?;
            Ok(out.norm_squared().powi(2))
        })
        .collect::<Result<_>>()?;
    let (m4, se4) = mean_and_stderr(&fourth);
    let l4_norm = m4.powf(0.25);
    // delta method on x -> x^{1/4}
    let stderr = if m4 > 0.0 { se4 / (4.0 * m4.powf(0.75)) } else { 0.0 };
    let bound = 2.0 * op_norm(&(&p.v * g.cov() * &p.u)) * (dim as f64).sqrt();
    Ok(MomentReport {
        l4_norm,
        stderr,
        bound,
        violated: l4_norm > bound + 3.0 * stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(u_scale: f64, grid: Vec<usize>, reps: usize) -> SweepConfig {
        SweepConfig {
            l_grid: grid,
            reps,
            n_query: 8,
            mu: GaussianMeasure::standard(2),
            nu: GaussianMeasure::standard(2),
            params: AttentionParams::new(DMatrix::identity(2, 2) * u_scale, DMatrix::identity(2, 2)).unwrap(),
            stream: SeededStream::from_seed(17),
            convention: QueryConvention::Fresh,
        }
    }

    fn synthetic(mses: &[(usize, f64)]) -> SweepResult {
        SweepResult {
            kind: SweepKind::Output,
            n_query: 1,
            stream: SeededStream::from_seed(0),
            points: mses
                .iter()
                .map(|&(l, mse)| SweepPoint { l, mse, stderr: 0.0, reps: 30 })
                .collect(),
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(base_config(0.5, vec![1, 4], 30).validate().is_err());
        assert!(base_config(0.5, vec![8, 4], 30).validate().is_err());
        assert!(base_config(0.5, vec![4, 8], 29).validate().is_err());
        let mut cfg = base_config(0.5, vec![4, 8], 30);
        cfg.nu = GaussianMeasure::new(DVector::zeros(2), DMatrix::identity(2, 2) * 2.0).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn point_mass_prompt_gives_zero_deviation() {
        let mut cfg = base_config(0.0, vec![2, 5, 11], 30);
        cfg.mu = GaussianMeasure::point_mass(DVector::from_vec(vec![0.3, -1.7])).unwrap();
        for res in [output_deviation_sweep(&cfg).unwrap(), grad_v_deviation_sweep(&cfg).unwrap()] {
            assert!(res.points.iter().all(|p| p.mse == 0.0), "{res:?}");
        }
        cfg.params.u = DMatrix::identity(2, 2) * 0.7;
        let res = grad_u_deviation_sweep(&cfg, 1).unwrap();
        assert!(res.points.iter().all(|p| p.mse == 0.0));
    }

    #[test]
    fn zero_value_row_gives_zero_u_deviation() {
        let mut cfg = base_config(0.5, vec![4, 16], 30);
        cfg.params.v.row_mut(0).fill(0.0);
        let res = grad_u_deviation_sweep(&cfg, 0).unwrap();
        assert!(res.points.iter().all(|p| p.mse == 0.0));
    }

    #[test]
    fn zero_query_gives_zero_u_deviation() {
        let mut cfg = base_config(0.5, vec![4, 16], 30);
        cfg.nu = GaussianMeasure::point_mass(DVector::zeros(2)).unwrap();
        let res = grad_u_deviation_sweep(&cfg, 1).unwrap();
        assert!(res.points.iter().all(|p| p.mse == 0.0));
    }

    #[test]
    fn sweeps_are_deterministic() {
        let cfg = base_config(0.5, vec![4, 16, 64], 30);
        assert_eq!(output_deviation_sweep(&cfg).unwrap(), output_deviation_sweep(&cfg).unwrap());
    }

    #[test]
    fn grad_v_with_zero_u_follows_clt() {
        let cfg = base_config(0.0, vec![4, 32, 256], 400);
        let res = grad_v_deviation_sweep(&cfg).unwrap();
        for p in &res.points {
            let target = 2.0 / p.l as f64;
            assert!((p.mse - target).abs() < 3.0 * p.stderr, "{p:?} vs {target}");
        }
    }

    #[test]
    fn synthetic_rates() {
        let fit = fit_loglog_rate(&synthetic(&[(10, 0.1), (100, 0.01), (1000, 0.001)])).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        let fit = fit_loglog_rate(&synthetic(&[(10, 0.5), (100, 0.5), (1000, 0.5)])).unwrap();
        assert!(fit.slope.abs() < 1e-12);
        assert!(fit_loglog_rate(&synthetic(&[(10, 0.5), (100, 0.0), (1000, 0.5)])).is_err());
        assert!(fit_loglog_rate(&synthetic(&[(10, 0.5), (100, 0.1)])).is_err());
    }

    #[test]
    fn moment_check_trivial_cases() {
        let g = GaussianMeasure::standard(3);
        let nu = GaussianMeasure::standard(3);
        let zero_u = AttentionParams::new(DMatrix::zeros(3, 3), DMatrix::identity(3, 3)).unwrap();
        let r = moment_bound_check(&zero_u, &g, &nu, 100, SeededStream::from_seed(1)).unwrap();
        assert_eq!(r.l4_norm, 0.0);
        assert!(!r.violated);
        let zero_v = AttentionParams::new(DMatrix::identity(3, 3), DMatrix::zeros(3, 3)).unwrap();
        let r = moment_bound_check(&zero_v, &g, &nu, 100, SeededStream::from_seed(1)).unwrap();
        assert_eq!((r.l4_norm, r.bound), (0.0, 0.0));
        assert!(!r.violated);
        let shifted = GaussianMeasure::new(DVector::from_element(3, 1.0), DMatrix::identity(3, 3)).unwrap();
        assert!(moment_bound_check(&zero_u, &shifted, &nu, 100, SeededStream::from_seed(1)).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = synthetic(&[(16, 0.5), (32, 0.25)]).to_csv_string().unwrap();
        assert_eq!(s, "L,mse,stderr,reps\n16,0.5,0.0,30\n32,0.25,0.0,30\n");
    }
}
