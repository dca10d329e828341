//! Configured runs behind the `softmax-lab` subcommands.
//!
//! Every run resolves its config, writes `manifest.json` into the output
//! directory, then its CSV outputs, an optional SVG chart and `summary.json`.
//! Each command draws from its own child of the global seed, and every
//! Monte-Carlo work item from its own child of that, so outputs depend on the
//! config alone and not on the worker count.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::{
    forward_empirical, forward_gaussian, grad_kq_from_u, grad_u_empirical, grad_v_empirical, kqv_to_uv,
    pushforward_gaussian, softmax_weights, AttentionParams, KqvParams, QueryPoint,
};
use crate::concentration::{
    fit_loglog_rate, grad_u_deviation_sweep, grad_v_deviation_sweep, moment_bound_check, output_deviation_sweep,
    zero_u_output_mse, MomentReport, RateFit, SweepConfig, SweepResult,
};
use crate::config::{self, ExperimentConfig, GradientName, Manifest, SweepName, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::flow::{
    deviation_path, integrate_finite, integrate_infinite, trajectory_deviation, DeviationReport, FlowConfig,
    FlowMode, FlowTrace,
};
use crate::gradcheck::finite_diff_check;
use crate::icl::{
    block_diagnostics, grad_risk_finite_mc, grad_risk_inf_block, init_params, optimal_params, risk_finite_mc,
    risk_inf_block, BlockDiagnostics, BlockParams, IclModel, InitConfig,
};
use crate::linalg::{frobenius, op_norm};
use crate::measures::{subgaussian_tail_check, EmpiricalMeasure, GaussianMeasure, TailReport};
use crate::par::{map_indexed, with_workers};
use crate::plot::{Chart, Series};
use crate::rng::SeededStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    GaussianCheck,
    CheckGradients,
    Concentration,
    MomentCheck,
    TailCheck,
    TrainInf,
    TrainFinite,
    Compare,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::GaussianCheck,
        Command::CheckGradients,
        Command::Concentration,
        Command::MomentCheck,
        Command::TailCheck,
        Command::TrainInf,
        Command::TrainFinite,
        Command::Compare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GaussianCheck => "gaussian-check",
            Command::CheckGradients => "check-gradients",
            Command::Concentration => "concentration",
            Command::MomentCheck => "moment-check",
            Command::TailCheck => "tail-check",
            Command::TrainInf => "train-inf",
            Command::TrainFinite => "train-finite",
            Command::Compare => "compare",
        }
    }

    /// Root stream of the command under the global seed. `train-finite` and
    /// `compare` share one so their finite-prompt runs coincide.
    fn stream(self, seed: u64) -> SeededStream {
        let key = match self {
            Command::GaussianCheck => 1,
            Command::CheckGradients => 2,
            Command::Concentration => 3,
            Command::MomentCheck => 4,
            Command::TailCheck => 5,
            Command::TrainInf => 6,
            Command::TrainFinite | Command::Compare => 7,
        };
        SeededStream::from_seed(seed).child(key)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown command `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub enum Report {
    Gaussian(GaussianCheckReport),
    Gradients(GradientReport),
    Concentration(ConcentrationReport),
    Moment(MomentCheckReport),
    Tail(TailReport),
    TrainInf(InfTrainReport),
    TrainFinite(FiniteTrainReport),
    Compare(CompareReport),
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub command: Command,
    pub out: PathBuf,
    pub report: Report,
    /// Non-empty only when the command has a pass/fail gate that failed.
    pub failures: Vec<String>,
}

/// Runs `command` with `config` (resolved first) and writes its outputs.
pub fn run(command: Command, config: &ExperimentConfig) -> Result<RunOutcome> {
    let cfg = config.clone().resolve();
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out, MANIFEST_FILE, &Manifest::new(command.name(), &cfg))?;
    let report = with_workers(cfg.workers, || compute(command, &cfg))??;
    let failures = write_outputs(&out, &cfg, &report)?;
    Ok(RunOutcome {
        command,
        out,
        report,
        failures,
    })
}

/// Runs `command` without touching the filesystem.
pub fn compute(command: Command, cfg: &ExperimentConfig) -> Result<Report> {
    let stream = command.stream(cfg.seed);
    Ok(match command {
        Command::GaussianCheck => Report::Gaussian(gaussian_check(cfg, stream)?),
        Command::CheckGradients => Report::Gradients(check_gradients(cfg, stream)?),
        Command::Concentration => Report::Concentration(concentration(cfg, stream)?),
        Command::MomentCheck => Report::Moment(moment_check(cfg, stream)?),
        Command::TailCheck => Report::Tail(tail_check(cfg, stream)?),
        Command::TrainInf => Report::TrainInf(train_inf(cfg)?),
        Command::TrainFinite => Report::TrainFinite(train_finite(cfg, stream)?),
        Command::Compare => Report::Compare(compare(cfg, stream)?),
    })
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * gaussian(rng))
}

fn random_vector(d: usize, scale: f64, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * gaussian(rng))
}

/// `B B^T / d + ridge I`, well conditioned by construction.
fn random_spd(d: usize, ridge: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let b = random_matrix(d, d, 1.0, rng);
    let s = &b * b.transpose() / d as f64 + DMatrix::identity(d, d) * ridge;
    (&s + s.transpose()) * 0.5
}

/// SPD with operator norm 1, inside the regime the regression theory covers.
fn random_unit_spd(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let s = random_spd(d, 0.2, rng);
    &s / op_norm(&s)
}

// ---------------------------------------------------------------------------
// gaussian-check

#[derive(Debug, Clone, Serialize)]
pub struct ForwardRow {
    pub instance: usize,
    pub coord: usize,
    pub empirical: f64,
    pub closed_form: f64,
    /// Delta-method standard error of the self-normalized softmax average.
    pub stderr: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PushforwardRow {
    pub instance: usize,
    pub stat: &'static str,
    pub i: usize,
    pub j: usize,
    pub sampled: f64,
    pub closed_form: f64,
    pub stderr: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GaussianCheckReport {
    pub forward: Vec<ForwardRow>,
    pub pushforward: Vec<PushforwardRow>,
}

impl GaussianCheckReport {
    pub fn max_forward_z(&self) -> f64 {
        self.forward.iter().map(|r| r.z.abs()).fold(0.0, f64::max)
    }

    pub fn max_pushforward_z(&self) -> f64 {
        self.pushforward.iter().map(|r| r.z.abs()).fold(0.0, f64::max)
    }
}

fn z_score(a: f64, b: f64, se: f64) -> f64 {
    if se > 0.0 {
        (a - b) / se
    } else if a == b {
        0.0
    } else {
        f64::INFINITY
    }
}

fn gaussian_check(cfg: &ExperimentConfig, stream: SeededStream) -> Result<GaussianCheckReport> {
    let s = &cfg.gaussian;
    if s.instances == 0 || s.dim == 0 || s.prompt_len < 2 || s.pushforward_draws < 2 {
        return Err(Error::validation(
            "gaussian check needs instances >= 1, dim >= 1, prompt_len >= 2, pushforward_draws >= 2",
        ));
    }
    let d = s.dim;
    let per_instance = map_indexed(s.instances, |inst| -> Result<_> {
        let root = stream.child(inst as u64);
        let mut rng = root.child(0).rng();
        let scale = 1.0 / (d as f64).sqrt();
        let g = GaussianMeasure::new(random_vector(d, 0.5, &mut rng), random_spd(d, 0.2, &mut rng))?;
        let p = AttentionParams::new(
            random_matrix(d, d, s.u_scale * scale, &mut rng),
            random_matrix(d, d, scale, &mut rng),
        )?;
        let q = QueryPoint::new(random_vector(d, 1.0, &mut rng))?;

        let prompt = g.sample(s.prompt_len, root.child(1))?;
        let empirical = forward_empirical(&p, &prompt, &q)?;
        let closed = forward_gaussian(&p, &g, &q)?;
        let stderr = softmax_average_stderr(&p, &prompt, &q, &empirical);
        let forward: Vec<ForwardRow> = (0..d)
            .map(|c| ForwardRow {
                instance: inst,
                coord: c,
                empirical: empirical[c],
                closed_form: closed[c],
                stderr: stderr[c],
                z: z_score(empirical[c], closed[c], stderr[c]),
            })
            .collect();

        let law = pushforward_gaussian(&p, &g)?;
        let draws = g.sample(s.pushforward_draws, root.child(2))?;
        let outputs = draws
            .tokens()
            .map(|z| Ok(forward_gaussian(&p, &g, &QueryPoint::from_slice(z)?)?.as_slice().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let outputs = EmpiricalMeasure::from_rows(&outputs)?;
        let (mean, cov) = (outputs.mean(), outputs.covariance());
        let (c, n) = (law.cov(), s.pushforward_draws as f64);
        let mut push = Vec::new();
        for i in 0..d {
            let se = (c[(i, i)] / n).sqrt();
            push.push(PushforwardRow {
                instance: inst,
                stat: "mean",
                i,
                j: 0,
                sampled: mean[i],
                closed_form: law.mean()[i],
                stderr: se,
                z: z_score(mean[i], law.mean()[i], se),
            });
        }
        for i in 0..d {
            for j in i..d {
                // Gaussian sampling variance of a covariance entry
                let se = ((c[(i, i)] * c[(j, j)] + c[(i, j)].powi(2)) / n).sqrt();
                push.push(PushforwardRow {
                    instance: inst,
                    stat: "cov",
                    i,
                    j,
                    sampled: cov[(i, j)],
                    closed_form: c[(i, j)],
                    stderr: se,
                    z: z_score(cov[(i, j)], c[(i, j)], se),
                });
            }
        }
        Ok((forward, push))
    });
    let mut report = GaussianCheckReport {
        forward: Vec::new(),
        pushforward: Vec::new(),
    };
    for r in per_instance {
        let (f, p) = r?;
        report.forward.extend(f);
        report.pushforward.extend(p);
    }
    Ok(report)
}

/// Per-coordinate standard error of `sum_k w_k V z_k` with `w = softmax`:
/// `sqrt(sum_k w_k^2 (V z_k - estimate)^2)`.
fn softmax_average_stderr(
    p: &AttentionParams,
    prompt: &EmpiricalMeasure,
    q: &QueryPoint,
    estimate: &DVector<f64>,
) -> Vec<f64> {
    let uq = &p.u * q.as_vector();
    let logits: Vec<f64> = prompt
        .tokens()
        .map(|z| z.iter().zip(uq.iter()).map(|(a, b)| a * b).sum())
        .collect();
    let w = softmax_weights(&logits);
    let d = p.dim();
    let mut var = vec![0.0; d];
    for (wk, z) in w.iter().zip(prompt.tokens()) {
        for (c, slot) in var.iter_mut().enumerate() {
            let y: f64 = (0..d).map(|j| p.v[(c, j)] * z[j]).sum();
            *slot += wk * wk * (y - estimate[c]).powi(2);
        }
    }
    var.into_iter().map(f64::sqrt).collect()
}

// ---------------------------------------------------------------------------
// check-gradients

#[derive(Debug, Clone, Serialize)]
pub struct GradientRow {
    pub gradient: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub worst_instance: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    pub rows: Vec<GradientRow>,
}

impl GradientReport {
    pub fn row(&self, name: GradientName) -> Option<&GradientRow> {
        self.rows.iter().find(|r| r.gradient == name.label())
    }

    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

fn corrupt(name: GradientName, target: Option<GradientName>, g: &mut [f64]) {
    if target == Some(name) {
        g[0] += 1e-3 * g[0].abs().max(1.0);
    }
}

/// Worst relative error of one gradient on one random instance.
fn gradient_instance(cfg: &ExperimentConfig, name: GradientName, stream: SeededStream) -> Result<f64> {
    let s = &cfg.gradients;
    let d = s.dim;
    let mut rng = stream.child(0).rng();
    let h = s.fd_step;
    let scale = 1.0 / (d as f64).sqrt();
    let p = AttentionParams::new(random_matrix(d, d, scale, &mut rng), random_matrix(d, d, 1.0, &mut rng))?;
    let q = QueryPoint::new(random_vector(d, 1.0, &mut rng))?;
    let prompt = GaussianMeasure::standard(d).sample(s.prompt_len, stream.child(1))?;
    let out = |p: &AttentionParams| cfg.convention().forward(p, &prompt, &q);
    // the analytic gradients are for the prompt the forward pass actually sees
    let seen = match cfg.convention() {
        crate::attention::QueryConvention::Fresh => prompt.clone(),
        crate::attention::QueryConvention::IncludedInPrompt => prompt.with_token(q.as_vector().as_slice())?,
    };
    let c = random_vector(d, 1.0, &mut rng);
    let nan = f64::NAN;

    let worst = match name {
        GradientName::GradV => {
            // probe c^T V wbar, whose V-gradient is c wbar^T
            let wbar = grad_v_empirical(&p, &seen, &q)?;
            let mut g = flat(&(&c * wbar.transpose()));
            corrupt(name, s.corrupt, &mut g);
            let f = |x: &[f64]| {
                let p = AttentionParams {
                    u: p.u.clone(),
                    v: DMatrix::from_column_slice(d, d, x),
                };
                out(&p).map(|o| c.dot(&o)).unwrap_or(nan)
            };
            finite_diff_check(f, p.v.as_slice(), &g, h)?.max_rel_error
        }
        GradientName::GradU => {
            let mut worst = 0.0_f64;
            for row in 0..d {
                let mut g = flat(&grad_u_empirical(&p, &seen, &q, row)?);
                if row == 0 {
                    corrupt(name, s.corrupt, &mut g);
                }
                let f = |x: &[f64]| {
                    let p = AttentionParams {
                        u: DMatrix::from_column_slice(d, d, x),
                        v: p.v.clone(),
                    };
                    out(&p).map(|o| o[row]).unwrap_or(nan)
                };
                worst = worst.max(finite_diff_check(f, p.u.as_slice(), &g, h)?.max_rel_error);
            }
            worst
        }
        GradientName::GradKq => {
            let kqv = KqvParams::new(
                random_matrix(d, d, scale.sqrt(), &mut rng),
                random_matrix(d, d, scale.sqrt(), &mut rng),
                p.v.clone(),
            )?;
            let uv = kqv_to_uv(&kqv);
            // probe c^T output so every row contributes
            let g_u = (0..d).try_fold(DMatrix::zeros(d, d), |acc, row| {
                Ok::<_, Error>(acc + grad_u_empirical(&uv, &seen, &q, row)? * c[row])
            })?;
            let (gk, gq) = grad_kq_from_u(&kqv, &g_u);
            let mut g = [flat(&gk), flat(&gq)].concat();
            corrupt(name, s.corrupt, &mut g);
            let point = [flat(&kqv.k), flat(&kqv.q)].concat();
            let f = |x: &[f64]| {
                let k = DMatrix::from_column_slice(d, d, &x[..d * d]);
                let qm = DMatrix::from_column_slice(d, d, &x[d * d..]);
                let uv = kqv_to_uv(&KqvParams {
                    k,
                    q: qm,
                    v: kqv.v.clone(),
                });
                out(&uv).map(|o| c.dot(&o)).unwrap_or(nan)
            };
            finite_diff_check(f, &point, &g, h)?.max_rel_error
        }
        GradientName::GradRiskInfBlock => {
            let model = IclModel::new(random_unit_spd(d, &mut rng), 0.0)?;
            let b = BlockParams {
                a: random_matrix(d, d, scale, &mut rng),
                v: gaussian(&mut rng),
            };
            let grad = grad_risk_inf_block(&b, &model)?;
            let mut g = [flat(&grad.a), vec![grad.v]].concat();
            corrupt(name, s.corrupt, &mut g);
            let point = [flat(&b.a), vec![b.v]].concat();
            let f = |x: &[f64]| {
                let b = BlockParams {
                    a: DMatrix::from_column_slice(d, d, &x[..d * d]),
                    v: x[d * d],
                };
                risk_inf_block(&b, &model).map(|r| r.value).unwrap_or(nan)
            };
            finite_diff_check(f, &point, &g, h)?.max_rel_error
        }
        GradientName::GradRiskFiniteMc => {
            let model = IclModel::new(random_unit_spd(d, &mut rng), 0.0)?;
            let n = d + 1;
            let p = AttentionParams::new(random_matrix(n, n, 0.5, &mut rng), random_matrix(n, n, 0.5, &mut rng))?;
            let mc = stream.child(2);
            let grad = grad_risk_finite_mc(&p, &model, s.risk_prompt_len, s.risk_batch, mc)?;
            let mut g = [flat(&grad.u), flat(&grad.v)].concat();
            corrupt(name, s.corrupt, &mut g);
            let point = [flat(&p.u), flat(&p.v)].concat();
            let f = |x: &[f64]| {
                let p = AttentionParams {
                    u: DMatrix::from_column_slice(n, n, &x[..n * n]),
                    v: DMatrix::from_column_slice(n, n, &x[n * n..]),
                };
                risk_finite_mc(&p, &model, s.risk_prompt_len, s.risk_batch, mc)
                    .map(|r| r.value)
                    .unwrap_or(nan)
            };
            finite_diff_check(f, &point, &g, h)?.max_rel_error
        }
    };
    Ok(worst)
}

fn check_gradients(cfg: &ExperimentConfig, stream: SeededStream) -> Result<GradientReport> {
    let s = &cfg.gradients;
    if s.instances == 0 || s.dim == 0 || s.prompt_len == 0 {
        return Err(Error::validation("gradient check needs instances, dim and prompt_len >= 1"));
    }
    let rows = GradientName::ALL
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let errors = map_indexed(s.instances, |i| gradient_instance(cfg, name, stream.path(&[k as u64, i as u64])))
                .into_iter()
                .collect::<Result<Vec<f64>>>()?;
            let (worst_instance, max_rel_error) = errors
                .iter()
                .copied()
                .enumerate()
                .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
            Ok(GradientRow {
                gradient: name.label(),
                instances: s.instances,
                max_rel_error,
                worst_instance,
                tolerance: s.tolerance,
                passed: max_rel_error <= s.tolerance,
            })
        })
        .collect::<Result<_>>()?;
    Ok(GradientReport { rows })
}

// ---------------------------------------------------------------------------
// concentration

#[derive(Debug, Clone, Serialize)]
pub struct AnchorRow {
    #[serde(rename = "L")]
    pub l: usize,
    pub mse: f64,
    pub stderr: f64,
    pub closed_form: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub name: String,
    pub result: SweepResult,
    pub fit: RateFit,
    /// Consecutive grid pairs not decreasing by more than 2 combined SE.
    pub non_decreasing_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationReport {
    pub sweeps: Vec<SweepSummary>,
    pub anchor: Option<Vec<AnchorRow>>,
}

impl ConcentrationReport {
    pub fn sweep(&self, name: &str) -> Option<&SweepSummary> {
        self.sweeps.iter().find(|s| s.name == name)
    }
}

fn sweep_config(cfg: &ExperimentConfig, stream: SeededStream) -> Result<SweepConfig> {
    let c = &cfg.concentration;
    let dim = c.dim;
    let nu_cov = config::matrix("concentration.nu_cov", &c.nu_cov)?;
    Ok(SweepConfig {
        l_grid: c.l_grid.clone(),
        reps: c.reps,
        n_query: c.n_query,
        mu: GaussianMeasure::new(
            config::vector("concentration.mu_mean", &c.mu_mean)?,
            config::matrix("concentration.mu_cov", &c.mu_cov)?,
        )?,
        nu: GaussianMeasure::new(DVector::zeros(dim), nu_cov)?,
        params: AttentionParams::new(
            config::matrix("concentration.u", &c.u)?,
            config::matrix("concentration.v", &c.v)?,
        )?,
        stream,
        convention: cfg.convention(),
    })
}

fn concentration(cfg: &ExperimentConfig, stream: SeededStream) -> Result<ConcentrationReport> {
    let base = sweep_config(cfg, stream)?;
    base.validate()?;
    let mut sweeps = Vec::new();
    let mut anchor = None;
    for name in &cfg.concentration.sweeps {
        let result = match name {
            SweepName::Output => output_deviation_sweep(&base)?,
            SweepName::GradV => grad_v_deviation_sweep(&base)?,
            SweepName::GradU => grad_u_deviation_sweep(&base, cfg.concentration.grad_u_row)?,
            SweepName::ZeroUAnchor => {
                let dim = base.params.dim();
                let zero = SweepConfig {
                    params: AttentionParams::new(DMatrix::zeros(dim, dim), base.params.v.clone())?,
                    ..base.clone()
                };
                let res = output_deviation_sweep(&zero)?;
                anchor = Some(
                    res.points
                        .iter()
                        .map(|pt| {
                            let closed_form = zero_u_output_mse(&zero.params.v, &zero.mu, pt.l);
                            AnchorRow {
                                l: pt.l,
                                mse: pt.mse,
                                stderr: pt.stderr,
                                closed_form,
                                z: z_score(pt.mse, closed_form, pt.stderr),
                            }
                        })
                        .collect(),
                );
                continue;
            }
        };
        sweeps.push(SweepSummary {
            name: result.kind.label(),
            fit: fit_loglog_rate(&result)?,
            non_decreasing_pairs: result.non_decreasing_pairs(2.0),
            result,
        });
    }
    Ok(ConcentrationReport { sweeps, anchor })
}

// ---------------------------------------------------------------------------
// moment-check, tail-check

#[derive(Debug, Clone, Serialize)]
pub struct MomentRow {
    pub instance: usize,
    pub l4_norm: f64,
    pub stderr: f64,
    pub bound: f64,
    pub violated: bool,
}

impl MomentRow {
    fn new(instance: usize, r: MomentReport) -> Self {
        Self {
            instance,
            l4_norm: r.l4_norm,
            stderr: r.stderr,
            bound: r.bound,
            violated: r.violated,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentCheckReport {
    pub rows: Vec<MomentRow>,
}

impl MomentCheckReport {
    pub fn any_violation(&self) -> bool {
        self.rows.iter().any(|r| r.violated)
    }
}

fn moment_check(cfg: &ExperimentConfig, stream: SeededStream) -> Result<MomentCheckReport> {
    let s = &cfg.moment;
    let d = s.dim;
    if s.instances == 0 || d == 0 {
        return Err(Error::validation("moment check needs instances >= 1 and dim >= 1"));
    }
    let rows = map_indexed(s.instances, |i| -> Result<MomentRow> {
        let root = stream.child(i as u64);
        let mut rng = root.child(0).rng();
        let scale = 1.0 / (d as f64).sqrt();
        let g = GaussianMeasure::new(DVector::zeros(d), random_spd(d, 0.1, &mut rng))?;
        let p = AttentionParams::new(random_matrix(d, d, scale, &mut rng), random_matrix(d, d, scale, &mut rng))?;
        // query law with |cov|_op exactly 1
        let nu = GaussianMeasure::new(DVector::zeros(d), random_unit_spd(d, &mut rng))?;
        let report = moment_bound_check(&p, &g, &nu, s.samples, root.child(1))?;
        Ok(MomentRow::new(i, report))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(MomentCheckReport { rows })
}

fn tail_check(cfg: &ExperimentConfig, stream: SeededStream) -> Result<TailReport> {
    let s = &cfg.tail;
    let cov = config::matrix("tail.cov", &s.cov)?;
    let g = GaussianMeasure::new(DVector::zeros(s.dim), cov)?;
    let samples = g.sample(s.samples, stream)?;
    subgaussian_tail_check(&samples, s.dim, &s.t_grid)
}

// ---------------------------------------------------------------------------
// train-inf, train-finite, compare

#[derive(Debug, Clone, Serialize)]
pub struct InfTrainReport {
    pub final_t: f64,
    pub final_risk: f64,
    pub a_rel_error: f64,
    pub v_rel_error: f64,
    pub distance_to_optimum: f64,
    pub halvings: usize,
    pub nonincreasing: bool,
    pub max_step_lipschitz: f64,
    #[serde(skip)]
    pub trace: FlowTrace,
}

#[derive(Debug, Clone, Serialize)]
pub struct FiniteRun {
    #[serde(rename = "L")]
    pub l: usize,
    pub final_t: f64,
    pub final_risk: f64,
    pub stderr: f64,
    pub distance_to_optimum: f64,
    pub diagnostics: BlockDiagnostics,
    pub halvings: usize,
    #[serde(skip)]
    pub trace: FlowTrace,
}

#[derive(Debug, Clone, Serialize)]
pub struct FiniteTrainReport {
    pub runs: Vec<FiniteRun>,
}

impl FiniteTrainReport {
    pub fn run(&self, l: usize) -> Option<&FiniteRun> {
        self.runs.iter().find(|r| r.l == l)
    }
}

fn model_and_init(cfg: &ExperimentConfig) -> Result<(IclModel, AttentionParams, BlockParams)> {
    let sigma = config::matrix("icl.sigma", &Some(cfg.icl.sigma.clone()))?;
    let model = IclModel::new(sigma, cfg.icl.noise_std)?;
    let theta = config::matrix("icl.theta", &cfg.icl.theta)?;
    let (full, block) = init_params(
        &InitConfig {
            alpha: cfg.icl.alpha,
            theta,
        },
        model.sigma(),
    )?;
    Ok((model, full, block))
}

fn flow_config(cfg: &ExperimentConfig, mode: FlowMode, t_max: f64, l: usize, stream: SeededStream) -> FlowConfig {
    let t = &cfg.train;
    FlowConfig {
        step: t.step,
        t_max,
        stop_risk: t.stop_risk,
        log_every: t.log_every,
        mode,
        prompt_len: l,
        batch: t.batch,
        eval_batch: t.eval_batch,
        stream,
        freeze_v: t.freeze_v,
    }
}

fn train_inf(cfg: &ExperimentConfig) -> Result<InfTrainReport> {
    let (model, _, init) = model_and_init(cfg)?;
    let fc = flow_config(cfg, FlowMode::InfiniteBlock, cfg.train.infinite_t_max, 1, SeededStream::from_seed(cfg.seed));
    let trace = integrate_infinite(&init, &model, &fc)?;
    let (opt_full, opt) = optimal_params(model.sigma())?;
    let last = trace.params.last().expect("trace has its initial point");
    let crate::flow::Snapshot::Block(b) = last else {
        unreachable!("infinite flow records block snapshots")
    };
    Ok(InfTrainReport {
        final_t: *trace.times.last().expect("nonempty"),
        final_risk: trace.final_risk().expect("nonempty").value,
        a_rel_error: frobenius(&(&b.a - &opt.a)) / frobenius(&opt.a),
        v_rel_error: (b.v - opt.v).abs() / opt.v.abs(),
        distance_to_optimum: b.to_full().distance(&opt_full),
        halvings: trace.events.len(),
        nonincreasing: trace.is_nonincreasing(),
        max_step_lipschitz: trace.step_lipschitz.iter().copied().fold(0.0, f64::max),
        trace,
    })
}

fn finite_runs(
    cfg: &ExperimentConfig,
    model: &IclModel,
    init: &AttentionParams,
    stream: SeededStream,
) -> Result<Vec<FiniteRun>> {
    let (opt_full, _) = optimal_params(model.sigma())?;
    let lens = &cfg.train.prompt_lens;
    if lens.is_empty() {
        return Err(Error::validation("train.prompt_lens is empty"));
    }
    // one stream for every L: the runs share their Monte-Carlo draws
    map_indexed(lens.len(), |k| -> Result<FiniteRun> {
        let l = lens[k];
        let fc = flow_config(cfg, FlowMode::FiniteMc, cfg.train.finite_horizon(k)?, l, stream);
        let trace = integrate_finite(init, model, &fc)?;
        let p = trace.final_params().expect("nonempty");
        let r = trace.final_risk().expect("nonempty");
        Ok(FiniteRun {
            l,
            final_t: *trace.times.last().expect("nonempty"),
            final_risk: r.value,
            stderr: r.stderr,
            distance_to_optimum: p.distance(&opt_full),
            diagnostics: block_diagnostics(&p),
            halvings: trace.events.len(),
            trace,
        })
    })
    .into_iter()
    .collect()
}

fn train_finite(cfg: &ExperimentConfig, stream: SeededStream) -> Result<FiniteTrainReport> {
    let (model, init, _) = model_and_init(cfg)?;
    Ok(FiniteTrainReport {
        runs: finite_runs(cfg, &model, &init, stream.child(0))?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskRow {
    #[serde(rename = "L")]
    pub l: usize,
    pub risk: f64,
    pub stderr: f64,
    pub reference_risk: f64,
    pub epsilon: f64,
    pub within: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRow {
    #[serde(rename = "L")]
    pub l: usize,
    pub replicate: usize,
    pub sup_deviation: f64,
    pub deviation_at_zero: f64,
    pub final_risk: f64,
    pub final_stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub epsilon: f64,
    pub reference_final_risk: f64,
    pub risks: Vec<RiskRow>,
    /// First replicate; the canonical `L,sup_deviation` table.
    #[serde(skip)]
    pub deviation: DeviationReport,
    pub replicates: Vec<ReplicateRow>,
    #[serde(skip)]
    pub paths: Vec<(usize, Vec<f64>)>,
    #[serde(skip)]
    pub times: Vec<f64>,
}

impl CompareReport {
    /// `(mean, standard error)` of the sup-deviation across replicates.
    pub fn deviation_stats(&self, l: usize) -> (f64, f64) {
        let v: Vec<f64> = self
            .replicates
            .iter()
            .filter(|r| r.l == l)
            .map(|r| r.sup_deviation)
            .collect();
        crate::par::mean_and_stderr(&v)
    }
}

fn compare(cfg: &ExperimentConfig, stream: SeededStream) -> Result<CompareReport> {
    let (model, init, init_block) = model_and_init(cfg)?;
    let reps = cfg.compare.replicates;
    if reps == 0 {
        return Err(Error::validation("compare.replicates must be at least 1"));
    }
    let reference = integrate_infinite(
        &init_block,
        &model,
        &flow_config(cfg, FlowMode::InfiniteBlock, cfg.train.longest_finite_horizon(), 1, stream),
    )?;
    let ref_risk = reference.final_risk().expect("nonempty").value;
    let epsilon = cfg.compare.epsilon.unwrap_or(0.05 * model.null_risk());
    let mut replicates = Vec::new();
    let mut first = Vec::new();
    for r in 0..reps {
        let runs = finite_runs(cfg, &model, &init, stream.child(r as u64))?;
        for run in &runs {
            let path = deviation_path(&run.trace, &reference)?;
            replicates.push(ReplicateRow {
                l: run.l,
                replicate: r,
                sup_deviation: path.iter().copied().fold(0.0, f64::max),
                deviation_at_zero: path[0],
                final_risk: run.final_risk,
                final_stderr: run.stderr,
            });
        }
        if r == 0 {
            first = runs;
        }
    }
    let pairs: Vec<(usize, &FlowTrace)> = first.iter().map(|r| (r.l, &r.trace)).collect();
    let deviation = trajectory_deviation(&pairs, &reference)?;
    let paths = first
        .iter()
        .map(|r| Ok((r.l, deviation_path(&r.trace, &reference)?)))
        .collect::<Result<_>>()?;
    let risks = first
        .iter()
        .map(|r| RiskRow {
            l: r.l,
            risk: r.final_risk,
            stderr: r.stderr,
            reference_risk: ref_risk,
            epsilon,
            within: r.final_risk <= ref_risk + epsilon,
        })
        .collect();
    Ok(CompareReport {
        epsilon,
        reference_final_risk: ref_risk,
        risks,
        deviation,
        replicates,
        paths,
        times: reference.times.clone(),
    })
}

// ---------------------------------------------------------------------------
// output files

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(dir, name, text.as_bytes())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.into_inner().map_err(|e| Error::Serialization(e.to_string()))
}

fn write_trace(dir: &Path, stem: &str, trace: &FlowTrace) -> Result<()> {
    let mut jsonl = Vec::new();
    trace.write_jsonl(&mut jsonl)?;
    write_file(dir, &format!("trace_{stem}.jsonl"), &jsonl)?;
    let mut csv = Vec::new();
    trace.write_risk_csv(&mut csv)?;
    write_file(dir, &format!("risk_{stem}.csv"), &csv)
}

fn risk_series(label: String, trace: &FlowTrace) -> Series {
    Series {
        label,
        points: trace
            .times
            .iter()
            .zip(&trace.risks)
            .map(|(t, r)| (*t, r.value, r.stderr))
            .collect(),
        fit: None,
    }
}

fn risk_chart(title: &str, series: Vec<Series>) -> Chart {
    Chart {
        title: title.into(),
        x_label: "t".into(),
        y_label: "risk".into(),
        log_x: false,
        log_y: true,
        series,
        note: None,
    }
}

fn write_outputs(dir: &Path, cfg: &ExperimentConfig, report: &Report) -> Result<Vec<String>> {
    let mut failures = Vec::new();
    match report {
        Report::Gaussian(r) => {
            write_file(dir, "gaussian_forward.csv", &csv_bytes(&r.forward)?)?;
            write_file(dir, "gaussian_pushforward.csv", &csv_bytes(&r.pushforward)?)?;
            write_json(
                dir,
                "summary.json",
                &serde_json::json!({
                    "max_forward_abs_z": r.max_forward_z(),
                    "max_pushforward_abs_z": r.max_pushforward_z(),
                }),
            )?;
        }
        Report::Gradients(r) => {
            write_file(dir, "gradients.csv", &csv_bytes(&r.rows)?)?;
            write_json(dir, "summary.json", r)?;
            failures.extend(r.rows.iter().filter(|x| !x.passed).map(|x| {
                format!(
                    "{}: max relative error {:e} exceeds {:e}",
                    x.gradient, x.max_rel_error, x.tolerance
                )
            }));
        }
        Report::Concentration(r) => {
            let mut series = Vec::new();
            for s in &r.sweeps {
                write_file(
                    dir,
                    &format!("concentration_{}.csv", s.name),
                    s.result.to_csv_string()?.as_bytes(),
                )?;
                series.push(Series {
                    label: format!("{} (slope {:.2})", s.name, s.fit.slope),
                    points: s.result.points.iter().map(|p| (p.l as f64, p.mse, p.stderr)).collect(),
                    fit: Some((s.fit.slope, s.fit.intercept / std::f64::consts::LN_10)),
                });
            }
            if let Some(anchor) = &r.anchor {
                write_file(dir, "concentration_zero_u_anchor.csv", &csv_bytes(anchor)?)?;
                series.push(Series {
                    label: "zero U".into(),
                    points: anchor.iter().map(|a| (a.l as f64, a.mse, a.stderr)).collect(),
                    fit: None,
                });
            }
            if !series.is_empty() {
                let note = r
                    .sweeps
                    .iter()
                    .map(|s| format!("{} slope {:.3}", s.name, s.fit.slope))
                    .collect::<Vec<_>>()
                    .join(", ");
                let chart = Chart {
                    title: "deviation mse vs prompt length".into(),
                    x_label: "L".into(),
                    y_label: "mse".into(),
                    log_x: true,
                    log_y: true,
                    series,
                    note: Some(note),
                };
                write_file(dir, "concentration.svg", chart.to_svg().as_bytes())?;
            }
            write_json(dir, "summary.json", r)?;
        }
        Report::Moment(r) => {
            write_file(dir, "moment.csv", &csv_bytes(&r.rows)?)?;
            write_json(dir, "summary.json", &serde_json::json!({ "any_violation": r.any_violation() }))?;
        }
        Report::Tail(r) => {
            write_file(dir, "tail.csv", &csv_bytes(&r.rows)?)?;
            write_json(dir, "summary.json", r)?;
        }
        Report::TrainInf(r) => {
            write_trace(dir, "inf", &r.trace)?;
            write_file(
                dir,
                "risk_inf.svg",
                risk_chart("infinite-prompt risk", vec![risk_series("L = inf".into(), &r.trace)])
                    .to_svg()
                    .as_bytes(),
            )?;
            write_json(dir, "summary.json", r)?;
        }
        Report::TrainFinite(r) => {
            for run in &r.runs {
                write_trace(dir, &format!("L{}", run.l), &run.trace)?;
            }
            let table: Vec<_> = r.runs.iter().map(|x| (x.l, x.final_risk, x.stderr)).collect();
            let mut wtr = csv::Writer::from_writer(Vec::new());
            wtr.write_record(["step_or_L", "risk", "stderr"])?;
            for row in table {
                wtr.serialize(row)?;
            }
            let bytes = wtr.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
            write_file(dir, "final_risk.csv", &bytes)?;
            let series = r
                .runs
                .iter()
                .map(|x| risk_series(format!("L = {}", x.l), &x.trace))
                .collect();
            write_file(dir, "risk_finite.svg", risk_chart("finite-prompt risk", series).to_svg().as_bytes())?;
            write_json(dir, "summary.json", r)?;
        }
        Report::Compare(r) => {
            let mut bytes = Vec::new();
            r.deviation.write_csv(&mut bytes)?;
            write_file(dir, "deviation.csv", &bytes)?;
            write_file(dir, "risk_table.csv", &csv_bytes(&r.risks)?)?;
            if cfg.compare.replicates > 1 {
                write_file(dir, "deviation_replicates.csv", &csv_bytes(&r.replicates)?)?;
            }
            let mut wtr = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["t".to_string()];
            header.extend(r.paths.iter().map(|(l, _)| format!("L{l}")));
            wtr.write_record(&header)?;
            for (j, t) in r.times.iter().enumerate() {
                let mut rec = vec![t.to_string()];
                rec.extend(r.paths.iter().map(|(_, p)| p.get(j).map(|x| x.to_string()).unwrap_or_default()));
                wtr.write_record(&rec)?;
            }
            let bytes = wtr.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
            write_file(dir, "deviation_path.csv", &bytes)?;
            write_json(dir, "summary.json", r)?;
        }
    }
    Ok(failures)
}

/// A few human-readable lines about a finished run.
pub fn describe(report: &Report) -> Vec<String> {
    match report {
        Report::Gaussian(r) => vec![
            format!("forward: max |z| = {:.2} over {} coordinates", r.max_forward_z(), r.forward.len()),
            format!("pushforward: max |z| = {:.2} over {} statistics", r.max_pushforward_z(), r.pushforward.len()),
        ],
        Report::Gradients(r) => r
            .rows
            .iter()
            .map(|x| {
                let verdict = if x.passed { "ok" } else { "FAIL" };
                format!("{:<22} max rel error {:.2e}  {verdict}", x.gradient, x.max_rel_error)
            })
            .collect(),
        Report::Concentration(r) => {
            let mut lines: Vec<String> = r
                .sweeps
                .iter()
                .map(|s| {
                    format!(
                        "{:<12} slope {:.3} (r^2 {:.3}), pairs not decreasing by 2 SE: {}",
                        s.name,
                        s.fit.slope,
                        s.fit.r_squared,
                        s.non_decreasing_pairs.len()
                    )
                })
                .collect();
            if let Some(a) = &r.anchor {
                let worst = a.iter().map(|x| x.z.abs()).fold(0.0, f64::max);
                lines.push(format!("zero-U anchor: max |z| vs tr(V Gamma V^T)/L = {worst:.2}"));
            }
            lines
        }
        Report::Moment(r) => vec![format!(
            "{} instances, max ratio l4/bound = {:.3}, violations: {}",
            r.rows.len(),
            r.rows.iter().map(|x| x.l4_norm / x.bound).fold(0.0, f64::max),
            r.rows.iter().filter(|x| x.violated).count()
        )],
        Report::Tail(r) => vec![format!(
            "{} samples, {} grid points, violations: {}",
            r.n,
            r.rows.len(),
            r.rows.iter().filter(|x| x.violated).count()
        )],
        Report::TrainInf(r) => vec![
            format!("t = {} risk {:.3e}", r.final_t, r.final_risk),
            format!(
                "relative error to optimum: A {:.2e}, v {:.2e}; step halvings: {}",
                r.a_rel_error, r.v_rel_error, r.halvings
            ),
        ],
        Report::TrainFinite(r) => r
            .runs
            .iter()
            .map(|x| {
                format!(
                    "L = {:<6} risk {:.4e} +- {:.1e}, off-block {:.2e}, distance to optimum {:.3}",
                    x.l, x.final_risk, x.stderr, x.diagnostics.off_block_norm, x.distance_to_optimum
                )
            })
            .collect(),
        Report::Compare(r) => {
            let mut lines = vec![format!(
                "reference risk {:.3e}, epsilon {:.4}",
                r.reference_final_risk, r.epsilon
            )];
            for (row, dev) in r.risks.iter().zip(&r.deviation.rows) {
                lines.push(format!(
                    "L = {:<6} risk {:.4e} within R_inf + eps: {}  sup deviation {:.4}",
                    row.l, row.risk, row.within, dev.sup_deviation
                ));
            }
            lines
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("train".parse::<Command>().is_err());
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut cfg = ExperimentConfig::default().resolve();
        cfg.gradients.instances = 2;
        cfg.gradients.corrupt = Some(GradientName::GradU);
        let Report::Gradients(r) = compute(Command::CheckGradients, &cfg).unwrap() else {
            unreachable!()
        };
        assert!(!r.row(GradientName::GradU).unwrap().passed);
        assert!(r.row(GradientName::GradV).unwrap().passed);
        assert!(!r.all_passed());
    }
}
