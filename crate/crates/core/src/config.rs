//! Experiment configuration.
//!
//! Configs are TOML with one table per experiment; every key is optional and
//! unknown keys are rejected. Matrix-valued keys are arrays of rows. Before a
//! run the config is [resolved](ExperimentConfig::resolve): missing matrices are
//! filled with their documented defaults so the manifest written next to the
//! outputs is complete, and feeding that manifest back through `--config`
//! reproduces the run.
//!
//! ```toml
//! seed = 2024
//! out = "runs/concentration"
//!
//! [concentration]
//! l_grid = [16, 64, 256, 1024]
//! reps = 100
//! u = [[0.5, 0.0], [0.0, 0.5]]
//! ```

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::attention::QueryConvention;
use crate::error::{Error, Result};
use crate::icl::McBatch;
use crate::linalg::{from_rows, to_rows};

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 lets the pool pick. Results never depend on it.
    pub workers: usize,
    pub include_query_in_prompt: bool,
    pub gaussian: GaussianSection,
    pub gradients: GradientSection,
    pub concentration: ConcentrationSection,
    pub moment: MomentSection,
    pub tail: TailSection,
    pub icl: IclSection,
    pub train: TrainSection,
    pub compare: CompareSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            out: PathBuf::from("out"),
            workers: 1,
            include_query_in_prompt: false,
            gaussian: Default::default(),
            gradients: Default::default(),
            concentration: Default::default(),
            moment: Default::default(),
            tail: Default::default(),
            icl: Default::default(),
            train: Default::default(),
            compare: Default::default(),
        }
    }
}

/// Empirical-vs-closed-form check on random Gaussian instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianSection {
    pub instances: usize,
    pub dim: usize,
    pub prompt_len: usize,
    pub pushforward_draws: usize,
    /// Scale of the random `U`; small values keep the softmax weights flat
    /// enough for a large effective sample size.
    pub u_scale: f64,
}

impl Default for GaussianSection {
    fn default() -> Self {
        Self {
            instances: 20,
            dim: 3,
            prompt_len: 200_000,
            pushforward_draws: 100_000,
            u_scale: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientName {
    GradV,
    GradU,
    GradKq,
    GradRiskInfBlock,
    GradRiskFiniteMc,
}

impl GradientName {
    pub const ALL: [GradientName; 5] = [
        GradientName::GradV,
        GradientName::GradU,
        GradientName::GradKq,
        GradientName::GradRiskInfBlock,
        GradientName::GradRiskFiniteMc,
    ];

    pub fn label(self) -> &'static str {
        match self {
            GradientName::GradV => "grad_v_empirical",
            GradientName::GradU => "grad_u_empirical",
            GradientName::GradKq => "grad_kq_from_u",
            GradientName::GradRiskInfBlock => "grad_risk_inf_block",
            GradientName::GradRiskFiniteMc => "grad_risk_finite_mc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientSection {
    pub instances: usize,
    pub dim: usize,
    pub prompt_len: usize,
    pub fd_step: f64,
    /// Largest accepted relative error; the command fails above it.
    pub tolerance: f64,
    /// Batch for the Monte-Carlo risk (differentiated with common random numbers).
    pub risk_batch: McBatch,
    pub risk_prompt_len: usize,
    /// Test fixture: perturb this analytic gradient before comparing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrupt: Option<GradientName>,
}

impl Default for GradientSection {
    fn default() -> Self {
        Self {
            instances: 20,
            dim: 3,
            prompt_len: 16,
            fd_step: 1e-5,
            tolerance: 1e-5,
            risk_batch: McBatch {
                n_tasks: 8,
                n_queries: 4,
            },
            risk_prompt_len: 8,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepName {
    Output,
    GradV,
    GradU,
    /// Output sweep at `U = 0`, compared with `tr(V Gamma V^T) / L`.
    ZeroUAnchor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConcentrationSection {
    pub dim: usize,
    pub l_grid: Vec<usize>,
    pub reps: usize,
    pub n_query: usize,
    pub sweeps: Vec<SweepName>,
    pub grad_u_row: usize,
    /// Defaults: `U = 0.5 I`, `V = I`, `mu = nu = N(0, I)`.
    pub u: Option<Rows>,
    pub v: Option<Rows>,
    pub mu_mean: Option<Vec<f64>>,
    pub mu_cov: Option<Rows>,
    pub nu_cov: Option<Rows>,
}

impl Default for ConcentrationSection {
    fn default() -> Self {
        Self {
            dim: 2,
            l_grid: (4..=13).map(|k| 1 << k).collect(),
            reps: 200,
            n_query: 64,
            sweeps: vec![
                SweepName::Output,
                SweepName::GradV,
                SweepName::GradU,
                SweepName::ZeroUAnchor,
            ],
            grad_u_row: 0,
            u: None,
            v: None,
            mu_mean: None,
            mu_cov: None,
            nu_cov: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentSection {
    pub instances: usize,
    pub dim: usize,
    pub samples: usize,
}

impl Default for MomentSection {
    fn default() -> Self {
        Self {
            instances: 20,
            dim: 3,
            samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailSection {
    pub dim: usize,
    pub samples: usize,
    pub t_grid: Vec<f64>,
    /// Default `I`.
    pub cov: Option<Rows>,
}

impl Default for TailSection {
    fn default() -> Self {
        Self {
            dim: 2,
            samples: 100_000,
            t_grid: (0..=10).map(|k| 2.0 * k as f64).collect(),
            cov: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IclSection {
    pub sigma: Rows,
    pub noise_std: f64,
    pub alpha: f64,
    /// Default `d^{-1/4} I`, the isotropic choice with `|Theta Theta^T|_F = 1`.
    pub theta: Option<Rows>,
}

impl Default for IclSection {
    fn default() -> Self {
        Self {
            sigma: vec![vec![1.0, 0.0], vec![0.0, 0.25]],
            noise_std: 0.0,
            alpha: 0.01,
            theta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub step: f64,
    pub log_every: usize,
    pub infinite_t_max: f64,
    pub stop_risk: f64,
    /// Horizon of finite-prompt runs and of the reference in `compare`.
    pub finite_t_max: f64,
    /// Per-length horizons aligned with `prompt_lens`; overrides `finite_t_max`.
    pub finite_t_max_by_len: Option<Vec<f64>>,
    pub prompt_lens: Vec<usize>,
    pub batch: McBatch,
    pub eval_batch: McBatch,
    pub freeze_v: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            step: 0.05,
            log_every: 20,
            infinite_t_max: 200.0,
            stop_risk: 1e-14,
            finite_t_max: 40.0,
            finite_t_max_by_len: None,
            prompt_lens: vec![64, 256, 1024],
            batch: McBatch {
                n_tasks: 64,
                n_queries: 16,
            },
            eval_batch: McBatch {
                n_tasks: 1000,
                n_queries: 8,
            },
            freeze_v: false,
        }
    }
}

impl TrainSection {
    /// Horizon of the finite run at `prompt_lens[k]`.
    pub fn finite_horizon(&self, k: usize) -> Result<f64> {
        match &self.finite_t_max_by_len {
            None => Ok(self.finite_t_max),
            Some(h) if h.len() == self.prompt_lens.len() => Ok(h[k]),
            Some(h) => Err(Error::validation(format!(
                "train.finite_t_max_by_len has {} entries, prompt_lens has {}",
                h.len(),
                self.prompt_lens.len()
            ))),
        }
    }

    /// Longest finite horizon, which is how far the `compare` reference runs.
    pub fn longest_finite_horizon(&self) -> f64 {
        match &self.finite_t_max_by_len {
            Some(h) => h.iter().copied().fold(0.0, f64::max),
            None => self.finite_t_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// Risk slack for `R_L <= R_inf + epsilon`; default `0.05 * null risk`.
    pub epsilon: Option<f64>,
    /// Independent seeds per prompt length, to gauge Monte-Carlo spread.
    pub replicates: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            epsilon: None,
            replicates: 1,
        }
    }
}

/// Written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: config.clone(),
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// What `--config` pointed at.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Set when the file was a manifest.
    pub command: Option<String>,
}

/// Reads a TOML config, or a `.json` manifest from an earlier run.
pub fn load(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config_error = |message: String| Error::Config {
        path: path.to_path_buf(),
        message,
    };
    if path.extension().is_some_and(|e| e == "json") {
        let m: Manifest = serde_json::from_str(&text).map_err(|e| config_error(e.to_string()))?;
        Ok(LoadedConfig {
            config: m.config,
            command: Some(m.command),
        })
    } else {
        let config = toml::from_str(&text).map_err(|e| config_error(e.to_string()))?;
        Ok(LoadedConfig { config, command: None })
    }
}

pub fn parse_toml(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::Config {
        path: PathBuf::from("<inline>"),
        message: e.to_string(),
    })
}

fn identity_rows(d: usize, scale: f64) -> Rows {
    to_rows(&(DMatrix::identity(d, d) * scale))
}

fn fill(slot: &mut Option<Rows>, d: usize, scale: f64) {
    slot.get_or_insert_with(|| identity_rows(d, scale));
}

impl ExperimentConfig {
    /// Fills every defaulted matrix so the config is self-describing.
    pub fn resolve(mut self) -> Self {
        let c = &mut self.concentration;
        fill(&mut c.u, c.dim, 0.5);
        fill(&mut c.v, c.dim, 1.0);
        fill(&mut c.mu_cov, c.dim, 1.0);
        fill(&mut c.nu_cov, c.dim, 1.0);
        c.mu_mean.get_or_insert_with(|| vec![0.0; c.dim]);
        fill(&mut self.tail.cov, self.tail.dim, 1.0);
        let d = self.icl.sigma.len();
        fill(&mut self.icl.theta, d, (d.max(1) as f64).powf(-0.25));
        self
    }

    pub fn convention(&self) -> QueryConvention {
        if self.include_query_in_prompt {
            QueryConvention::IncludedInPrompt
        } else {
            QueryConvention::Fresh
        }
    }
}

pub(crate) fn matrix(name: &str, rows: &Option<Rows>) -> Result<DMatrix<f64>> {
    let rows = rows
        .as_ref()
        .ok_or_else(|| Error::validation(format!("`{name}` is unresolved")))?;
    from_rows(rows).map_err(|e| Error::validation(format!("`{name}`: {e}")))
}

pub(crate) fn vector(name: &str, v: &Option<Vec<f64>>) -> Result<DVector<f64>> {
    v.as_ref()
        .map(|v| DVector::from_column_slice(v))
        .ok_or_else(|| Error::validation(format!("`{name}` is unresolved")))
}
