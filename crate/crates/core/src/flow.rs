//! Gradient-flow training of the in-context regression risk.
//!
//! Both flows are integrated with explicit Euler. Snapshots are logged on the
//! fixed grid `t_j = j * step * log_every`; when the logged risk goes up over a
//! logging interval, the interval is replayed from its start with half the step
//! (and twice the substeps), so the time grid never moves and runs launched with
//! the same `(step, log_every)` stay comparable point by point.
//!
//! In finite-prompt mode the exact risk is not computable; each Euler step uses
//! a fresh Monte-Carlo gradient batch and logged risks come from a fixed
//! evaluation stream (the same samples at every logged time). Gradient batches
//! are keyed by step only, not by prompt length, so flows at different `L` see
//! common random numbers.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::icl::{
    grad_risk_finite_mc, grad_risk_inf_block, risk_finite_mc, risk_inf_block, BlockParams, IclModel, McBatch,
    RiskEstimate,
};
use crate::rng::SeededStream;

/// Logged risk above this multiple of the initial risk aborts the run.
pub const DIVERGENCE_FACTOR: f64 = 1e3;
pub const MAX_HALVINGS: u32 = 30;
/// Risks at or below this level are numerically zero; increases between two
/// such values are rounding, not instability.
pub const NUMERICAL_ZERO: f64 = 1e-20;
/// Finite mode only treats a risk increase beyond this many combined
/// standard errors as real.
pub const FINITE_INCREASE_SE: f64 = 3.0;

const TRAIN_KEY: u64 = 0x7472_6169_6e;
const EVAL_KEY: u64 = 0x6576_616c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowMode {
    InfiniteBlock,
    FiniteMc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub step: f64,
    pub t_max: f64,
    pub stop_risk: f64,
    pub log_every: usize,
    pub mode: FlowMode,
    /// Prompt length (finite mode).
    pub prompt_len: usize,
    /// Gradient batch per Euler step (finite mode).
    pub batch: McBatch,
    /// Batch behind every logged risk (finite mode).
    pub eval_batch: McBatch,
    pub stream: SeededStream,
    /// Keep `V` at its initial value (debugging aid).
    #[serde(default)]
    pub freeze_v: bool,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::validation(format!("step must be > 0, got {}", self.step)));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::validation(format!("t_max must be > 0, got {}", self.t_max)));
        }
        if !(self.stop_risk >= 0.0) {
            return Err(Error::validation("stop_risk must be >= 0"));
        }
        if self.log_every == 0 {
            return Err(Error::validation("log_every must be at least 1"));
        }
        if self.mode == FlowMode::FiniteMc {
            if self.prompt_len == 0 {
                return Err(Error::validation("finite mode needs a prompt length >= 1"));
            }
            self.batch.validate()?;
            self.eval_batch.validate()?;
        }
        Ok(())
    }

    /// Time between two logged snapshots.
    pub fn log_interval(&self) -> f64 {
        self.step * self.log_every as f64
    }

    fn n_intervals(&self) -> usize {
        (self.t_max / self.log_interval() + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalvingEvent {
    /// Start of the replayed logging interval.
    pub t: f64,
    pub new_step: f64,
    pub risk_before: f64,
    pub rejected_risk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Snapshot {
    Block(BlockParams),
    Full(AttentionParams),
}

impl Snapshot {
    pub fn to_full(&self) -> AttentionParams {
        match self {
            Snapshot::Block(b) => b.to_full(),
            Snapshot::Full(p) => p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowTrace {
    pub times: Vec<f64>,
    pub params: Vec<Snapshot>,
    pub risks: Vec<RiskEstimate>,
    pub events: Vec<HalvingEvent>,
    /// Per logged interval, `h * |g_k+1 - g_k| / |theta_k+1 - theta_k|` maximised
    /// over its substeps (infinite mode only; values near 2 signal instability).
    pub step_lipschitz: Vec<f64>,
    /// Base step; `times[j] / step` is the nominal step count.
    pub step: f64,
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    t: f64,
    step: u64,
    u: Vec<f64>,
    v: Vec<f64>,
    risk: f64,
    stderr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    events: Option<&'a [HalvingEvent]>,
}

impl FlowTrace {
    fn push(&mut self, t: f64, params: Snapshot, risk: RiskEstimate) {
        self.times.push(t);
        self.params.push(params);
        self.risks.push(risk);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_risk(&self) -> Option<RiskEstimate> {
        self.risks.last().copied()
    }

    pub fn final_params(&self) -> Option<AttentionParams> {
        self.params.last().map(Snapshot::to_full)
    }

    /// Logged risks never increase (differences between numerically zero
    /// risks are ignored).
    pub fn is_nonincreasing(&self) -> bool {
        self.risks.windows(2).all(|w| {
            w[1].value <= w[0].value || (w[0].value <= NUMERICAL_ZERO && w[1].value <= NUMERICAL_ZERO)
        })
    }

    fn nominal_step(&self, t: f64) -> u64 {
        (t / self.step).round() as u64
    }

    /// One JSON record per logged point: `t`, nominal step, row-major `U` and
    /// `V`, risk and its standard error. Halving events ride on the record of
    /// the interval they replayed.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (j, ((t, p), r)) in self.times.iter().zip(&self.params).zip(&self.risks).enumerate() {
            let full = p.to_full();
            let events: Vec<HalvingEvent> = self
                .events
                .iter()
                .filter(|e| j > 0 && e.t == self.times[j - 1])
                .cloned()
                .collect();
            let record = TraceRecord {
                t: *t,
                step: self.nominal_step(*t),
                u: row_major(&full.u),
                v: row_major(&full.v),
                risk: r.value,
                stderr: r.stderr,
                events: (!events.is_empty()).then_some(&events[..]),
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n").map_err(|e| Error::Serialization(e.to_string()))?;
        }
        Ok(())
    }

    /// Risk curve with columns `step_or_L,risk,stderr`.
    pub fn write_risk_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["step_or_L", "risk", "stderr"])?;
        for (t, r) in self.times.iter().zip(&self.risks) {
            wtr.serialize((self.nominal_step(*t), r.value, r.stderr))?;
        }
        wtr.flush().map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(())
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

/// Shared driver: `advance(state, interval, h, substeps)` integrates one
/// logging interval, `risk(state)` scores it, `increased(prev, new)` decides
/// whether to replay with a smaller step.
fn integrate<S, A, R, I>(cfg: &FlowConfig, init: S, snapshot: impl Fn(&S) -> Snapshot, advance: A, risk: R, increased: I) -> Result<FlowTrace>
where
    S: Clone,
    A: Fn(&S, usize, f64, usize) -> Result<(S, Option<f64>)>,
    R: Fn(&S) -> Result<RiskEstimate>,
    I: Fn(&RiskEstimate, &RiskEstimate) -> bool,
{
    cfg.validate()?;
    let mut trace = FlowTrace {
        step: cfg.step,
        ..Default::default()
    };
    let r0 = risk(&init)?;
    if !r0.value.is_finite() {
        return Err(Error::numerical("initial risk is not finite"));
    }
    trace.push(0.0, snapshot(&init), r0);
    if r0.value <= cfg.stop_risk {
        return Ok(trace);
    }
    let mut state = init;
    let mut prev = r0;
    let mut h = cfg.step;
    let mut substeps = cfg.log_every;
    let mut halvings = 0;
    for j in 1..=cfg.n_intervals() {
        let t_start = (j - 1) as f64 * cfg.log_interval();
        let (next, r) = loop {
            let (candidate, lip) = advance(&state, j, h, substeps)?;
            let r = risk(&candidate)?;
            if !r.value.is_finite() || r.value > DIVERGENCE_FACTOR * r0.value.max(f64::MIN_POSITIVE) {
                return Err(Error::numerical(format!(
                    "risk diverged to {} at t = {:.4} (initial {}); use a smaller step",
                    r.value,
                    j as f64 * cfg.log_interval(),
                    r0.value
                )));
            }
            let both_zero = prev.value <= NUMERICAL_ZERO && r.value <= NUMERICAL_ZERO;
            if !both_zero && increased(&prev, &r) {
                halvings += 1;
                if halvings > MAX_HALVINGS {
                    return Err(Error::numerical(format!(
                        "risk kept increasing after {MAX_HALVINGS} step halvings at t = {t_start:.4}"
                    )));
                }
                h /= 2.0;
                substeps *= 2;
                trace.events.push(HalvingEvent {
                    t: t_start,
                    new_step: h,
                    risk_before: prev.value,
                    rejected_risk: r.value,
                });
                log::info!("risk increased at t = {t_start:.4}; step halved to {h:e}");
                continue;
            }
            if let Some(lip) = lip {
                trace.step_lipschitz.push(lip);
            }
            break (candidate, r);
        };
        state = next;
        prev = r;
        trace.push(j as f64 * cfg.log_interval(), snapshot(&state), r);
        if r.value <= cfg.stop_risk {
            break;
        }
    }
    Ok(trace)
}

/// Euler integration of the closed-form infinite-prompt block flow.
pub fn integrate_infinite(init: &BlockParams, model: &IclModel, cfg: &FlowConfig) -> Result<FlowTrace> {
    if cfg.mode != FlowMode::InfiniteBlock {
        return Err(Error::validation("integrate_infinite needs mode = infinite-block"));
    }
    risk_inf_block(init, model)?;
    let freeze_v = cfg.freeze_v;
    integrate(
        cfg,
        init.clone(),
        |b| Snapshot::Block(b.clone()),
        |state, _, h, substeps| {
            let mut b = state.clone();
            let mut g = grad_risk_inf_block(&b, model)?;
            let mut lip = 0.0_f64;
            for _ in 0..substeps {
                let da = &g.a * h;
                let dv = if freeze_v { 0.0 } else { h * g.v };
                b.a -= &da;
                b.v -= dv;
                let next = grad_risk_inf_block(&b, model)?;
                let moved = (da.norm_squared() + dv * dv).sqrt();
                if moved > 0.0 {
                    let dg = ((&next.a - &g.a).norm_squared() + (next.v - g.v).powi(2)).sqrt();
                    lip = lip.max(h * dg / moved);
                }
                g = next;
            }
            Ok((b, Some(lip)))
        },
        |b| risk_inf_block(b, model),
        |prev, r| r.value > prev.value,
    )
}

/// Euler integration of the finite-prompt flow with Monte-Carlo gradients.
pub fn integrate_finite(init: &AttentionParams, model: &IclModel, cfg: &FlowConfig) -> Result<FlowTrace> {
    if cfg.mode != FlowMode::FiniteMc {
        return Err(Error::validation("integrate_finite needs mode = finite-mc"));
    }
    if init.dim() != model.dim() + 1 {
        return Err(Error::validation(format!(
            "initial parameters have dimension {}, expected {}",
            init.dim(),
            model.dim() + 1
        )));
    }
    let eval_stream = cfg.stream.child(EVAL_KEY);
    let train_stream = cfg.stream.child(TRAIN_KEY);
    let l = cfg.prompt_len;
    integrate(
        cfg,
        init.clone(),
        |p| Snapshot::Full(p.clone()),
        |state, interval, h, substeps| {
            let mut p = state.clone();
            for k in 0..substeps {
                let stream = train_stream.path(&[interval as u64, substeps as u64, k as u64]);
                let g = grad_risk_finite_mc(&p, model, l, cfg.batch, stream)?;
                p.u -= g.u * h;
                if !cfg.freeze_v {
                    p.v -= g.v * h;
                }
            }
            Ok((p, None))
        },
        |p| risk_finite_mc(p, model, l, cfg.eval_batch, eval_stream),
        |prev, r| r.value - prev.value > FINITE_INCREASE_SE * (prev.stderr.hypot(r.stderr)),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationRow {
    #[serde(rename = "L")]
    pub l: usize,
    pub sup_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeviationReport {
    pub rows: Vec<DeviationRow>,
}

impl DeviationReport {
    /// CSV with columns `L,sup_deviation`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(())
    }
}

/// Pointwise distance between two traces on their shared logged times.
pub fn deviation_path(trace: &FlowTrace, reference: &FlowTrace) -> Result<Vec<f64>> {
    let n = trace.len().min(reference.len());
    if n == 0 {
        return Err(Error::validation("cannot compare empty traces"));
    }
    if let Some(j) = (0..n).find(|&j| trace.times[j] != reference.times[j]) {
        return Err(Error::validation(format!(
            "time grids differ at index {j} ({} vs {}); launch runs with identical step and log_every",
            trace.times[j], reference.times[j]
        )));
    }
    Ok((0..n)
        .map(|j| trace.params[j].to_full().distance(&reference.params[j].to_full()))
        .collect())
}

/// Sup over the shared time grid of the stacked `(U, V)` Frobenius distance
/// between each finite-prompt trace and the reference.
pub fn trajectory_deviation(traces: &[(usize, &FlowTrace)], reference: &FlowTrace) -> Result<DeviationReport> {
    let rows = traces
        .iter()
        .map(|&(l, trace)| {
            let path = deviation_path(trace, reference)?;
            Ok(DeviationRow {
                l,
                sup_deviation: path.into_iter().fold(0.0, f64::max),
            })
        })
        .collect::<Result<_>>()?;
    Ok(DeviationReport { rows })
}
