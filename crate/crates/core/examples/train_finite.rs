// Stochastic gradient flow on the finite-prompt risk for two prompt lengths,
// compared with the infinite-prompt trajectory from the same start.
//
// `cargo run --release --example train_finite`

use nalgebra::{DMatrix, DVector};
use softmax_lab::flow::{integrate_finite, integrate_infinite, trajectory_deviation, FlowConfig, FlowMode};
use softmax_lab::icl::{block_diagnostics, init_params, IclModel, InitConfig, McBatch};
use softmax_lab::rng::SeededStream;

pub fn run_example() -> softmax_lab::Result<()> {
    let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.25]));
    let model = IclModel::noiseless(sigma.clone())?;
    let (init_full, init) = init_params(
        &InitConfig {
            alpha: 0.01,
            theta: DMatrix::identity(2, 2) * 2f64.powf(-0.25),
        },
        &sigma,
    )?;
    let base = FlowConfig {
        step: 0.05,
        t_max: 10.0,
        stop_risk: 0.0,
        log_every: 40,
        mode: FlowMode::InfiniteBlock,
        prompt_len: 1,
        batch: McBatch::new(32, 4)?,
        eval_batch: McBatch::new(100, 4)?,
        stream: SeededStream::from_seed(9),
        freeze_v: false,
    };
    let reference = integrate_infinite(&init, &model, &base)?;

    let mut traces = Vec::new();
    for l in [16, 256] {
        let cfg = FlowConfig {
            mode: FlowMode::FiniteMc,
            prompt_len: l,
            ..base.clone()
        };
        let trace = integrate_finite(&init_full, &model, &cfg)?;
        let risk = trace.final_risk().expect("non-empty trace");
        let diag = block_diagnostics(&trace.final_params().expect("non-empty trace"));
        println!(
            "L = {l:>3}  final risk {:.4} +- {:.4}  off-block {:.2e}  (infinite {:.4})",
            risk.value,
            risk.stderr,
            diag.off_block_norm,
            reference.final_risk().expect("non-empty trace").value
        );
        traces.push((l, trace));
    }
    let pairs: Vec<(usize, &_)> = traces.iter().map(|(l, t)| (*l, t)).collect();
    for row in trajectory_deviation(&pairs, &reference)?.rows {
        println!("L = {:>3}  sup deviation {:.4}", row.l, row.sup_deviation);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> softmax_lab::Result<()> {
    run_example()
}
