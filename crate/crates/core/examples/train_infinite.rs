// Gradient flow on the infinite-prompt regression risk in block coordinates,
// from a small initialization to the Bayes optimum.
//
// `cargo run --release --example train_infinite`

use nalgebra::{DMatrix, DVector};
use softmax_lab::flow::{integrate_infinite, FlowConfig, FlowMode};
use softmax_lab::icl::{init_params, optimal_params, IclModel, InitConfig, McBatch};
use softmax_lab::rng::SeededStream;

pub fn run_example() -> softmax_lab::Result<()> {
    let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.25]));
    let model = IclModel::noiseless(sigma.clone())?;
    let (_, init) = init_params(
        &InitConfig {
            alpha: 0.01,
            theta: DMatrix::identity(2, 2) * 2f64.powf(-0.25),
        },
        &sigma,
    )?;
    let cfg = FlowConfig {
        step: 0.05,
        t_max: 200.0,
        stop_risk: 1e-12,
        log_every: 200,
        mode: FlowMode::InfiniteBlock,
        prompt_len: 1,
        batch: McBatch::new(2, 1)?,
        eval_batch: McBatch::new(2, 1)?,
        stream: SeededStream::from_seed(0),
        freeze_v: false,
    };
    let trace = integrate_infinite(&init, &model, &cfg)?;
    for (t, r) in trace.times.iter().zip(&trace.risks) {
        println!("t = {t:>6.1}  risk {:.3e}", r.value);
    }
    let (opt, _) = optimal_params(&sigma)?;
    let last = trace.final_params().expect("non-empty trace");
    println!("distance to optimum {:.2e}", last.distance(&opt));
    println!("risk nonincreasing: {}", trace.is_nonincreasing());
    Ok(())
}

#[allow(dead_code)]
fn main() -> softmax_lab::Result<()> {
    run_example()
}
