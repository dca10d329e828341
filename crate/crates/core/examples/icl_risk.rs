// In-context linear regression: closed-form infinite-prompt risk along the
// segment from the small initialization to the Bayes optimum, and the
// finite-prompt risk at the optimum for a few prompt lengths.
//
// `cargo run --release --example icl_risk`

use nalgebra::{DMatrix, DVector};
use softmax_lab::icl::{
    grad_risk_inf_block, init_params, optimal_params, risk_finite_mc, risk_inf_block, BlockParams, IclModel,
    InitConfig, McBatch,
};
use softmax_lab::rng::SeededStream;

pub fn run_example() -> softmax_lab::Result<()> {
    let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.25]));
    let model = IclModel::noiseless(sigma.clone())?;
    let theta = DMatrix::identity(2, 2) * 2f64.powf(-0.25);
    let (_, init) = init_params(&InitConfig { alpha: 0.01, theta }, &sigma)?;
    let (opt_full, opt) = optimal_params(&sigma)?;
    println!("null risk {:.4}", model.null_risk());
    println!("optimum v {:.5}, A diagonal {:.5?}", opt.v, opt.a.diagonal().as_slice());

    for s in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let p = BlockParams::new(&init.a * (1.0 - s) + &opt.a * s, init.v * (1.0 - s) + opt.v * s)?;
        let r = risk_inf_block(&p, &model)?;
        let g = grad_risk_inf_block(&p, &model)?;
        println!("s = {s:.2}  risk {:.3e}  |grad A| {:.2e}  grad v {:+.2e}", r.value, g.a.norm(), g.v);
    }

    let batch = McBatch::new(500, 4)?;
    for l in [16, 64, 256] {
        let r = risk_finite_mc(&opt_full, &model, l, batch, SeededStream::from_seed(l as u64))?;
        println!("optimum at L = {l:>3}  risk {:.4} +- {:.4}", r.value, r.stderr);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> softmax_lab::Result<()> {
    run_example()
}
