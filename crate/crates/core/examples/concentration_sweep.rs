// Mean-squared deviation of finite-prompt attention from its infinite-prompt
// limit, over a grid of prompt lengths, with a log-log rate fit and the
// exact `U = 0` anchor.
//
// `cargo run --release --example concentration_sweep`

use nalgebra::DMatrix;
use softmax_lab::attention::AttentionParams;
use softmax_lab::concentration::{
    fit_loglog_rate, grad_u_deviation_sweep, output_deviation_sweep, zero_u_output_mse, SweepConfig,
};
use softmax_lab::measures::GaussianMeasure;
use softmax_lab::rng::SeededStream;

pub fn run_example() -> softmax_lab::Result<()> {
    let mut cfg = SweepConfig {
        l_grid: vec![16, 64, 256, 1024],
        reps: 40,
        n_query: 8,
        mu: GaussianMeasure::standard(2),
        nu: GaussianMeasure::standard(2),
        params: AttentionParams::new(DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2))?,
        stream: SeededStream::from_seed(3),
        convention: Default::default(),
    };

    for (name, res) in [("output", output_deviation_sweep(&cfg)?), ("grad U row 0", grad_u_deviation_sweep(&cfg, 0)?)] {
        let fit = fit_loglog_rate(&res)?;
        println!("{name}: slope {:.3} (r^2 {:.3})", fit.slope, fit.r_squared);
        for p in &res.points {
            println!("  L = {:>5}  mse {:.3e} +- {:.1e}", p.l, p.mse, p.stderr);
        }
    }

    // With U = 0 the output is V times a plain sample mean.
    cfg.params = AttentionParams::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2))?;
    let res = output_deviation_sweep(&cfg)?;
    println!("U = 0 anchor");
    for p in &res.points {
        let exact = zero_u_output_mse(&cfg.params.v, &cfg.mu, p.l);
        println!("  L = {:>5}  mse {:.3e}  exact {:.3e}  z {:+.2}", p.l, p.mse, exact, (p.mse - exact) / p.stderr);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> softmax_lab::Result<()> {
    run_example()
}
