// Fourth-moment envelope of the infinite-prompt output and the sub-Gaussian
// tail envelope of sampled tokens.
//
// `cargo run --release --example moment_and_tail`

use nalgebra::{DMatrix, DVector};
use softmax_lab::attention::AttentionParams;
use softmax_lab::concentration::moment_bound_check;
use softmax_lab::measures::{subgaussian_tail_check, GaussianMeasure};
use softmax_lab::rng::SeededStream;

pub fn run_example() -> softmax_lab::Result<()> {
    let g = GaussianMeasure::new(
        DVector::zeros(3),
        DMatrix::from_row_slice(3, 3, &[0.9, 0.2, 0.0, 0.2, 0.6, 0.1, 0.0, 0.1, 0.4]),
    )?;
    let p = AttentionParams::new(
        DMatrix::from_fn(3, 3, |i, j| if i == j { 0.7 } else { 0.1 }),
        DMatrix::from_fn(3, 3, |i, j| 1.0 / (1 + i + j) as f64),
    )?;
    let m = moment_bound_check(&p, &g, &GaussianMeasure::standard(3), 20_000, SeededStream::from_seed(5))?;
    println!(
        "L4 norm {:.4} +- {:.4}, envelope {:.4}, violated {}",
        m.l4_norm, m.stderr, m.bound, m.violated
    );

    let tokens = GaussianMeasure::standard(2).sample(20_000, SeededStream::from_seed(6))?;
    let t_grid: Vec<f64> = (0..=8).map(|k| 2.5 * k as f64).collect();
    let tail = subgaussian_tail_check(&tokens, 2, &t_grid)?;
    for r in &tail.rows {
        println!("t = {:.1}  P(|z| > t) {:.4}  envelope {:.4}", r.t, r.empirical_tail, r.bound);
    }
    println!("any violation: {}", tail.any_violation());
    Ok(())
}

#[allow(dead_code)]
fn main() -> softmax_lab::Result<()> {
    run_example()
}
