// Empirical attention over a long Gaussian prompt next to the closed-form
// infinite-prompt output, plus the affine pushforward law.
//
// `cargo run --release --example gaussian_closed_form`

use nalgebra::{DMatrix, DVector};
use softmax_lab::attention::{forward_empirical, forward_gaussian, pushforward_gaussian, AttentionParams, QueryPoint};
use softmax_lab::measures::GaussianMeasure;
use softmax_lab::rng::SeededStream;

pub fn run_example() -> softmax_lab::Result<()> {
    let mu = GaussianMeasure::new(
        DVector::from_vec(vec![0.2, -0.1, 0.0]),
        DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 0.8, 0.1, 0.0, 0.1, 0.5]),
    )?;
    let p = AttentionParams::new(DMatrix::identity(3, 3) * 0.3, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, -1.0])))?;
    let q = QueryPoint::from_slice(&[0.5, -1.0, 0.25])?;

    let exact = forward_gaussian(&p, &mu, &q)?;
    println!("closed form      {:.4?}", exact.as_slice());
    for l in [100, 1_000, 10_000, 100_000] {
        let prompt = mu.sample(l, SeededStream::new(7, l as u64))?;
        let out = forward_empirical(&p, &prompt, &q)?;
        println!("L = {l:>6}  out  {:.4?}  |err| {:.2e}", out.as_slice(), (&out - &exact).norm());
    }

    let push = pushforward_gaussian(&p, &mu)?;
    println!("pushforward mean {:.4?}", push.mean().as_slice());
    println!("pushforward cov diagonal {:.4?}", push.cov().diagonal().as_slice());
    Ok(())
}

#[allow(dead_code)]
fn main() -> softmax_lab::Result<()> {
    run_example()
}
