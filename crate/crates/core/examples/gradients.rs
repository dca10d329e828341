// Analytic attention gradients checked against central finite differences,
// probing the first output coordinate.
//
// `cargo run --release --example gradients`

use nalgebra::DMatrix;
use softmax_lab::attention::{
    forward_empirical, grad_kq_from_u, grad_u_empirical, grad_v_empirical, kqv_to_uv, AttentionParams, KqvParams,
    QueryPoint,
};
use softmax_lab::gradcheck::finite_diff_check;
use softmax_lab::measures::GaussianMeasure;
use softmax_lab::rng::SeededStream;

pub fn run_example() -> softmax_lab::Result<()> {
    let d = 3;
    let prompt = GaussianMeasure::standard(d).sample(12, SeededStream::from_seed(1))?;
    let q = QueryPoint::from_slice(&[0.4, -0.2, 1.0])?;
    let raw = KqvParams::new(
        DMatrix::from_fn(d, d, |i, j| 0.3 * ((i + 2 * j) as f64).sin()),
        DMatrix::from_fn(d, d, |i, j| 0.3 * ((2 * i + j) as f64).cos()),
        DMatrix::from_fn(d, d, |i, j| i as f64 - 0.5 * j as f64 + 1.0),
    )?;
    let p = kqv_to_uv(&raw);
    let first = |p: &AttentionParams| forward_empirical(p, &prompt, &q).unwrap()[0];

    // d T_0 / dV = e_0 wbar^T
    let wbar = grad_v_empirical(&p, &prompt, &q)?;
    let mut g_v = DMatrix::zeros(d, d);
    g_v.row_mut(0).copy_from(&wbar.transpose());
    let f_v = |x: &[f64]| first(&AttentionParams::new(p.u.clone(), DMatrix::from_column_slice(d, d, x)).unwrap());
    let rv = finite_diff_check(f_v, p.v.as_slice(), g_v.as_slice(), 1e-5)?;
    println!("grad V  max rel error {:.2e}", rv.max_rel_error);

    let g_u = grad_u_empirical(&p, &prompt, &q, 0)?;
    let f_u = |x: &[f64]| first(&AttentionParams::new(DMatrix::from_column_slice(d, d, x), p.v.clone()).unwrap());
    let ru = finite_diff_check(f_u, p.u.as_slice(), g_u.as_slice(), 1e-5)?;
    println!("grad U  max rel error {:.2e}", ru.max_rel_error);

    // chain rule through U = K^T Q
    let (g_k, g_q) = grad_kq_from_u(&raw, &g_u);
    let f_k = |x: &[f64]| {
        let k = DMatrix::from_column_slice(d, d, x);
        first(&kqv_to_uv(&KqvParams::new(k, raw.q.clone(), raw.v.clone()).unwrap()))
    };
    let f_q = |x: &[f64]| {
        let qm = DMatrix::from_column_slice(d, d, x);
        first(&kqv_to_uv(&KqvParams::new(raw.k.clone(), qm, raw.v.clone()).unwrap()))
    };
    let rk = finite_diff_check(f_k, raw.k.as_slice(), g_k.as_slice(), 1e-5)?;
    let rq = finite_diff_check(f_q, raw.q.as_slice(), g_q.as_slice(), 1e-5)?;
    println!("grad K  max rel error {:.2e}", rk.max_rel_error);
    println!("grad Q  max rel error {:.2e}", rq.max_rel_error);
    Ok(())
}

#[allow(dead_code)]
fn main() -> softmax_lab::Result<()> {
    run_example()
}
