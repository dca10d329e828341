use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use softmax_lab::attention::{
    forward_empirical, grad_v_empirical, kqv_to_uv, softmax_weights, AttentionParams, KqvParams, QueryPoint,
};
use softmax_lab::concentration::{output_deviation_sweep, SweepConfig};
use softmax_lab::flow::{integrate_infinite, FlowConfig, FlowMode};
use softmax_lab::icl::{grad_risk_inf_block, optimal_params, risk_inf_block, IclModel, McBatch};
use softmax_lab::measures::{EmpiricalMeasure, GaussianMeasure};
use softmax_lab::par::with_workers;
use softmax_lab::rng::SeededStream;

const D: usize = 3;

fn matrix(scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-scale..scale, D * D).prop_map(|v| DMatrix::from_vec(D, D, v))
}

fn prompt(max_len: usize) -> impl Strategy<Value = EmpiricalMeasure> {
    (1..=max_len)
        .prop_flat_map(|l| prop::collection::vec(-3.0..3.0f64, l * D))
        .prop_map(|data| EmpiricalMeasure::new(D, data).unwrap())
}

fn query() -> impl Strategy<Value = QueryPoint> {
    prop::collection::vec(-2.0..2.0f64, D).prop_map(|v| QueryPoint::from_slice(&v).unwrap())
}

fn spd() -> impl Strategy<Value = DMatrix<f64>> {
    matrix(1.0).prop_map(|b| {
        let s = &b * b.transpose() + DMatrix::identity(D, D) * 0.1;
        (&s + s.transpose()) * 0.5
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_ignores_constant_shifts(logits in prop::collection::vec(-50.0..50.0f64, 1..40), c in -1e3..1e3f64) {
        let w = softmax_weights(&logits);
        let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
        for (a, b) in w.iter().zip(softmax_weights(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn output_is_permutation_invariant(u in matrix(1.0), v in matrix(1.0), mu in prompt(24), q in query(), seed in any::<u64>()) {
        let p = AttentionParams::new(u, v).unwrap();
        let mut order: Vec<usize> = (0..mu.len()).collect();
        let mut state = seed;
        for i in (1..order.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (state >> 33) as usize % (i + 1));
        }
        let a = forward_empirical(&p, &mu, &q).unwrap();
        let b = forward_empirical(&p, &mu.permuted(&order).unwrap(), &q).unwrap();
        prop_assert!((a - b).amax() <= 1e-12 * (1.0 + mu.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()))));
    }

    #[test]
    fn weighted_mean_stays_in_the_token_hull(u in matrix(3.0), mu in prompt(24), q in query()) {
        let p = AttentionParams::new(u, DMatrix::identity(D, D)).unwrap();
        let wbar = grad_v_empirical(&p, &mu, &q).unwrap();
        let out = forward_empirical(&p, &mu, &q).unwrap();
        for c in 0..D {
            let lo = mu.tokens().map(|z| z[c]).fold(f64::INFINITY, f64::min);
            let hi = mu.tokens().map(|z| z[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(wbar[c] >= lo - 1e-12 && wbar[c] <= hi + 1e-12);
            prop_assert_eq!(wbar[c], out[c]);
        }
    }

    #[test]
    fn huge_logits_stay_finite(u in matrix(1.0), mu in prompt(16), q in query()) {
        let p = AttentionParams::new(u * 1e4, DMatrix::identity(D, D)).unwrap();
        prop_assert!(forward_empirical(&p, &mu, &q).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn raw_factors_agree_with_merged_product(k in matrix(1.0), qm in matrix(1.0), v in matrix(1.0), mu in prompt(16), q in query()) {
        let raw = KqvParams::new(k, qm, v).unwrap();
        let merged = kqv_to_uv(&raw);
        prop_assert_eq!(raw.forward_empirical(&mu, &q).unwrap(), forward_empirical(&merged, &mu, &q).unwrap());
    }

    #[test]
    fn sampling_is_a_pure_function_of_the_stream(cov in spd(), seed in any::<u64>(), stream in any::<u64>()) {
        let g = GaussianMeasure::new(DVector::from_element(D, 0.5), cov).unwrap();
        let s = SeededStream::new(seed, stream);
        prop_assert_eq!(g.sample(50, s).unwrap(), g.sample(50, s).unwrap());
    }

    #[test]
    fn optimum_is_a_stationary_zero_risk_point(sigma in spd()) {
        let model = IclModel::noiseless(sigma.clone()).unwrap();
        let (_, opt) = optimal_params(&sigma).unwrap();
        prop_assert!(risk_inf_block(&opt, &model).unwrap().value < 1e-20);
        let g = grad_risk_inf_block(&opt, &model).unwrap();
        // one Euler step of size 0.05 moves less than 1e-12
        prop_assert!(0.05 * (g.a.norm_squared() + g.v * g.v).sqrt() < 1e-12 * (1.0 + opt.v.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sweeps_do_not_depend_on_worker_count(seed in any::<u64>(), workers in 2usize..6) {
        let cfg = SweepConfig {
            l_grid: vec![4, 16],
            reps: 30,
            n_query: 2,
            mu: GaussianMeasure::standard(2),
            nu: GaussianMeasure::standard(2),
            params: AttentionParams::new(DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2)).unwrap(),
            stream: SeededStream::from_seed(seed),
            convention: Default::default(),
        };
        let one = with_workers(1, || output_deviation_sweep(&cfg)).unwrap().unwrap();
        let many = with_workers(workers, || output_deviation_sweep(&cfg)).unwrap().unwrap();
        prop_assert_eq!(one.to_csv_string().unwrap(), many.to_csv_string().unwrap());
    }

    #[test]
    fn identical_flow_configs_give_identical_traces(alpha in 0.005..0.2f64) {
        let model = IclModel::noiseless(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.25]))).unwrap();
        let init = softmax_lab::icl::init_params(
            &softmax_lab::icl::InitConfig { alpha, theta: DMatrix::identity(2, 2) * 2f64.powf(-0.25) },
            model.sigma(),
        )
        .unwrap()
        .1;
        let cfg = FlowConfig {
            step: 0.05,
            t_max: 5.0,
            stop_risk: 0.0,
            log_every: 10,
            mode: FlowMode::InfiniteBlock,
            prompt_len: 1,
            batch: McBatch { n_tasks: 2, n_queries: 1 },
            eval_batch: McBatch { n_tasks: 2, n_queries: 1 },
            stream: SeededStream::from_seed(0),
            freeze_v: false,
        };
        let a = integrate_infinite(&init, &model, &cfg).unwrap();
        let b = integrate_infinite(&init, &model, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}
