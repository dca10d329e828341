//! Every example in examples/ runs to completion.

mod gaussian_closed_form {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/gaussian_closed_form.rs"));
}

mod gradients {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/gradients.rs"));
}

mod concentration_sweep {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/concentration_sweep.rs"));
}

mod moment_and_tail {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/moment_and_tail.rs"));
}

mod icl_risk {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/icl_risk.rs"));
}

mod train_infinite {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/train_infinite.rs"));
}

mod train_finite {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/train_finite.rs"));
}

mod experiment_manifest {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/experiment_manifest.rs"));
}

#[test]
fn gaussian_closed_form_runs() {
    gaussian_closed_form::run_example().expect("gaussian_closed_form example");
}

#[test]
fn gradients_runs() {
    gradients::run_example().expect("gradients example");
}

#[test]
fn concentration_sweep_runs() {
    concentration_sweep::run_example().expect("concentration_sweep example");
}

#[test]
fn moment_and_tail_runs() {
    moment_and_tail::run_example().expect("moment_and_tail example");
}

#[test]
fn icl_risk_runs() {
    icl_risk::run_example().expect("icl_risk example");
}

#[test]
fn train_infinite_runs() {
    train_infinite::run_example().expect("train_infinite example");
}

#[test]
fn train_finite_runs() {
    train_finite::run_example().expect("train_finite example");
}

#[test]
fn experiment_manifest_runs() {
    experiment_manifest::run_example().expect("experiment_manifest example");
}
