use std::path::Path;
use std::process::{Command, Output};

fn softmax_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softmax-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_config_names_the_path() {
    let o = softmax_lab(&["tail-check", "--config", "/no/such/dir/run.toml"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("/no/such/dir/run.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_config_error_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "seed = 1\n[tail]\nsampels = 10\n");
    let o = softmax_lab(&["tail-check", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("sampels") && err.contains("line 3"), "{err}");
}

#[test]
fn invalid_values_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[train]\nstep = -0.1\n");
    let out = dir.path().join("out");
    let o = softmax_lab(&["train-inf", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!out.join("trace_inf.jsonl").exists());
}

#[test]
fn corrupted_gradient_fixture_fails_the_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "corrupt.toml", "[gradients]\ninstances = 3\ncorrupt = \"grad-kq\"\n");
    let out = dir.path().join("out");
    let o = softmax_lab(&["check-gradients", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grad_kq_from_u"), "{}", stderr(&o));
    assert!(out.join("gradients.csv").exists());
}

#[test]
fn gradient_check_passes_and_replays_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let o = softmax_lab(&["check-gradients", "--seed", "5", "--out", first.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = first.join("manifest.json");
    let o = softmax_lab(&[
        "check-gradients",
        "--config",
        manifest.to_str().unwrap(),
        "--workers",
        "3",
        "--out",
        second.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read(first.join("gradients.csv")).unwrap();
    assert_eq!(a, std::fs::read(second.join("gradients.csv")).unwrap());
    let header = String::from_utf8(a).unwrap();
    assert!(header.starts_with("gradient,"));
}

#[test]
fn tail_check_writes_csv_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tail.toml", "[tail]\nsamples = 2000\n");
    let out = dir.path().join("out");
    let o = softmax_lab(&["tail-check", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("tail.csv")).unwrap();
    assert!(csv.starts_with("t,empirical_tail,bound,stderr,violated"), "{csv}");
    assert!(out.join("manifest.json").exists());
}

#[test]
fn short_finite_training_writes_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "train.toml",
        "[train]\nfinite_t_max_by_len = [2.0, 1.0]\nprompt_lens = [8, 32]\nbatch = { n_tasks = 4, n_queries = 2 }\n\
         eval_batch = { n_tasks = 20, n_queries = 2 }\n",
    );
    let out = dir.path().join("out");
    let o = softmax_lab(&["train-finite", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (l, horizon) in [(8, 2.0), (32, 1.0)] {
        let trace = std::fs::read_to_string(out.join(format!("trace_L{l}.jsonl"))).unwrap();
        let records: Vec<serde_json::Value> = trace.lines().map(|r| serde_json::from_str(r).unwrap()).collect();
        assert_eq!(records[0]["t"], 0.0);
        assert!(records[0]["u"].is_array() && records[0]["risk"].is_number());
        let last = records.last().unwrap()["t"].as_f64().unwrap();
        assert!((last - horizon).abs() < 1e-9, "L={l} ends at {last}");
    }
    let table = std::fs::read_to_string(out.join("final_risk.csv")).unwrap();
    assert!(table.starts_with("step_or_L,risk,stderr"), "{table}");
}
