// Runs an experiment from a TOML config, then replays it from the manifest
// it wrote with a different worker count and checks the outputs match.
//
// `cargo run --release --example experiment_manifest`

use softmax_lab::config::{self, MANIFEST_FILE};
use softmax_lab::experiments::{self, Command};

const CONFIG: &str = r#"
seed = 11
workers = 1

[tail]
samples = 5000

[gradients]
instances = 4
"#;

pub fn run_example() -> softmax_lab::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| softmax_lab::Error::io(std::env::temp_dir(), e))?;
    let path = dir.path().join("small.toml");
    std::fs::write(&path, CONFIG).map_err(|e| softmax_lab::Error::io(&path, e))?;

    for command in [Command::CheckGradients, Command::TailCheck] {
        let mut cfg = config::load(&path)?.config;
        cfg.out = dir.path().join(command.name()).join("first");
        let first = experiments::run(command, &cfg)?;
        for line in experiments::describe(&first.report) {
            println!("{command}: {line}");
        }

        let mut replay = config::load(&first.out.join(MANIFEST_FILE))?.config;
        replay.workers = 2;
        replay.out = dir.path().join(command.name()).join("replay");
        experiments::run(command, &replay)?;
        let csv = if command == Command::TailCheck { "tail.csv" } else { "gradients.csv" };
        let same = std::fs::read(first.out.join(csv)).ok() == std::fs::read(replay.out.join(csv)).ok();
        println!("{command}: replay with 2 workers identical: {same}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> softmax_lab::Result<()> {
    run_example()
}
