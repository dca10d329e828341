//! Acceptance gate. Runs every experiment at its default scale, prints one
//! PASS/FAIL line per criterion and exits nonzero if any criterion fails.
//!
//! `cargo test --test acceptance` (takes several minutes on one core).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use softmax_lab::config::{self, ExperimentConfig, GradientName, MANIFEST_FILE};
use softmax_lab::experiments::{self, Command, Report, RunOutcome};

const CONFIG: &str = "\
seed = 2024
workers = 1

[compare]
replicates = 4
";

struct Gate {
    lines: Vec<String>,
    failed: usize,
}

impl Gate {
    fn record(&mut self, id: &str, ok: bool, detail: String) {
        let tag = if ok { "PASS" } else { "FAIL" };
        let line = format!("{tag} {id} {detail}");
        println!("{line}");
        self.lines.push(line);
        if !ok {
            self.failed += 1;
        }
    }
}

fn timed(command: Command, cfg: &ExperimentConfig, out: &Path) -> (RunOutcome, Duration) {
    let mut cfg = cfg.clone();
    cfg.out = out.join(command.name());
    let start = Instant::now();
    let outcome = experiments::run(command, &cfg).unwrap_or_else(|e| panic!("{command} failed: {e}"));
    (outcome, start.elapsed())
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn combined(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// Every output file except the manifest, which records the worker count.
fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != MANIFEST_FILE)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let config_path = tmp.path().join("acceptance.toml");
    std::fs::write(&config_path, CONFIG).unwrap();
    let cfg = config::load(&config_path).unwrap().config;
    let first = tmp.path().join("workers1");
    let mut gate = Gate { lines: Vec::new(), failed: 0 };
    let mut ran: Vec<(Command, PathBuf)> = Vec::new();

    let (o, t) = timed(Command::GaussianCheck, &cfg, &first);
    let Report::Gaussian(r) = &o.report else { unreachable!() };
    let (fz, pz) = (r.max_forward_z(), r.max_pushforward_z());
    let over = r.pushforward.iter().filter(|p| p.z.abs() > 3.0).count();
    gate.record(
        "C1 gaussian closed form",
        fz <= 3.0 && pz <= 3.0 && within(t, 60),
        format!(
            "max |z| forward {fz:.2}, pushforward {pz:.2} ({over}/{} stats beyond 3 SE), {:.1}s",
            r.pushforward.len(),
            t.as_secs_f64()
        ),
    );
    ran.push((Command::GaussianCheck, o.out));

    let (o, t) = timed(Command::CheckGradients, &cfg, &first);
    let Report::Gradients(r) = &o.report else { unreachable!() };
    let named = [GradientName::GradV, GradientName::GradU, GradientName::GradKq, GradientName::GradRiskInfBlock];
    let worst = named
        .iter()
        .map(|&n| r.row(n).expect("gradient row").max_rel_error)
        .fold(0.0f64, f64::max);
    let all = named.iter().all(|&n| r.row(n).is_some_and(|row| row.instances >= 20));
    gate.record(
        "C2 gradient exactness",
        all && worst < 1e-6 && within(t, 60),
        format!("worst relative error {worst:.2e} over 20 instances, {:.1}s", t.as_secs_f64()),
    );
    ran.push((Command::CheckGradients, o.out));

    let (o, t) = timed(Command::Concentration, &cfg, &first);
    let Report::Concentration(r) = &o.report else { unreachable!() };
    let sweep_ok = |name: &str| {
        let s = r.sweep(name).unwrap_or_else(|| panic!("missing sweep {name}"));
        (s.non_decreasing_pairs.is_empty() && s.fit.slope <= -0.3, s.fit.slope, s.non_decreasing_pairs.len())
    };
    let (ok, slope, bad) = sweep_ok("output");
    gate.record(
        "C3 output concentration",
        ok && within(t, 600),
        format!("slope {slope:.3}, {bad} non-decreasing pairs, {:.1}s (all sweeps)", t.as_secs_f64()),
    );
    let (ok_v, slope_v, bad_v) = sweep_ok("grad_v");
    let (ok_u, slope_u, bad_u) = sweep_ok("grad_u_row0");
    gate.record(
        "C4 gradient concentration",
        ok_v && ok_u && within(t, 600),
        format!("grad V slope {slope_v:.3} ({bad_v} bad pairs), grad U slope {slope_u:.3} ({bad_u} bad pairs)"),
    );
    let anchor = r.anchor.as_ref().expect("anchor sweep");
    let az = anchor.iter().map(|a| a.z.abs()).fold(0.0f64, f64::max);
    gate.record(
        "C5 zero-U anchor",
        anchor.len() == cfg.concentration.l_grid.len() && az <= 3.0,
        format!("max |z| {az:.2} over {} grid points", anchor.len()),
    );
    ran.push((Command::Concentration, o.out));

    let (o, t) = timed(Command::TrainInf, &cfg, &first);
    let Report::TrainInf(r) = &o.report else { unreachable!() };
    gate.record(
        "C6 infinite-prompt training",
        r.final_risk < 1e-6 && r.a_rel_error < 1e-3 && r.v_rel_error < 1e-3 && r.nonincreasing && within(t, 60),
        format!(
            "risk {:.2e}, A rel {:.1e}, v rel {:.1e}, nonincreasing {}, {:.1}s",
            r.final_risk,
            r.a_rel_error,
            r.v_rel_error,
            r.nonincreasing,
            t.as_secs_f64()
        ),
    );
    ran.push((Command::TrainInf, o.out));

    let (o, t) = timed(Command::Compare, &cfg, &first);
    let Report::Compare(r) = &o.report else { unreachable!() };
    let risk = |l: usize| r.risks.iter().find(|x| x.l == l).unwrap_or_else(|| panic!("no risk row for L={l}"));
    let (r64, r1024) = (risk(64), risk(1024));
    let threshold = 0.05 * 0.5 * 1.25;
    gate.record(
        "C7 finite-prompt training",
        r1024.risk < threshold
            && r1024.risk <= r64.risk + 2.0 * combined(r1024.stderr, r64.stderr)
            && within(t, 1200),
        format!(
            "risk L=1024 {:.4} (< {threshold}), L=64 {:.4}, {:.1}s",
            r1024.risk,
            r64.risk,
            t.as_secs_f64()
        ),
    );
    let grid = [64, 256, 1024];
    let stats: Vec<(f64, f64)> = grid.iter().map(|&l| r.deviation_stats(l)).collect();
    let monotone = stats.windows(2).all(|w| w[1].0 <= w[0].0 + 2.0 * combined(w[0].1, w[1].1));
    let at_zero = r.replicates.iter().all(|x| x.deviation_at_zero == 0.0);
    gate.record(
        "C8 trajectory deviation",
        monotone && at_zero && r.replicates.len() == 4 * grid.len(),
        format!(
            "mean sup-deviation {}; zero at t=0 {at_zero}",
            grid.iter()
                .zip(&stats)
                .map(|(l, (m, se))| format!("L={l} {m:.3}+-{se:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
    ran.push((Command::Compare, o.out));

    let (o, t) = timed(Command::MomentCheck, &cfg, &first);
    let Report::Moment(r) = &o.report else { unreachable!() };
    let ratio = r.rows.iter().map(|m| m.l4_norm / m.bound).fold(0.0f64, f64::max);
    gate.record(
        "C9 moment bound",
        r.rows.len() == 20 && !r.any_violation() && within(t, 60),
        format!("largest norm/bound {ratio:.3}, {:.1}s", t.as_secs_f64()),
    );
    ran.push((Command::MomentCheck, o.out));

    let second = tmp.path().join("workers8");
    let mut mismatched = Vec::new();
    for (command, dir) in &ran {
        let mut replay = config::load(&dir.join(MANIFEST_FILE)).unwrap().config;
        replay.workers = 8;
        let (o, _) = timed(*command, &replay, &second);
        let (a, b) = (outputs(dir), outputs(&o.out));
        if a.is_empty() || a != b {
            mismatched.push(command.name());
        }
    }
    gate.record(
        "C10 determinism",
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("{} commands byte-identical from manifest at workers 1 and 8", ran.len())
        } else {
            format!("outputs differ for {}", mismatched.join(", "))
        },
    );

    println!("{} of {} criteria passed", gate.lines.len() - gate.failed, gate.lines.len());
    if gate.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
