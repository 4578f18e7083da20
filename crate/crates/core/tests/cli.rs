use std::path::Path;
use std::process::{Command, Output};

use simulpolicy::metrics::read_pareto_csv;
use simulpolicy::policy::PolicyParams;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_simulpolicy"))
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn simulpolicy")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn small_gen(out: &Path) {
    ok(out, &["--seed", "5", "gen", "--train", "12", "--eval", "6"]);
}

#[test]
fn gen_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_gen(a.path());
    small_gen(b.path());
    for f in ["train.jsonl", "eval.jsonl"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
    let text = std::fs::read_to_string(a.path().join("train.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 12);
    let first = text.lines().next().unwrap();
    for key in [
        "\"id\"",
        "\"duration_s\"",
        "\"tokens\"",
        "\"boundaries_s\"",
        "\"ambiguous\"",
        "\"aligned\"",
    ] {
        assert!(first.contains(key), "{key} missing");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gen", "--train", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data.train"));

    let o = run(dir.path(), &["train", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(3), "missing dataset is an I/O error");

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "variant = \"REINA_XL\"\n").unwrap();
    let o = bin().arg("--config").arg(&cfg).arg("gen").output().unwrap();
    assert_eq!(o.status.code(), Some(2));

    let o = bin()
        .arg("--config")
        .arg(dir.path().join("absent.toml"))
        .arg("gen")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));

    let o = run(dir.path(), &["gen", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn one_step_training() {
    let dir = tempfile::tempdir().unwrap();
    small_gen(dir.path());
    ok(dir.path(), &["train", "--steps", "1", "--batch-size", "8"]);
    let csv = std::fs::read_to_string(dir.path().join("REINA/training.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "step,loss_total,loss_cov,loss_mono,loss_l2,loss_align,grad_norm"
    );

    ok(
        dir.path(),
        &[
            "train",
            "--steps",
            "1",
            "--batch-size",
            "8",
            "--variant",
            "REINA_TAN",
        ],
    );
    let reina = PolicyParams::load(&dir.path().join("REINA/policy.json")).unwrap();
    let tan = PolicyParams::load(&dir.path().join("REINA_TAN/policy.json")).unwrap();
    assert!(!reina.config.use_time_embedding);
    assert!(tan.config.use_time_embedding);
}

#[test]
fn sweep_extremes_and_report_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    small_gen(out);
    ok(out, &["train", "--steps", "2", "--batch-size", "8"]);
    ok(out, &["sweep", "--alphas=-1e9,1e9"]);
    let pts = read_pareto_csv(&out.join("REINA/pareto.csv")).unwrap();
    assert_eq!(pts.len(), 2);
    assert_eq!(pts[0].read_loop_pct, 100.0);
    assert_eq!(pts[1].read_loop_pct, 0.0);
    assert!(pts[1].mean_laal_s < pts[0].mean_laal_s);
    assert!(out.join("REINA/logs/alpha_01.jsonl").exists());

    let first = std::fs::read(out.join("REINA/pareto.csv")).unwrap();
    ok(out, &["sweep", "--alphas=-1e9,1e9"]);
    assert_eq!(first, std::fs::read(out.join("REINA/pareto.csv")).unwrap());

    // Replace the sweep with the two-point fixture and pin the offline score.
    std::fs::write(
        out.join("REINA/pareto.csv"),
        "alpha,laal_s,bleu,read_loop_pct\n0,1,20,0\n1,3,40,0\n",
    )
    .unwrap();
    let cfg = out.join("fixture.toml");
    std::fs::write(
        &cfg,
        "[report]\noffline_quality = 40.0\nband = { x = 1.0, y = 3.0 }\n",
    )
    .unwrap();
    let stdout = String::from_utf8(
        bin()
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .arg("report")
            .output()
            .unwrap()
            .stdout,
    )
    .unwrap();
    assert!(stdout.contains("NoSE 0.7500"), "{stdout}");
    assert_eq!(
        std::fs::read_to_string(out.join("REINA/nose.csv")).unwrap(),
        "band_x,band_y,nose\n1.0,3.0,0.75\n"
    );

    let o = run(out, &["report", "--band-x", "0.5", "--band-y", "3"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("achievable latency range"));
}

#[test]
fn simulate_always_read() {
    let dir = tempfile::tempdir().unwrap();
    small_gen(dir.path());
    ok(dir.path(), &["train", "--steps", "1", "--batch-size", "8"]);
    let s = ok(dir.path(), &["simulate", "--alpha", "-1e9"]);
    assert!(s.contains("read loops 100.0%"), "{s}");
    let logs = std::fs::read_to_string(dir.path().join("REINA/logs.jsonl")).unwrap();
    assert_eq!(logs.lines().count(), 6);
    assert!(logs.lines().all(|l| l.contains("\"read_loop\":true")));
}
