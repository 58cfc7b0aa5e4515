//! End-to-end checks of the installed binary: each test spawns the real
//! executable and asserts on its stdout/stderr and the files it leaves behind.

use std::path::Path;
use std::process::{Command, Output};

fn statebind() -> Command {
    Command::new(env!("CARGO_BIN_EXE_statebind"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let output = cmd.output().expect("spawning the binary");
    assert!(
        output.status.success(),
        "expected success, got {:?}\nstdout:\n{}\nstderr:\n{}",
        output.status,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
    output
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

/// Flags that shrink a run to one family so a full pipeline stays fast.
fn tiny_flags<'a>(cmd: &'a mut Command, dir: &Path) -> &'a mut Command {
    cmd.args(["run", "--out"])
        .arg(dir)
        .args(["--families", "synth_choice_a"])
        .args(["--events", "4", "--replicates", "1", "--bootstrap-draws", "200"])
}

#[test]
fn plan_prints_the_default_grid() {
    let out = run_ok(statebind().arg("plan"));
    let text = stdout(&out);
    assert!(text.contains("datasets (7)"), "plan output: {text}");
    assert!(text.contains("arms (4)"), "plan output: {text}");
    assert!(text.contains("replicates: 3"), "plan output: {text}");
    assert!(text.contains("scored rows: 10080"), "plan output: {text}");
}

#[test]
fn plan_with_controls_adds_arms() {
    let out = run_ok(statebind().args(["plan", "--controls", "scrambled_context,target_lesion"]));
    let text = stdout(&out);
    assert!(text.contains("arms (6)"), "plan output: {text}");
}

#[test]
fn tiny_run_passes_gates_then_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_ok(tiny_flags(&mut statebind(), dir.path()));
    let first_text = stdout(&first);
    assert!(first_text.contains("gates: PASS"), "first run: {first_text}");
    assert!(!first_text.contains("resumed stages"), "first run: {first_text}");
    for name in [
        "config.toml",
        "manifest.json",
        "probes.jsonl",
        "generations.jsonl",
        "scored.jsonl",
        "summary.json",
        "guarded.jsonl",
        "report.md",
    ] {
        assert!(dir.path().join(name).exists(), "missing artifact {name}");
    }
    let first_sha = first_text
        .lines()
        .find(|l| l.starts_with("manifest sha256"))
        .map(str::to_string)
        .expect("manifest line");

    let second = run_ok(tiny_flags(&mut statebind(), dir.path()));
    let second_text = stdout(&second);
    assert!(
        second_text
            .contains("resumed stages: probes, generations, scored, analysis, guard, report"),
        "second run: {second_text}",
    );
    assert!(second_text.contains(&first_sha), "second run: {second_text}");
}

#[test]
fn truncated_run_notes_the_missing_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(
        statebind()
            .args(["score", "--out"])
            .arg(dir.path())
            .args(["--families", "synth_choice_a"])
            .args(["--events", "2", "--replicates", "1"]),
    );
    let text = stdout(&out);
    assert!(text.contains("gates: FAIL"), "score output: {text}");
    assert!(text.contains("this run stopped earlier"), "score output: {text}");
    assert!(dir.path().join("scored.jsonl").exists());
    assert!(!dir.path().join("summary.json").exists());
}

#[test]
fn report_lists_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(statebind().args(["report", "--out"]).arg(dir.path()));
    assert!(stdout(&out).contains("wrote"));
    let report = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(report.contains("Missing artifacts"), "report:\n{report}");
    assert!(report.contains("config.toml"), "report:\n{report}");
    assert!(report.contains("summary.json"), "report:\n{report}");
}

#[test]
fn predict_reports_out_of_fold_auc() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("features.csv");
    let mut csv = String::from("group,outcome,f1\n");
    for g in 0..20 {
        let hit = g % 2 == 0;
        let value = if hit { 0.9 } else { 0.1 };
        for r in 0..2 {
            csv.push_str(&format!(
                "g{g:02},{},{}\n",
                u8::from(hit),
                value + 0.01 * f64::from(r),
            ));
        }
    }
    std::fs::write(&table, csv).unwrap();

    let out_dir = dir.path().join("fit");
    let out = run_ok(
        statebind()
            .args(["predict", "--table"])
            .arg(&table)
            .args(["--augmented", "f1", "--folds", "5", "--draws", "200", "--out"])
            .arg(&out_dir),
    );
    let text = stdout(&out);
    assert!(text.contains("out-of-fold AUC: baseline"), "predict output: {text}");
    let saved = std::fs::read_to_string(out_dir.join("predictor.json")).unwrap();
    assert!(saved.contains("augmented_auc"), "predictor.json:\n{saved}");
}

#[test]
fn remote_backend_without_credentials_fails_before_generating() {
    let dir = tempfile::tempdir().unwrap();
    let endpoint = dir.path().join("endpoint.toml");
    std::fs::write(
        &endpoint,
        "api_key_env = \"STATEBIND_CLI_TEST_MISSING_VAR\"\nretries = 0\ntimeout_secs = 1\nretry_base_ms = 1\n",
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    let output = statebind()
        .args(["run", "--out"])
        .arg(&out_dir)
        .args(["--backend", "remote", "--endpoint"])
        .arg(&endpoint)
        .args(["--families", "synth_choice_a", "--events", "2", "--replicates", "1"])
        .env_remove("STATEBIND_CLI_TEST_MISSING_VAR")
        .output()
        .expect("spawning the binary");
    assert!(!output.status.success(), "missing credentials must fail the run");
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("STATEBIND_CLI_TEST_MISSING_VAR"), "stderr:\n{err}");
    assert!(
        !out_dir.join("generations.jsonl").exists(),
        "no generation may happen without credentials",
    );
}
