//! End-to-end behavior of the `phqeval` binary: stage gating, exit codes,
//! full-pipeline smoke run, and report idempotence.

mod common;

use common::{assert_success, run_cli, run_full_pipeline, setup_env};

#[test]
fn eval_before_parse_reports_missing_stage() {
    let env = setup_env(3, 7);
    let run_dir = env.dir.path().join("run");

    assert_success(&run_cli(&env.config_path, &run_dir, &["ingest"]), "ingest");
    assert_success(&run_cli(&env.config_path, &run_dir, &["run"]), "run");

    let output = run_cli(&env.config_path, &run_dir, &["eval"]);
    assert_eq!(output.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("missing upstream stage: parse"),
        "stderr: {stderr}"
    );
    // Single-line machine-parsable error.
    assert_eq!(stderr.lines().count(), 1, "stderr: {stderr}");
}

#[test]
fn unknown_flag_uses_usage_exit_code() {
    let env = setup_env(2, 7);
    let output = run_cli(
        &env.config_path,
        &env.dir.path().join("run"),
        &["ingest", "--no-such-flag"],
    );
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn missing_config_is_a_usage_error() {
    let output = std::process::Command::new(env!("CARGO_BIN_EXE_phqeval"))
        .arg("ingest")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("--config"), "stderr: {stderr}");
}

#[test]
fn digest_mismatch_uses_dedicated_exit_code() {
    let env = setup_env(3, 7);
    let run_dir = env.dir.path().join("run");
    assert_success(&run_cli(&env.config_path, &run_dir, &["ingest"]), "ingest");

    // A different seed changes the effective config digest.
    let output = run_cli(&env.config_path, &run_dir, &["run", "--seed", "99"]);
    assert_eq!(output.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("config digest mismatch"), "stderr: {stderr}");
}

#[test]
fn full_pipeline_completes_all_stages_on_small_fixture() {
    let env = setup_env(3, 7); // 12 samples
    let run_dir = env.dir.path().join("run");
    run_full_pipeline(&env.config_path, &run_dir);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    let stages = manifest["stages"].as_object().unwrap();
    for stage in [
        "ingest",
        "run",
        "parse",
        "eval",
        "partition",
        "emit",
        "report",
        "outliers",
    ] {
        assert!(stages.contains_key(stage), "missing stage {stage}");
    }

    for artifact in [
        "corpus.jsonl",
        "records_raw.jsonl",
        "records.jsonl",
        "eval/metrics.json",
        "eval/record_stats.jsonl",
        "partition.json",
        "datasets/sft.jsonl",
        "datasets/dpo.jsonl",
        "datasets/eval_split.json",
        "report/table2.txt",
        "report/table2.json",
        "report/table1.txt",
        "report/bias.txt",
        "report/confusion.csv",
        "report/outliers.csv",
        "report/manifest.json",
    ] {
        assert!(run_dir.join(artifact).exists(), "missing artifact {artifact}");
    }

    // N*K raw records.
    let raw = std::fs::read_to_string(run_dir.join("records_raw.jsonl")).unwrap();
    assert_eq!(raw.lines().count(), env.synthetic.samples.len() * 2);
}

#[test]
fn rerunning_report_is_idempotent() {
    let env = setup_env(3, 7);
    let run_dir = env.dir.path().join("run");
    run_full_pipeline(&env.config_path, &run_dir);

    let read_reports = || {
        ["table2.txt", "table2.json", "table1.txt", "bias.txt", "confusion.csv"]
            .iter()
            .map(|name| std::fs::read(run_dir.join("report").join(name)).unwrap())
            .collect::<Vec<_>>()
    };
    let before = read_reports();
    let output = run_cli(&env.config_path, &run_dir, &["report"]);
    assert_success(&output, "report rerun");
    assert_eq!(before, read_reports());
}

#[test]
fn report_fails_loudly_when_eval_outputs_are_deleted() {
    let env = setup_env(2, 7);
    let run_dir = env.dir.path().join("run");
    run_full_pipeline(&env.config_path, &run_dir);

    std::fs::remove_file(run_dir.join("eval/metrics.json")).unwrap();
    let output = run_cli(&env.config_path, &run_dir, &["report"]);
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("metrics.json"), "stderr: {stderr}");
    // The report never silently recomputes metrics.
    assert!(!run_dir.join("eval/metrics.json").exists());
}

#[test]
fn prompt_preview_prints_fewshot_sequence() {
    let env = setup_env(2, 7);
    let run_dir = env.dir.path().join("run");

    // Preview requires the ingest stage.
    let premature = run_cli(&env.config_path, &run_dir, &["prompt", "preview"]);
    assert_eq!(premature.status.code(), Some(3));

    assert_success(&run_cli(&env.config_path, &run_dir, &["ingest"]), "ingest");
    let output = run_cli(&env.config_path, &run_dir, &["prompt", "preview"]);
    assert_success(&output, "prompt preview");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("--- system ---"), "stdout: {stdout}");
    // One system + two worked examples + target = 6 messages.
    assert!(stdout.contains("(6 messages)"), "stdout: {stdout}");
    let first_sample = &env.synthetic.samples[0];
    let by_id = run_cli(
        &env.config_path,
        &run_dir,
        &["prompt", "preview", "--sample", &first_sample.id],
    );
    assert_success(&by_id, "prompt preview --sample");
    assert!(String::from_utf8_lossy(&by_id.stdout).contains(&first_sample.text));
}
