mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::small_config;
use veristeer::{run_pipeline, EvalReport};

fn cli(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_veristeer"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn ok(config: &Path, args: &[&str]) -> String {
    let out = cli(config, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stage_verbs_compose_to_the_pipeline() {
    let piped = tempfile::tempdir().unwrap();
    let staged = tempfile::tempdir().unwrap();
    let expected = run_pipeline(small_config(piped.path())).unwrap();

    let config = staged.path().join("experiment.toml");
    small_config(&staged.path().join("run")).save(&config).unwrap();
    ok(&config, &["gen-demos"]);
    ok(&config, &["train-policy"]);
    ok(&config, &["eval"]);
    ok(&config, &["collect"]);
    ok(&config, &["train-verifier", "--kind", "classifier"]);
    ok(&config, &["train-verifier", "--kind", "q"]);
    for kind in ["classifier", "time-to-success"] {
        for mode in ["bon", "cg"] {
            ok(&config, &["eval", "--mode", mode, "--kind", kind, "--diagnostics"]);
        }
    }
    let plotted = ok(&config, &["plot"]);
    assert!(plotted.starts_with("5 trajectory plots, 2 landscapes"), "{plotted}");

    let run = staged.path().join("run");
    for r in &expected.reports {
        let got = EvalReport::load(run.join(format!("reports/{}.json", r.label))).unwrap();
        assert_eq!(&got, r, "{}", r.label);
    }
    for rel in ["policy.ckpt", "rollouts.jsonl", "verifier_classifier.ckpt", "plots/landscape_classifier.tsv"] {
        assert_eq!(
            std::fs::read(run.join(rel)).unwrap(),
            std::fs::read(piped.path().join(rel)).unwrap(),
            "{rel}"
        );
    }

    let swept = ok(&config, &["eval", "--sweep", "--kind", "classifier"]);
    assert_eq!(swept.lines().count(), 2);
    assert!(run.join("reports/classifier_cg_lambda_0.05.json").exists());

    let crossed = ok(
        &config,
        &[
            "cross-steer",
            "--policy",
            run.join("policy.ckpt").to_str().unwrap(),
            "--verifier",
            piped.path().join("verifier_time_to_success.ckpt").to_str().unwrap(),
        ],
    );
    assert!(crossed.starts_with("cross"), "{crossed}");
    let report = EvalReport::load(run.join("reports/cross.json")).unwrap();
    assert_eq!(report.on_policy, Some(true));
}

#[test]
fn exit_codes_name_the_failed_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("experiment.toml");
    small_config(&dir.path().join("run")).save(&config).unwrap();
    ok(&config, &["gen-demos"]);
    let demos = dir.path().join("run/demos.jsonl");
    // Demonstrations hold a single class.
    let out = cli(&config, &["train-verifier", "--kind", "classifier", "--rollouts", demos.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(13));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-verifier"));

    let out = cli(&config, &["--set", "steering.best_of_n=0", "gen-demos"]);
    assert_eq!(out.status.code(), Some(2));

    let out = cli(&config, &["eval", "--mode", "bon"]);
    assert!(!out.status.success());
}
