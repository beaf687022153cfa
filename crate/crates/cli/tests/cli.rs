//! Exit-code and artifact behavior of the `cgvrg` binary.

use std::path::Path;
use std::process::{Command, Output};

fn cgvrg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgvrg"))
        .args(args)
        .env("CGVRG_OUT_DIR", dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const QUICK: &[&str] = &[
    "--set",
    "toy_images=6",
    "--set",
    "mil_epochs=3",
    "--set",
    "xe_epochs=2",
    "--set",
    "scst_steps=1",
];

#[test]
fn generate_without_checkpoint_names_the_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let out = cgvrg(dir.path(), &["gen-toy"]);
    assert_eq!(code(&out), 0);
    let out = cgvrg(dir.path(), &["build-vocab"]);
    assert_eq!(code(&out), 0);

    let out = cgvrg(dir.path(), &["generate"]);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing prerequisite"), "{stderr}");
    assert!(stderr.contains("graphs.jsonl") || stderr.contains("captioner"), "{stderr}");
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = cgvrg(dir.path(), &["gen-toy", "--set", "top_hidden=48"]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("top_hidden"), "{stderr}");

    let out = cgvrg(dir.path(), &["gen-toy", "--set", "not_a_key=1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn config_file_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    std::fs::write(&cfg_path, "toy_images = 4\nseed = 11\n").unwrap();
    let out = cgvrg(dir.path(), &["--config", cfg_path.to_str().unwrap(), "gen-toy"]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let corpus = std::fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 4);
}

#[test]
fn full_quick_pipeline_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    for stage in [
        vec!["gen-toy"],
        vec!["build-vocab"],
        vec!["train-mil"],
        vec!["build-graphs"],
        vec!["train-captioner", "--phase", "xe"],
        vec!["train-captioner", "--phase", "scst"],
        vec!["generate", "--beam", "2"],
        vec!["evaluate"],
    ] {
        let mut args = stage.clone();
        args.extend_from_slice(QUICK);
        let out = cgvrg(dir.path(), &args);
        assert_eq!(
            code(&out),
            0,
            "stage {stage:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for artifact in ["corpus.jsonl", "vocab.json", "mil.ckpt", "graphs.jsonl", "captioner_scst.ckpt", "generations.jsonl", "traces.jsonl", "evaluation.json"] {
        assert!(dir.path().join(artifact).exists(), "{artifact}");
    }
}

#[test]
fn stale_upstream_is_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    for stage in [vec!["gen-toy"], vec!["build-vocab"], vec!["train-mil"]] {
        let mut args = stage.clone();
        args.extend_from_slice(QUICK);
        assert_eq!(code(&cgvrg(dir.path(), &args)), 0);
    }
    // Regenerate the corpus with a different seed: vocab and detector are
    // now stale.
    let mut args = vec!["gen-toy", "--set", "seed=99"];
    args.extend_from_slice(QUICK);
    assert_eq!(code(&cgvrg(dir.path(), &args)), 0);

    let mut args = vec!["build-graphs"];
    args.extend_from_slice(QUICK);
    let out = cgvrg(dir.path(), &args);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stale"));
}
