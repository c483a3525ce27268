use std::path::Path;
use std::process::{Command, Output};

use sodkit::dataset::DatasetManifest;

fn sodkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sodkit"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("SODKIT_DATA_DIR")
        .output()
        .expect("run sodkit")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn synth_writes_k_times_per_class_images() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sodkit(tmp.path(), &["synth", "--method", "megyesi", "--per-class", "4", "--seed", "1", "--out", "s"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = DatasetManifest::read(&tmp.path().join("s/manifest.jsonl")).unwrap();
    assert_eq!(m.len(), 16);
    assert_eq!(std::fs::read_dir(tmp.path().join("s/images")).unwrap().count(), 16);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&sodkit(tmp.path(), &["--help"])), 0);
    assert_eq!(code(&sodkit(tmp.path(), &["no-such-command"])), 1);
    assert_eq!(code(&sodkit(tmp.path(), &["synth", "--method", "nonsense", "--per-class", "2"])), 1);
    // Missing input file is an environment problem, not bad input.
    assert_eq!(code(&sodkit(tmp.path(), &["prepare", "validate", "--manifest", "absent.jsonl"])), 2);

    sodkit(tmp.path(), &["synth", "--method", "gelderman", "--per-class", "1", "--out", "g"]);
    let out = sodkit(
        tmp.path(),
        &["prepare", "split", "--manifest", "g/manifest.jsonl", "--method", "gelderman", "--out", "s.jsonl"],
    );
    assert_eq!(code(&out), 1, "one image per class cannot be split");
}

#[test]
fn every_flag_is_documented() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in [
        &["prepare", "split"][..],
        &["synth"],
        &["train"],
        &["evaluate"],
        &["predict"],
        &["study", "create"],
        &["study", "agreement"],
        &["serve"],
    ] {
        let mut args = sub.to_vec();
        args.push("--help");
        let out = sodkit(tmp.path(), &args);
        assert_eq!(code(&out), 0);
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--"), "{sub:?}");
    }
}

#[test]
fn unavailable_backbone_is_a_runtime_error_with_hint() {
    let tmp = tempfile::tempdir().unwrap();
    sodkit(tmp.path(), &["synth", "--method", "megyesi", "--per-class", "4", "--out", "s"]);
    sodkit(
        tmp.path(),
        &["prepare", "split", "--manifest", "s/manifest.jsonl", "--method", "megyesi", "--out", "split.jsonl"],
    );
    let out = sodkit(
        tmp.path(),
        &["train", "--manifest", "split.jsonl", "--method", "megyesi", "--backbone", "inception_v3", "--out", "m"],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("tiny_test"));
}

#[test]
fn train_config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    sodkit(tmp.path(), &["synth", "--method", "megyesi", "--per-class", "4", "--image-size", "16", "--out", "s"]);
    sodkit(
        tmp.path(),
        &["prepare", "split", "--manifest", "s/manifest.jsonl", "--method", "megyesi", "--out", "split.jsonl"],
    );
    std::fs::write(
        tmp.path().join("cfg.json"),
        r#"{"backbone": "tiny_test", "max_epochs_per_stage": 50, "batch_size": 4}"#,
    )
    .unwrap();
    let out = sodkit(
        tmp.path(),
        &[
            "train", "--manifest", "split.jsonl", "--method", "megyesi", "--config", "cfg.json", "--epochs", "1",
            "--seed", "3", "--out", "m",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("m/metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["max_epochs_per_stage"], 1);
    assert_eq!(meta["config"]["batch_size"], 4);
    assert_eq!(meta["config"]["seed"], 3);
}
