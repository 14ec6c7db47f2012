use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--train-normal", "8", "--train-anomalous", "8", "--test-normal", "4", "--test-anomalous", "4",
    "--min-clips", "32", "--max-clips", "40",
];
const FAST: &[&str] = &["--preset", "desk", "--epochs", "2", "--batch-normal", "4", "--batch-anomalous", "4"];

fn dakd(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dakd"))
        .args(args)
        .env("DAKD_OUT", out)
        .env("DAKD_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = dakd(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn stage(out: &Path, cmd: &str, extra: &[&str]) -> String {
    let mut args = vec![cmd];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    ok(out, &args)
}

fn pipeline(out: &Path) {
    let mut synth = vec!["synth"];
    synth.extend_from_slice(TINY);
    ok(out, &synth);
    stage(out, "train-teacher", &[]);
    stage(out, "refine", &[]);
    stage(out, "distill", &[]);
    let student = out.join("student.ckpt");
    stage(out, "eval", &["--model", student.to_str().unwrap()]);
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

#[test]
fn pipeline_twice_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let names = csv_files(a.path());
    assert_eq!(
        names,
        ["distill_history.csv", "frame_scores_student.csv", "metrics_student.csv", "pseudo_labels.csv", "teacher_loss.csv"]
    );
    for n in &names {
        assert_eq!(fs::read(a.path().join(n)).unwrap(), fs::read(b.path().join(n)).unwrap(), "{n}");
    }
    assert_eq!(
        fs::read(a.path().join("run_manifest.json")).unwrap(),
        fs::read(b.path().join("run_manifest.json")).unwrap()
    );
}

#[test]
fn outputs_carry_fingerprints_and_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run_manifest.json")).unwrap()).unwrap();
    let listed: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|e| e["path"].as_str().unwrap()).collect();
    for n in csv_files(dir.path()) {
        let text = fs::read_to_string(dir.path().join(&n)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# config-fingerprint: "), "{n}");
        assert!(lines.next().unwrap().contains(','), "{n} lacks a header");
        assert!(listed.contains(&n.as_str()), "{n} missing from manifest");
    }
    for f in ["teacher.ckpt", "student.ckpt", "data/manifest.toml"] {
        assert!(listed.contains(&f), "{f}");
    }
    let metrics = fs::read_to_string(dir.path().join("metrics_student.csv")).unwrap();
    for key in ["auc,", "ap,", "auc.c1,", "auc.c2,", "auc.c3,"] {
        assert!(metrics.lines().any(|l| l.starts_with(key)), "{key}");
    }
}

#[test]
fn alpha_sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut synth = vec!["synth"];
    synth.extend_from_slice(TINY);
    ok(dir.path(), &synth);
    stage(dir.path(), "ablate", &["--param", "alpha", "--values", "0,1,7.5,15"]);
    let text = fs::read_to_string(dir.path().join("ablation_alpha.csv")).unwrap();
    let rows: Vec<_> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    let values: Vec<f64> = rows.iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values, vec![0.0, 1.0, 7.5, 15.0]);
    let teacher: Vec<&str> = rows.iter().map(|r| r.split(',').nth(3).unwrap()).collect();
    assert!(teacher.iter().all(|t| *t == teacher[0]), "serial trials share one teacher");
}

#[test]
fn parallel_trials_use_distinct_derived_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut synth = vec!["synth"];
    synth.extend_from_slice(TINY);
    ok(dir.path(), &synth);
    let run = |path: &Path| {
        stage(path, "ablate", &["--param", "tau", "--values", "1,10", "--parallel"]);
        fs::read_to_string(path.join("ablation_tau.csv")).unwrap()
    };
    let first = run(dir.path());
    assert_eq!(first, run(dir.path()));
    let seeds: Vec<&str> = first.lines().skip(2).map(|r| r.split(',').nth(2).unwrap()).collect();
    assert_eq!(seeds.len(), 2);
    assert_ne!(seeds[0], seeds[1]);
    assert!(!seeds.contains(&"1"));
}

#[test]
fn component_arms_write_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut synth = vec!["synth"];
    synth.extend_from_slice(TINY);
    ok(dir.path(), &synth);
    stage(dir.path(), "ablate", &["--arms", "full,no-nce,no-tam,mask:self+c2p"]);
    let text = fs::read_to_string(dir.path().join("ablation_components.csv")).unwrap();
    let arms: Vec<&str> = text.lines().skip(2).map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(arms, ["full", "no-nce", "no-tam", "mask:self+c2p"]);
}

#[test]
fn untrained_student_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth"]);
    stage(dir.path(), "eval", &["--untrained", "student"]);
    let text = fs::read_to_string(dir.path().join("metrics_untrained-student.csv")).unwrap();
    let auc: f64 = text.lines().find_map(|l| l.strip_prefix("auc,")).unwrap().parse().unwrap();
    assert!((auc - 0.5).abs() < 0.1, "auc {auc}");
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let code = |args: &[&str]| dakd(out, args).status.code().unwrap();

    assert_eq!(code(&["train-teacher", "--no-such-flag"]), 2);
    assert_eq!(code(&["nonsense"]), 2);
    assert_eq!(code(&["train-teacher", "--epsilon", "4"]), 2);
    assert_eq!(code(&["ablate", "--param", "nonsense", "--values", "1"]), 2);

    let missing = dakd(out, &["train-teacher"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("manifest.toml"));

    let mut synth = vec!["synth"];
    synth.extend_from_slice(TINY);
    ok(out, &synth);
    let no_teacher = dakd(out, &["refine"]);
    assert_eq!(no_teacher.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&no_teacher.stderr).contains("teacher.ckpt"));

    fs::write(out.join("teacher.ckpt"), b"DAKC garbage").unwrap();
    assert_eq!(code(&["refine"]), 3);

    let mut diverge = vec!["train-teacher", "--lr-other", "1e200", "--lr-temporal", "1e200"];
    diverge.extend_from_slice(FAST);
    assert_eq!(code(&diverge), 4);
}
