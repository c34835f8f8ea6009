use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rftlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rftlab"))
        .args(args)
        .env_remove("RFTLAB_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rftlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn files_named(root: &Path, name: &str) -> Vec<PathBuf> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() == name {
                found.push(p);
            }
        }
    }
    found.sort();
    found
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exp1_writes_metrics_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["run", "--preset", "exp1", "--seed", "7", "--rounds", "20", "--out", s(tmp.path())]);
    let run = tmp.path().join("exp1-baseline");
    assert!(run.join("manifest.toml").exists());
    let seed_dir = run.join("baseline/seed-7");
    for f in ["metrics.jsonl", "metrics.tsv", "run.json", "params.bin", "ckpt-0000000020.json"] {
        assert!(seed_dir.join(f).exists(), "{f}");
    }
    let tsv = fs::read_to_string(seed_dir.join("metrics.tsv")).unwrap();
    assert!(tsv.starts_with("round\ttrain_pass1\ttest_pass1\tobjective\tkl\trollouts_consumed\n"));
}

#[test]
fn exp5_budget_gives_nine_runs() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["run", "--preset", "exp5", "--budget", "256", "--seed", "0", "--rounds", "2", "--out", s(tmp.path())]);
    assert_eq!(files_named(tmp.path(), "metrics.tsv").len(), 9);
    assert_eq!(files_named(tmp.path(), "metrics.jsonl").len(), 9);
}

#[test]
fn unknown_override_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let r = rftlab(&["run", "--preset", "exp1", "--set", "train.no_such_key=1", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("train.no_such_key"));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "preset = \"exp2\"\n[train]\nclip_epsilon = 0.1\n").unwrap();
    let r = rftlab(&["run", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("train.clip_epsilon"));
}

#[test]
fn constraint_violation_has_its_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let r = rftlab(&["run", "--preset", "exp5", "--batch-size", "3", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    let r = rftlab(&["run", "--preset", "exp1", "--rollouts", "4", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let common = ["--preset", "exp2", "--seed", "3", "--set", "eval_every=10"];
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&[&["run", "--rounds", "40", "--out", s(&a)][..], &common[..]].concat());
    ok(&[&["run", "--rounds", "80", "--out", s(&b)][..], &common[..]].concat());
    let dir = a.join("exp2-advantage/G8-first/seed-3");
    ok(&["resume", s(&dir.join("ckpt-0000000040.json")), "--rounds", "40"]);
    let bdir = b.join("exp2-advantage/G8-first/seed-3");
    for f in ["metrics.jsonl", "metrics.tsv", "params.bin", "ckpt-0000000080.json"] {
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(bdir.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_zero_rounds_is_noop() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["run", "--preset", "exp1", "--seed", "1", "--rounds", "10", "--out", s(tmp.path())]);
    let dir = tmp.path().join("exp1-baseline/baseline/seed-1");
    let before = fs::read(dir.join("metrics.tsv")).unwrap();
    ok(&["resume", s(&dir.join("ckpt-0000000010.json")), "--rounds", "0"]);
    assert_eq!(fs::read(dir.join("metrics.tsv")).unwrap(), before);
}

#[test]
fn corrupted_checkpoint_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["run", "--preset", "exp1", "--seed", "1", "--rounds", "10", "--out", s(tmp.path())]);
    let ckpt = tmp.path().join("exp1-baseline/baseline/seed-1/ckpt-0000000010.json");
    let text = fs::read_to_string(&ckpt).unwrap();
    fs::write(&ckpt, text.replacen("\"seed\":1", "\"seed\":2", 1)).unwrap();
    let r = rftlab(&["resume", s(&ckpt), "--rounds", "5"]);
    assert_eq!(r.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&r.stderr).contains("checksum"));
}

#[test]
fn manifest_rerun_reproduces_checksums() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    ok(&["run", "--preset", "exp4", "--seeds", "0,1", "--rounds", "10", "--out", s(&a)]);
    let manifest = a.join("exp4-batch/manifest.toml");
    let b = tmp.path().join("b");
    ok(&["run", "--config", s(&manifest), "--out", s(&b)]);
    let sums = |p: &Path| {
        let t = fs::read_to_string(p).unwrap();
        t.split("[manifest.checksums]").nth(1).unwrap().to_string()
    };
    assert_eq!(sums(&manifest), sums(&b.join("exp4-batch/manifest.toml")));
}

#[test]
fn report_groups_by_preset_and_sweep_value() {
    let tmp = tempfile::tempdir().unwrap();
    let root = s(tmp.path());
    ok(&["run", "--preset", "exp3", "--seed", "0", "--rounds", "4", "--set", "eval_every=2", "--out", root]);
    ok(&["run", "--preset", "exp1", "--seeds", "0,1", "--rounds", "4", "--set", "eval_every=2", "--out", root]);
    let text = ok(&["report", root]);
    assert!(text.contains("== exp1-baseline =="));
    assert!(text.contains("== exp3-rollouts =="));
    let plot = fs::read_to_string(tmp.path().join("report/plot-exp3-rollouts-train.tsv")).unwrap();
    assert_eq!(plot.lines().next().unwrap(), "round\tG1\tG8\tG16\tG32\tG64");
    assert_eq!(plot.lines().count(), 4);
    assert!(tmp.path().join("report/plot-exp1-baseline-budget.tsv").exists());
    assert!(tmp.path().join("report/summary.tsv").exists());
}

#[test]
fn report_on_empty_dir_fails() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(!rftlab(&["report", s(tmp.path())]).status.success());
}
