use std::path::Path;
use std::process::{Command, Output};

fn d4(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d4")).args(args).current_dir(cwd).output().expect("spawn d4")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

#[test]
fn bubble_prints_sorted_stack() {
    let dir = tempfile::tempdir().unwrap();
    let o = d4(&["run", "bubble"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "7 4 2 2");
}

#[test]
fn halt_leaves_input() {
    let dir = tempfile::tempdir().unwrap();
    let o = d4(&["run", "halt", "--in", "5"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "5");
}

#[test]
fn continuous_agrees_with_discrete() {
    let dir = tempfile::tempdir().unwrap();
    for input in ["3,1,2,3", "9,0,9,3", "4,1"] {
        let d = d4(&["run", "sort-reference", "--in", input], dir.path());
        let c = d4(&["run", "sort-reference", "--in", input, "--continuous"], dir.path());
        let cd = d4(&["run", "sort-reference", "--in", input, "--continuous", "--discretize"], dir.path());
        assert_eq!(d.status.code(), Some(0));
        assert_eq!(stdout(&d), stdout(&c));
        assert_eq!(stdout(&d), stdout(&cd));
    }
}

#[test]
fn hand_slots_run_sketches_discretely() {
    let dir = tempfile::tempdir().unwrap();
    let o =
        d4(&["run", "sort-permute", "--slots", "sort-permute", "--in", "3,8,1,3", "--stack-size", "20"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "8 3 1");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(d4(&["run", "no-such-sketch"], dir.path()).status.code(), Some(2));
    assert_eq!(d4(&["run"], dir.path()).status.code(), Some(2));
    assert_eq!(d4(&["run", "halt", "--slots", "bogus"], dir.path()).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.json"), r#"{"sketchh": 1, "optimizer": {"lr": 2}}"#).unwrap();
    let o = d4(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("sketchh") && err.contains("optimizer.lr"), "{err}");
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("loop.d4"), "BEGIN 1 WHILE REPEAT\n").unwrap();
    let o = d4(&["run", "loop.d4", "--max-steps", "100"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn trace_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = d4(&["trace", "sort-reference", "--in", "2,1,2"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let path = dir.path().join(stdout(&o));
    let csv = std::fs::read_to_string(&path).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("step,c0,c1"));
    assert!(lines.count() > 2);
    assert!(path.parent().unwrap().join("plan.txt").is_file());
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"sketch": "sort-compare", "train_len": 2, "train_size": 64, "dev_size": 16,
        "test_lengths": [3], "test_size": 4, "optimizer": {"learning_rate": 1.0, "epochs": 2}}"#;
    std::fs::write(dir.path().join("cfg.json"), cfg).unwrap();
    let o = d4(&["train", "--config", "cfg.json", "--seed", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = std::fs::read_dir(dir.path().join("runs")).unwrap().next().unwrap().unwrap().path();
    for f in ["metrics.csv", "manifest.json", "train.jsonl", "dev.jsonl", "plan.txt", "best.manifest.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["sketch_sha256"].as_str().unwrap().len(), 64);

    let ckpt = run.join("best");
    let ckpt = ckpt.to_str().unwrap();
    let o =
        d4(&["eval", "--checkpoint", ckpt, "--sketch", "sort-compare", "--lengths", "2", "--count", "4"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains('%'));
    let o = d4(&["eval", "--checkpoint", ckpt, "--sketch", "sort-permute"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    // A continuous run takes its value size from the checkpoint.
    let o = d4(&["run", "sort-compare", "--in", "1,5,2", "--continuous", "--checkpoint", ckpt], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).split_whitespace().count(), 2);
    let o = d4(&["run", "sort-permute", "--in", "1,5,2", "--continuous", "--checkpoint", ckpt], dir.path());
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let o = d4(&["eval", "--checkpoint", ckpt, "--sketch", "sort-compare", "--test", "empty.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
