use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn porank(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_porank")).args(args).current_dir(cwd).output().unwrap()
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).expect("stderr is one JSON object");
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn run_writes_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.cfg"), "loss = mm, po\nepochs = 5\nseeds = 0, 1, 2\n").unwrap();
    let out = porank(&["run", "--config", "exp.cfg", "--out", "out"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("Method"));
    assert!(table.contains("MM") && table.contains("PO") && table.contains("mm vs po"));
    assert_eq!(fs::read_to_string(dir.path().join("out/report.txt")).unwrap(), table);

    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    let seeds = json["runs"][0]["seeds"].as_array().unwrap();
    assert_eq!(seeds.len(), 3);
    assert!(seeds[0]["records"][0]["R@1"].is_number());

    let again = porank(&["run", "--config", "exp.cfg", "--out", "again"], dir.path());
    assert!(again.status.success());
    assert_eq!(fs::read(dir.path().join("out/report.json")).unwrap(), fs::read(dir.path().join("again/report.json")).unwrap());
}

#[test]
fn seed_override_runs_a_single_seed() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.cfg"), "loss = po\nepochs = 2\n").unwrap();
    let out = porank(&["run", "--config", "exp.cfg", "--seed-override", "11", "--out", "."], dir.path());
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let seeds = json["runs"][0]["seeds"].as_array().unwrap();
    assert_eq!(seeds.len(), 1);
    assert_eq!(seeds[0]["seed"], 11);
}

#[test]
fn synth_output_feeds_a_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("rings.spec"), "ring.train_points = 40\nring.test_points_per_class = 5\nseed = 3\n").unwrap();
    let out = porank(&["synth", "--spec", "rings.spec", "--out", "rings.jsonl"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("rings.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 40 + 8 * 5);

    fs::write(dir.path().join("exp.cfg"), "dataset = rings.jsonl\nloss = mm\nrelevance = none\nepochs = 3\nseeds = 0\n").unwrap();
    let out = porank(&["run", "--config", "exp.cfg"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compare_two_reports() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.cfg"), "loss = mm\nepochs = 3\nseeds = 0, 1, 2, 3\n").unwrap();
    fs::write(dir.path().join("b.cfg"), "loss = po\nepochs = 3\nseeds = 0, 1, 2, 3\n").unwrap();
    assert!(porank(&["run", "--config", "a.cfg", "--out", "a"], dir.path()).status.success());
    assert!(porank(&["run", "--config", "b.cfg", "--out", "b"], dir.path()).status.success());

    let out = porank(&["compare", "--reports", "a/report.json", "b/report.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("mm vs po"));
    let tests: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(tests[0]["seeds"].as_array().unwrap().len(), 4);

    let out = porank(&["compare", "--reports", "a/report.json", "a/report.json"], dir.path());
    assert!(String::from_utf8(out.stdout).unwrap().contains("identical median ranks"));

    fs::write(dir.path().join("c.cfg"), "loss = po\nepochs = 3\nseeds = 0, 1\n").unwrap();
    assert!(porank(&["run", "--config", "c.cfg", "--out", "c"], dir.path()).status.success());
    let out = porank(&["compare", "--reports", "a/report.json", "c/report.json"], dir.path());
    assert_eq!(error_kind(&out), "seed_mismatch");
}

#[test]
fn failures_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(error_kind(&porank(&["run", "--config", "missing.cfg"], dir.path())), "io");

    fs::write(dir.path().join("bad.cfg"), "loss = mm\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(error_kind(&porank(&["run", "--config", "bad.cfg"], dir.path())), "config");

    fs::write(dir.path().join("order.cfg"), "loss = po\nmargin.m1 = 0.9\n").unwrap();
    assert_eq!(error_kind(&porank(&["run", "--config", "order.cfg"], dir.path())), "margin_order");

    fs::write(dir.path().join("data.jsonl"), "{\"id\": \"a\", \"split\": \"train\", \"video_id\": \"a\"}\n").unwrap();
    fs::write(dir.path().join("data.cfg"), "dataset = data.jsonl\n").unwrap();
    let out = porank(&["run", "--config", "data.cfg"], dir.path());
    assert_eq!(error_kind(&out), "schema");
    assert!(String::from_utf8_lossy(&out.stderr).contains("features"));
}

#[test]
fn readme_config_block_parses() {
    let readme = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let block = readme.split("## Configuration").nth(1).unwrap().split("```").nth(1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    porank::experiment::ExperimentConfig::parse(block, dir.path()).unwrap();
}
