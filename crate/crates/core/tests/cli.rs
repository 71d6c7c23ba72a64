use std::path::Path;
use std::process::Command;

fn wsjoint(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_wsjoint"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = wsjoint(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn missing_data_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = wsjoint(&["train", "--combo", "L1", "--out", "o"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
}

#[test]
fn qg_alone_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--seed", "1", "--out", "s.json"], dir.path());
    let out = wsjoint(&["train", "--data", "s.json", "--combo", "QG", "--out", "o"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("QG"));
}

#[test]
fn unreadable_bundle_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "[1,2").unwrap();
    let out = wsjoint(&["train", "--data", "bad.json", "--combo", "L1", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn train_writes_report_checkpoints_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--seed", "2", "--out", "s.json"], d);
    ok(
        &["train", "--data", "s.json", "--combo", "L1,L3,L4,L5,L6", "--qg", "--epochs", "3", "--seeds", "1,2", "--out", "o"],
        d,
    );
    let report: serde_json::Value = serde_json::from_slice(&read(d.join("o/report.json"))).unwrap();
    assert_eq!(report["combo"], "L1+L3+L4+L5+L6+QG");
    assert_eq!(report["quality_guides_from_validation"], true);
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    for s in [1, 2] {
        assert!(d.join(format!("o/seed_{s}/classifier.json")).exists());
        assert!(d.join(format!("o/seed_{s}/lf_model.json")).exists());
    }
    let manifest: serde_json::Value = serde_json::from_slice(&read(d.join("o/manifest.json"))).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([1, 2]));
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn select_cardinality_and_emitted_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--seed", "3", "--out", "s.json", "--labels-out", "y.json"], d);
    ok(
        &["select", "--data", "s.json", "--method", "sup", "--budget", "10", "--filter-factor", "5", "--lf-epochs", "5",
          "--emit-labelled", "s2.json", "--labels", "y.json", "--out", "sel"],
        d,
    );
    let sel: serde_json::Value = serde_json::from_slice(&read(d.join("sel/selection.json"))).unwrap();
    assert_eq!(sel["chosen"].as_array().unwrap().len(), 10);
    let b: serde_json::Value = serde_json::from_slice(&read(d.join("s2.json"))).unwrap();
    assert_eq!(b["labelled"]["labels"].as_array().unwrap().len(), 20);
    assert_eq!(b["unlabelled"]["features"].as_array().unwrap().len(), 970);

    ok(&["select", "--data", "s.json", "--method", "random", "--budget", "5000", "--lf-epochs", "1", "--out", "big"], d);
    let big: serde_json::Value = serde_json::from_slice(&read(d.join("big/selection.json"))).unwrap();
    assert_eq!(big["chosen"].as_array().unwrap().len(), 980);
    assert!(big["warnings"][0].as_str().unwrap().contains("clamped"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--seed", "4", "--out", "s.json"], d);
    ok(&["synth", "--seed", "4", "--out", "s_again.json"], d);
    assert_eq!(read(d.join("s.json")), read(d.join("s_again.json")));
    for out in ["a", "b"] {
        ok(&["train", "--data", "s.json", "--combo", "L1,L2,L6", "--epochs", "3", "--dropout-keep", "0.8",
             "--arch", "mlp:4", "--seeds", "1,2", "--out", out], d);
        ok(&["select", "--data", "s.json", "--method", "random", "--budget", "10", "--seed", "7", "--lf-epochs", "2",
             "--out", &format!("r{out}")], d);
    }
    for f in ["report.json", "manifest.json", "seed_1/classifier.json", "seed_2/lf_model.json"] {
        assert_eq!(read(d.join("a").join(f)), read(d.join("b").join(f)), "{f}");
    }
    assert_eq!(read(d.join("ra/selection.json")), read(d.join("rb/selection.json")));
}

#[test]
fn grid_single_combo_and_averaging() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--seed", "5", "--out", "s.json"], d);
    std::fs::write(d.join("one.txt"), "L1,L2\n").unwrap();
    ok(&["grid", "--data", "s.json", "--combos", "one.txt", "--epochs", "2", "--seeds", "1,2", "--out", "g"], d);
    let g: serde_json::Value = serde_json::from_slice(&read(d.join("g/grid.json"))).unwrap();
    let rows = g["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["best"], true);
    let per: Vec<f64> = rows[0]["per_seed"].as_array().unwrap().iter().map(|s| s["test"].as_f64().unwrap()).collect();
    assert_eq!(per.len(), 2);
    assert!((rows[0]["test_mean"].as_f64().unwrap() - (per[0] + per[1]) / 2.0).abs() < 1e-12);
}

#[test]
fn synth_bench_two_dimensional_variant_runs() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth-bench", "--dims", "2", "--seeds", "1", "--out", "b"], dir.path());
    let t: serde_json::Value = serde_json::from_slice(&read(dir.path().join("b/table.json"))).unwrap();
    assert_eq!(t.as_array().unwrap().len(), 5);
}
