use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn geovid(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geovid"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn segment_is_deterministic_and_skips_when_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let o = geovid(&["synth", "--out", "src", "--count", "1", "--width", "32", "--height", "32", "--frames", "6"], t);
    assert!(o.status.success(), "{}", stderr(&o));
    let frames = t.join("src/synth_000/frames");

    for dir in ["a", "b"] {
        let o = geovid(&["segment", "--in", frames.to_str().unwrap(), "--out", dir], t);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(t.join("a/hierarchy.json")).unwrap();
    let b = fs::read(t.join("b/hierarchy.json")).unwrap();
    assert_eq!(a, b);
    let seg_a = fs::read(t.join("a/seg/L0/frame_000004.png")).unwrap();
    let seg_b = fs::read(t.join("b/seg/L0/frame_000004.png")).unwrap();
    assert_eq!(seg_a, seg_b);

    let before = fs::metadata(t.join("a/hierarchy.json")).unwrap().modified().unwrap();
    let o = geovid(&["segment", "--out", "a"], t);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("skipping"), "{}", stderr(&o));
    let after = fs::metadata(t.join("a/hierarchy.json")).unwrap().modified().unwrap();
    assert_eq!(before, after);

    let o = geovid(&["segment", "--out", "a", "--force"], t);
    assert!(o.status.success());
    assert!(!stderr(&o).contains("skipping"));
    assert_eq!(fs::read(t.join("a/hierarchy.json")).unwrap(), a);
}

#[test]
fn missing_inputs_exit_with_dependency_code() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let o = geovid(&["synth", "--out", "c", "--count", "1", "--width", "32", "--height", "32", "--frames", "4"], t);
    assert!(o.status.success(), "{}", stderr(&o));

    // not segmented yet
    let o = geovid(&["extract", "--video", "c/synth_000"], t);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = geovid(&["segment", "--out", "c/synth_000"], t);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = geovid(&["predict", "--video", "c/synth_000", "--model", "nowhere.gvbt"], t);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn bad_configuration_exits_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    fs::write(t.join("bad.json"), r#"{"model": {"boost": {"rounds": 10, "colour": 3}}}"#).unwrap();
    let o = geovid(&["--config", "bad.json", "synth", "--out", "x"], t);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    fs::write(t.join("bad2.json"), r#"{"bootstrap": {"posterior_min": 1.5}}"#).unwrap();
    let o = geovid(&["--config", "bad2.json", "synth", "--out", "x"], t);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = geovid(&["train", "--videos", "v", "--level-fractions", "0.1,abc"], t);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = geovid(&["frobnicate"], t);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn all_runs_every_stage_on_a_small_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = serde_json::json!({
        "paths": { "runs": "runs", "corpus": "corpus", "unlabeled": ["synth_003"] },
        "model": { "boost": { "rounds": 10 }, "inference": { "window": 5 } },
        "bootstrap": { "iterations": 2, "introspect_every": 2 },
        "synth": { "count": 4, "width": 32, "height": 32, "frames": 8 },
        "seed": 11
    });
    fs::write(t.join("cfg.json"), cfg.to_string()).unwrap();
    let o = geovid(&["--config", "cfg.json", "all"], t);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = String::from_utf8_lossy(&o.stdout).trim().lines().last().unwrap().to_string();
    let run = t.join(run);
    for f in ["config.json", "model.gvbt", "eval.json", "confusion.txt", "per_video.csv", "bootstrap/bootstrap_metrics.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let eval: serde_json::Value = serde_json::from_slice(&fs::read(run.join("eval.json")).unwrap()).unwrap();
    let acc = eval["main_accuracy"].as_f64().unwrap();
    assert!(acc > 0.5, "main accuracy {acc}");
    let metrics = fs::read_to_string(run.join("bootstrap/bootstrap_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3);
    assert!(t.join("corpus/synth_002/pred/labels.json").exists());

    // second run reuses segmentation and features
    let o = geovid(&["--config", "cfg.json", "all"], t);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).matches("skipping").count() >= 8, "{}", stderr(&o));
}
