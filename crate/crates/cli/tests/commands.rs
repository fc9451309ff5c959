use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attribank")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_data(seed: u64) -> Value {
    json!({
        "kind": "synthetic",
        "num_latent_attributes": 6,
        "attributes_per_class": 2,
        "num_tasks": 3,
        "classes_per_task": 2,
        "samples_per_class": 6,
        "test_samples_per_class": 4,
        "feature_dim": 8,
        "token_dim": 8,
        "noise_sigma": 0.05,
        "seed": seed
    })
}

fn tiny_train() -> Value {
    json!({"epochs_per_task": 2, "batch_size": 4, "lr0": 0.1, "n": 4, "m": 2, "c": 2, "tau": 0.1, "seed": 1})
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn tiny_config(dir: &Path) -> PathBuf {
    write_config(dir, "tiny.json", &json!({"train": tiny_train(), "data": tiny_data(1)}))
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

#[test]
fn train_writes_matrix_metrics_checkpoints_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("final average accuracy"));

    let csv = std::fs::read_to_string(out.join("matrix.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4, "{csv}");
    let metrics = read_json(&out.join("metrics.json"));
    let acc = metrics["accuracy"].as_array().unwrap();
    assert_eq!(acc.len(), 3);
    for (t, row) in acc.iter().enumerate() {
        assert_eq!(row.as_array().unwrap().len(), t + 1);
    }
    for t in 1..=3 {
        assert!(out.join(format!("checkpoints/task-{t:02}.ckpt")).exists());
        assert!(out.join(format!("reports/task-{t:02}.json")).exists());
    }
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["seeds"]["train"], 1);
    assert!(manifest["inputs"].as_object().unwrap().len() == 1);
    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(outputs.contains(&"metrics.json") && outputs.contains(&"matrix.csv"));
}

#[test]
fn attriclip_beats_zero_shot_on_the_default_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = bundled("default.json");
    let mut finals = vec![];
    for mode in ["attriclip", "zero_shot"] {
        let out = tmp.path().join(mode);
        let o = run(&["train", "--config", s(&cfg), "--out", s(&out), "--mode", mode, "--format", "json"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let m: Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(m["mode"], mode);
        finals.push(m["final_average_accuracy"].as_f64().unwrap());
    }
    assert!(finals[0] > finals[1], "{finals:?}");
}

#[test]
fn exit_codes_separate_config_data_and_numeric_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let missing = tmp.path().join("missing.json");
    let o = run(&["train", "--config", s(&missing), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("error: config error:"), "{}", stderr(&o));

    let unknown = write_config(tmp.path(), "unknown.json", &json!({"train": {"lr": 0.1}, "data": tiny_data(1)}));
    assert_eq!(code(&run(&["train", "--config", s(&unknown), "--out", s(&out)])), 1);

    let bad_c = write_config(
        tmp.path(),
        "bad_c.json",
        &json!({"train": {"n": 2, "c": 3}, "data": tiny_data(1)}),
    );
    assert_eq!(code(&run(&["train", "--config", s(&bad_c), "--out", s(&out)])), 1);

    let cfg = tiny_config(tmp.path());
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&out), "--mode", "bogus"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);

    let files = write_config(
        tmp.path(),
        "files.json",
        &json!({"data": {"kind": "embedding_files", "train": "nope.atrb", "test": "nope.atrb"}}),
    );
    let o = run(&["train", "--config", s(&files), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("data error"));

    std::fs::write(tmp.path().join("junk.atrb"), b"ATRBjunk").unwrap();
    let junk = write_config(
        tmp.path(),
        "junk.json",
        &json!({"data": {"kind": "embedding_files", "train": "junk.atrb", "test": "junk.atrb"}}),
    );
    assert_eq!(code(&run(&["train", "--config", s(&junk), "--out", s(&out)])), 2);

    let o = run(&["gradcheck", "--corrupt-gradient"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("numeric failure: keys gradient"), "{}", stderr(&o));
    assert_eq!(code(&run(&["gradcheck", "--d", "17"])), 1);
}

#[test]
fn gradcheck_passes_at_default_sizes() {
    let o = run(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    for group in ["keys", "prompts", "shared_prompt"] {
        assert!(text.lines().any(|l| l.starts_with(group) && l.ends_with("ok")), "{text}");
    }
}

#[test]
fn resume_matches_straight_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&a)])), 0);
    let ck = a.join("checkpoints/task-01.ckpt");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&b), "--resume", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read(a.join("metrics.json")).unwrap(),
        std::fs::read(b.join("metrics.json")).unwrap()
    );
    assert_eq!(read_json(&b.join("manifest.json"))["config"]["resumed_from"], s(&ck));

    let mut bytes = std::fs::read(&ck).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    let broken = tmp.path().join("broken.ckpt");
    std::fs::write(&broken, bytes).unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("c")), "--resume", s(&broken)]);
    assert_eq!(code(&o), 2);
}

fn cdcl_json(o: &Output) -> Value {
    assert_eq!(code(o), 0, "{}", stderr(o));
    serde_json::from_str(&stdout(o)).unwrap()
}

#[test]
fn cdcl_reports_every_mode_with_zero_memory() {
    let tmp = tempfile::tempdir().unwrap();
    let mut b = tiny_data(2);
    b.as_object_mut().unwrap().remove("kind");
    let mut a = tiny_data(1);
    a.as_object_mut().unwrap().remove("kind");
    let cfg = write_config(
        tmp.path(),
        "cdcl.json",
        &json!({"train": tiny_train(), "streams": {"kind": "synthetic_pair", "a": a, "b": b, "shared_attributes": 2}}),
    );
    let out = tmp.path().join("run");
    let v = cdcl_json(&run(&["cdcl", "--config", s(&cfg), "--out", s(&out), "--format", "json"]));
    let reports = v["reports"].as_array().unwrap();
    let modes: Vec<&str> = reports.iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["attriclip", "shared_prompt", "zero_shot"]);
    for r in reports {
        assert_eq!(r["memory"], 0);
        let ft = r["acc_a2b_on_b"].as_f64().unwrap() - r["acc_scratch_b"].as_f64().unwrap();
        assert!((r["ft"].as_f64().unwrap() - ft).abs() < 1e-12);
    }
    let csv = std::fs::read_to_string(out.join("cdcl.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("Memory"));
    assert!(out.join("joint.csv").exists() && out.join("manifest.json").exists());
}

#[test]
fn identical_streams_have_no_zero_shot_transfer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "same.json",
        &json!({"train": tiny_train(), "streams": {"kind": "separate", "a": tiny_data(1), "b": tiny_data(1)}}),
    );
    let out = tmp.path().join("run");
    let v = cdcl_json(&run(&["cdcl", "--config", s(&cfg), "--out", s(&out), "--mode", "zero_shot", "--format", "json"]));
    let r = &v["reports"][0];
    assert_eq!(r["ft"].as_f64().unwrap(), 0.0);
    assert_eq!(r["bt"].as_f64().unwrap(), 0.0);
}

#[test]
fn sweep_records_invalid_values_and_keeps_going() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("sweep");
    let o = run(&["sweep", "--config", s(&cfg), "--axis", "C", "--values", "1,2,5", "--out", s(&out), "--format", "csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].ends_with(",ok") && rows[1].ends_with(",ok"));
    assert!(rows[2].starts_with("5,,") && rows[2].contains("error"), "{}", rows[2]);
    assert!(stderr(&o).contains("warning: C = 5"));
    assert!(out.join("runs/C-1/manifest.json").exists());
    assert_eq!(read_json(&out.join("manifest.json"))["config"]["axis"], "C");

    let o = run(&["sweep", "--config", s(&cfg), "--axis", "C", "--values", "9", "--out", s(&tmp.path().join("all_bad"))]);
    assert_eq!(code(&o), 1);
    let o = run(&["sweep", "--config", s(&cfg), "--axis", "lambda_p", "--values", "x", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn distance_sweep_has_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("sweep");
    let o = run(&[
        "sweep", "--config", s(&cfg), "--axis", "distance", "--values", "cosine,mse,triplet", "--out", s(&out), "--format", "json",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows: Vec<Value> = serde_json::from_str(&stdout(&o)).unwrap();
    let values: Vec<&str> = rows.iter().map(|r| r["value"].as_str().unwrap()).collect();
    assert_eq!(values, ["cosine", "mse", "triplet"]);
    assert!(rows.iter().all(|r| r["status"] == "ok"));
}

#[test]
fn report_merges_runs_and_fixtures() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&b), "--mode", "zero_shot"])), 0);

    let one = run(&["report", s(&a), "--format", "csv"]);
    assert_eq!(code(&one), 0);
    assert_eq!(stdout(&one).lines().count(), 2);

    let merged = tmp.path().join("merged");
    let two = run(&["report", s(&a), s(&b), "--format", "json", "--out", s(&merged)]);
    assert_eq!(code(&two), 0, "{}", stderr(&two));
    let rows: Vec<Value> = serde_json::from_str(&stdout(&two)).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["mode"], "zero_shot");
    assert!(merged.join("report.csv").exists() && merged.join("report.txt").exists());

    let nowhere = tmp.path().join("nowhere");
    let partial = run(&["report", s(&a), s(&nowhere)]);
    assert_eq!(code(&partial), 0);
    assert!(stderr(&partial).contains("warning: skipping"));
    assert_eq!(code(&run(&["report", s(&nowhere)])), 2);

    let f = run(&["report", "--fixtures", "--format", "csv"]);
    assert_eq!(code(&f), 0);
    let text = stdout(&f);
    let ours: Vec<&str> = text.lines().filter(|l| l.contains(",attribank,")).collect();
    assert_eq!(ours.len(), 2);
    assert!(ours[0].contains(",FT,+0.9,+0.9,true"), "{}", ours[0]);
    assert!(ours[1].contains(",BT,+7.0,+7.0,true"), "{}", ours[1]);
    assert!(text.lines().skip(1).all(|l| l.ends_with("true")));
}
