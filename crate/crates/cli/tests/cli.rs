use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn small_config(kind: &str, out: &Path) -> Value {
    let spec = json!({ "input_shape": [1, 8, 8], "channels": [4, 8], "kernel": 3, "stride": 2, "padding": 1 });
    let mut c = json!({
        "model_kind": kind,
        "dataset": {
            "kind": "glyph_sweep",
            "known": ["h_bar", "v_bar", "ring"],
            "heldout": ["cross", "plus"],
            "train_per_class": 24,
            "test_per_class": 8,
            "noise_count": 8,
            "size": 8,
            "seed": 3
        },
        "output_dir": out,
        "seed": 1
    });
    let model = json!({ "num_classes": 3, "latent_dim": 4, "batch_size": 16, "epochs": 5, "layer_spec": spec });
    if kind == "cpgm_vae" || kind == "cnn" {
        c["vae"] = model;
    } else {
        c["aae"] = model;
    }
    c
}

fn write_config(dir: &Path, name: &str, c: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(c).unwrap()).unwrap();
    p
}

fn cpgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpgm")).args(args).output().unwrap()
}

fn cpgm_env(args: &[&str], key: &str, val: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpgm")).args(args).env(key, val).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_and_invalid_fields_exit_2_naming_the_field() {
    let t = tempfile::tempdir().unwrap();
    let mut c = small_config("cpgm_vae", &t.path().join("o"));
    c.as_object_mut().unwrap().remove("dataset");
    let o = cpgm(&["train", "--config", s(&write_config(t.path(), "a.json", &c))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dataset"), "{}", stderr(&o));

    let mut c = small_config("cpgm_vae", &t.path().join("o"));
    c["vae"].as_object_mut().unwrap().remove("num_classes");
    let o = cpgm(&["train", "--config", s(&write_config(t.path(), "b.json", &c))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("num_classes"), "{}", stderr(&o));

    let mut c = small_config("cpgm_vae", &t.path().join("o"));
    c["vae"]["num_classes"] = json!(5);
    let o = cpgm(&["train", "--config", s(&write_config(t.path(), "c.json", &c))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("vae.num_classes"), "{}", stderr(&o));

    let mut c = small_config("cpgm_aae", &t.path().join("o"));
    c["vae"] = c["aae"].clone();
    let o = cpgm(&["train", "--config", s(&write_config(t.path(), "d.json", &c))]);
    assert_eq!(code(&o), 2);

    let mut c = small_config("cpgm_vae", &t.path().join("o"));
    c["vae"]["latent_dim"] = json!(0);
    let o = cpgm(&["train", "--config", s(&write_config(t.path(), "e.json", &c))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("latent_dim"), "{}", stderr(&o));

    let o = cpgm(&["train", "--config", s(&t.path().join("absent.json"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&cpgm(&["frobnicate"])), 2);
}

#[test]
fn train_is_deterministic_and_reproducible_from_its_echo() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "c.json", &small_config("cpgm_vae", &t.path().join("unused")));
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert_eq!(code(&cpgm(&["train", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&cpgm(&["train", "--config", s(&cfg), "--out", s(&b)])), 0);
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "checkpoint.bin"), read(&b, "checkpoint.bin"));
    assert_eq!(read(&a, "loss.csv"), read(&b, "loss.csv"));
    let loss = String::from_utf8(read(&a, "loss.csv")).unwrap();
    assert_eq!(loss.lines().count() - 1, 5);

    // The echo alone reproduces the run.
    let echo: Value = serde_json::from_slice(&read(&a, "config.resolved.json")).unwrap();
    assert_eq!(echo["vae"]["lambda"], json!(100.0));
    assert_eq!(echo["vae"]["seed"], json!(1));
    let c = t.path().join("c");
    let mut echo2 = echo.clone();
    echo2["output_dir"] = json!(c);
    let e = write_config(t.path(), "echo.json", &echo2);
    assert_eq!(code(&cpgm(&["train", "--config", s(&e)])), 0);
    assert_eq!(read(&a, "checkpoint.bin"), read(&c, "checkpoint.bin"));

    // --seed overrides the config seed.
    let d = t.path().join("d");
    assert_eq!(code(&cpgm(&["train", "--config", s(&cfg), "--out", s(&d), "--seed", "2"])), 0);
    assert_ne!(read(&a, "checkpoint.bin"), read(&d, "checkpoint.bin"));
}

#[test]
fn eval_and_export_on_a_trained_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("run");
    let cfg = write_config(t.path(), "c.json", &small_config("cpgm_vae", &out));
    assert_eq!(code(&cpgm(&["train", "--config", s(&cfg)])), 0);

    let o = cpgm(&["eval", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    for f in ["openness", "macro_f1", "closed_set_accuracy", "unknown_recall", "confusion"] {
        assert!(report.get(f).is_some(), "missing {f}");
    }
    assert_eq!(report["unknown_classes"], json!(3));
    let conf = fs::read_to_string(out.join("confusion.csv")).unwrap();
    let rows: Vec<&str> = conf.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().skip(1).all(|r| r.split(',').count() == 5));
    let metrics = fs::read(out.join("metrics.json")).unwrap();
    assert_eq!(code(&cpgm(&["eval", "--config", s(&cfg)])), 0);
    assert_eq!(fs::read(out.join("metrics.json")).unwrap(), metrics);

    // Scoring the training set matches the accuracy logged while training.
    let o = cpgm(&["eval", "--config", s(&cfg), "--on", "train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    let last: f64 = loss.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(report["closed_set_accuracy"].as_f64().unwrap() >= last - 0.01, "{report} vs {last}");
    assert_eq!(report["openness"], json!(0.0));

    let o = cpgm(&["export-embeddings", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let emb = fs::read_to_string(out.join("embeddings.csv")).unwrap();
    let header = emb.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 4 + 3);
    assert_eq!(emb.lines().count(), 1 + 3 * 8 + 3 * 8);
    assert!(emb.lines().skip(1).all(|l| l.split(',').count() == 7 && !l.ends_with(',')));
    assert!(emb.lines().any(|l| l.split(',').nth(1) == Some("unknown")));

    // A checkpoint of another kind is a configuration error.
    let mut other = small_config("cnn", &out);
    other["eval_mode"] = json!("cnn");
    let o = cpgm(&["eval", "--config", s(&write_config(t.path(), "cnn.json", &other))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("cpgm_vae"));

    // A damaged checkpoint is a runtime failure.
    let bad = t.path().join("bad.bin");
    fs::write(&bad, b"not a checkpoint").unwrap();
    assert_eq!(code(&cpgm(&["eval", "--config", s(&cfg), "--checkpoint", s(&bad)])), 1);
}

#[test]
fn cnn_checkpoints_score_softmax_only() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("run");
    let mut c = small_config("cnn", &out);
    c["eval_mode"] = json!("cnn");
    let cfg = write_config(t.path(), "c.json", &c);
    assert_eq!(code(&cpgm(&["train", "--config", s(&cfg)])), 0);
    assert_eq!(code(&cpgm(&["eval", "--config", s(&cfg)])), 0);
    let emb = fs::read_to_string(out.join("embeddings.csv").as_path()).unwrap_or_default();
    assert!(emb.is_empty());
    assert_eq!(code(&cpgm(&["export-embeddings", "--config", s(&cfg)])), 0);
    let emb = fs::read_to_string(out.join("embeddings.csv")).unwrap();
    assert!(emb.lines().skip(1).all(|l| l.ends_with(',') && l.split(',').count() == 7));

    c["eval_mode"] = json!("full");
    let o = cpgm(&["eval", "--config", s(&write_config(t.path(), "full.json", &c))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_csv_is_deterministic_and_its_openness_recomputes() {
    let t = tempfile::tempdir().unwrap();
    let mut c = small_config("cpgm_vae", &t.path().join("a"));
    c["sweep"] = json!({
        "openness": { "n_train": 3, "n_target": 3, "unknown_class_counts": [1, 2, 3] },
        "modes": ["cnn", "lcvae", "full"],
        "seeds": [0, 1]
    });
    let cfg = write_config(t.path(), "c.json", &c);
    let o = cpgm_env(&["sweep", "--config", s(&cfg)], "CPGM_THREADS", "2");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let b = t.path().join("b");
    assert_eq!(code(&cpgm_env(&["sweep", "--config", s(&cfg), "--out", s(&b)], "CPGM_THREADS", "1")), 0);
    let csv = fs::read_to_string(t.path().join("a/sweep.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("sweep.csv")).unwrap());
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 3 * 3);
    for r in &rows {
        let count: usize = r[3].parse().unwrap();
        let op: f64 = r[4].parse().unwrap();
        let expect = cpgm::eval::openness(3, 3 + count, 3).unwrap();
        assert!((op - expect).abs() <= 1e-12, "{op} vs {expect}");
    }

    assert_eq!(code(&cpgm_env(&["sweep", "--config", s(&cfg)], "CPGM_THREADS", "zero")), 2);
    let mut no_sweep = c.clone();
    no_sweep.as_object_mut().unwrap().remove("sweep");
    assert_eq!(code(&cpgm(&["sweep", "--config", s(&write_config(t.path(), "n.json", &no_sweep))])), 2);
    let mut bad_mode = c.clone();
    bad_mode["sweep"]["modes"] = json!(["caae"]);
    assert_eq!(code(&cpgm(&["sweep", "--config", s(&write_config(t.path(), "m.json", &bad_mode))])), 2);
}

#[test]
fn aae_sweep_needs_a_baseline_for_the_cnn_mode() {
    let t = tempfile::tempdir().unwrap();
    let mut c = small_config("variant1", &t.path().join("a"));
    c["sweep"] = json!({ "openness": { "n_train": 3, "n_target": 3, "unknown_class_counts": [3] }, "modes": ["cnn", "full"] });
    let o = cpgm(&["sweep", "--config", s(&write_config(t.path(), "c.json", &c))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("sweep.baseline"));
    c["sweep"]["baseline"] = c["aae"].clone();
    let o = cpgm(&["sweep", "--config", s(&write_config(t.path(), "c.json", &c))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(t.path().join("a/sweep.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains(",variant1,cnn,"));
    assert!(csv.lines().nth(2).unwrap().contains(",variant1,full,"));
}

#[test]
fn gradcheck_passes_on_the_shipped_configs() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let t = tempfile::tempdir().unwrap();
    for name in ["vae.json", "aae.json"] {
        let o = cpgm(&["gradcheck", "--config", s(&root.join(name)), "--out", s(t.path())]);
        assert_eq!(code(&o), 0, "{name}: {}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
        let text = fs::read_to_string(t.path().join("gradcheck.txt")).unwrap();
        assert!(!text.contains("FAIL"));
    }
    let o = cpgm(&["gradcheck", "--config", s(&write_config(t.path(), "cnn.json", &small_config("cnn", t.path())))]);
    assert_eq!(code(&o), 2);
}
