use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn darn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_darn"))
        .args(args)
        .env_remove("DARN_CONFIG")
        .env_remove("DARN_OUT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = darn(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &Path) -> String {
    let out = dir.join("data");
    ok(&["gen-data", "--out", p(&out), "--item-count", "40", "--seed", "3"]);
    p(&out.join("manifest.json")).to_string()
}

#[test]
fn usage_errors_exit_2() {
    let o = darn(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error[usage]:"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn missing_input_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = darn(&["train", "--data", "/nonexistent/manifest.json", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[io]:"));
    assert!(!dir.path().join("config.json").exists());
}

#[test]
fn config_problems_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"epochs": 1, "learning_rat": 0.1}}"#).unwrap();
    let o = darn(&["train", "--config", p(&cfg), "--data", "x", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error[config]:") && err.contains("train.learning_rat"), "{err}");

    let o = darn(&["train", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data"));

    let o = darn(&["gen-data", "--out", p(&dir.path().join("g")), "--max-shift", "4"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn flags_override_the_config_file_and_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    fs::write(&cfg, r#"{"item_count": 12, "seed": 5, "missing_fraction": 0.0}"#).unwrap();
    let out = dir.path().join("d");
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&out), "--item-count", "9"]);
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["item_count"], 9);
    assert_eq!(echoed["seed"], 5);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["item_count"], 9);
}

#[test]
fn init_checkpoint_features_are_reproducible_and_queries_return_min_k_n() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--data", &data, "--out", p(&run), "--epochs", "0", "--seed", "2"]);
    let ck = run.join("checkpoint.ckpt");
    for name in ["loss.csv", "config.json", "run.log"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let (f1, f2) = (dir.path().join("f1"), dir.path().join("f2"));
    for f in [&f1, &f2] {
        ok(&["extract", "--checkpoint", p(&ck), "--data", &data, "--out", p(f), "--pca-dim", "8"]);
    }
    for name in ["gallery.tnsr", "gallery.ids", "queries.tnsr", "queries.ids", "pca.bin"] {
        assert_eq!(fs::read(f1.join(name)).unwrap(), fs::read(f2.join(name)).unwrap(), "{name}");
    }

    let idx = dir.path().join("idx");
    ok(&["index", "--features", p(&f1.join("gallery.tnsr")), "--data", &data, "--out", p(&idx)]);
    for k in ["5", "100"] {
        let q = dir.path().join(format!("q{k}"));
        ok(&["query", "--gallery", p(&idx.join("gallery")), "--queries", p(&f1.join("queries.tnsr")), "--k", k, "--out", p(&q)]);
        let csv = fs::read_to_string(q.join("results.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("query_id,rank,gallery_id,distance"));
        let rows: Vec<&str> = lines.collect();
        let per_query = k.parse::<usize>().unwrap().min(40);
        assert_eq!(rows.len(), 40 * per_query, "k = {k}");
    }
}

#[test]
fn train_then_evaluate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let mut outputs = Vec::new();
    // Same paths both times: they are part of the resolved config.
    let run = dir.path().join("run");
    let ev = dir.path().join("eval");
    for _ in 0..2 {
        ok(&["--threads", "1", "train", "--data", &data, "--out", p(&run), "--epochs", "2", "--seed", "4"]);
        ok(&[
            "--threads", "1", "evaluate", "--checkpoint", p(&run.join("checkpoint.ckpt")), "--data", &data, "--out", p(&ev),
            "--pca-dim", "8", "--ks", "1,5,10", "--gallery-sizes", "8,20,40",
        ]);
        let files: Vec<Vec<u8>> = ["eval.json", "eval_topk.csv", "eval_ndcg.csv", "sweep.csv", "config.json"]
            .iter()
            .map(|f| fs::read(ev.join(f)).unwrap())
            .chain([fs::read(run.join("loss.csv")).unwrap(), fs::read(run.join("checkpoint.ckpt")).unwrap()])
            .collect();
        outputs.push(files);
        fs::remove_dir_all(&run).unwrap();
        fs::remove_dir_all(&ev).unwrap();
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn grad_check_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = darn(&["grad-check", "--seed", "7", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().last().unwrap().starts_with("max relative error"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 7);
}

#[test]
fn failing_threshold_exits_1() {
    let o = darn(&["grad-check", "--seed", "1", "--threshold", "1e-30"]);
    assert_eq!(o.status.code(), Some(1));
}
