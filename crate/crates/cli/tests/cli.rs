use std::path::Path;
use std::process::{Command, Output};

fn locattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locattn")).args(args).output().expect("spawn locattn")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json_file(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn count_params_prints_json() {
    let out = locattn(&["count-params", "--preset", "1LocHead_7TiedLoc_All6"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["preset"], "1LocHead_7TiedLoc_All6");
    assert_eq!(v["attention_params"], 3_538_944);
    assert_eq!(v["paper_rounded"], "3.53M");
}

#[test]
fn count_params_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.json");
    std::fs::write(&cfg, r#"{"n_layers":1,"heads":2,"d_v":8,"d_l":4,"d_ff":8}"#).unwrap();
    let out = locattn(&["count-params", "--config", p(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // 2 heads x (W_q, W_k, W_v) of 8x4, plus W_o 8x8
    assert_eq!(v["attention_params"], 2 * 3 * 32 + 64);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(locattn(&["count-params", "--preset", "no_such_preset"]).status.code(), Some(2));
    assert_eq!(locattn(&["train", "--preset", "tiny_baseline"]).status.code(), Some(2));
    assert_eq!(locattn(&["train", "--task", "sorting", "--preset", "tiny_baseline", "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(locattn(&["bench", "--reps", "2", "--out", p(dir.path())]).status.code(), Some(2));
    let missing = locattn(&["analyze", "--checkpoint", "nope.json", "--corpus", "nope.jsonl"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn gen_data_with_no_sentences() {
    let dir = tempfile::tempdir().unwrap();
    let out = locattn(&["gen-data", "--n", "0", "--out", p(dir.path())]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(dir.path().join("data.jsonl")).unwrap(), "");
    let m = json_file(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["status"], "ok");
}

#[test]
fn train_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let data = dir.path().join("data");
    let rep = dir.path().join("report");
    let out = locattn(&[
        "train", "--preset", "tiny_band2", "--seed", "3", "--T", "8", "--n-train", "64", "--n-test", "16", "--epochs", "2",
        "--out", p(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,train_acc,test_acc,loss\n"));
    let m = json_file(&run.join("manifest.json"));
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["preset"], "tiny_band2");

    let out = locattn(&["gen-data", "--T", "8", "--n", "4", "--edges", "2", "--out", p(&data)]);
    assert!(out.status.success());
    let corpus = data.join("data.jsonl");
    let ck = run.join("checkpoint.json");
    let out = locattn(&["analyze", "--checkpoint", p(&ck), "--corpus", p(&corpus), "--out", p(&rep)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["gamma.csv", "bias.csv", "curve.csv", "headmap.json", "report.json", "manifest.json"] {
        assert!(rep.join(f).exists(), "{f}");
    }
    let bias = std::fs::read_to_string(rep.join("bias.csv")).unwrap();
    // 2 layers x 4 heads
    assert_eq!(bias.lines().count(), 9);
    let headmap = json_file(&rep.join("headmap.json"));
    assert!(headmap.is_object() || headmap.is_array());

    let wrong = locattn(&["analyze", "--checkpoint", p(&ck), "--corpus", p(&corpus), "--out", p(&rep), "--preset", "tiny_baseline"]);
    assert_eq!(wrong.status.code(), Some(3));
    let right = locattn(&[
        "analyze", "--checkpoint", p(&ck), "--corpus", p(&corpus), "--out", p(&rep), "--preset", "tiny_band2", "--which", "bias",
    ]);
    assert!(right.status.success());
}

#[test]
fn analyze_leaves_undefined_gammas_empty() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = locattn(&[
        "train", "--preset", "tiny_baseline", "--T", "4", "--n-train", "8", "--n-test", "4", "--epochs", "1", "--out", p(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // three tokens all within the window: no syntactic or unrelated pairs
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(&corpus, "{\"tokens\":[\"0\",\"1\",\"0\"],\"edges\":[]}\n").unwrap();
    let rep = dir.path().join("rep");
    let out = locattn(&[
        "analyze", "--checkpoint", p(&run.join("checkpoint.json")), "--corpus", p(&corpus), "--which", "sensitivity",
        "--out", p(&rep),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let gamma = std::fs::read_to_string(rep.join("gamma.csv")).unwrap();
    for line in gamma.lines().skip(1) {
        assert!(line.ends_with(",,"), "{line}");
    }
    assert!(!rep.join("bias.csv").exists());
}

#[test]
fn malformed_corpus_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = locattn(&[
        "train", "--preset", "tiny_baseline", "--T", "4", "--n-train", "8", "--n-test", "4", "--epochs", "1", "--out", p(&run),
    ]);
    assert!(out.status.success());
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(&corpus, "{\"tokens\":[\"a\",\"b\"],\"edges\":[[0,5]]}\n").unwrap();
    let out = locattn(&["analyze", "--checkpoint", p(&run.join("checkpoint.json")), "--corpus", p(&corpus), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = locattn(&["bench", "--T", "32,64", "--k", "1,2", "--reps", "3", "--d-v", "8", "--d-l", "8", "--out", p(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "T,k,dense_median_s,banded_median_s,speedup,max_deviation");
    assert_eq!(rows.len(), 5);
    for r in &rows[1..] {
        let dev: f64 = r.rsplit(',').next().unwrap().parse().unwrap();
        assert!(dev <= 1e-12, "{r}");
    }
}
