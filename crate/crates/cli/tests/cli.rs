use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn coaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coaug"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = coaug(args);
    assert!(
        out.status.success(),
        "coaug {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = r#"{
  "corpus": {"n_topics": 4, "n_queries": 8, "n_docs": 24, "query_vocab_size": 16,
             "doc_vocab_size": 48, "bridge_vocab_size": 4, "doc_len": 6},
  "train": {"steps": 4, "q": 1, "d_pos": 1, "d_neg": 4, "n_rollout": 2, "n_samp": 4,
            "eval_every": 2, "policy": {"tokens_per_rollout": 3}}
}"#;

fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("config.json");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.join("data");
    let cfg = cfg.to_str().unwrap().to_string();
    let data_s = data.to_str().unwrap().to_string();
    ok(&["gen-corpus", "--config", &cfg, "--seed", "3", "--out", &data_s]);
    (cfg, data_s)
}

#[test]
fn gen_corpus_writes_beir_layout_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, data) = setup(tmp.path());
    let data = Path::new(&data);
    for f in ["corpus.jsonl", "queries.jsonl", "qrels/test.tsv", "extra_vocab.json", "manifest.json"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let m = json(&data.join("manifest.json"));
    assert_eq!(m["command"], "gen-corpus");
    assert_eq!(m["summary"]["documents"], 24);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 16);
    for (_, p) in m["artifacts"].as_object().unwrap() {
        assert!(Path::new(p.as_str().unwrap()).exists());
    }
}

#[test]
fn train_eval_analyze_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(tmp.path());
    let out = tmp.path().join("train");
    let out_s = out.to_str().unwrap();
    ok(&["train", "--config", &cfg, "--data", &data, "--out", out_s, "--workers", "2"]);
    let csv = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("step,mean_reward,ndcg10,hqd,amp_var,same_sign\n"));
    assert!(out.join("best.json").exists());

    let ck = out.join("checkpoint.json");
    let eval_out = tmp.path().join("eval");
    ok(&["eval", "--data", &data, "--checkpoint", ck.to_str().unwrap(), "--out", eval_out.to_str().unwrap()]);
    let report = json(&eval_out.join("eval.json"));
    assert_eq!(report["per_query"].as_array().unwrap().len(), 8);
    let train_manifest = json(&out.join("manifest.json"));
    assert_eq!(report["mean_ndcg"], train_manifest["summary"]["final_ndcg"]);

    let an = tmp.path().join("an");
    ok(&[
        "analyze", "--data", &data, "--checkpoint", ck.to_str().unwrap(), "--out", an.to_str().unwrap(), "--query", "q1",
        "--log-base", "2",
    ]);
    assert_eq!(json(&an.join("case.json"))["query_id"], "q1");
    let hqd = json(&an.join("hqd.json"));
    assert_eq!(hqd["log_base"], 2.0);
    assert_eq!(hqd["rows"].as_array().unwrap().len(), 2);
    assert_eq!(json(&an.join("anomalies.json"))["steps"], 4);
}

#[test]
fn resume_reproduces_uninterrupted_history() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(tmp.path());
    let full = tmp.path().join("full");
    ok(&["train", "--config", &cfg, "--data", &data, "--out", full.to_str().unwrap()]);
    let half = tmp.path().join("half");
    ok(&["train", "--config", &cfg, "--data", &data, "--out", half.to_str().unwrap(), "--steps", "2"]);
    let resumed = tmp.path().join("resumed");
    ok(&[
        "train", "--data", &data, "--out", resumed.to_str().unwrap(), "--resume",
        half.join("checkpoint.json").to_str().unwrap(), "--steps", "4",
    ]);
    assert_eq!(
        fs::read(full.join("history.csv")).unwrap(),
        fs::read(resumed.join("history.csv")).unwrap()
    );
}

#[test]
fn flags_override_config_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(tmp.path());
    let out = tmp.path().join("t");
    ok(&[
        "train", "--config", &cfg, "--data", &data, "--out", out.to_str().unwrap(), "--steps", "1", "--mode",
        "group-norm", "--sides", "query",
    ]);
    let ck = json(&out.join("checkpoint.json"));
    assert_eq!(ck["config"]["steps"], 1);
    assert_eq!(ck["config"]["advantage"]["mode"], "group_norm");
    assert_eq!(ck["config"]["sides"], "query_only");
    assert_eq!(ck["config"]["q"], 1);
}

#[test]
fn ablate_writes_grid_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, _) = setup(tmp.path());
    let out = tmp.path().join("ab");
    let o = ok(&[
        "ablate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "1,2", "--arms", "Base,RL-QD,RL-Q+RL-D",
    ]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("RL-Q+RL-D"));
    let grid = json(&out.join("ablation.json"));
    assert_eq!(grid["cells"].as_array().unwrap().len(), 6);
    assert!(fs::read_to_string(out.join("ablation.txt")).unwrap().contains("amplified_variance"));
}

#[test]
fn bad_inputs_fail_with_context() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"stepz": 3}}"#).unwrap();
    let out = coaug(&["gen-corpus", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("parsing config") && err.contains("stepz"), "{err}");

    let out = coaug(&["eval", "--data", tmp.path().join("missing").to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("loading dataset"));

    let out = coaug(&["ablate", "--arms", "nonsense", "--out", tmp.path().to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown arm"));
}
