use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
synth_papers = 200
synth_authors = 80
synth_venues = 5
synth_fields = 6
synth_communities = 3
synth_feature_dim = 6
hidden = 8
heads = 2
layers = 1
width = 12
depth = 2
seeds_per_batch = 8
type_attention_dim = 4
epochs = 2
batches_per_epoch = 2
finetune_epochs = 2
finetune_seeds = [0, 1]
"#;

fn phe(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phe"))
        .args(args)
        .current_dir(dir)
        .env_remove("PHE_THREADS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Writes the small config and a synthetic graph into `dir/data`.
fn synth(dir: &Path) {
    fs::write(dir.join("run.toml"), SMALL).unwrap();
    let o = phe(&["synth", "--config", "run.toml", "--out", "data", "--seed", "5"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_64() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(phe(&["frobnicate"], tmp.path()).status.code(), Some(64));
    assert_eq!(phe(&["pretrain", "--bogus"], tmp.path()).status.code(), Some(64));
    assert_eq!(phe(&["synth"], tmp.path()).status.code(), Some(64), "missing --out");
    assert_eq!(phe(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_phe"))
        .args(["gradcheck"])
        .env("PHE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(64));
    drop(tmp);
}

#[test]
fn malformed_node_file_names_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("n.tsv"), "p0\tpaper\t2010\t1,2\np1\tpaper\t2011\t1,2,3\n").unwrap();
    fs::write(d.join("e.tsv"), "p0\tp1\tcites\t2011\n").unwrap();
    let o = phe(&["ingest", "--nodes", "n.tsv", "--edges", "e.tsv"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n.tsv:2"), "{}", stderr(&o));
}

#[test]
fn invalid_config_lists_every_key() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.toml"), "tau = -1.0\nq = 0\nnonsense = 3\n").unwrap();
    let o = phe(&["pretrain", "--config", "bad.toml", "--out", "o"], d);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for key in ["tau", "q", "nonsense"] {
        assert!(err.contains(key), "{key} missing from: {err}");
    }
}

#[test]
fn corrupt_checkpoint_is_a_validation_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    fs::write(d.join("junk.phe"), b"PHE2....").unwrap();
    let o = phe(
        &["finetune", "--config", "data/config.toml", "--checkpoint", "junk.phe", "--out", "ft"],
        d,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("offset 0"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = phe(&["gradcheck", "--out", "g"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report = json(&tmp.path().join("g/gradcheck.json"));
    assert!(report["joint"].as_f64().unwrap() < 1e-4);
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let echoed = fs::read_to_string(d.join("data/config.toml")).unwrap();
    assert!(echoed.contains("seed = 5"));
    assert!(echoed.contains("nodes = "));

    let o = phe(&["ingest", "--config", "data/config.toml"], d);
    assert!(o.status.success());
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["schema"]["node_types"].as_array().unwrap().len(), 4);

    let o = phe(&["pretrain", "--config", "data/config.toml", "--out", "pt", "--verbose"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["best.phe", "last.phe", "metrics.jsonl", "timings.json", "config.toml"] {
        assert!(d.join("pt").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(d.join("pt/metrics.jsonl")).unwrap().lines().count(), 2);
    // verbose mode prints one sampler-stats line per batch
    let batch_lines = stderr(&o)
        .lines()
        .filter_map(|l| serde_json::from_str::<Value>(l).ok())
        .filter(|v| v.get("sampler").is_some())
        .count();
    assert_eq!(batch_lines, 4);

    let o = phe(
        &["finetune", "--config", "data/config.toml", "--checkpoint", "pt/best.phe", "--out", "ft"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let tuned = json(&d.join("ft/metrics.json"));
    assert_eq!(tuned["aggregate"]["seeds"], serde_json::json!([0, 1]));
    assert_eq!(tuned["aggregate"]["pretrained"], Value::Bool(true));

    let o = phe(
        &[
            "eval", "--config", "data/config.toml", "--model", "ft/model_seed0.phe", "--model",
            "ft/model_seed1.phe", "--out", "ev",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let evaluated = json(&d.join("ev/metrics.json"));
    assert_eq!(evaluated["aggregate"], tuned["aggregate"]);

    let o = phe(
        &["export-embeddings", "--config", "data/config.toml", "--checkpoint", "ft/model_seed0.phe", "--out", "ex", "--sample", "20"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let emb = fs::read_to_string(d.join("ex/embeddings.tsv")).unwrap();
    assert_eq!(emb.lines().count(), 1 + report["schema"]["node_count"].as_u64().unwrap() as usize);
    assert_eq!(fs::read_to_string(d.join("ex/uniformity.csv")).unwrap().lines().count(), 21);
}

#[test]
fn scratch_needs_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let o = phe(&["finetune", "--config", "data/config.toml", "--out", "ft"], d);
    assert_eq!(o.status.code(), Some(64));
    let o = phe(&["finetune", "--config", "data/config.toml", "--scratch", "--seed", "3", "--out", "ft"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&d.join("ft/metrics.json"));
    assert_eq!(m["aggregate"]["seeds"], serde_json::json!([3]));
    assert_eq!(m["aggregate"]["pretrained"], Value::Bool(false));
}

#[test]
fn same_seed_reproduces_metrics_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    for out in ["a", "b"] {
        let o = phe(&["pretrain", "--config", "data/config.toml", "--out", out], d);
        assert!(o.status.success(), "{}", stderr(&o));
        let ck = format!("{out}/best.phe");
        let ft = format!("{out}/ft");
        let o = phe(&["finetune", "--config", "data/config.toml", "--checkpoint", &ck, "--out", &ft], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["metrics.jsonl", "best.phe", "last.phe", "ft/metrics.json", "ft/finetune_seed0.jsonl", "ft/model_seed1.phe"] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        let b = fs::read(d.join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}
