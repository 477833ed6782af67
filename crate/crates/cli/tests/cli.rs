use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stem_cli::config::{CorpusSource, RunConfig, TokenizerChoice};

const BIN: &str = env!("CARGO_BIN_EXE_stem");

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn stem(root: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("STEM_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// The run directory reported on stderr.
fn run_dir(o: &Output) -> PathBuf {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .unwrap_or_else(|| panic!("no run directory in: {err}"));
    PathBuf::from(line)
}

/// Leading JSON document of a subcommand's stdout.
fn json_prefix(text: &str) -> serde_json::Value {
    let mut de = serde_json::Deserializer::from_str(text).into_iter::<serde_json::Value>();
    de.next().expect("JSON present").expect("valid JSON")
}

fn tiny_config(dir: &Path, text: &str) -> PathBuf {
    fs::write(dir.join("corpus.txt"), text).unwrap();
    let cfg = r#"{
      "model": { "layers": 2, "d": 16, "d_ff": 32, "heads": 2, "max_len": 32,
                 "placement": { "kind": { "ratio": 0.5 }, "variant": "stem" } },
      "train": { "peak_lr": 0.003, "schedule": "cosine", "warmup_ratio": 0.1, "min_lr_factor": 0.1,
                 "weight_decay": 0.1, "beta1": 0.9, "beta2": 0.95, "batch_size": 2, "seq_len": 16,
                 "steps": 25, "seed": 3 },
      "data": { "source": { "kind": "file", "path": "corpus.txt" }, "tokenizer": { "mode": "byte" },
                "holdout_fraction": 0.1 }
    }"#;
    let path = dir.join("run.json");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn cost_prints_qwen_saving_fraction() {
    let root = tempfile::tempdir().unwrap();
    let o = stem(root.path(), &["cost", "--qwen", "1.5B"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("saving_fraction 0.2174"), "{out}");
    let report = json_prefix(&out);
    assert_eq!(report["hyper"]["d"], 1536);
    assert_eq!(report["hyper"]["d_ff"], 8960);
    let dir = run_dir(&o);
    for f in ["cost.json", "cost.csv", "manifest.json"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn cost_rejects_unknown_size_with_config_code() {
    let root = tempfile::tempdir().unwrap();
    let o = stem(root.path(), &["cost", "--qwen", "9B"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_twice_gives_identical_traces_in_fresh_dirs() {
    let root = tempfile::tempdir().unwrap();
    let text = "the quick brown fox jumps over the lazy dog. ".repeat(40);
    let cfg = tiny_config(root.path(), &text);
    let cfg = cfg.to_str().unwrap();
    let a = stem(root.path(), &["train", "--config", cfg]);
    let b = stem(root.path(), &["train", "--config", cfg]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(b.status.success());
    let (da, db) = (run_dir(&a), run_dir(&b));
    assert_ne!(da, db);
    let ta = fs::read(da.join("trace.csv")).unwrap();
    let tb = fs::read(db.join("trace.csv")).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(String::from_utf8(ta).unwrap().lines().count(), 26);

    let ma: serde_json::Value =
        serde_json::from_slice(&fs::read(da.join("manifest.json")).unwrap()).unwrap();
    let mb: serde_json::Value =
        serde_json::from_slice(&fs::read(db.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["config_sha256"], mb["config_sha256"]);
    assert_eq!(ma["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(ma["seed"], 3);
    assert!(ma["version"].is_string());
    assert!(da.join("checkpoints/final.ckpt").is_file());

    // A flag overrides the file and changes the hash.
    let c = stem(root.path(), &["train", "--config", cfg, "--steps", "5"]);
    assert!(c.status.success());
    let mc: serde_json::Value =
        serde_json::from_slice(&fs::read(run_dir(&c).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(mc["config"]["train"]["steps"], 5);
    assert_ne!(mc["config_sha256"], ma["config_sha256"]);

    // Follow-up commands read the run without touching it.
    let before: Vec<_> = fs::read_dir(&da)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    let e = stem(
        root.path(),
        &[
            "eval",
            "--run",
            da.to_str().unwrap(),
            "--lengths",
            "16,32",
            "--per-length",
            "3",
        ],
    );
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let csv = fs::read_to_string(run_dir(&e).join("eval.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "length,accuracy,ppl,activated_params"
    );
    assert_eq!(csv.lines().count(), 3);
    let an = stem(
        root.path(),
        &["analyze", "--run", da.to_str().unwrap(), "--pairs", "500"],
    );
    assert!(
        an.status.success(),
        "{}",
        String::from_utf8_lossy(&an.stderr)
    );
    let hist = fs::read_to_string(run_dir(&an).join("hist_stem_rows_layer1.csv")).unwrap();
    assert!(hist.starts_with("bin_left,bin_right,count"));
    let after: Vec<_> = fs::read_dir(&da)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn invalid_config_lists_every_field() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "abc");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("\"heads\": 2", "\"heads\": 3")
        .replace("\"steps\": 25", "\"steps\": 0")
        .replace("\"holdout_fraction\": 0.1", "\"holdout_fraction\": 0.9");
    fs::write(&cfg, text).unwrap();
    let o = stem(root.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    for field in ["model.heads", "train.steps", "data.holdout_fraction"] {
        assert!(err.contains(field), "{field} not reported in {err}");
    }
    // Nothing was created for the rejected run.
    assert!(!root.path().join("train-0000").exists());
}

#[test]
fn missing_and_corrupt_checkpoints_are_categorized() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), &"abcdefgh ".repeat(30));
    let o = stem(
        root.path(),
        &["train", "--config", cfg.to_str().unwrap(), "--steps", "2"],
    );
    assert!(o.status.success());
    let dir = run_dir(&o);
    let missing = stem(
        root.path(),
        &[
            "eval",
            "--run",
            dir.to_str().unwrap(),
            "--checkpoint",
            "/nonexistent/x.ckpt",
        ],
    );
    assert_eq!(missing.status.code(), Some(4));
    let bad = root.path().join("bad.ckpt");
    fs::write(&bad, b"NOTACKPT and some bytes").unwrap();
    let corrupt = stem(
        root.path(),
        &[
            "eval",
            "--run",
            dir.to_str().unwrap(),
            "--checkpoint",
            bad.to_str().unwrap(),
        ],
    );
    assert_eq!(corrupt.status.code(), Some(6));
}

#[test]
fn simulate_writes_report_and_trace() {
    let root = tempfile::tempdir().unwrap();
    let o = stem(
        root.path(),
        &[
            "simulate",
            "--vocab",
            "2000",
            "--tokens",
            "5000",
            "--capacity",
            "200",
            "--layers",
            "2",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json_prefix(&stdout(&o));
    let (h, m) = (
        report["hits"].as_u64().unwrap(),
        report["misses"].as_u64().unwrap(),
    );
    assert_eq!(h + m, 10_000);
    let csv = fs::read_to_string(run_dir(&o).join("steps.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5001);
    let bad = stem(
        root.path(),
        &["simulate", "--capacity", "0", "--host-bandwidth=-1"],
    );
    assert_eq!(bad.status.code(), Some(3));
}

fn file_config(dir: &Path, text: &str, tokenizer: TokenizerChoice, holdout: f64) -> RunConfig {
    let path = dir.join("c.txt");
    fs::write(&path, text).unwrap();
    let mut cfg: RunConfig =
        serde_json::from_str(&fs::read_to_string(tiny_config(dir, "x")).unwrap()).unwrap();
    cfg.data.source = CorpusSource::File { path };
    cfg.data.tokenizer = Some(tokenizer);
    cfg.data.holdout_fraction = holdout;
    cfg
}

#[test]
fn byte_ingest_offsets_by_reserved_ids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = file_config(dir.path(), "ab", TokenizerChoice::Byte, 0.0);
    let corpus = cfg.load_corpus().unwrap();
    assert_eq!(corpus.train, vec![99, 100]);
    assert!(corpus.heldout.is_empty());
    assert_eq!(corpus.vocab, 258);
}

#[test]
fn empty_file_gives_empty_stream() {
    let dir = tempfile::tempdir().unwrap();
    for tok in [
        TokenizerChoice::Byte,
        TokenizerChoice::Word { max_vocab: 10 },
    ] {
        let cfg = file_config(dir.path(), "", tok, 0.0);
        let corpus = cfg.load_corpus().unwrap();
        assert!(corpus.train.is_empty() && corpus.heldout.is_empty());
    }
}

#[test]
fn config_round_trips() {
    let text = fs::read_to_string(workspace().join("configs/countries.json")).unwrap();
    let cfg: RunConfig = serde_json::from_str(&text).unwrap();
    let again: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(cfg, again);
    assert!(cfg.problems().is_empty(), "{:?}", cfg.problems());
    for name in ["markov.json", "text.json"] {
        let text = fs::read_to_string(workspace().join("configs").join(name)).unwrap();
        let cfg: RunConfig = serde_json::from_str(&text).unwrap();
        let again: RunConfig =
            serde_json::from_str(&serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again);
    }
}

#[test]
fn unknown_fields_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "abc");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("\"d\": 16", "\"d\": 16, \"width\": 4");
    fs::write(&cfg, text).unwrap();
    let o = stem(root.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
}

/// Trains the country corpus and swaps one country for another in a
/// capital prompt. Takes a couple of minutes.
#[test]
fn edit_flips_capital() {
    let root = tempfile::tempdir().unwrap();
    let cfg = workspace().join("configs/countries.json");
    let o = stem(root.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    let e = stem(
        root.path(),
        &[
            "edit",
            "--run",
            dir.to_str().unwrap(),
            "--prompt",
            "the capital of baraland is",
            "--source",
            "baraland",
            "--target",
            "toraland",
            "--scheme",
            "equal-swap",
            "--top-k",
            "3",
        ],
    );
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let report = json_prefix(&stdout(&e));
    assert_eq!(report["argmax_pre"], "rabaton");
    assert_eq!(report["argmax_post"], "ratoton");
    assert_eq!(report["pre"].as_array().unwrap().len(), 3);
    assert_eq!(report["positions"], serde_json::json!([3]));
    assert!(run_dir(&e).join("edit.json").is_file());

    let missing = stem(
        root.path(),
        &[
            "edit",
            "--run",
            dir.to_str().unwrap(),
            "--prompt",
            "the capital of baraland is",
            "--source",
            "nowhere",
            "--target",
            "toraland",
        ],
    );
    assert_eq!(missing.status.code(), Some(3));
}
