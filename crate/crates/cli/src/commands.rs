//! Subcommand bodies. Each one claims a fresh run directory, writes its
//! reports there and finishes with a manifest.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::json;
use stem_core::analysis::{
    address_vectors, heaps_fit, pairwise_cosine, token_counts, unique_growth, AddressKind,
    CosineHistogram,
};
use stem_core::cost_model::{ArchHyperparams, CostReport, QWEN25};
use stem_core::data::{Tokenizer, UNK_ID};
use stem_core::editing::{apply_edit_layers, plan_edit, topk_next, Scheme};
use stem_core::eval_harness::{niah_sweep, val_ppl, DEFAULT_LENGTHS};
use stem_core::memory_sim::{
    simulate_decode, simulate_prefill, zipf_head_mass, zipf_stream, LfuCache, TierModel,
};
use stem_core::model::{build_model, load_checkpoint, save_checkpoint, Checkpoint, Model};
use stem_core::numerics::{ParamSet, Tensor};
use stem_core::training::{spike_count, train as run_training, TrainOptions};

use crate::config::{Corpus, CorpusSource, RunConfig};
use crate::run::{config_error, data_error, Run};
use crate::{
    AnalyzeArgs, CostArgs, EditArgs, EvalArgs, RunArgs, SchemeArg, SimMode, SimulateArgs, TrainArgs,
};

const CONFIG_FILE: &str = "config.json";
const TOKENIZER_FILE: &str = "tokenizer.json";
const FINAL_CHECKPOINT: &str = "checkpoints/final.ckpt";

/// Reads a run configuration. A relative corpus path is taken relative to
/// the configuration file.
pub fn read_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_error(format!("reading {}: {e}", path.display())))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| config_error(format!("parsing {}: {e}", path.display())))?;
    if let CorpusSource::File { path: corpus } = &mut cfg.data.source {
        if corpus.is_relative() {
            if let Some(dir) = path.parent() {
                *corpus = dir.join(&*corpus);
            }
        }
    }
    Ok(cfg)
}

fn check(cfg: &RunConfig) -> anyhow::Result<()> {
    let problems = cfg.problems();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(config_error(format!(
            "invalid configuration:\n  {}",
            problems.join("\n  ")
        )))
    }
}

pub fn train(root: &Path, a: TrainArgs) -> anyhow::Result<PathBuf> {
    let mut cfg = read_config(&a.config)?;
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.model_seed {
        cfg.model.seed = v;
    }
    if let Some(v) = a.peak_lr {
        cfg.train.peak_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seq_len {
        cfg.train.seq_len = v;
    }
    if a.checkpoint_every.is_some() {
        cfg.train.checkpoint_every = a.checkpoint_every;
    }
    check(&cfg)?;
    let corpus = cfg.load_corpus()?;
    let model_cfg = cfg.model_config(corpus.vocab)?;
    let mut model = build_model(&model_cfg, cfg.model.seed)?;

    let mut run = Run::start(root, "train", serde_json::to_value(&cfg)?, cfg.train.seed)?;
    run.input(&a.config);
    if let CorpusSource::File { path } = &cfg.data.source {
        run.input(path);
    }
    run.write_json(CONFIG_FILE, &cfg)?;
    if let Some(tok) = &corpus.tokenizer {
        run.write_json(TOKENIZER_FILE, tok)?;
    }
    let opts = TrainOptions {
        checkpoint_dir: Some(run.path("checkpoints")),
        resume: None,
    };
    let outcome = match run_training(&mut model, &corpus.train, &cfg.train, &opts) {
        Ok(o) => o,
        Err(stem_core::Error::Diverged {
            step,
            reason,
            trace,
        }) => {
            run.write("trace.csv", trace.to_csv())?;
            run.finish()?;
            return Err(stem_core::Error::Diverged {
                step,
                reason,
                trace,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    record_checkpoints(&mut run)?;
    run.write("trace.csv", outcome.trace.to_csv())?;
    let heldout_loss = if corpus.heldout.len() > cfg.train.seq_len {
        Some(stem_core::training::eval_loss(
            &model,
            &corpus.heldout,
            cfg.train.seq_len,
            cfg.train.batch_size,
            64,
        )?)
    } else {
        None
    };
    let window = 100.min(outcome.trace.len().max(1));
    let summary = json!({
        "steps": outcome.trace.len(),
        "final_loss": outcome.trace.losses.last(),
        "smoothed_final_loss": outcome.trace.smoothed_final(window),
        "spikes": spike_count(&outcome.trace.losses, 100, 4.0),
        "heldout_loss": heldout_loss,
        "params": model.param_count(),
        "vocab": model_cfg.vocab,
        "variants": model_cfg.variants,
        "train_tokens": corpus.train.len(),
        "heldout_tokens": corpus.heldout.len(),
    });
    run.write_json("summary.json", &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    run.finish()
}

fn record_checkpoints(run: &mut Run) -> anyhow::Result<()> {
    let dir = run.path("checkpoints");
    let mut names: Vec<String> = fs::read_dir(&dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| format!("checkpoints/{}", e.file_name().to_string_lossy()))
        .collect();
    names.sort();
    for n in names {
        run.record(&n);
    }
    Ok(())
}

/// A trained run reopened for read-only use.
struct Loaded {
    cfg: RunConfig,
    corpus: Corpus,
    model: Model,
    checkpoint: PathBuf,
}

fn load_run(a: &RunArgs) -> anyhow::Result<Loaded> {
    let cfg = read_config(&a.run.join(CONFIG_FILE))?;
    check(&cfg)?;
    let corpus = cfg.load_corpus()?;
    let checkpoint = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| a.run.join(FINAL_CHECKPOINT));
    let ckpt = load_checkpoint(&checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let model = ckpt.to_model()?;
    Ok(Loaded {
        cfg,
        corpus,
        model,
        checkpoint,
    })
}

fn start_from(
    root: &Path,
    command: &str,
    a: &RunArgs,
    loaded: &Loaded,
    settings: serde_json::Value,
    seed: u64,
) -> anyhow::Result<Run> {
    let config = json!({
        "run": a.run.display().to_string(),
        "checkpoint": loaded.checkpoint.display().to_string(),
        "settings": settings,
    });
    let mut run = Run::start(root, command, config, seed)?;
    run.input(&a.run.join(CONFIG_FILE));
    run.input(&loaded.checkpoint);
    Ok(run)
}

pub fn eval(root: &Path, a: EvalArgs) -> anyhow::Result<PathBuf> {
    let loaded = load_run(&a.run)?;
    let max_len = loaded.model.config().max_len;
    let lengths: Vec<usize> = if a.lengths.is_empty() {
        let fit: Vec<usize> = DEFAULT_LENGTHS
            .iter()
            .copied()
            .filter(|&l| l <= max_len)
            .collect();
        if fit.is_empty() {
            vec![max_len]
        } else {
            fit
        }
    } else {
        if let Some(&l) = a.lengths.iter().find(|&&l| l > max_len) {
            return Err(config_error(format!(
                "lengths: {l} exceeds model.max_len {max_len}"
            )));
        }
        a.lengths.clone()
    };
    if loaded.corpus.heldout.len() < 2 {
        return Err(data_error(
            "held-out stream is empty; raise data.holdout_fraction",
        ));
    }
    let seq = loaded.cfg.train.seq_len.min(max_len);
    let ppl = val_ppl(&loaded.model, &loaded.corpus.heldout, seq)?;
    let rows = niah_sweep(&loaded.model, &lengths, a.per_length, a.seed)?;

    let settings = json!({ "lengths": lengths, "per_length": a.per_length, "seed": a.seed });
    let mut run = start_from(root, "eval", &a.run, &loaded, settings, a.seed)?;
    let mut csv = String::from("length,accuracy,ppl,activated_params\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.length, r.accuracy, ppl, r.activated_params
        ));
    }
    run.write("eval.csv", &csv)?;
    let report = json!({ "val_ppl": ppl, "niah": rows });
    run.write_json("eval.json", &report)?;
    print!("{csv}");
    run.finish()
}

#[derive(Serialize)]
struct HistSummary {
    label: String,
    layer: usize,
    rows: usize,
    pairs: usize,
    mean: f64,
    std: f64,
    mean_abs: f64,
    zero_rows: usize,
}

fn summarize(h: &CosineHistogram, layer: usize, rows: usize) -> HistSummary {
    HistSummary {
        label: h.label.clone(),
        layer,
        rows,
        pairs: h.pairs,
        mean: h.mean,
        std: h.std,
        mean_abs: h.mean_abs,
        zero_rows: h.zero_rows,
    }
}

pub fn analyze(root: &Path, a: AnalyzeArgs) -> anyhow::Result<PathBuf> {
    let loaded = load_run(&a.run)?;
    let model = &loaded.model;
    let mc = model.config().clone();
    let seq = loaded.cfg.train.seq_len.min(mc.max_len);
    let counts = token_counts(&loaded.corpus.train, mc.vocab);
    let frequent: Vec<usize> = (0..mc.vocab)
        .filter(|&t| counts[t] >= a.min_count)
        .collect();
    let heldout: Vec<&[usize]> = loaded
        .corpus
        .heldout
        .chunks(seq)
        .filter(|c| c.len() == seq)
        .take(a.heldout_sequences)
        .collect();
    let stem = model.stem_layers();
    let init = build_model(&mc, loaded.cfg.model.seed)?;

    let mut hists: Vec<(CosineHistogram, usize, usize)> = Vec::new();
    for l in 0..mc.layers {
        if stem.contains(&l) {
            let table = &model.table(l).expect("table layer").u;
            let rows: Vec<Vec<f64>> = frequent.iter().map(|&t| table.row(t).to_vec()).collect();
            if rows.len() >= 2 {
                let h = pairwise_cosine(
                    &Tensor::from_rows(&rows)?,
                    a.pairs,
                    a.seed,
                    &format!("stem_rows_layer{l}"),
                )?;
                hists.push((h, l, rows.len()));
            }
            let t0 = &init.table(l).expect("table layer").u;
            let h = pairwise_cosine(t0, a.pairs, a.seed, &format!("init_rows_layer{l}"))?;
            hists.push((h, l, mc.vocab));
        } else if mc.variants[l] == stem_core::layers::FfnKind::Dense && !heldout.is_empty() {
            let mut rows = Vec::new();
            for s in &heldout {
                let v = address_vectors(model, s, l, AddressKind::UpOutput)?;
                rows.extend((0..v.shape()[0]).map(|i| v.row(i).to_vec()));
            }
            let h = pairwise_cosine(
                &Tensor::from_rows(&rows)?,
                a.pairs,
                a.seed,
                &format!("up_output_layer{l}"),
            )?;
            hists.push((h, l, rows.len()));
        }
    }

    let mut lengths = Vec::new();
    let mut n = 16;
    while n <= loaded.corpus.train.len() {
        lengths.push(n);
        n *= 2;
    }
    let growth = unique_growth(&loaded.corpus.train, &lengths);
    let heaps = if lengths.len() >= 2 {
        let xs: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
        let ys: Vec<f64> = growth.iter().map(|&u| u as f64).collect();
        heaps_fit(&xs, &ys).ok()
    } else {
        None
    };

    let settings = json!({
        "pairs": a.pairs,
        "min_count": a.min_count,
        "heldout_sequences": a.heldout_sequences,
        "seed": a.seed,
    });
    let mut run = start_from(root, "analyze", &a.run, &loaded, settings, a.seed)?;
    let mut summaries = Vec::new();
    for (h, l, rows) in &hists {
        run.write(&format!("hist_{}.csv", h.label), h.to_csv())?;
        summaries.push(summarize(h, *l, *rows));
    }
    let mut growth_csv = String::from("length,unique\n");
    for (l, u) in lengths.iter().zip(&growth) {
        growth_csv.push_str(&format!("{l},{u}\n"));
    }
    run.write("unique_growth.csv", growth_csv)?;
    let report = json!({
        "histograms": summaries,
        "frequent_tokens": frequent.len(),
        "reference_spread": 1.0 / (mc.d_ff as f64).sqrt(),
        "heaps": heaps,
    });
    run.write_json("analysis.json", &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    run.finish()
}

#[derive(Serialize)]
struct TopEntry {
    id: usize,
    token: String,
    prob: f64,
}

fn top_table(tok: &Tokenizer, logits: &Tensor, k: usize) -> anyhow::Result<Vec<TopEntry>> {
    let last = logits.row(logits.shape()[0] - 1);
    topk_next(last, k)?
        .into_iter()
        .map(|(id, prob)| {
            Ok(TopEntry {
                id,
                token: tok.token_text(id)?,
                prob,
            })
        })
        .collect()
}

fn encode_known(tok: &Tokenizer, text: &str, what: &str) -> anyhow::Result<Vec<usize>> {
    let ids = tok.encode(text);
    if ids.is_empty() {
        return Err(config_error(format!("{what}: encodes to no tokens")));
    }
    if ids.contains(&UNK_ID) {
        return Err(config_error(format!(
            "{what}: {text:?} contains out-of-vocabulary tokens"
        )));
    }
    Ok(ids)
}

pub fn edit(root: &Path, a: EditArgs) -> anyhow::Result<PathBuf> {
    let loaded = load_run(&a.run)?;
    let tok_path = a.run.run.join(TOKENIZER_FILE);
    let tok: Tokenizer = match &loaded.corpus.tokenizer {
        Some(t) => t.clone(),
        None => {
            return Err(config_error(format!(
                "{}: run has no tokenizer; edit needs text",
                tok_path.display()
            )))
        }
    };
    let model = &loaded.model;
    if model.stem_layers().is_empty() {
        return Err(config_error("model has no table layers to edit"));
    }
    let prompt = encode_known(&tok, &a.prompt, "prompt")?;
    let source = encode_known(&tok, &a.source, "source")?;
    let target = encode_known(&tok, &a.target, "target")?;
    let start = prompt
        .windows(source.len())
        .position(|w| w == source.as_slice())
        .ok_or_else(|| {
            config_error(format!(
                "source: {:?} does not occur in the prompt",
                a.source
            ))
        })?;
    let positions: Vec<usize> = (start..start + source.len()).collect();
    let scheme = match a.scheme {
        SchemeArg::EqualSwap => Scheme::EqualSwap,
        SchemeArg::PadLeft => Scheme::PadLeft,
        SchemeArg::PadRight => Scheme::PadRight,
        SchemeArg::Copy => Scheme::Copy,
        SchemeArg::Subset => Scheme::Subset(if a.subset.is_empty() {
            None
        } else {
            Some(a.subset.clone())
        }),
        SchemeArg::Average => Scheme::Average,
    };
    let layers: BTreeSet<usize> = if a.layers.is_empty() {
        model.stem_layers()
    } else {
        a.layers.iter().copied().collect()
    };
    let plan = plan_edit(&source, &target, &scheme)?;
    let pre = model.forward(&prompt)?;
    let edited = apply_edit_layers(model, &prompt, &positions, &plan, &layers)?;
    let post = edited.forward()?;
    let pre_top = top_table(&tok, &pre, a.top_k)?;
    let post_top = top_table(&tok, &post, a.top_k)?;

    let settings = json!({
        "prompt": a.prompt,
        "source": a.source,
        "target": a.target,
        "scheme": scheme,
        "layers": layers,
        "top_k": a.top_k,
        "materialize": a.materialize,
    });
    let mut run = start_from(root, "edit", &a.run, &loaded, settings, 0)?;
    let report = json!({
        "prompt_ids": prompt,
        "positions": positions,
        "plan": plan,
        "layers": layers,
        "pre": pre_top,
        "post": post_top,
        "argmax_pre": pre_top[0].token,
        "argmax_post": post_top[0].token,
    });
    run.write_json("edit.json", &report)?;
    if a.materialize {
        let m = edited.materialize()?;
        let path = run.path("edited.ckpt");
        save_checkpoint(&path, &Checkpoint::from_model(&m, 0))?;
        run.record("edited.ckpt");
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    run.finish()
}

pub fn simulate(root: &Path, a: SimulateArgs) -> anyhow::Result<PathBuf> {
    let tier = TierModel {
        host_latency: a.host_latency,
        host_bandwidth: a.host_bandwidth,
        layer_compute_time: a.layer_compute_time,
    };
    let mut problems = Vec::new();
    if a.layers == 0 {
        problems.push("layers: must be positive".to_string());
    }
    if a.capacity == 0 {
        problems.push("capacity: must be positive".to_string());
    }
    if a.d_ff == 0 {
        problems.push("d_ff: must be positive".to_string());
    }
    if a.prefill_tokens == 0 {
        problems.push("prefill_tokens: must be positive".to_string());
    }
    if let Some(&l) = a.stem_layers.iter().find(|&&l| l >= a.layers) {
        problems.push(format!("stem_layers: {l} outside 0..{}", a.layers));
    }
    if let Err(e) = tier.validate() {
        problems.push(e.to_string());
    }
    if !problems.is_empty() {
        return Err(config_error(format!(
            "invalid settings:\n  {}",
            problems.join("\n  ")
        )));
    }
    let stem_layers: Vec<usize> = if a.stem_layers.is_empty() {
        (0..a.layers).collect()
    } else {
        a.stem_layers
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    };
    let stream = zipf_stream(a.vocab, a.zipf_s, a.tokens, a.seed)?;
    let mut cache = LfuCache::new(a.capacity);
    let reports = match a.mode {
        SimMode::Decode => vec![simulate_decode(
            &stream,
            &mut cache,
            &tier,
            &stem_layers,
            a.layers,
            a.d_ff,
        )?],
        SimMode::Prefill => {
            let mask: Vec<bool> = (0..a.layers).map(|l| stem_layers.contains(&l)).collect();
            stream
                .chunks(a.prefill_tokens)
                .map(|c| simulate_prefill(c, &mut cache, &tier, &mask, a.d_ff))
                .collect::<stem_core::Result<Vec<_>>>()?
        }
    };
    let per_layer = a.capacity / stem_layers.len();
    let predicted = zipf_head_mass(a.vocab, a.zipf_s, per_layer.min(a.vocab))?;

    let settings = json!({
        "mode": format!("{:?}", a.mode).to_lowercase(),
        "vocab": a.vocab,
        "zipf_s": a.zipf_s,
        "tokens": a.tokens,
        "capacity": a.capacity,
        "layers": a.layers,
        "stem_layers": stem_layers,
        "d_ff": a.d_ff,
        "tier": tier,
        "prefill_tokens": a.prefill_tokens,
    });
    let mut run = Run::start(root, "simulate", settings, a.seed)?;
    let mut csv = String::new();
    for (i, r) in reports.iter().enumerate() {
        let body = r.steps_csv();
        let mut lines = body.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            csv.push_str(&format!("pass,{header}\n"));
        }
        for line in lines {
            csv.push_str(&format!("{i},{line}\n"));
        }
    }
    run.write("steps.csv", csv)?;
    let hits: u64 = reports.iter().map(|r| r.hits).sum();
    let misses: u64 = reports.iter().map(|r| r.misses).sum();
    let summaries: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("report serializes");
            v.as_object_mut().expect("object").remove("steps");
            v
        })
        .collect();
    let report = json!({
        "hits": hits,
        "misses": misses,
        "hit_rate": if hits + misses == 0 { 1.0 } else { hits as f64 / (hits + misses) as f64 },
        "predicted_head_mass": predicted,
        "passes": summaries,
    });
    run.write_json("sim.json", &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    run.finish()
}

pub fn cost(root: &Path, a: CostArgs) -> anyhow::Result<PathBuf> {
    let (mut d, mut d_ff) = (a.d, a.d_ff);
    if let Some(name) = &a.qwen {
        let &(_, qd, qf) = QWEN25
            .iter()
            .find(|(n, _, _)| {
                n.eq_ignore_ascii_case(name.trim_end_matches(['b', 'B']))
                    || n.eq_ignore_ascii_case(name)
            })
            .ok_or_else(|| {
                let known: Vec<&str> = QWEN25.iter().map(|q| q.0).collect();
                config_error(format!(
                    "qwen: unknown size {name:?} (known: {})",
                    known.join(", ")
                ))
            })?;
        d = d.or(Some(qd));
        d_ff = d_ff.or(Some(qf));
    }
    let (Some(d), Some(d_ff)) = (d, d_ff) else {
        return Err(config_error("d, d_ff: give both or pass --qwen"));
    };
    let h = ArchHyperparams {
        d,
        d_ff,
        seq_len: a.seq_len,
        batch: a.batch,
        vocab: a.vocab,
    };
    let report = CostReport::compute(h, a.bytes_per_element, None)?;
    let settings = json!({ "hyper": h, "bytes_per_element": a.bytes_per_element });
    let mut run = Run::start(root, "cost", settings, 0)?;
    run.write_json("cost.json", &report)?;
    let csv = report.to_csv();
    run.write("cost.csv", &csv)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    print!("{csv}");
    println!("saving_fraction {:.4}", report.saving_fraction);
    run.finish()
}
