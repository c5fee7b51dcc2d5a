use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use factcheck_core::corpus::{filter_invalid, load_dataset, save_dataset, Dataset, Format, Label, Split};
use factcheck_core::eda::{
    length_stats, lengths_file_name, similarity_file_name, similarity_stats, write_lengths_csv,
    write_similarity_csv, Pairing, TextField,
};
use factcheck_core::embedding::EmbeddingStore;
use factcheck_core::experiment::{apply_overrides, load_experiment, ExperimentConfig};
use factcheck_core::metrics::{confusion_matrix, prf1};
use factcheck_core::model::VeracityModel;
use factcheck_core::nn::{read_checkpoint, ParamSet};
use factcheck_core::pipeline::{build_examples, build_inputs, resolve_pad_len, retrieve_all, Stores};
use factcheck_core::retrieval::{write_retrieval_jsonl, RetrievalRecord};
use factcheck_core::synth::{generate, SynthConfig};
use factcheck_core::training::{self, EpochRecord, TrainOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::manifest::{self, CommandRecord};
use crate::Common;

const MODEL_FILE: &str = "model.json";
const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: Label,
    /// In `Label::ALL` order.
    pub probabilities: Vec<f64>,
}

fn resolve(c: &Common) -> Result<ExperimentConfig> {
    let base = load_experiment(&c.config)?;
    let mut cfg = apply_overrides(&base, &c.overrides)?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(c: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = match &c.run_dir {
        Some(d) => d.clone(),
        None => Path::new("runs").join(cfg.name.replace(['/', '\\'], "_")),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn setup(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    if c.threads == 0 {
        bail!("--threads must be at least 1");
    }
    // A second call in the same process keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(c.threads).build_global();
    let cfg = resolve(c)?;
    let dir = run_dir(c, &cfg)?;
    Ok((cfg, dir))
}

fn extension(format: Format) -> &'static str {
    match format {
        Format::Csv => "csv",
        Format::Jsonl => "jsonl",
    }
}

/// Load and drop scraping-error rows, reporting how many went.
fn load_clean(path: &Path, split: Split, rec: &mut CommandRecord) -> Result<Dataset> {
    rec.input(path)?;
    let ds = load_dataset(path, Format::from_path(path), split)?;
    let (ds, removed) = filter_invalid(ds);
    if !removed.is_empty() {
        eprintln!("{}: dropped {} scraping-error rows", path.display(), removed.len());
    }
    if ds.is_empty() {
        bail!("{} has no usable rows", path.display());
    }
    Ok(ds)
}

fn add_store_inputs(cfg: &ExperimentConfig, rec: &mut CommandRecord) -> Result<()> {
    let s = &cfg.stores;
    for p in [&s.clip_text, &s.clip_image, &s.sbert, &s.sbert_qa, &s.word].into_iter().flatten() {
        rec.input(p)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn ingest(c: &Common, data: &Path, split: Split) -> Result<()> {
    let (cfg, dir) = setup(c)?;
    let mut rec = CommandRecord::new(&cfg, c.threads);
    rec.input(data)?;
    let ds = load_dataset(data, Format::from_path(data), split)?;
    let total = ds.len();
    let (ds, removed) = filter_invalid(ds);
    let out = dir.join(format!("{split}.{}", extension(c.format)));
    save_dataset(&ds, &out, c.format)?;
    rec.output(&out);
    rec.notes.insert("removed".into(), serde_json::json!(removed));
    manifest::record(&dir, &format!("ingest_{split}"), rec)?;
    println!("kept {} of {total} rows, wrote {}", ds.len(), out.display());
    Ok(())
}

pub fn retrieve(c: &Common, data: &Path, split: Split) -> Result<()> {
    let (cfg, dir) = setup(c)?;
    let mut rec = CommandRecord::new(&cfg, c.threads);
    let ds = load_clean(data, split, &mut rec)?;
    add_store_inputs(&cfg, &mut rec)?;
    let stores = Stores::open(&cfg.stores, &cfg.model)?;
    let snippets = retrieve_all(&ds, &cfg.retrieval, &stores)?;
    let records: Vec<RetrievalRecord> = ds.iter().zip(&snippets).map(|(p, s)| RetrievalRecord::new(&p.id, s)).collect();
    let out = dir.join(format!("retrieval_{split}.jsonl"));
    let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    write_retrieval_jsonl(BufWriter::new(file), &records)?;
    rec.output(&out);
    manifest::record(&dir, &format!("retrieve_{split}"), rec)?;
    println!("wrote {} snippets to {}", records.len(), out.display());
    Ok(())
}

fn report_epoch(e: &EpochRecord) {
    eprintln!(
        "epoch {:3}  train loss {:.4}  val loss {:.4}  val acc {:.3}  val wF1 {:.3}{}",
        e.epoch,
        e.train_loss,
        e.val_loss,
        e.val_accuracy,
        e.val_weighted_f1,
        if e.improved { "  *" } else { "" }
    );
}

pub fn train(c: &Common, train_path: &Path, val_path: &Path) -> Result<()> {
    let (cfg, dir) = setup(c)?;
    let mut rec = CommandRecord::new(&cfg, c.threads);
    let train_ds = load_clean(train_path, Split::Train, &mut rec)?;
    let val_ds = load_clean(val_path, Split::Val, &mut rec)?;
    add_store_inputs(&cfg, &mut rec)?;
    let stores = Stores::open(&cfg.stores, &cfg.model)?;
    let train_snippets = retrieve_all(&train_ds, &cfg.retrieval, &stores)?;
    let val_snippets = retrieve_all(&val_ds, &cfg.retrieval, &stores)?;

    let mut resolved = cfg.clone();
    resolved.model = resolve_pad_len(&cfg.model, &train_ds, &train_snippets);
    let train_ex = build_examples(&train_ds, &train_snippets, &stores, &resolved.model)?;
    let val_ex = build_examples(&val_ds, &val_snippets, &stores, &resolved.model)?;
    let (model, init) = VeracityModel::new(resolved.model.clone(), resolved.train.seed)?;
    eprintln!(
        "{}: {} train / {} val pairs, pad_len {}, {} parameters",
        resolved.name,
        train_ex.len(),
        val_ex.len(),
        resolved.model.pad_len,
        init.numel()
    );
    let model_path = dir.join(MODEL_FILE);
    write_json(&model_path, &resolved)?;
    rec.config = resolved.clone();

    let ckpt_dir = dir.join("checkpoints");
    if ckpt_dir.exists() {
        fs::remove_dir_all(&ckpt_dir).with_context(|| format!("clearing {}", ckpt_dir.display()))?;
    }
    let opts = TrainOptions {
        threads: c.threads,
        checkpoint_dir: Some(ckpt_dir.clone()),
        progress: Some(report_epoch),
        ..TrainOptions::default()
    };
    let outcome = training::train(&model, init, &train_ex, &val_ex, &resolved.train, &opts)?;
    let h = &outcome.history;
    let history_path = dir.join("history.json");
    write_json(&history_path, h)?;
    for p in [&model_path, &history_path, &ckpt_dir] {
        rec.output(p);
    }
    manifest::record(&dir, "train", rec)?;
    println!(
        "best epoch {} (val loss {:.4}), stopped at {}{}; artifacts in {}",
        h.best_epoch,
        h.best_val_loss,
        h.stopped_epoch,
        if h.early_stopped { " (early)" } else { "" },
        dir.display()
    );
    Ok(())
}

/// Model and parameters saved by `train` in `dir`. Store overrides from
/// the command line still apply.
fn load_trained(c: &Common, dir: &Path, checkpoint: Option<&Path>) -> Result<(ExperimentConfig, VeracityModel, ParamSet)> {
    let model_path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&model_path)
        .with_context(|| format!("reading {} (run `train` first)", model_path.display()))?;
    let saved: ExperimentConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", model_path.display()))?;
    let cfg = apply_overrides(&saved, &c.overrides)?;
    let (model, mut ps) = VeracityModel::new(cfg.model.clone(), cfg.train.seed)?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join("checkpoints").join("best.ckpt"));
    let file = File::open(&ckpt).with_context(|| format!("opening {}", ckpt.display()))?;
    ps.load_records(read_checkpoint(BufReader::new(file))?)
        .with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((cfg, model, ps))
}

pub fn predict(c: &Common, data: &Path, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let (base, dir) = setup(c)?;
    let (cfg, model, ps) = load_trained(c, &dir, checkpoint)?;
    let mut rec = CommandRecord::new(&cfg, c.threads);
    rec.seed = base.train.seed;
    let ds = load_clean(data, Split::Test, &mut rec)?;
    add_store_inputs(&cfg, &mut rec)?;
    let stores = Stores::open(&cfg.stores, &cfg.model)?;
    let snippets = retrieve_all(&ds, &cfg.retrieval, &stores)?;
    let inputs = build_inputs(&ds, &snippets, &stores, &cfg.model)?;
    let predictions = ds
        .pairs
        .par_iter()
        .zip(&inputs)
        .map(|(p, x)| {
            let probs = model.probabilities(&ps, x)?;
            let label = Label::from_index(factcheck_core::model::argmax(probs.view())).expect("five classes");
            Ok(Prediction {
                id: p.id.clone(),
                label,
                probabilities: probs.to_vec(),
            })
        })
        .collect::<factcheck_core::Result<Vec<_>>>()?;
    let out = dir.join(PREDICTIONS_FILE);
    let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    for p in &predictions {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    rec.output(&out);
    manifest::record(&dir, "predict", rec)?;
    println!("wrote {} predictions to {}", predictions.len(), out.display());
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn eval(c: &Common, data: &Path, predictions: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let pred_path = match predictions {
        Some(p) => p.to_path_buf(),
        None => predict(c, data, checkpoint)?,
    };
    let (cfg, dir) = setup(c)?;
    let mut rec = CommandRecord::new(&cfg, c.threads);
    let ds = load_clean(data, Split::Test, &mut rec)?;
    rec.input(&pred_path)?;
    let by_id: HashMap<String, Label> = read_predictions(&pred_path)?.into_iter().map(|p| (p.id, p.label)).collect();
    let mut preds = Vec::with_capacity(ds.len());
    let mut golds = Vec::with_capacity(ds.len());
    for p in ds.iter() {
        let gold = p.label.with_context(|| format!("pair {} has no gold label", p.id))?;
        let pred = by_id
            .get(&p.id)
            .with_context(|| format!("no prediction for pair {}", p.id))?;
        preds.push(*pred);
        golds.push(gold);
    }
    let metrics = prf1(&confusion_matrix(&preds, &golds)?);
    let json_path = dir.join("metrics.json");
    write_json(&json_path, &metrics.to_json())?;
    let table = metrics.to_table();
    let txt_path = dir.join("metrics.txt");
    fs::write(&txt_path, &table).with_context(|| format!("writing {}", txt_path.display()))?;
    rec.output(&json_path);
    rec.output(&txt_path);
    manifest::record(&dir, "eval", rec)?;
    print!("{table}");
    Ok(())
}

pub fn eda(c: &Common, data: &Path, bins: usize) -> Result<()> {
    let (cfg, dir) = setup(c)?;
    let mut rec = CommandRecord::new(&cfg, c.threads);
    let ds = load_clean(data, Split::Train, &mut rec)?;
    add_store_inputs(&cfg, &mut rec)?;
    let stores = Stores::open(&cfg.stores, &cfg.model)?;
    let eda_dir = dir.join("eda");
    fs::create_dir_all(&eda_dir)?;
    for field in TextField::ALL {
        let path = eda_dir.join(lengths_file_name(field));
        write_lengths_csv(&length_stats(&ds, field)?, File::create(&path)?)?;
        rec.output(&path);
    }
    for pairing in Pairing::ALL {
        let report = similarity_stats(&ds, pairing, &stores.clip_text, &stores.clip_image, bins)?;
        let path = eda_dir.join(similarity_file_name(pairing));
        write_similarity_csv(&report, File::create(&path)?)?;
        rec.output(&path);
    }
    let n = rec.outputs.len();
    manifest::record(&dir, "eda", rec)?;
    println!("wrote {n} tables to {}", eda_dir.display());
    Ok(())
}

pub fn synth(c: &Common, pairs: usize, val_pairs: usize, invalid: usize) -> Result<()> {
    let (cfg, dir) = setup(c)?;
    let mut rec = CommandRecord::new(&cfg, c.threads);
    let sc = SynthConfig {
        n_pairs: pairs,
        seed: cfg.train.seed,
        image_dim: cfg.model.d_clip,
        invalid_rows: invalid,
        ..SynthConfig::default()
    };
    let train = generate(&sc, Split::Train)?;
    let val = generate(&SynthConfig { n_pairs: val_pairs, invalid_rows: 0, ..sc }, Split::Val)?;
    let mut images = EmbeddingStore::new(cfg.model.d_clip)?;
    for (k, v) in train.images.iter().chain(val.images.iter()) {
        images.insert(k, v.clone())?;
    }
    let ext = extension(c.format);
    for (ds, name) in [(&train.dataset, "train"), (&val.dataset, "val")] {
        let path = dir.join(format!("{name}.{ext}"));
        save_dataset(ds, &path, c.format)?;
        rec.output(&path);
    }
    let store_path = dir.join("images.emb");
    images.save(&store_path)?;
    rec.output(&store_path);
    rec.notes.insert("planted_invalid".into(), serde_json::json!(train.planted_invalid));
    manifest::record(&dir, "synth", rec)?;
    println!(
        "wrote {} train and {} val pairs plus {} to {}",
        train.dataset.len(),
        val.dataset.len(),
        store_path.display(),
        dir.display()
    );
    Ok(())
}
