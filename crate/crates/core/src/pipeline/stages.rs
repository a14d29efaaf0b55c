//! Pipeline stages. Each reads its inputs from the configured directories,
//! writes its artifacts next to them, and logs metrics to
//! `<out>/metrics/<stage>.jsonl`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::{RunConfig, TaskConfig, TaskKind};
use super::corpus::{Corpus, Split, Vocab};
use super::metrics::MetricsLog;
use super::synth::generate_synthetic_corpus;
use super::tasks::{evaluate, task_labels, Retriever, TaskMetrics, TaskModel};
use crate::embedding::{train_embedding, EmbeddingConfig, EmbeddingModel, TrainingPair};
use crate::error::{Error, Result};
use crate::fusion::EncoderConfig;
use crate::gradsuite::{run_suite, CaseReport, SUITE_TOLERANCE};
use crate::retrieval::{results_to_tsv, ImageIndex, RetrievalResult};

pub const EMBEDDING_CHECKPOINT: &str = "embedding.ckpt";
pub const INDEX_CHECKPOINT: &str = "index.ckpt";
pub const RETRIEVAL_TSV: &str = "retrieval.tsv";
/// Finite-difference points per registered check.
pub const GRADCHECK_POINTS: usize = 10;

pub fn task_checkpoint(kind: TaskKind) -> String {
    format!("task_{}.ckpt", kind.as_str())
}

pub fn predictions_file(kind: TaskKind) -> String {
    format!("predictions_{}.tsv", kind.as_str())
}

pub fn evaluation_file(kind: TaskKind) -> String {
    format!("evaluation_{}.json", kind.as_str())
}

pub fn metrics_path(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.out("metrics").join(format!("{stage}.jsonl"))
}

fn metrics(cfg: &RunConfig, stage: &str) -> Result<MetricsLog> {
    MetricsLog::open(&metrics_path(cfg, stage), stage, cfg.seed)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn gen_data(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = generate_synthetic_corpus(&cfg.data, cfg.seed)?;
    corpus.save(&cfg.corpus_dir())?;
    let mut log = metrics(cfg, "gen-data")?;
    log.record(None, "texts", corpus.texts.len() as f64)?;
    log.record(None, "images", corpus.images.len() as f64)?;
    log.record(None, "pairs", corpus.pairs.len() as f64)?;
    log.record(None, "heldout_pairs", corpus.heldout_pairs.len() as f64)?;
    Ok(corpus)
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load(&cfg.corpus_dir())
}

fn image_dim(corpus: &Corpus) -> Result<usize> {
    corpus
        .image_dim()
        .ok_or_else(|| Error::Ingestion("corpus has no images".into()))
}

pub fn train_embed(cfg: &RunConfig) -> Result<EmbeddingModel> {
    let corpus = load_corpus(cfg)?;
    let vocab = Vocab::from_corpus(&corpus);
    let pairs: Vec<TrainingPair> = corpus
        .pairs
        .iter()
        .map(|(t, i)| TrainingPair {
            tokens: vocab.encode(&corpus.texts[t]),
            image: i.clone(),
        })
        .collect();
    let (model, train_log) = train_embedding(
        &pairs,
        &corpus.images,
        vocab.len(),
        &cfg.embedding,
        cfg.seed,
    )?;
    let mut log = metrics(cfg, "train-embed")?;
    for (e, loss) in train_log.epoch_losses.iter().enumerate() {
        log.record(Some(e + 1), "loss", *loss)?;
    }
    let ck = Checkpoint::new("embedding", cfg.seed, serde_json::to_value(&model.config)?)
        .with_store(&model.store)
        .with_metadata("vocab", vocab.tokens())?
        .with_metadata("image_dim", model.image.image_dim)?;
    save_checkpoint(&ck, &cfg.out(EMBEDDING_CHECKPOINT))?;
    Ok(model)
}

pub fn load_embedding(path: &Path) -> Result<(EmbeddingModel, Vocab)> {
    let ck = load_checkpoint(path)?;
    ck.expect_module("embedding")?;
    let config: EmbeddingConfig = ck.config()?;
    let vocab = Vocab::from_tokens(ck.metadata("vocab")?)?;
    let image_dim: usize = ck.metadata("image_dim")?;
    let mut rng = ChaCha8Rng::seed_from_u64(ck.manifest.seed);
    let mut model = EmbeddingModel::new(config, vocab.len(), image_dim, &mut rng)?;
    ck.restore_into(&mut model.store)?;
    Ok((model, vocab))
}

pub fn build_index(cfg: &RunConfig) -> Result<ImageIndex> {
    let corpus = load_corpus(cfg)?;
    let (model, _) = load_embedding(&cfg.out(EMBEDDING_CHECKPOINT))?;
    let embeddings = corpus
        .images
        .iter()
        .map(|(id, regions)| Ok((id.clone(), model.encode_image(regions)?.into_vec())))
        .collect::<Result<Vec<_>>>()?;
    let index = ImageIndex::build(embeddings)?;
    let mut ck = Checkpoint::new("index", cfg.seed, json!({ "dim": index.dim() }));
    ck.push("index.matrix", index.matrix().clone());
    let ck = ck.with_metadata("ids", index.ids())?;
    save_checkpoint(&ck, &cfg.out(INDEX_CHECKPOINT))?;
    metrics(cfg, "build-index")?.record(None, "images", index.len() as f64)?;
    Ok(index)
}

pub fn load_index(path: &Path) -> Result<ImageIndex> {
    let ck = load_checkpoint(path)?;
    ck.expect_module("index")?;
    let matrix = ck
        .get("index.matrix")
        .ok_or_else(|| Error::Integrity("index checkpoint lacks index.matrix".into()))?
        .clone();
    ImageIndex::from_parts(ck.metadata("ids")?, matrix)
}

/// Top-`m` images for every held-out caption; writes the TSV and recall.
pub fn retrieve(cfg: &RunConfig) -> Result<Vec<RetrievalResult>> {
    let corpus = load_corpus(cfg)?;
    let (model, vocab) = load_embedding(&cfg.out(EMBEDDING_CHECKPOINT))?;
    let index = load_index(&cfg.out(INDEX_CHECKPOINT))?;
    let m = cfg.retrieval.m;
    let mut results = Vec::with_capacity(corpus.heldout_pairs.len());
    let mut queries = Vec::with_capacity(corpus.heldout_pairs.len());
    for (text_id, image_id) in &corpus.heldout_pairs {
        let q = model.encode_text(&vocab.encode(&corpus.texts[text_id]))?;
        let mut r = index.retrieve_top_m(&q, m)?;
        r.query_id = Some(text_id.clone());
        results.push(r);
        queries.push((q, image_id.clone()));
    }
    write_text(&cfg.out(RETRIEVAL_TSV), &results_to_tsv(&results))?;
    let mut log = metrics(cfg, "retrieve")?;
    log.record(None, "queries", results.len() as f64)?;
    if !queries.is_empty() {
        for k in [1, m].into_iter().filter(|&k| k > 0) {
            log.record(
                None,
                &format!("recall@{k}"),
                index.recall_at_k(&queries, k)?,
            )?;
        }
    }
    Ok(results)
}

pub fn load_retriever(cfg: &RunConfig, corpus: &Corpus) -> Result<Retriever> {
    let (model, vocab) = load_embedding(&cfg.out(EMBEDDING_CHECKPOINT))?;
    let index = load_index(&cfg.out(INDEX_CHECKPOINT))?;
    Retriever::new(model, vocab, index, &corpus.images)
}

/// Trains the configured task with `cfg.retrieval.m` images per sentence
/// (`m = 0` is the text-only baseline).
pub fn train_task(cfg: &RunConfig) -> Result<TaskModel> {
    let corpus = load_corpus(cfg)?;
    let kind = cfg.task.task;
    let m = cfg.retrieval.m;
    let retriever = if m > 0 {
        Some(load_retriever(cfg, &corpus)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TaskModel::new(
        kind,
        Vocab::from_corpus(&corpus),
        task_labels(&corpus, kind),
        image_dim(&corpus)?,
        &cfg.encoder,
        cfg.task.max_decode_len,
        &mut rng,
    )?;
    let train = model.prepare(&corpus, Split::Train, retriever.as_ref(), m)?;
    let mut log = metrics(cfg, "train-task")?;
    model.train(&train, &cfg.task, &mut rng, |epoch, loss| {
        log.record(Some(epoch), "loss", loss)
    })?;
    let ck = Checkpoint::new(
        "task",
        cfg.seed,
        json!({ "encoder": cfg.encoder, "task": cfg.task }),
    )
    .with_store(&model.store)
    .with_metadata("vocab", model.vocab.tokens())?
    .with_metadata("labels", &model.labels)?
    .with_metadata("image_dim", image_dim(&corpus)?)?
    .with_metadata("m", m)?;
    save_checkpoint(&ck, &cfg.out(&task_checkpoint(kind)))?;
    Ok(model)
}

/// Restores a task model; returns it with the `m` it was trained with.
pub fn load_task(path: &Path) -> Result<(TaskModel, usize)> {
    let ck = load_checkpoint(path)?;
    ck.expect_module("task")?;
    let encoder: EncoderConfig = serde_json::from_value(ck.manifest.config["encoder"].clone())?;
    let task: TaskConfig = serde_json::from_value(ck.manifest.config["task"].clone())?;
    let vocab = Vocab::from_tokens(ck.metadata("vocab")?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ck.manifest.seed);
    let mut model = TaskModel::new(
        task.task,
        vocab,
        ck.metadata("labels")?,
        ck.metadata("image_dim")?,
        &encoder,
        task.max_decode_len,
        &mut rng,
    )?;
    ck.restore_into(&mut model.store)?;
    Ok((model, ck.metadata("m")?))
}

/// Scores the trained task model on the test split. `m` defaults to the
/// value the model was trained with.
pub fn evaluate_task(cfg: &RunConfig, m: Option<usize>) -> Result<TaskMetrics> {
    let corpus = load_corpus(cfg)?;
    let kind = cfg.task.task;
    let (model, trained_m) = load_task(&cfg.out(&task_checkpoint(kind)))?;
    let m = m.unwrap_or(trained_m);
    let retriever = if m > 0 {
        Some(load_retriever(cfg, &corpus)?)
    } else {
        None
    };
    let test = model.prepare(&corpus, Split::Test, retriever.as_ref(), m)?;
    let ev = evaluate(&model, &test)?;
    write_text(&cfg.out(&predictions_file(kind)), &ev.tsv)?;
    write_text(
        &cfg.out(&evaluation_file(kind)),
        &serde_json::to_string_pretty(&ev.metrics)?,
    )?;
    let mut log = metrics(cfg, "evaluate")?;
    log.record(None, "accuracy", ev.metrics.accuracy)?;
    let optional = [
        ("ambiguous_accuracy", ev.metrics.ambiguous_accuracy),
        ("span_f1", ev.metrics.span_f1),
        ("token_accuracy", ev.metrics.token_accuracy),
        ("exact_match", ev.metrics.exact_match),
    ];
    for (name, v) in optional {
        if let Some(v) = v {
            log.record(None, name, v)?;
        }
    }
    Ok(ev.metrics)
}

pub fn gradcheck(cfg: &RunConfig, points: usize) -> Result<Vec<CaseReport>> {
    let reports = run_suite(points, cfg.seed, SUITE_TOLERANCE)?;
    let mut log = metrics(cfg, "gradcheck")?;
    for r in &reports {
        log.record(None, &format!("max_rel_err/{}", r.name), r.max_rel_err)?;
    }
    Ok(reports)
}
