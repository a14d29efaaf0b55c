mod common;

use std::collections::BTreeMap;
use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visaware_core::pipeline::metrics::read_metrics;
use visaware_core::pipeline::stages::{
    metrics_path, predictions_file, task_checkpoint, RETRIEVAL_TSV,
};
use visaware_core::pipeline::synth::sense_tag;
use visaware_core::pipeline::{
    generate_synthetic_corpus, Corpus, RunConfig, Split, SynthConfig, TaskKind,
};

use common::{snapshot, stage, tiny_config, visaware, write_config};

fn tiny_synth() -> SynthConfig {
    serde_json::from_value(tiny_config()["data"].clone()).unwrap()
}

fn topic_of(caption: &[String]) -> usize {
    let w = caption.iter().find(|w| w.starts_with('t')).unwrap();
    w[1..w.find('w').unwrap()].parse().unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn corpus_survives_save_and_load() {
    let corpus = generate_synthetic_corpus(&tiny_synth(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    assert_eq!(Corpus::load(dir.path()).unwrap(), corpus);
}

#[test]
fn same_topic_images_are_closer() {
    let corpus = generate_synthetic_corpus(&SynthConfig::default(), 7).unwrap();
    let mut by_topic: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (tid, iid) in corpus.pairs.iter().chain(&corpus.heldout_pairs) {
        let regions = &corpus.images[iid];
        let mut mean = vec![0.0; regions.shape()[1]];
        for row in regions.iter_rows() {
            mean.iter_mut()
                .zip(row)
                .for_each(|(m, v)| *m += v / regions.rows() as f64);
        }
        by_topic
            .entry(topic_of(&corpus.texts[tid]))
            .or_default()
            .push(mean);
    }
    let topics: Vec<&Vec<Vec<f64>>> = by_topic.values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut same, mut cross) = (0.0, 0.0);
    for _ in 0..1000 {
        let t = rng.random_range(0..topics.len());
        let u = (t + rng.random_range(1..topics.len())) % topics.len();
        let a = &topics[t][rng.random_range(0..topics[t].len())];
        let b = &topics[t][rng.random_range(0..topics[t].len())];
        let c = &topics[u][rng.random_range(0..topics[u].len())];
        same += cosine(a, b) / 1000.0;
        cross += cosine(a, c) / 1000.0;
    }
    assert!(same > cross + 0.2, "same {same} cross {cross}");
}

#[test]
fn ambiguous_tokens_defeat_a_majority_baseline() {
    let cfg = SynthConfig::default();
    let corpus = generate_synthetic_corpus(&cfg, 7).unwrap();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in corpus.tagging.iter().filter(|e| e.split == Split::Train) {
        for (tok, tag) in ex.tokens.iter().zip(&ex.tags) {
            if tok.starts_with("amb") {
                *counts.entry(tag.as_str()).or_default() += 1;
            }
        }
    }
    let majority = counts.iter().max_by_key(|(_, &c)| c).unwrap().0.to_string();
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in corpus.tagging.iter().filter(|e| e.split == Split::Test) {
        for (tok, tag) in ex.tokens.iter().zip(&ex.tags) {
            if tok.starts_with("amb") {
                total += 1;
                hit += usize::from(*tag == majority);
            }
        }
    }
    let acc = hit as f64 / total as f64;
    assert!(acc <= 1.0 / cfg.topics as f64 + 0.05, "{acc}");
    assert!((0..cfg.topics).all(|t| counts.contains_key(sense_tag(t).as_str())));
}

#[test]
fn unseen_topic_words_only_appear_at_test_time() {
    let cfg = tiny_synth();
    let corpus = generate_synthetic_corpus(&cfg, 2).unwrap();
    let index = |w: &str| w[w.find('w').unwrap() + 1..].parse::<usize>().unwrap();
    for ex in &corpus.tagging {
        for tok in ex.tokens.iter().filter(|t| t.starts_with('t')) {
            assert_eq!(index(tok) >= cfg.seen_topic_words, ex.split == Split::Test);
        }
    }
}

#[test]
fn cli_runs_every_stage_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("run");
    stage(&config, &out, &["gen-data"]);
    stage(&config, &out, &["train-embed"]);
    stage(&config, &out, &["build-index"]);
    stage(&config, &out, &["retrieve", "--m", "8"]);

    let tsv = fs::read_to_string(out.join(RETRIEVAL_TSV)).unwrap();
    let mut rows: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for line in tsv.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 4);
        rows.entry(f[0].to_string())
            .or_default()
            .push(f[1].parse().unwrap());
    }
    assert_eq!(rows.len(), 20);
    assert!(rows.values().all(|r| *r == (1..=8).collect::<Vec<_>>()));

    for task in ["tagging", "nli", "translation"] {
        stage(&config, &out, &["train-task", "--task", task, "--m", "2"]);
        let json = stage(&config, &out, &["evaluate", "--task", task]);
        let metrics: serde_json::Value = serde_json::from_str(json.trim()).unwrap();
        let acc = metrics["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    let cfg = RunConfig::default();
    let mut cfg = cfg;
    cfg.paths.out_dir = out.clone();
    let recs = read_metrics(&metrics_path(&cfg, "train-task")).unwrap();
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| r.metric == "loss" && r.seed == 3));
    let recs = read_metrics(&metrics_path(&cfg, "retrieve")).unwrap();
    assert!(recs.iter().any(|r| r.metric == "recall@8"));

    let o = visaware(&["gradcheck", "--points", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("max rel err"));
}

#[test]
fn no_visual_is_the_same_as_zero_images() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("run");
    for s in ["gen-data", "train-embed", "build-index"] {
        stage(&config, &out, &[s]);
    }
    let ckpt = out.join(task_checkpoint(TaskKind::Tagging));
    let preds = out.join(predictions_file(TaskKind::Tagging));

    stage(&config, &out, &["train-task", "--no-visual"]);
    let a = fs::read(&ckpt).unwrap();
    stage(&config, &out, &["evaluate", "--no-visual"]);
    let pa = fs::read(&preds).unwrap();
    stage(&config, &out, &["train-task", "--m", "0"]);
    assert_eq!(fs::read(&ckpt).unwrap(), a);
    stage(&config, &out, &["evaluate", "--m", "0"]);
    assert_eq!(fs::read(&preds).unwrap(), pa);

    // a visual model evaluated without images takes the same path
    stage(&config, &out, &["train-task", "--m", "3"]);
    stage(&config, &out, &["evaluate", "--no-visual"]);
    let pv = fs::read(&preds).unwrap();
    stage(&config, &out, &["evaluate", "--m", "0"]);
    assert_eq!(fs::read(&preds).unwrap(), pv);
}

#[test]
fn repeated_runs_produce_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let run = |name: &str| {
        let out = dir.path().join(name);
        for s in [
            "gen-data",
            "train-embed",
            "build-index",
            "retrieve",
            "train-task",
            "evaluate",
        ] {
            stage(&config, &out, &[s]);
        }
        snapshot(&out)
    };
    let (a, b) = (run("a"), run("b"));
    assert!(a.len() >= 10, "{:?}", a.keys().collect::<Vec<_>>());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(b[k] == *v, "{} differs", k.display());
    }
}

#[test]
fn bad_invocations_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(visaware(&["no-such-stage"]).status.code(), Some(2));
    assert_eq!(visaware(&["retrieve", "--out", out]).status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "nonsense": true}"#).unwrap();
    let o = visaware(&["gen-data", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nonsense"));
}
