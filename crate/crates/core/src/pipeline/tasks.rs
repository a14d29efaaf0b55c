//! Downstream tasks on top of the visual-aware encoder: tagging, sentence
//! pair classification and translation, plus the synthetic copy task for
//! the decoder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{TaskConfig, TaskKind};
use super::corpus::{Corpus, Split, Vocab, OUTSIDE_TAG};
use super::synth::NLI_LABELS;
use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::fusion::{EncoderConfig, VisualEncoder};
use crate::heads::{argmax, greedy_decode, Decoder, PairHead, TagHead};
use crate::retrieval::ImageIndex;
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};

/// Frozen retrieval model plus the image index it was built with. Maps a
/// sentence to the pooled features of its top-`m` images.
pub struct Retriever {
    pub model: EmbeddingModel,
    pub vocab: Vocab,
    pub index: ImageIndex,
    /// Pooled region features, aligned with index positions.
    pub pooled: Vec<Tensor>,
}

impl Retriever {
    pub fn new(
        model: EmbeddingModel,
        vocab: Vocab,
        index: ImageIndex,
        images: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let pooled = index
            .ids()
            .iter()
            .map(|id| {
                let regions = images.get(id).ok_or_else(|| {
                    Error::Referential(format!("indexed image {id} missing from corpus"))
                })?;
                model.pool(regions)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            vocab,
            index,
            pooled,
        })
    }

    /// `[m×d_img]` pooled features of the top-`m` images; `None` when
    /// `m == 0`.
    pub fn images_for<S: AsRef<str>>(&self, tokens: &[S], m: usize) -> Result<Option<Tensor>> {
        if m == 0 {
            return Ok(None);
        }
        let query = self.model.encode_text(&self.vocab.encode(tokens))?;
        let hits = self.index.retrieve_top_m(&query, m)?;
        let rows: Vec<&[f64]> = hits
            .positions
            .iter()
            .map(|&p| self.pooled[p].data())
            .collect();
        Ok(Some(Tensor::from_rows(&rows)?))
    }
}

/// One encoder input: token ids and the retrieved image features.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub tokens: Vec<usize>,
    pub images: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Gold {
    Tags(Vec<usize>),
    Class(usize),
    Target(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    /// Source words, kept for prediction files.
    pub words: Vec<String>,
    pub segments: Vec<Segment>,
    pub gold: Gold,
}

#[derive(Clone, Debug)]
pub enum Head {
    Tag(TagHead),
    Pair(PairHead),
    Decoder(Decoder),
}

/// Encoder, head and the label inventories needed to read predictions.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub kind: TaskKind,
    pub store: ParamStore,
    pub encoder: VisualEncoder,
    pub head: Head,
    pub vocab: Vocab,
    /// Tag names, class names, or target vocabulary tokens.
    pub labels: Vec<String>,
}

/// Label inventory of a task, derived from the training split.
pub fn task_labels(corpus: &Corpus, kind: TaskKind) -> Vec<String> {
    match kind {
        TaskKind::Tagging => {
            let set: BTreeSet<&String> = corpus
                .tagging
                .iter()
                .filter(|e| e.split == Split::Train)
                .flat_map(|e| &e.tags)
                .collect();
            set.into_iter().cloned().collect()
        }
        TaskKind::Nli => NLI_LABELS.iter().map(|s| s.to_string()).collect(),
        TaskKind::Translation => Vocab::new(
            corpus
                .translation
                .iter()
                .flat_map(|e| e.target.iter().cloned()),
        )
        .tokens()
        .to_vec(),
    }
}

impl TaskModel {
    pub fn new(
        kind: TaskKind,
        vocab: Vocab,
        labels: Vec<String>,
        image_dim: usize,
        cfg: &EncoderConfig,
        decode_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = VisualEncoder::new(&mut store, vocab.len(), image_dim, cfg, rng)?;
        let head = match kind {
            TaskKind::Tagging => Head::Tag(TagHead::new(
                &mut store,
                "tag_head",
                cfg.dim,
                labels.len(),
                rng,
            )?),
            TaskKind::Nli => Head::Pair(PairHead::new(
                &mut store,
                "pair_head",
                cfg.dim,
                labels.len(),
                rng,
            )?),
            TaskKind::Translation => Head::Decoder(Decoder::new(
                &mut store,
                "decoder",
                cfg.dim,
                cfg.heads,
                cfg.ff_dim,
                labels.len(),
                decode_len,
                (Vocab::BOS, Vocab::EOS),
                rng,
            )?),
        };
        Ok(Self {
            kind,
            store,
            encoder,
            head,
            vocab,
            labels,
        })
    }

    fn label_id(&self, label: &str) -> Result<usize> {
        self.labels.iter().position(|l| l == label).ok_or_else(|| {
            Error::Ingestion(format!(
                "label {label} not in the {} label set",
                self.kind.as_str()
            ))
        })
    }

    /// Encodes the examples of `split`, retrieving `m` images per sentence.
    pub fn prepare(
        &self,
        corpus: &Corpus,
        split: Split,
        retriever: Option<&Retriever>,
        m: usize,
    ) -> Result<Vec<Example>> {
        let segment = |words: &[String]| -> Result<Segment> {
            let images = match retriever {
                Some(r) => r.images_for(words, m)?,
                None if m == 0 => None,
                None => return Err(Error::Config(format!("m = {m} requires a retrieval model"))),
            };
            Ok(Segment {
                tokens: self.vocab.encode(words),
                images,
            })
        };
        let mut out = Vec::new();
        match self.kind {
            TaskKind::Tagging => {
                for e in corpus.tagging.iter().filter(|e| e.split == split) {
                    let tags = e
                        .tags
                        .iter()
                        .map(|t| self.label_id(t))
                        .collect::<Result<_>>()?;
                    out.push(Example {
                        id: e.id.clone(),
                        words: e.tokens.clone(),
                        segments: vec![segment(&e.tokens)?],
                        gold: Gold::Tags(tags),
                    });
                }
            }
            TaskKind::Nli => {
                for e in corpus.nli.iter().filter(|e| e.split == split) {
                    let mut words = e.premise.clone();
                    words.push("|".into());
                    words.extend(e.hypothesis.iter().cloned());
                    out.push(Example {
                        id: e.id.clone(),
                        words,
                        segments: vec![segment(&e.premise)?, segment(&e.hypothesis)?],
                        gold: Gold::Class(self.label_id(&e.label)?),
                    });
                }
            }
            TaskKind::Translation => {
                for e in corpus.translation.iter().filter(|e| e.split == split) {
                    let target = e
                        .target
                        .iter()
                        .map(|t| {
                            self.labels
                                .iter()
                                .position(|l| l == t)
                                .unwrap_or(Vocab::UNK)
                        })
                        .collect();
                    out.push(Example {
                        id: e.id.clone(),
                        words: e.source.clone(),
                        segments: vec![segment(&e.source)?],
                        gold: Gold::Target(target),
                    });
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Ingestion(format!(
                "no {} examples in the {} split",
                self.kind.as_str(),
                split.as_str()
            )));
        }
        Ok(out)
    }

    /// Builds the loss of one example on `g`.
    pub fn loss(&self, g: &mut Graph, ex: &Example) -> Result<Var> {
        TaskModelView {
            model: self,
            store: &self.store,
        }
        .loss(g, ex)
    }

    /// Predicted tag ids, class id, or decoded target ids.
    pub fn predict(&self, ex: &Example) -> Result<Vec<usize>> {
        let fused = ex
            .segments
            .iter()
            .map(|s| {
                self.encoder
                    .encode(&self.store, &s.tokens, s.images.as_ref())
            })
            .collect::<Result<Vec<_>>>()?;
        match &self.head {
            Head::Tag(h) => {
                let p = crate::heads::tag_sequence(&fused[0], h, &self.store)?;
                Ok(p.iter_rows().map(argmax).collect())
            }
            Head::Pair(h) => {
                let p = crate::heads::classify_pair(&fused[0], &fused[1], h, &self.store)?;
                Ok(vec![argmax(&p)])
            }
            Head::Decoder(d) => Ok(greedy_decode(&fused[0], d, &self.store, d.max_len)?.tokens),
        }
    }
}

/// Mini-batch Adam over per-example losses; returns mean loss per epoch.
pub fn train_examples(
    store: &mut ParamStore,
    examples: &[Example],
    cfg: &TaskConfig,
    rng: &mut ChaCha8Rng,
    loss_fn: impl Fn(&ParamStore, &mut Graph, &Example) -> Result<Var>,
    mut on_epoch: impl FnMut(usize, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(cfg.optimizer, store)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            store.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let mut g = Graph::new();
                let loss = loss_fn(store, &mut g, &examples[i])?;
                total += g.value(loss).item();
                let scaled = g.scale(loss, scale);
                g.backward(scaled)?;
                store.accumulate_grads(&g);
            }
            adam.step(store)?;
        }
        let mean = total / examples.len() as f64;
        on_epoch(epoch, mean)?;
        losses.push(mean);
    }
    Ok(losses)
}

impl TaskModel {
    pub fn train(
        &mut self,
        examples: &[Example],
        cfg: &TaskConfig,
        rng: &mut ChaCha8Rng,
        on_epoch: impl FnMut(usize, f64) -> Result<()>,
    ) -> Result<Vec<f64>> {
        let mut store = std::mem::take(&mut self.store);
        let this = &*self;
        let result = train_examples(
            &mut store,
            examples,
            cfg,
            rng,
            |s, g, ex| {
                let view = TaskModelView {
                    model: this,
                    store: s,
                };
                view.loss(g, ex)
            },
            on_epoch,
        );
        self.store = store;
        result
    }
}

/// Borrows a model's structure with an externally owned parameter store.
struct TaskModelView<'a> {
    model: &'a TaskModel,
    store: &'a ParamStore,
}

impl TaskModelView<'_> {
    fn loss(&self, g: &mut Graph, ex: &Example) -> Result<Var> {
        let m = self.model;
        let mut fused = Vec::with_capacity(ex.segments.len());
        for s in &ex.segments {
            fused.push(
                m.encoder
                    .forward(g, self.store, &s.tokens, s.images.as_ref())?
                    .fused,
            );
        }
        match (&m.head, &ex.gold) {
            (Head::Tag(h), Gold::Tags(tags)) => {
                let gold: Vec<Option<usize>> = tags.iter().map(|&t| Some(t)).collect();
                h.loss(g, self.store, fused[0], &gold)
            }
            (Head::Pair(h), Gold::Class(c)) if fused.len() == 2 => {
                let logits = h.logits(g, self.store, fused[0], fused[1])?;
                g.cross_entropy(logits, &[Some(*c)])
            }
            (Head::Decoder(d), Gold::Target(t)) => d.loss(g, self.store, fused[0], t),
            _ => Err(Error::Contract(
                "example does not match the task head".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub examples: usize,
    /// Token accuracy for tagging and translation, example accuracy for
    /// pair classification.
    pub accuracy: f64,
    /// Tagging accuracy restricted to tokens whose gold tag is not `O`.
    pub ambiguous_accuracy: Option<f64>,
    pub span_f1: Option<f64>,
    pub token_accuracy: Option<f64>,
    pub exact_match: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: TaskMetrics,
    pub predictions: Vec<Vec<usize>>,
    /// `token<TAB>gold<TAB>pred` lines, blank line between examples.
    pub tsv: String,
}

/// Runs the model over `examples` and scores the predictions.
pub fn evaluate(model: &TaskModel, examples: &[Example]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Evaluation("no examples to evaluate".into()));
    }
    let predictions = examples
        .iter()
        .map(|ex| model.predict(ex))
        .collect::<Result<Vec<_>>>()?;
    let label = |i: usize| model.labels.get(i).map_or("<unk>", String::as_str);
    let mut tsv = String::new();
    let mut metrics = TaskMetrics {
        task: model.kind.as_str().to_string(),
        examples: examples.len(),
        ..Default::default()
    };
    match model.kind {
        TaskKind::Tagging => {
            let outside = model.labels.iter().position(|l| l == OUTSIDE_TAG);
            let (mut hit, mut total, mut amb_hit, mut amb_total) = (0usize, 0usize, 0usize, 0usize);
            let (mut gold_spans, mut pred_spans) = (Vec::new(), Vec::new());
            for (k, (ex, pred)) in examples.iter().zip(&predictions).enumerate() {
                let Gold::Tags(gold) = &ex.gold else {
                    unreachable!()
                };
                for ((w, &gt), &pt) in ex.words.iter().zip(gold).zip(pred) {
                    let _ = writeln!(tsv, "{w}\t{}\t{}", label(gt), label(pt));
                    total += 1;
                    hit += usize::from(gt == pt);
                    if Some(gt) != outside {
                        amb_total += 1;
                        amb_hit += usize::from(gt == pt);
                    }
                }
                tsv.push('\n');
                gold_spans.extend(spans(gold, outside).into_iter().map(|s| (k, s)));
                pred_spans.extend(spans(pred, outside).into_iter().map(|s| (k, s)));
            }
            metrics.accuracy = hit as f64 / total as f64;
            metrics.token_accuracy = Some(metrics.accuracy);
            metrics.ambiguous_accuracy = Some(if amb_total == 0 {
                0.0
            } else {
                amb_hit as f64 / amb_total as f64
            });
            metrics.span_f1 = Some(f1(&gold_spans, &pred_spans));
        }
        TaskKind::Nli => {
            let mut hit = 0;
            for (ex, pred) in examples.iter().zip(&predictions) {
                let Gold::Class(c) = ex.gold else {
                    unreachable!()
                };
                let _ = writeln!(tsv, "{}\t{}\t{}\n", ex.id, label(c), label(pred[0]));
                hit += usize::from(pred[0] == c);
            }
            metrics.accuracy = hit as f64 / examples.len() as f64;
        }
        TaskKind::Translation => {
            let (mut hit, mut total, mut exact) = (0usize, 0usize, 0usize);
            for (ex, pred) in examples.iter().zip(&predictions) {
                let Gold::Target(gold) = &ex.gold else {
                    unreachable!()
                };
                let (h, t) = position_matches(gold, pred);
                hit += h;
                total += t;
                exact += usize::from(gold == pred);
                for i in 0..gold.len().max(pred.len()) {
                    let g = gold.get(i).map_or("-", |&x| label(x));
                    let p = pred.get(i).map_or("-", |&x| label(x));
                    let w = ex.words.get(i).map_or("-", String::as_str);
                    let _ = writeln!(tsv, "{w}\t{g}\t{p}");
                }
                tsv.push('\n');
            }
            metrics.accuracy = hit as f64 / total.max(1) as f64;
            metrics.token_accuracy = Some(metrics.accuracy);
            metrics.exact_match = Some(exact as f64 / examples.len() as f64);
        }
    }
    Ok(Evaluation {
        metrics,
        predictions,
        tsv,
    })
}

/// `(matching positions, max(len gold, len pred))`.
pub fn position_matches(gold: &[usize], pred: &[usize]) -> (usize, usize) {
    let hits = gold.iter().zip(pred).filter(|(a, b)| a == b).count();
    (hits, gold.len().max(pred.len()))
}

/// Maximal runs of one non-outside tag as `(start, end, tag)`.
pub fn spans(tags: &[usize], outside: Option<usize>) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if Some(tags[i]) == outside {
            i += 1;
            continue;
        }
        let start = i;
        while i < tags.len() && tags[i] == tags[start] {
            i += 1;
        }
        out.push((start, i, tags[start]));
    }
    out
}

fn f1<T: Ord>(gold: &[T], pred: &[T]) -> f64 {
    let g: BTreeSet<&T> = gold.iter().collect();
    let p: BTreeSet<&T> = pred.iter().collect();
    let tp = g.intersection(&p).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let (precision, recall) = (tp / p.len() as f64, tp / g.len() as f64);
    2.0 * precision * recall / (precision + recall)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CopyTaskConfig {
    /// Number of distinct content symbols.
    pub vocab: usize,
    pub max_len: usize,
    pub encoder: EncoderConfig,
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub test_examples: usize,
}

impl Default for CopyTaskConfig {
    fn default() -> Self {
        Self {
            vocab: 20,
            max_len: 10,
            encoder: EncoderConfig {
                dim: 32,
                heads: 2,
                fusion_heads: 2,
                layers: 1,
                ff_dim: 64,
                max_len: 10,
            },
            optimizer: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            steps: 1500,
            batch_size: 16,
            test_examples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CopyTaskReport {
    pub losses: Vec<f64>,
    pub token_accuracy: f64,
    pub exact_match: f64,
}

/// Trains encoder + decoder to reproduce random symbol strings and reports
/// greedy-decoding accuracy on fresh strings.
pub fn copy_task(cfg: &CopyTaskConfig, seed: u64) -> Result<CopyTaskReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bos, eos) = (cfg.vocab, cfg.vocab + 1);
    let mut store = ParamStore::new();
    let encoder = VisualEncoder::new(&mut store, cfg.vocab, 1, &cfg.encoder, &mut rng)?;
    let e = &cfg.encoder;
    let decoder = Decoder::new(
        &mut store,
        "decoder",
        e.dim,
        e.heads,
        e.ff_dim,
        cfg.vocab + 2,
        cfg.max_len,
        (bos, eos),
        &mut rng,
    )?;
    let sample = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let n = rng.random_range(1..=cfg.max_len);
        (0..n).map(|_| rng.random_range(0..cfg.vocab)).collect()
    };
    let test: Vec<Vec<usize>> = (0..cfg.test_examples).map(|_| sample(&mut rng)).collect();

    let mut adam = Adam::new(cfg.optimizer, &store)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        store.zero_grad();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let seq = sample(&mut rng);
            let mut g = Graph::new();
            let memory = encoder.forward(&mut g, &store, &seq, None)?.fused;
            let loss = decoder.loss(&mut g, &store, memory, &seq)?;
            total += g.value(loss).item();
            let scaled = g.scale(loss, 1.0 / cfg.batch_size as f64);
            g.backward(scaled)?;
            store.accumulate_grads(&g);
        }
        adam.step(&mut store)?;
        losses.push(total / cfg.batch_size as f64);
    }

    let (mut hit, mut total, mut exact) = (0, 0, 0);
    for seq in &test {
        let fused = encoder.encode(&store, seq, None)?;
        let out = greedy_decode(&fused, &decoder, &store, cfg.max_len)?;
        let (h, t) = position_matches(seq, &out.tokens);
        hit += h;
        total += t;
        exact += usize::from(&out.tokens == seq);
    }
    Ok(CopyTaskReport {
        losses,
        token_accuracy: hit as f64 / total as f64,
        exact_match: exact as f64 / test.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_extraction() {
        let o = Some(0);
        assert_eq!(
            spans(&[0, 1, 1, 0, 2, 1], o),
            vec![(1, 3, 1), (4, 5, 2), (5, 6, 1)]
        );
        assert!(spans(&[0, 0], o).is_empty());
    }

    #[test]
    fn f1_values() {
        assert_eq!(f1(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(f1(&[1, 2], &[3]), 0.0);
        assert!((f1(&[1, 2], &[1]) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn position_scoring_penalizes_length() {
        assert_eq!(position_matches(&[1, 2, 3], &[1, 2, 3]), (3, 3));
        assert_eq!(position_matches(&[1, 2, 3], &[1, 2]), (2, 3));
        assert_eq!(position_matches(&[1], &[1, 5]), (1, 2));
    }
}
