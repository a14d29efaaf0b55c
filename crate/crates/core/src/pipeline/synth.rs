//! Seeded synthetic corpus with latent topics.
//!
//! Every topic owns a block of words and a Gaussian centre in image-feature
//! space. Images add a few shared "attribute" directions on top of their
//! topic centre, and captions name the topic and attributes. Ambiguous words
//! are shared by all topics; in the tagging task their gold tag is the
//! sentence topic, which the sentence itself reveals only through topic
//! words. Task training sentences draw topic words from the first
//! `seen_topic_words` of each topic; test sentences draw from the rest, so
//! a text-only model has never seen the words that disclose the topic while
//! the retrieval model has (every topic word appears in captions).

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, NliExample, Split, TagExample, TranslationExample, OUTSIDE_TAG};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub topics: usize,
    pub topic_words: usize,
    pub seen_topic_words: usize,
    pub ambiguous_words: usize,
    pub attributes: usize,
    pub attributes_per_image: usize,
    /// Region count `R` per image.
    pub regions: usize,
    /// Region feature size `d_img`.
    pub image_dim: usize,
    pub center_scale: f64,
    pub attribute_scale: f64,
    pub noise: f64,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub tag_train: usize,
    pub tag_test: usize,
    pub nli_train: usize,
    pub nli_test: usize,
    pub translation_train: usize,
    pub translation_test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            topics: 10,
            topic_words: 12,
            seen_topic_words: 6,
            ambiguous_words: 6,
            attributes: 12,
            attributes_per_image: 3,
            regions: 16,
            image_dim: 128,
            center_scale: 1.0,
            attribute_scale: 2.0,
            noise: 0.5,
            train_pairs: 2000,
            heldout_pairs: 500,
            tag_train: 800,
            tag_test: 300,
            nli_train: 600,
            nli_test: 300,
            translation_train: 600,
            translation_test: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("topics", self.topics),
            ("topic_words", self.topic_words),
            ("seen_topic_words", self.seen_topic_words),
            ("ambiguous_words", self.ambiguous_words),
            ("regions", self.regions),
            ("image_dim", self.image_dim),
            ("train_pairs", self.train_pairs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("data.{name} must be positive")));
        }
        if self.topics < 2 {
            return Err(Error::Config("data.topics must be at least 2".into()));
        }
        if self.seen_topic_words >= self.topic_words {
            return Err(Error::Config(
                "data.seen_topic_words must leave unseen words".into(),
            ));
        }
        if self.attributes_per_image > self.attributes {
            return Err(Error::Config(
                "data.attributes_per_image exceeds attributes".into(),
            ));
        }
        if self.topic_words - self.seen_topic_words < 5 || self.seen_topic_words < 5 {
            return Err(Error::Config(
                "each topic-word split needs at least 5 words".into(),
            ));
        }
        if self.ambiguous_words < 3 {
            return Err(Error::Config(
                "data.ambiguous_words must be at least 3".into(),
            ));
        }
        Ok(())
    }
}

pub fn topic_word(topic: usize, j: usize) -> String {
    format!("t{topic}w{j}")
}

pub fn ambiguous_word(j: usize) -> String {
    format!("amb{j}")
}

pub fn attribute_word(j: usize) -> String {
    format!("attr{j}")
}

pub fn sense_tag(topic: usize) -> String {
    format!("S{topic}")
}

/// Target-side spelling of a source word in the translation task.
pub fn translate_word(w: &str) -> String {
    format!("x_{w}")
}

pub const NLI_LABELS: [&str; 3] = ["entailment", "neutral", "contradiction"];

struct World {
    centers: Vec<Vec<f64>>,
    attribute_dirs: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let t = Tensor::randn(&[n], 1.0, rng);
    t.data().iter().map(|v| v * scale).collect()
}

pub fn generate_synthetic_corpus(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World {
        centers: (0..cfg.topics)
            .map(|_| gaussian_vec(&mut rng, cfg.image_dim, cfg.center_scale))
            .collect(),
        attribute_dirs: (0..cfg.attributes)
            .map(|_| gaussian_vec(&mut rng, cfg.image_dim, 1.0))
            .collect(),
    };

    let mut corpus = Corpus::default();
    let total = cfg.train_pairs + cfg.heldout_pairs;
    for n in 0..total {
        let topic = rng.random_range(0..cfg.topics);
        let attrs = sample_distinct(&mut rng, cfg.attributes, cfg.attributes_per_image);
        let image = make_image(&mut rng, cfg, &world, topic, &attrs);

        let mut caption: Vec<String> = sample_distinct(&mut rng, cfg.topic_words, 3)
            .into_iter()
            .map(|j| topic_word(topic, j))
            .collect();
        caption.extend(attrs.iter().map(|&a| attribute_word(a)));
        caption.extend(
            sample_distinct(&mut rng, cfg.ambiguous_words, 2)
                .into_iter()
                .map(ambiguous_word),
        );
        caption.shuffle(&mut rng);

        let (tid, iid) = (format!("txt{n:05}"), format!("img{n:05}"));
        corpus.texts.insert(tid.clone(), caption);
        corpus.images.insert(iid.clone(), image);
        if n < cfg.train_pairs {
            corpus.pairs.push((tid, iid));
        } else {
            corpus.heldout_pairs.push((tid, iid));
        }
    }

    let splits = |train: usize, test: usize| {
        std::iter::repeat_n(Split::Train, train).chain(std::iter::repeat_n(Split::Test, test))
    };

    for (n, split) in splits(cfg.tag_train, cfg.tag_test).enumerate() {
        let topic = rng.random_range(0..cfg.topics);
        let mut toks: Vec<(String, String)> = topic_words_for(&mut rng, cfg, topic, split, 2)
            .into_iter()
            .map(|w| (w, OUTSIDE_TAG.to_string()))
            .collect();
        for _ in 0..3 {
            let j = rng.random_range(0..cfg.ambiguous_words);
            toks.push((ambiguous_word(j), sense_tag(topic)));
        }
        toks.shuffle(&mut rng);
        let (tokens, tags) = toks.into_iter().unzip();
        corpus.tagging.push(TagExample {
            id: format!("tag{n:05}"),
            split,
            tokens,
            tags,
        });
    }

    for (n, split) in splits(cfg.nli_train, cfg.nli_test).enumerate() {
        let topic = rng.random_range(0..cfg.topics);
        let label = rng.random_range(0..NLI_LABELS.len());
        let mut premise = topic_words_for(&mut rng, cfg, topic, split, 3);
        let used = premise.clone();
        premise.push(ambiguous_word(rng.random_range(0..cfg.ambiguous_words)));
        premise.shuffle(&mut rng);
        let mut hypothesis = match NLI_LABELS[label] {
            "entailment" => {
                // same topic, no word overlap with the premise
                let (lo, hi) = split_range(cfg, split);
                let pool: Vec<String> = (lo..hi)
                    .map(|j| topic_word(topic, j))
                    .filter(|w| !used.contains(w))
                    .collect();
                pool.choose_multiple(&mut rng, 2).cloned().collect()
            }
            "contradiction" => {
                let other = (topic + rng.random_range(1..cfg.topics)) % cfg.topics;
                topic_words_for(&mut rng, cfg, other, split, 2)
            }
            _ => sample_distinct(&mut rng, cfg.ambiguous_words, 2)
                .into_iter()
                .map(ambiguous_word)
                .collect(),
        };
        hypothesis.push(ambiguous_word(rng.random_range(0..cfg.ambiguous_words)));
        hypothesis.shuffle(&mut rng);
        corpus.nli.push(NliExample {
            id: format!("nli{n:05}"),
            split,
            premise,
            hypothesis,
            label: NLI_LABELS[label].to_string(),
        });
    }

    for (n, split) in splits(cfg.translation_train, cfg.translation_test).enumerate() {
        let topic = rng.random_range(0..cfg.topics);
        let mut source: Vec<String> = sample_distinct(&mut rng, cfg.topic_words, 2)
            .into_iter()
            .map(|j| topic_word(topic, j))
            .collect();
        source.push(ambiguous_word(rng.random_range(0..cfg.ambiguous_words)));
        if cfg.attributes > 0 {
            source.push(attribute_word(rng.random_range(0..cfg.attributes)));
        }
        source.shuffle(&mut rng);
        let target = source.iter().map(|w| translate_word(w)).collect();
        corpus.translation.push(TranslationExample {
            id: format!("tr{n:05}"),
            split,
            source,
            target,
        });
    }

    corpus.validate()?;
    Ok(corpus)
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let all: Vec<usize> = (0..n).collect();
    all.choose_multiple(rng, k).copied().collect()
}

/// Topic-word indices available to a split.
fn split_range(cfg: &SynthConfig, split: Split) -> (usize, usize) {
    match split {
        Split::Train => (0, cfg.seen_topic_words),
        Split::Test => (cfg.seen_topic_words, cfg.topic_words),
    }
}

/// `k` distinct topic words from the split's half of the topic vocabulary.
fn topic_words_for(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    topic: usize,
    split: Split,
    k: usize,
) -> Vec<String> {
    let (lo, hi) = split_range(cfg, split);
    sample_distinct(rng, hi - lo, k)
        .into_iter()
        .map(|j| topic_word(topic, lo + j))
        .collect()
}

fn make_image(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    world: &World,
    topic: usize,
    attrs: &[usize],
) -> Tensor {
    let d = cfg.image_dim;
    let mut data = Vec::with_capacity(cfg.regions * d);
    for _ in 0..cfg.regions {
        let noise = gaussian_vec(rng, d, cfg.noise);
        data.extend(world.centers[topic].iter().zip(noise).map(|(c, n)| c + n));
    }
    let per_attr = 3.min(cfg.regions);
    for &a in attrs {
        for r in sample_distinct(rng, cfg.regions, per_attr) {
            for (x, v) in data[r * d..(r + 1) * d]
                .iter_mut()
                .zip(&world.attribute_dirs[a])
            {
                *x += cfg.attribute_scale * v;
            }
        }
    }
    Tensor::from_parts(vec![cfg.regions, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            train_pairs: 40,
            heldout_pairs: 10,
            tag_train: 20,
            tag_test: 10,
            nli_train: 10,
            nli_test: 5,
            translation_train: 10,
            translation_test: 5,
            image_dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic_corpus(&small(), 5).unwrap();
        let b = generate_synthetic_corpus(&small(), 5).unwrap();
        let c = generate_synthetic_corpus(&small(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn test_split_uses_unseen_topic_words() {
        let cfg = small();
        let corpus = generate_synthetic_corpus(&cfg, 1).unwrap();
        for ex in &corpus.tagging {
            for (tok, tag) in ex.tokens.iter().zip(&ex.tags) {
                if tag == OUTSIDE_TAG {
                    let j: usize = tok.split('w').nth(1).unwrap().parse().unwrap();
                    assert_eq!(j < cfg.seen_topic_words, ex.split == Split::Train);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SynthConfig {
            seen_topic_words: 12,
            ..small()
        };
        assert!(generate_synthetic_corpus(&cfg, 0).is_err());
        let cfg = SynthConfig {
            topic_words: 8,
            seen_topic_words: 4,
            ..small()
        };
        assert!(matches!(
            generate_synthetic_corpus(&cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn entailed_hypotheses_share_no_topic_word() {
        let cfg = SynthConfig {
            topic_words: 10,
            seen_topic_words: 5,
            nli_train: 200,
            ..small()
        };
        let corpus = generate_synthetic_corpus(&cfg, 3).unwrap();
        for ex in corpus.nli.iter().filter(|e| e.label == "entailment") {
            let topical: Vec<_> = ex
                .hypothesis
                .iter()
                .filter(|w| w.starts_with('t'))
                .collect();
            assert_eq!(topical.len(), 2);
            assert!(topical.iter().all(|w| !ex.premise.contains(w)));
        }
    }
}
