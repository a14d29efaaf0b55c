//! Corpus model and its on-disk TSV layout.
//!
//! A corpus directory holds:
//!
//! | file                  | line format                                        |
//! |-----------------------|----------------------------------------------------|
//! | `texts.tsv`           | `id<TAB>tok tok ...`                               |
//! | `images.txt`          | `id<TAB>R`, then `R` lines of comma-separated reals |
//! | `pairs.tsv`           | `text_id<TAB>image_id` (training pairs)            |
//! | `heldout_pairs.tsv`   | `text_id<TAB>image_id` (retrieval evaluation)      |
//! | `tagging.tsv`         | `id<TAB>split<TAB>tokens<TAB>tags`                 |
//! | `nli.tsv`             | `id<TAB>split<TAB>premise<TAB>hypothesis<TAB>label`|
//! | `translation.tsv`     | `id<TAB>split<TAB>source<TAB>target`               |
//!
//! Task files are optional on load.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TEXTS_FILE: &str = "texts.tsv";
pub const IMAGES_FILE: &str = "images.txt";
pub const PAIRS_FILE: &str = "pairs.tsv";
pub const HELDOUT_FILE: &str = "heldout_pairs.tsv";
pub const TAGGING_FILE: &str = "tagging.tsv";
pub const NLI_FILE: &str = "nli.tsv";
pub const TRANSLATION_FILE: &str = "translation.tsv";

/// Tag for tokens that carry no sense label.
pub const OUTSIDE_TAG: &str = "O";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TagExample {
    pub id: String,
    pub split: Split,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NliExample {
    pub id: String,
    pub split: Split,
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslationExample {
    pub id: String,
    pub split: Split,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub texts: BTreeMap<String, Vec<String>>,
    /// `id -> [R×d_img]` region features.
    pub images: BTreeMap<String, Tensor>,
    pub pairs: Vec<(String, String)>,
    pub heldout_pairs: Vec<(String, String)>,
    pub tagging: Vec<TagExample>,
    pub nli: Vec<NliExample>,
    pub translation: Vec<TranslationExample>,
}

impl Corpus {
    /// Checks referential integrity and non-empty token sequences.
    pub fn validate(&self) -> Result<()> {
        for (id, toks) in &self.texts {
            if toks.is_empty() {
                return Err(Error::Ingestion(format!("text {id} has no tokens")));
            }
        }
        for (t, i) in self.pairs.iter().chain(&self.heldout_pairs) {
            if !self.texts.contains_key(t) {
                return Err(Error::Referential(format!(
                    "pair references missing text id {t}"
                )));
            }
            if !self.images.contains_key(i) {
                return Err(Error::Referential(format!(
                    "pair references missing image id {i}"
                )));
            }
        }
        let mut dims = self.images.values().map(|t| t.last_dim());
        if let Some(d) = dims.next() {
            if dims.any(|x| x != d) {
                return Err(Error::Ingestion(
                    "images have differing feature sizes".into(),
                ));
            }
        }
        for ex in &self.tagging {
            if ex.tokens.is_empty() || ex.tokens.len() != ex.tags.len() {
                return Err(Error::Ingestion(format!(
                    "tagging example {} is malformed",
                    ex.id
                )));
            }
        }
        for ex in &self.nli {
            if ex.premise.is_empty() || ex.hypothesis.is_empty() {
                return Err(Error::Ingestion(format!(
                    "nli example {} has an empty side",
                    ex.id
                )));
            }
        }
        for ex in &self.translation {
            if ex.source.is_empty() || ex.target.is_empty() {
                return Err(Error::Ingestion(format!(
                    "translation example {} has an empty side",
                    ex.id
                )));
            }
        }
        Ok(())
    }

    pub fn image_dim(&self) -> Option<usize> {
        self.images.values().next().map(Tensor::last_dim)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut s = String::new();
        for (id, toks) in &self.texts {
            let _ = writeln!(s, "{id}\t{}", toks.join(" "));
        }
        write(dir, TEXTS_FILE, &s)?;

        let mut s = String::new();
        for (id, t) in &self.images {
            let _ = writeln!(s, "{id}\t{}", t.rows());
            for row in t.iter_rows() {
                let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                let _ = writeln!(s, "{}", cells.join(","));
            }
        }
        write(dir, IMAGES_FILE, &s)?;

        write(dir, PAIRS_FILE, &pairs_tsv(&self.pairs))?;
        write(dir, HELDOUT_FILE, &pairs_tsv(&self.heldout_pairs))?;

        let mut s = String::new();
        for ex in &self.tagging {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                ex.id,
                ex.split.as_str(),
                ex.tokens.join(" "),
                ex.tags.join(" ")
            );
        }
        write(dir, TAGGING_FILE, &s)?;

        let mut s = String::new();
        for ex in &self.nli {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                ex.id,
                ex.split.as_str(),
                ex.premise.join(" "),
                ex.hypothesis.join(" "),
                ex.label
            );
        }
        write(dir, NLI_FILE, &s)?;

        let mut s = String::new();
        for ex in &self.translation {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                ex.id,
                ex.split.as_str(),
                ex.source.join(" "),
                ex.target.join(" ")
            );
        }
        write(dir, TRANSLATION_FILE, &s)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut corpus = Corpus::default();

        let path = dir.join(TEXTS_FILE);
        for (line_no, line) in lines(&path)? {
            let f = fields(&path, line_no, &line, 2)?;
            let toks = tokens(f[1]);
            if toks.is_empty() {
                return Err(parse_err(&path, line_no, "empty token sequence"));
            }
            if corpus.texts.insert(f[0].to_string(), toks).is_some() {
                return Err(parse_err(
                    &path,
                    line_no,
                    format!("duplicate text id {}", f[0]),
                ));
            }
        }

        corpus.images = load_images(&dir.join(IMAGES_FILE))?;
        corpus.pairs = load_pairs(&dir.join(PAIRS_FILE))?;
        let heldout = dir.join(HELDOUT_FILE);
        if heldout.exists() {
            corpus.heldout_pairs = load_pairs(&heldout)?;
        }

        let path = dir.join(TAGGING_FILE);
        if path.exists() {
            for (line_no, line) in lines(&path)? {
                let f = fields(&path, line_no, &line, 4)?;
                let ex = TagExample {
                    id: f[0].into(),
                    split: split(&path, line_no, f[1])?,
                    tokens: tokens(f[2]),
                    tags: tokens(f[3]),
                };
                if ex.tokens.is_empty() || ex.tokens.len() != ex.tags.len() {
                    return Err(parse_err(&path, line_no, "token and tag counts differ"));
                }
                corpus.tagging.push(ex);
            }
        }

        let path = dir.join(NLI_FILE);
        if path.exists() {
            for (line_no, line) in lines(&path)? {
                let f = fields(&path, line_no, &line, 5)?;
                corpus.nli.push(NliExample {
                    id: f[0].into(),
                    split: split(&path, line_no, f[1])?,
                    premise: tokens(f[2]),
                    hypothesis: tokens(f[3]),
                    label: f[4].into(),
                });
            }
        }

        let path = dir.join(TRANSLATION_FILE);
        if path.exists() {
            for (line_no, line) in lines(&path)? {
                let f = fields(&path, line_no, &line, 4)?;
                corpus.translation.push(TranslationExample {
                    id: f[0].into(),
                    split: split(&path, line_no, f[1])?,
                    source: tokens(f[2]),
                    target: tokens(f[3]),
                });
            }
        }

        corpus.validate()?;
        Ok(corpus)
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn pairs_tsv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(t, i)| format!("{t}\t{i}\n")).collect()
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        msg: msg.into(),
    }
}

/// Non-empty lines with 1-based line numbers.
fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn fields<'a>(path: &Path, line_no: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != n {
        return Err(parse_err(
            path,
            line_no,
            format!("expected {n} tab-separated fields, found {}", f.len()),
        ));
    }
    Ok(f)
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn split(path: &Path, line_no: usize, s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| parse_err(path, line_no, format!("unknown split {s:?}")))
}

fn load_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    lines(path)?
        .into_iter()
        .map(|(line_no, line)| {
            let f = fields(path, line_no, &line, 2)?;
            Ok((f[0].to_string(), f[1].to_string()))
        })
        .collect()
}

fn load_images(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    let mut it = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut dim: Option<usize> = None;
    while let Some((line_no, header)) = it.next() {
        if header.trim().is_empty() {
            continue;
        }
        let f = fields(path, line_no, header, 2)?;
        let regions: usize = f[1]
            .parse()
            .ok()
            .filter(|&r| r > 0)
            .ok_or_else(|| parse_err(path, line_no, format!("bad region count {:?}", f[1])))?;
        let mut data = Vec::new();
        for _ in 0..regions {
            let (row_no, row) = it
                .next()
                .ok_or_else(|| parse_err(path, line_no, format!("image {} is truncated", f[0])))?;
            let values = row
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(path, row_no, format!("bad feature value: {e}")))?;
            let d = *dim.get_or_insert(values.len());
            if values.len() != d || d == 0 {
                return Err(parse_err(
                    path,
                    row_no,
                    format!("feature row has {} values, expected {d}", values.len()),
                ));
            }
            data.extend(values);
        }
        let d = dim.unwrap_or(0);
        if out
            .insert(f[0].to_string(), Tensor::new(vec![regions, d], data)?)
            .is_some()
        {
            return Err(parse_err(
                path,
                line_no,
                format!("duplicate image id {}", f[0]),
            ));
        }
    }
    Ok(out)
}

/// Token vocabulary. Ids `0..4` are reserved for `<pad> <unk> <bos> <eos>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const BOS: usize = 2;
    pub const EOS: usize = 3;
    const SPECIALS: [&'static str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let sorted: BTreeSet<String> = words.into_iter().collect();
        let tokens: Vec<String> = Self::SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(
                sorted
                    .into_iter()
                    .filter(|w| !Self::SPECIALS.contains(&w.as_str())),
            )
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Every token appearing anywhere in the corpus, sorted.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut words: Vec<String> = corpus.texts.values().flatten().cloned().collect();
        for ex in &corpus.tagging {
            words.extend(ex.tokens.iter().cloned());
        }
        for ex in &corpus.nli {
            words.extend(ex.premise.iter().chain(&ex.hypothesis).cloned());
        }
        for ex in &corpus.translation {
            words.extend(ex.source.iter().chain(&ex.target).cloned());
        }
        Self::new(words)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4] != Self::SPECIALS {
            return Err(Error::Integrity(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if index.len() != tokens.len() {
            return Err(Error::Integrity("vocabulary has duplicate tokens".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Corpus {
        let mut c = Corpus::default();
        c.texts.insert("t1".into(), vec!["a".into(), "b".into()]);
        c.images.insert(
            "i1".into(),
            Tensor::from_rows(&[[0.1, -2.5], [1e-300, 3.0]]).unwrap(),
        );
        c.pairs.push(("t1".into(), "i1".into()));
        c.tagging.push(TagExample {
            id: "g1".into(),
            split: Split::Test,
            tokens: vec!["a".into()],
            tags: vec!["O".into()],
        });
        c
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        c.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), c);
    }

    #[test]
    fn missing_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.pairs.push(("t1".into(), "ghost".into()));
        c.save(dir.path()).unwrap();
        let err = Corpus::load(dir.path()).unwrap_err();
        assert!(
            matches!(&err, Error::Referential(m) if m.contains("ghost")),
            "{err}"
        );
    }

    #[test]
    fn wrong_arity_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        fs::write(dir.path().join(IMAGES_FILE), "i1\t2\n0.1,0.2\n0.3\n").unwrap();
        match Corpus::load(dir.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_text_line_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        fs::write(dir.path().join(TEXTS_FILE), "t1\ta b\nbroken-line\n").unwrap();
        match Corpus::load(dir.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn vocab_reserves_specials() {
        let v = Vocab::from_corpus(&tiny());
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "<bos>", "<eos>", "a", "b"]);
        assert_eq!(v.encode(&["b", "zzz"]), vec![5, Vocab::UNK]);
        assert_eq!(Vocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
    }
}
