//! Exact cosine retrieval over a frozen matrix of unit-norm image
//! embeddings.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use crate::embedding::SharedEmbedding;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Number of images forwarded per sentence unless configured otherwise.
pub const DEFAULT_TOP_M: usize = 8;

/// Immutable index of image embeddings. Built once, then only queried.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageIndex {
    ids: Vec<String>,
    matrix: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub query_id: Option<String>,
    /// `(image id, cosine score)`, best first; ties by index position.
    pub entries: Vec<(String, f64)>,
    /// Index positions of `entries`.
    pub positions: Vec<usize>,
}

impl ImageIndex {
    /// Normalizes every vector and freezes the index.
    pub fn build<S, V>(embeddings: impl IntoIterator<Item = (S, V)>) -> Result<Self>
    where
        S: Into<String>,
        V: AsRef<[f64]>,
    {
        let mut ids = Vec::new();
        let mut seen = HashSet::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (id, v) in embeddings {
            let id = id.into();
            let v = v.as_ref();
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(Error::Ingestion(format!(
                    "image {id} has dimension {}, expected {}",
                    v.len(),
                    dim.unwrap()
                )));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Ingestion(format!("duplicate image id {id}")));
            }
            let unit = SharedEmbedding::normalized(v.to_vec())
                .map_err(|e| Error::Normalization(format!("image {id}: {e}")))?;
            data.extend_from_slice(unit.as_slice());
            ids.push(id);
        }
        let dim = dim.ok_or(Error::EmptyInput("image index"))?;
        if dim == 0 {
            return Err(Error::Ingestion("zero-dimensional embeddings".into()));
        }
        let matrix = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(Self { ids, matrix })
    }

    /// Reassembles an index from stored unit rows (checkpoint load).
    pub fn from_parts(ids: Vec<String>, matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 || matrix.rows() != ids.len() {
            return Err(Error::Integrity(format!(
                "index matrix {:?} does not match {} ids",
                matrix.shape(),
                ids.len()
            )));
        }
        let unique: HashSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::Integrity("duplicate image id in index".into()));
        }
        for (i, row) in matrix.iter_rows().enumerate() {
            let n = crate::tensor::l2_norm(row);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Integrity(format!("index row {i} has norm {n}")));
            }
        }
        Ok(Self { ids, matrix })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.last_dim()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Cosine scores of every indexed image against a unit query.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::Contract(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dim()
            )));
        }
        Ok(self.matrix.iter_rows().map(|r| dot(r, query)).collect())
    }

    /// Exact top-`m` by cosine similarity. Asking for more than the index
    /// holds returns every image.
    pub fn retrieve_top_m(&self, query: &SharedEmbedding, m: usize) -> Result<RetrievalResult> {
        let scores = self.scores(query.as_slice())?;
        if m > self.len() {
            log::warn!(
                "requested {m} images but the index holds {}; returning all",
                self.len()
            );
        }
        let positions = top_m_positions(&scores, m);
        Ok(RetrievalResult {
            query_id: None,
            entries: positions
                .iter()
                .map(|&p| (self.ids[p].clone(), scores[p]))
                .collect(),
            positions,
        })
    }

    /// Fraction of `(query, gold id)` pairs whose gold image is in the
    /// top `k`.
    pub fn recall_at_k(&self, pairs: &[(SharedEmbedding, String)], k: usize) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Evaluation("no evaluation pairs".into()));
        }
        let mut hits = 0usize;
        for (query, gold) in pairs {
            let gold_pos = self
                .position(gold)
                .ok_or_else(|| Error::Evaluation(format!("gold image {gold} not in index")))?;
            if self.retrieve_top_m(query, k)?.positions.contains(&gold_pos) {
                hits += 1;
            }
        }
        Ok(hits as f64 / pairs.len() as f64)
    }
}

/// Score-descending, index-ascending order.
fn rank_order(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

fn top_m_positions(scores: &[f64], m: usize) -> Vec<usize> {
    let m = m.min(scores.len());
    if m == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = rank_order(scores);
    if m < idx.len() {
        idx.select_nth_unstable_by(m - 1, &cmp);
        idx.truncate(m);
    }
    idx.sort_unstable_by(&cmp);
    idx
}

/// Writes `query_id<TAB>rank<TAB>image_id<TAB>score` rows, rank from 1.
pub fn results_to_tsv(results: &[RetrievalResult]) -> String {
    let mut out = String::new();
    for (qi, r) in results.iter().enumerate() {
        let qid = r.query_id.clone().unwrap_or_else(|| qi.to_string());
        for (rank, (id, score)) in r.entries.iter().enumerate() {
            let _ = writeln!(out, "{qid}\t{}\t{id}\t{score}", rank + 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> SharedEmbedding {
        SharedEmbedding::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn build_normalizes() {
        let idx = ImageIndex::build([("a", vec![3.0, 4.0])]).unwrap();
        assert_eq!(idx.matrix().data(), &[0.6, 0.8]);
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            ImageIndex::build([("a", vec![1.0]), ("a", vec![2.0])]),
            Err(Error::Ingestion(_))
        ));
        assert!(matches!(
            ImageIndex::build([("a", vec![0.0, 0.0])]),
            Err(Error::Normalization(_))
        ));
        assert!(ImageIndex::build(Vec::<(String, Vec<f64>)>::new()).is_err());
        assert!(ImageIndex::build([("a", vec![1.0]), ("b", vec![1.0, 2.0])]).is_err());
    }

    #[test]
    fn self_and_orthogonal_queries() {
        let idx = ImageIndex::build([("a", vec![1.0, 0.0]), ("b", vec![0.6, 0.8])]).unwrap();
        let r = idx.retrieve_top_m(&unit(&[0.6, 0.8]), 8).unwrap();
        assert_eq!(r.entries[0].0, "b");
        assert!((r.entries[0].1 - 1.0).abs() < 1e-9);
        assert_eq!(r.entries.len(), 2);

        let solo = ImageIndex::build([("a", vec![1.0, 0.0])]).unwrap();
        let r = solo.retrieve_top_m(&unit(&[0.0, 1.0]), 1).unwrap();
        assert!(r.entries[0].1.abs() < 1e-9);
    }

    #[test]
    fn ties_break_by_position() {
        let idx = ImageIndex::build([
            ("c", vec![1.0, 0.0]),
            ("a", vec![0.0, 1.0]),
            ("b", vec![1.0, 0.0]),
        ])
        .unwrap();
        let r = idx.retrieve_top_m(&unit(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(r.positions, vec![0, 2]);
    }

    #[test]
    fn dimension_mismatch() {
        let idx = ImageIndex::build([("a", vec![1.0, 0.0])]).unwrap();
        assert!(matches!(
            idx.retrieve_top_m(&unit(&[1.0, 0.0, 0.0]), 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn recall_examples() {
        let idx = ImageIndex::build([("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]).unwrap();
        let exact = vec![
            (unit(&[1.0, 0.0]), "a".to_string()),
            (unit(&[0.0, 1.0]), "b".to_string()),
        ];
        assert_eq!(idx.recall_at_k(&exact, 1).unwrap(), 1.0);
        // each query sits on the other image's axis
        let never = vec![
            (unit(&[0.0, 1.0]), "a".to_string()),
            (unit(&[1.0, 0.0]), "b".to_string()),
        ];
        assert_eq!(idx.recall_at_k(&never, 1).unwrap(), 0.0);
        let missing = vec![(unit(&[1.0, 0.0]), "zz".to_string())];
        assert!(matches!(
            idx.recall_at_k(&missing, 1),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn tsv_rows() {
        let idx = ImageIndex::build([("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]).unwrap();
        let mut r = idx.retrieve_top_m(&unit(&[1.0, 0.0]), 2).unwrap();
        r.query_id = Some("q1".into());
        assert_eq!(results_to_tsv(&[r]), "q1\t1\ta\t1\nq1\t2\tb\t0\n");
    }
}
