//! Python bindings: retrieval index, pooling and loss primitives, saved
//! embedding models and the command-line stages.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use visaware_core::embedding::{self, SharedEmbedding, WeldonConfig};
use visaware_core::gradsuite::{run_suite, SUITE_TOLERANCE};
use visaware_core::pipeline::cli::run_command;
use visaware_core::pipeline::stages::load_embedding;
use visaware_core::pipeline::{generate_synthetic_corpus, RunConfig, Vocab};
use visaware_core::retrieval;
use visaware_core::Tensor;

create_exception!(visaware, VisawareError, PyException);

fn err(e: visaware_core::Error) -> PyErr {
    VisawareError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

/// max(0, alpha - x·y + x·z) for unit vectors.
#[pyfunction]
#[pyo3(signature = (x, y, z, alpha = 0.2))]
fn triplet_loss(x: Vec<f64>, y: Vec<f64>, z: Vec<f64>, alpha: f64) -> PyResult<f64> {
    embedding::triplet_loss(&x, &y, &z, alpha).map_err(err)
}

/// Per-channel top/bottom pooling of an R×d region matrix.
#[pyfunction]
#[pyo3(signature = (regions, k_plus = 3, k_minus = 3, beta = 1.0))]
fn weldon_pool(
    regions: Vec<Vec<f64>>,
    k_plus: usize,
    k_minus: usize,
    beta: f64,
) -> PyResult<Vec<f64>> {
    let cfg = WeldonConfig {
        k_plus,
        k_minus,
        beta,
    };
    Ok(embedding::weldon_pool(&matrix(regions)?, &cfg)
        .map_err(err)?
        .into_data())
}

/// Exact cosine index over image embeddings.
#[pyclass(frozen)]
struct ImageIndex {
    inner: retrieval::ImageIndex,
}

#[pymethods]
impl ImageIndex {
    #[new]
    fn new(ids: Vec<String>, vectors: Vec<Vec<f64>>) -> PyResult<Self> {
        if ids.len() != vectors.len() {
            return Err(VisawareError::new_err(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        let inner = retrieval::ImageIndex::build(ids.into_iter().zip(vectors)).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `[(id, score)]`, best first.
    fn retrieve(&self, query: Vec<f64>, m: usize) -> PyResult<Vec<(String, f64)>> {
        let q = SharedEmbedding::normalized(query).map_err(err)?;
        Ok(self.inner.retrieve_top_m(&q, m).map_err(err)?.entries)
    }

    fn scores(&self, query: Vec<f64>) -> PyResult<Vec<f64>> {
        let q = SharedEmbedding::normalized(query).map_err(err)?;
        self.inner.scores(q.as_slice()).map_err(err)
    }
}

/// A trained text/image embedding loaded from a checkpoint.
#[pyclass(frozen)]
struct EmbeddingModel {
    model: embedding::EmbeddingModel,
    vocab: Vocab,
}

#[pymethods]
impl EmbeddingModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, vocab) = load_embedding(&path).map_err(err)?;
        Ok(Self { model, vocab })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.model.config.shared_dim
    }

    fn encode_text(&self, tokens: Vec<String>) -> PyResult<Vec<f64>> {
        let ids = self.vocab.encode(&tokens);
        Ok(self.model.encode_text(&ids).map_err(err)?.into_vec())
    }

    fn encode_image(&self, regions: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        Ok(self
            .model
            .encode_image(&matrix(regions)?)
            .map_err(err)?
            .into_vec())
    }
}

/// Default run configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&RunConfig::default())
        .map_err(|e| VisawareError::new_err(e.to_string()))
}

/// Generates the synthetic corpus into `out_dir`; returns
/// `(texts, images)` counts.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 7, config = None))]
fn generate_corpus(out_dir: PathBuf, seed: u64, config: Option<&str>) -> PyResult<(usize, usize)> {
    let cfg = match config {
        Some(text) => RunConfig::from_json(text).map_err(err)?,
        None => RunConfig::default(),
    };
    let corpus = generate_synthetic_corpus(&cfg.data, seed).map_err(err)?;
    corpus.save(&out_dir).map_err(err)?;
    Ok((corpus.texts.len(), corpus.images.len()))
}

/// Finite-difference suite; `[(name, max_rel_err, passed)]`.
#[pyfunction]
#[pyo3(signature = (points = 2, seed = 7))]
fn gradcheck(py: Python<'_>, points: usize, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let reports = py
        .detach(|| run_suite(points, seed, SUITE_TOLERANCE))
        .map_err(err)?;
    Ok(reports
        .into_iter()
        .map(|r| (r.name.to_string(), r.max_rel_err, r.passed))
        .collect())
}

/// Runs `visaware <args>` in-process and returns its exit code.
#[pyfunction]
fn run(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("visaware".to_string())
        .chain(args)
        .collect();
    py.detach(|| run_command(argv))
}

#[pymodule]
fn visaware(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VisawareError", m.py().get_type::<VisawareError>())?;
    m.add_class::<ImageIndex>()?;
    m.add_class::<EmbeddingModel>()?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(weldon_pool, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
