//! Python bindings: embedding-cache helpers, prompt rendering, the MINE
//! estimator, rank tables and seeded experiment runs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;

use tabii::harness::{self, ExperimentConfig, Method};
use tabii::mine::{self, MineConfig};
use tabii::placeholders::{self, EmbeddingProvider, FileEmbeddingProvider, HashEmbeddingProvider, PromptTemplate};
use tabii::tensor::Matrix;
use tabii::TabiiError;

fn err(e: TabiiError) -> PyErr {
    match e {
        TabiiError::CacheMiss(k) => PyKeyError::new_err(k),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Hex SHA-256 of the text: the key used in embedding-cache files.
#[pyfunction]
fn cache_key(text: &str) -> String {
    placeholders::cache_key(text)
}

/// Write `(text, vector)` pairs as a JSON Lines cache; repeated texts keep the first vector.
#[pyfunction]
fn write_embedding_cache(path: PathBuf, items: Vec<(String, Vec<f64>)>) -> PyResult<()> {
    placeholders::write_embedding_cache(&path, &items).map_err(err)
}

/// Deterministic hashed bag-of-tokens embedding.
#[pyfunction]
#[pyo3(signature = (text, dim = 64, seed = 0))]
fn hash_embedding(text: &str, dim: usize, seed: u64) -> PyResult<Vec<f64>> {
    HashEmbeddingProvider::new(dim, seed).and_then(|p| p.embed(text)).map_err(err)
}

/// Fill a prompt template's `{target}`, `{feature description}` and
/// `{incremental features}` slots.
#[pyfunction]
#[pyo3(signature = (target, originals, incrementals, template = None))]
fn render_prompt(
    target: &str,
    originals: Vec<String>,
    incrementals: Vec<String>,
    template: Option<&str>,
) -> PyResult<String> {
    let t = PromptTemplate::new(template.unwrap_or(placeholders::DEFAULT_TEMPLATE)).map_err(err)?;
    Ok(placeholders::render(&t, target, &originals, &incrementals))
}

/// A loaded embedding cache.
#[pyclass(frozen)]
struct EmbeddingCache {
    inner: FileEmbeddingProvider,
}

#[pymethods]
impl EmbeddingCache {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(EmbeddingCache {
            inner: FileEmbeddingProvider::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Vector stored for `text`; `KeyError` carrying the hash when absent.
    fn embed(&self, text: &str) -> PyResult<Vec<f64>> {
        self.inner.embed(text).map_err(err)
    }
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

/// MINE lower bound on I(a; b) in nats. `config` is a JSON object overriding
/// estimator defaults.
#[pyfunction]
#[pyo3(signature = (a, b, seed = 0, config = None))]
fn mine_estimate(py: Python<'_>, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, seed: u64, config: Option<&str>) -> PyResult<f64> {
    let cfg: MineConfig = match config {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => MineConfig::default(),
    };
    let (a, b) = (matrix(a, "a")?, matrix(b, "b")?);
    py.detach(|| mine::mine_estimate(&a, &b, &cfg, seed))
        .map(|e| e.value)
        .map_err(err)
}

/// Default experiment configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&ExperimentConfig::default()).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Run `methods` (e.g. `["discard", "tabii"]`) under a JSON config that
/// overrides defaults field by field. Returns the results as a JSON list.
#[pyfunction]
#[pyo3(signature = (methods, config = "{}"))]
fn run(py: Python<'_>, methods: Vec<String>, config: &str) -> PyResult<String> {
    let cfg: ExperimentConfig = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(err)?;
    let methods: Vec<Method> = methods.iter().map(|m| m.parse()).collect::<Result<_, _>>().map_err(err)?;
    let results = py.detach(|| harness::run_methods(&cfg, &methods)).map_err(err)?;
    serde_json::to_string(&results).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Average rank per method over datasets from `(method, dataset, accuracy)`
/// triples; ties share the mean rank. Returns `(method, mean_rank, std)` rows
/// in first-seen method order.
#[pyfunction]
fn rank(cells: Vec<(String, String, f64)>) -> PyResult<Vec<(String, f64, f64)>> {
    let mut methods: Vec<String> = Vec::new();
    let mut datasets: Vec<String> = Vec::new();
    let mut acc = BTreeMap::new();
    for (m, d, v) in cells {
        if !methods.contains(&m) {
            methods.push(m.clone());
        }
        if !datasets.contains(&d) {
            datasets.push(d.clone());
        }
        acc.insert((m, d), v);
    }
    let table = harness::rank(&methods, &datasets, &acc).map_err(err)?;
    Ok(table.rows.into_iter().map(|r| (r.method, r.mean_rank, r.std)).collect())
}

#[pymodule]
pub fn pytabii(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<EmbeddingCache>()?;
    m.add_function(wrap_pyfunction!(cache_key, m)?)?;
    m.add_function(wrap_pyfunction!(write_embedding_cache, m)?)?;
    m.add_function(wrap_pyfunction!(hash_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(mine_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    Ok(())
}
