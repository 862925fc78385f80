//! Python bindings: graph I/O, page parsing, ranking and the core metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use aspectkg::encoder::Vector;
use aspectkg::features::{self, CorpusStats};
use aspectkg::kg::{self, AspectKg};
use aspectkg::ltr::{self, FeatureRow, LtrModel, QueryList, TrainConfig};
use aspectkg::Error;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// An aspect-level multi-modal knowledge graph.
#[pyclass(name = "KnowledgeGraph", module = "aspectkg_py")]
struct PyKnowledgeGraph {
    inner: AspectKg,
}

#[pymethods]
impl PyKnowledgeGraph {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: kg::load_kg(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        kg::save_kg(&self.inner, &path).map_err(to_py_err)
    }

    fn entity_ids(&self) -> Vec<String> {
        self.inner.entities().iter().map(|e| e.id.clone()).collect()
    }

    fn first_level_labels(&self, entity_id: &str) -> Vec<String> {
        self.inner
            .first_level_labels(entity_id)
            .into_iter()
            .map(str::to_string)
            .collect()
    }

    fn aspect_images(&self, entity_id: &str, label: &str) -> Vec<String> {
        self.inner
            .aspect_images(entity_id, label)
            .into_iter()
            .map(str::to_string)
            .collect()
    }

    /// A copy with every aspect path cut to its first label.
    fn flatten(&self) -> Self {
        Self {
            inner: kg::flatten_to_first_level(&self.inner),
        }
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &kg::compute_stats(&self.inner))
    }

    fn __len__(&self) -> usize {
        self.inner.entities().len()
    }

    fn __repr__(&self) -> String {
        format!(
            "KnowledgeGraph(entities={}, aspects={}, images={}, links={})",
            self.inner.entities().len(),
            self.inner.aspects().len(),
            self.inner.images().len(),
            self.inner.links().len()
        )
    }
}

/// A trained coordinate-ascent ranker.
#[pyclass(name = "RankingModel", module = "aspectkg_py")]
struct PyRankingModel {
    inner: LtrModel,
}

#[pymethods]
impl PyRankingModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: LtrModel::load(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    #[getter]
    fn feature_order(&self) -> Vec<String> {
        self.inner.feature_order.clone()
    }

    /// `(aspect_id, score, probability)`, best first.
    fn rank(&self, aspect_ids: Vec<String>, features: Vec<Vec<f64>>) -> PyResult<Vec<(String, f64, f64)>> {
        if aspect_ids.len() != features.len() {
            return Err(PyValueError::new_err("aspect_ids and features differ in length"));
        }
        let rows: Vec<FeatureRow> = aspect_ids
            .into_iter()
            .zip(features)
            .map(|(aspect_id, features)| FeatureRow {
                query_id: String::new(),
                aspect_id,
                features,
                label: 0,
            })
            .collect();
        Ok(self
            .inner
            .rank(&rows)
            .map_err(to_py_err)?
            .into_iter()
            .map(|r| (r.aspect_id, r.score, r.probability))
            .collect())
    }

    /// MAP over `(query_id, aspect_ids, features, labels)` tuples.
    fn mean_ap(&self, queries: Vec<QueryTuple>) -> PyResult<f64> {
        self.inner.mean_ap(&query_lists(queries)?).map_err(to_py_err)
    }
}

type QueryTuple = (String, Vec<String>, Vec<Vec<f64>>, Vec<u8>);

fn query_lists(queries: Vec<QueryTuple>) -> PyResult<Vec<QueryList>> {
    queries
        .into_iter()
        .map(|(query_id, aspect_ids, features, labels)| {
            if aspect_ids.len() != features.len() || features.len() != labels.len() {
                return Err(PyValueError::new_err(format!("query `{query_id}`: ragged inputs")));
            }
            let rows = aspect_ids
                .into_iter()
                .zip(features)
                .zip(labels)
                .map(|((aspect_id, features), label)| FeatureRow {
                    query_id: query_id.clone(),
                    aspect_id,
                    features,
                    label,
                })
                .collect();
            QueryList::new(&query_id, rows).map_err(to_py_err)
        })
        .collect()
}

/// Trains a ranker on `(query_id, aspect_ids, features, labels)` tuples.
#[pyfunction]
#[pyo3(signature = (queries, seed = 0, restarts = 20, feature_names = None))]
fn train_ranker(
    py: Python<'_>,
    queries: Vec<QueryTuple>,
    seed: u64,
    restarts: usize,
    feature_names: Option<Vec<String>>,
) -> PyResult<PyRankingModel> {
    let lists = query_lists(queries)?;
    let config = TrainConfig {
        seed,
        restarts,
        ..Default::default()
    };
    let outcome = py
        .detach(|| ltr::coordinate_ascent_train(&lists, &config))
        .map_err(to_py_err)?;
    let n = outcome.weights.len();
    let names = feature_names.unwrap_or_else(|| (0..n).map(|i| format!("f{i}")).collect());
    Ok(PyRankingModel {
        inner: LtrModel::new(&outcome, names, &config).map_err(to_py_err)?,
    })
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    ltr::average_precision(&scores, &labels).map_err(to_py_err)
}

fn corpus(docs: &[String]) -> (Vec<Vec<String>>, CorpusStats) {
    let tokens: Vec<Vec<String>> = docs.iter().map(|d| features::tokenize(d)).collect();
    let stats = CorpusStats::from_docs(tokens.iter().map(Vec::as_slice));
    (tokens, stats)
}

/// BM25 of each document in `docs` for `query`, with statistics over `docs`.
#[pyfunction]
fn bm25_scores(query: &str, docs: Vec<String>) -> Vec<f64> {
    let q = features::tokenize(query);
    let (tokens, stats) = corpus(&docs);
    tokens.iter().map(|d| features::bm25(&q, d, &stats)).collect()
}

#[pyfunction]
fn tfidf_cosines(query: &str, docs: Vec<String>) -> Vec<f64> {
    let q = features::tokenize(query);
    let (tokens, stats) = corpus(&docs);
    tokens.iter().map(|d| features::tfidf_cosine(&q, d, &stats)).collect()
}

#[pyfunction]
fn overlap(query: &str, doc: &str) -> usize {
    features::overlap(&features::tokenize(query), &features::tokenize(doc))
}

#[pyfunction]
fn info_nce_loss(projected: Vec<Vec<f64>>, positives: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let vectors = |rows: Vec<Vec<f64>>| rows.into_iter().map(Vector::new).collect::<Result<Vec<_>, _>>();
    let p = vectors(projected).map_err(to_py_err)?;
    let c = vectors(positives).map_err(to_py_err)?;
    aspectkg::air::info_nce_loss(&p, &c, tau).map_err(to_py_err)
}

/// `(train, validation, test)` sizes for `n` triples.
#[pyfunction]
fn split_sizes(n: usize) -> (usize, usize, usize) {
    aspectkg::air::split_sizes(n)
}

/// Parses a rendered page into nested section dicts.
#[pyfunction]
fn parse_page_html<'py>(py: Python<'py>, html: &str, entity_id: &str) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &aspectkg::ingest::parse_page_html(html, entity_id))
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| aspectkg::cli::run(std::iter::once("aspectkg".to_string()).chain(args)))
}

#[pymodule]
fn aspectkg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyKnowledgeGraph>()?;
    m.add_class::<PyRankingModel>()?;
    m.add_function(wrap_pyfunction!(train_ranker, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(bm25_scores, m)?)?;
    m.add_function(wrap_pyfunction!(tfidf_cosines, m)?)?;
    m.add_function(wrap_pyfunction!(overlap, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(split_sizes, m)?)?;
    m.add_function(wrap_pyfunction!(parse_page_html, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
