//! Python bindings. Reports cross the boundary as JSON strings so they can
//! be fed straight back into `render` and `top_k`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use diffex_core::backend::{ServerHandle, SyntheticBackend};
use diffex_core::corpus::{build_vlm_prompt, ingest_vlm_response, VlmPromptSpec};
use diffex_core::search::{ExpansionMode, RankedExplanations};
use diffex_core::{
    connect_remote_backend, load_corpus, make_synthetic_backend, render, serve, validate_corpus, BackendError,
    BackendSession, BeamConfig, EditParams, ExplanationReport, Format, RemoteConfig, ScoreCache, ScoreMode, ScoringConfig,
    SearchError, SyntheticWorld,
};
use pyo3::exceptions::{PyConnectionError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn backend_err(e: BackendError) -> PyErr {
    match e {
        BackendError::Transport { .. } | BackendError::Incompatible { .. } => PyConnectionError::new_err(e.to_string()),
        BackendError::Protocol { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn search_err(e: SearchError) -> PyErr {
    match e {
        SearchError::Score(diffex_core::scoring::ScoreError::Backend(b)) => backend_err(b),
        SearchError::Config(_) | SearchError::EmptyCorpus => value_err(e),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A semantic hierarchy.
#[pyclass(name = "Corpus", module = "diffex", frozen)]
struct PyCorpus {
    inner: diffex_core::Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Loads and validates a corpus file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus { inner: load_corpus(path).map_err(value_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyCorpus { inner: diffex_core::Corpus::from_json_str(text).map_err(value_err)? })
    }

    /// Parses a VLM keyword response. Returns the corpus and any warnings.
    #[staticmethod]
    fn from_vlm_response(text: &str, domain: &str) -> PyResult<(Self, Vec<String>)> {
        let out = ingest_vlm_response(text, domain).map_err(value_err)?;
        Ok((PyCorpus { inner: out.corpus }, out.warnings))
    }

    #[getter]
    fn domain(&self) -> &str {
        &self.inner.domain
    }

    #[getter]
    fn depth(&self) -> u32 {
        self.inner.depth()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn branching_width(&self) -> usize {
        self.inner.branching_width()
    }

    #[getter]
    fn root_labels(&self) -> Vec<String> {
        self.inner.roots.iter().map(|r| r.label.clone()).collect()
    }

    /// `(id, label)` pairs at a 1-based level, in pre-order.
    fn nodes_at_level(&self, level: u32) -> Vec<(String, String)> {
        self.inner.nodes_at_level(level).into_iter().map(|n| (n.id.clone(), n.label.clone())).collect()
    }

    /// Labels of a node's children, looked up by id or unique label.
    fn children(&self, key: &str) -> PyResult<Vec<String>> {
        let index = self.inner.index();
        let node = index.resolve(key).ok_or_else(|| value_err(format!("no node {key:?}")))?;
        Ok(node.children.iter().map(|c| c.label.clone()).collect())
    }

    /// Findings as `(rule, path, message)` triples. Empty means valid.
    fn validate(&self) -> Vec<(String, String, String)> {
        validate_corpus(&self.inner)
            .findings
            .into_iter()
            .map(|f| (f.rule.as_str().to_string(), f.path, f.message))
            .collect()
    }

    fn to_json(&self) -> String {
        self.inner.to_json_string()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(value_err)
    }

    fn __eq__(&self, other: &PyCorpus) -> bool {
        self.inner.structurally_eq(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!("Corpus(domain={:?}, roots={}, nodes={})", self.inner.domain, self.inner.roots.len(), self.inner.node_count())
    }
}

/// A connected backend, in-process or over HTTP.
#[pyclass(name = "Session", module = "diffex", frozen)]
struct PySession {
    inner: BackendSession,
}

#[pymethods]
impl PySession {
    /// In-process backend over a synthetic world file.
    #[staticmethod]
    fn synthetic(world_path: PathBuf) -> PyResult<Self> {
        let world = SyntheticWorld::load(world_path).map_err(backend_err)?;
        Ok(PySession { inner: make_synthetic_backend(world).map_err(backend_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (url, token=None, timeout_ms=30_000, retries=0))]
    fn remote(py: Python<'_>, url: &str, token: Option<String>, timeout_ms: u64, retries: u32) -> PyResult<Self> {
        let cfg = RemoteConfig { timeout: std::time::Duration::from_millis(timeout_ms), retries, ..RemoteConfig::default() };
        let inner = py.detach(|| connect_remote_backend(url, token, cfg)).map_err(backend_err)?;
        Ok(PySession { inner })
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn value_space(&self) -> String {
        serde_json::to_value(self.inner.value_space()).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
    }

    /// `(edit, classify)` calls made so far.
    fn calls(&self) -> (u64, u64) {
        let c = self.inner.calls();
        (c.edit, c.classify)
    }
}

/// A synthetic world served over HTTP on a background thread.
#[pyclass(name = "Server", module = "diffex")]
struct PyServer {
    handle: Option<ServerHandle>,
    url: String,
}

#[pymethods]
impl PyServer {
    #[getter]
    fn url(&self) -> &str {
        &self.url
    }

    fn close(&mut self) {
        self.handle.take();
    }
}

#[pyfunction]
#[pyo3(signature = (world_path, port=0))]
fn serve_synthetic(world_path: PathBuf, port: u16) -> PyResult<PyServer> {
    let world = SyntheticWorld::load(world_path).map_err(backend_err)?;
    let backend = Arc::new(SyntheticBackend::new(world).map_err(backend_err)?);
    let handle = serve(backend, SocketAddr::from(([127, 0, 0, 1], port))).map_err(|e| PyConnectionError::new_err(e.to_string()))?;
    Ok(PyServer { url: handle.url(), handle: Some(handle) })
}

#[pyfunction]
fn vlm_prompt(domain: &str, attributes: Vec<String>) -> PyResult<String> {
    let spec = VlmPromptSpec {
        domain_name: domain.into(),
        sample_attribute_names: attributes,
        example_image_refs: vec![],
        sample_groups: vec![],
    };
    build_vlm_prompt(&spec).map_err(value_err)
}

struct SearchArgs {
    scoring: ScoringConfig,
    beam: BeamConfig,
    params: EditParams,
}

#[allow(clippy::too_many_arguments)]
fn search_args(
    images: Vec<String>,
    target_class: &str,
    beam_width: usize,
    threshold: Option<f64>,
    epsilon: f64,
    max_depth: Option<u32>,
    mode: &str,
    score_mode: &str,
    edit_threshold: f64,
    seed: u64,
) -> PyResult<SearchArgs> {
    let expansion_mode = match mode {
        "refine" => ExpansionMode::Refine,
        "augment" => ExpansionMode::Augment,
        other => return Err(value_err(format!("mode must be refine or augment, got {other:?}"))),
    };
    let score_mode: ScoreMode = serde_json::from_value(serde_json::Value::String(score_mode.into())).map_err(value_err)?;
    let beam = BeamConfig { beam_width, threshold, max_depth, expansion_mode, improvement_epsilon: epsilon, ..BeamConfig::default() };
    Ok(SearchArgs {
        scoring: ScoringConfig::new(images, target_class).with_mode(score_mode),
        beam,
        params: EditParams::new(edit_threshold, seed).map_err(backend_err)?,
    })
}

fn report_json(ranked: &RankedExplanations, corpus: &PyCorpus, session: &PySession, classifier: &str) -> String {
    let report = ExplanationReport::from_ranked(ranked, &corpus.inner.domain, classifier, Some(session.inner.value_space()));
    String::from_utf8(render(&report, Format::Json)).expect("json is utf-8")
}

/// Hierarchical beam search. Returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (corpus, session, images, target_class, *, beam_width=5, threshold=None, epsilon=0.0, max_depth=None,
    mode="refine", score_mode="mean_signed_delta", edit_threshold=0.75, seed=0, classifier="unnamed"))]
#[allow(clippy::too_many_arguments)]
fn discover(
    py: Python<'_>,
    corpus: &PyCorpus,
    session: &PySession,
    images: Vec<String>,
    target_class: &str,
    beam_width: usize,
    threshold: Option<f64>,
    epsilon: f64,
    max_depth: Option<u32>,
    mode: &str,
    score_mode: &str,
    edit_threshold: f64,
    seed: u64,
    classifier: &str,
) -> PyResult<String> {
    let a = search_args(images, target_class, beam_width, threshold, epsilon, max_depth, mode, score_mode, edit_threshold, seed)?;
    let ranked = py
        .detach(|| diffex_core::discover(&corpus.inner, &a.beam, &a.scoring, &session.inner, &a.params, &ScoreCache::new()))
        .map_err(search_err)?;
    Ok(report_json(&ranked, corpus, session, classifier))
}

/// Beam search over combinations of `seeds` (ids or unique labels).
#[pyfunction]
#[pyo3(signature = (corpus, session, seeds, images, target_class, *, max_combo=2, beam_width=5, threshold=None,
    epsilon=0.0, score_mode="mean_signed_delta", edit_threshold=0.75, seed=0, classifier="unnamed"))]
#[allow(clippy::too_many_arguments)]
fn joint_search(
    py: Python<'_>,
    corpus: &PyCorpus,
    session: &PySession,
    seeds: Vec<String>,
    images: Vec<String>,
    target_class: &str,
    max_combo: usize,
    beam_width: usize,
    threshold: Option<f64>,
    epsilon: f64,
    score_mode: &str,
    edit_threshold: f64,
    seed: u64,
    classifier: &str,
) -> PyResult<String> {
    let a = search_args(images, target_class, beam_width, threshold, epsilon, None, "refine", score_mode, edit_threshold, seed)?;
    let index = corpus.inner.index();
    let semantics = seeds
        .iter()
        .map(|k| {
            let node = index.resolve(k).ok_or_else(|| value_err(format!("seed {k:?} matches no single node")))?;
            Ok(index.semantic(&node.id).expect("resolved node is indexed"))
        })
        .collect::<PyResult<Vec<_>>>()?;
    let ranked = py
        .detach(|| {
            diffex_core::joint_search(&semantics, max_combo, &a.beam, &a.scoring, &session.inner, &a.params, &ScoreCache::new())
        })
        .map_err(search_err)?;
    Ok(report_json(&ranked, corpus, session, classifier))
}

/// Re-renders a JSON report as `json`, `markdown` or `csv`.
#[pyfunction]
#[pyo3(signature = (report_json, format="markdown"))]
fn render_report(report_json: &str, format: &str) -> PyResult<String> {
    let report = ExplanationReport::from_json_slice(report_json.as_bytes()).map_err(value_err)?;
    let format: Format = format.parse().map_err(value_err)?;
    Ok(String::from_utf8(render(&report, format)).expect("rendered reports are utf-8"))
}

/// First `k` rows of a JSON report, as JSON.
#[pyfunction]
fn top_k(report_json: &str, k: usize) -> PyResult<String> {
    let report = ExplanationReport::from_json_slice(report_json.as_bytes()).map_err(value_err)?;
    Ok(String::from_utf8(render(&diffex_core::top_k(&report, k), Format::Json)).expect("json is utf-8"))
}

#[pymodule]
fn diffex(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PySession>()?;
    m.add_class::<PyServer>()?;
    m.add_function(wrap_pyfunction!(serve_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(vlm_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(discover, m)?)?;
    m.add_function(wrap_pyfunction!(joint_search, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    Ok(())
}
