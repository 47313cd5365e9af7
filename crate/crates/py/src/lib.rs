//! Python bindings. Structured results cross the boundary as JSON and come
//! back as plain dicts and lists.

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use editlab::corpus::{generate_corpus, CorpusSpec};
use editlab::lens::Convention;
use editlab::maskforge::{LossComponents, MaskTrainerConfig};
use editlab::nanomodel::{Intervention, ModelConfig, PretrainConfig};

create_exception!(editlab_py, EditlabError, PyException);

fn err(e: editlab::Error) -> PyErr {
    EditlabError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    EditlabError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(json_err),
        None => Ok(T::default()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(EditlabError::new_err("ragged matrix"));
    }
    Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect())
        .map_err(|e| EditlabError::new_err(e.to_string()))
}

/// Synthetic fact world with its vocabulary and neutral text.
#[pyclass(module = "editlab_py")]
pub struct Corpus {
    inner: editlab::corpus::Corpus,
}

#[pymethods]
impl Corpus {
    /// Generates a corpus from a JSON `CorpusSpec` (defaults when omitted).
    #[staticmethod]
    #[pyo3(signature = (spec_json=None))]
    fn generate(spec_json: Option<&str>) -> PyResult<Self> {
        let spec: CorpusSpec = parse(spec_json)?;
        spec.validate().map_err(err)?;
        Ok(Self {
            inner: generate_corpus(&spec).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: editlab::corpus::Corpus::load(path.as_ref()).map_err(err)?,
        })
    }

    #[getter]
    fn n_facts(&self) -> usize {
        self.inner.facts.len()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    #[getter]
    fn templates(&self) -> Vec<String> {
        self.inner.templates.clone()
    }

    #[getter]
    fn neutral_eval(&self) -> Vec<usize> {
        self.inner.neutral_eval.clone()
    }

    fn facts(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.facts)
    }

    /// Canonical prompt tokens of fact `index`.
    fn prompt(&self, index: usize) -> PyResult<Vec<usize>> {
        let fact = self
            .inner
            .facts
            .get(index)
            .ok_or_else(|| EditlabError::new_err(format!("no fact {index}")))?;
        Ok(fact.prompt(&self.inner.vocab).map_err(err)?.tokens)
    }

    fn encode(&self, text: &str) -> PyResult<Vec<usize>> {
        self.inner.vocab.encode(text).map_err(err)
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.inner.vocab.decode(&ids)
    }
}

/// Decoder-only nano transformer.
#[pyclass(module = "editlab_py")]
pub struct Model {
    inner: editlab::nanomodel::TransformerModel,
}

#[pymethods]
impl Model {
    /// Freshly initialized model from a JSON `ModelConfig`.
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = parse(config_json)?;
        Ok(Self {
            inner: editlab::nanomodel::TransformerModel::new(cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: editlab::nanomodel::TransformerModel::load(path.as_ref()).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(err)
    }

    /// Trains a copy on `corpus`; returns the trained model and its report.
    #[pyo3(signature = (corpus, config_json=None))]
    fn pretrain(&self, py: Python<'_>, corpus: &Corpus, config_json: Option<&str>) -> PyResult<(Model, Py<PyAny>)> {
        let cfg: PretrainConfig = parse(config_json)?;
        let (model, report) =
            editlab::nanomodel::pretrain(self.inner.clone(), &corpus.inner, &cfg).map_err(err)?;
        let summary = serde_json::json!({
            "recall": report.recall.recall,
            "curve": report.curve,
        });
        Ok((Model { inner: model }, to_py(py, &summary)?))
    }

    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.config)
    }

    fn perplexity(&self, tokens: Vec<usize>) -> PyResult<f64> {
        self.inner.perplexity(&tokens).map_err(err)
    }

    fn next_token_probs(&self, prompt: Vec<usize>) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .next_token_probs(&prompt, &Intervention::none())
            .map_err(err)?
            .to_vec())
    }

    fn top1(&self, prompt: Vec<usize>) -> PyResult<usize> {
        self.inner.top1(&prompt).map_err(err)
    }

    /// Per-layer contributions to the logit of `target`.
    #[pyo3(signature = (prompt, target, convention="raw-additive"))]
    fn decompose(&self, py: Python<'_>, prompt: Vec<usize>, target: usize, convention: &str) -> PyResult<Py<PyAny>> {
        let conv: Convention = convention.parse().map_err(err)?;
        let t = editlab::lens::decompose(&self.inner, &prompt, target, conv).map_err(err)?;
        let v = serde_json::json!({
            "embedding": t.embedding,
            "attn": t.attn,
            "mlp": t.mlp,
            "bias": t.bias,
            "direct": t.direct,
            "total": t.total(),
            "residue": t.residue(),
        });
        to_py(py, &v)
    }
}

#[pyfunction]
fn restoration_loss(p_o: f64, p_o_star: f64) -> PyResult<f64> {
    editlab::maskforge::restoration_loss(p_o, p_o_star).map_err(err)
}

#[pyfunction]
fn sparsity_loss(mask: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(editlab::maskforge::sparsity_loss(matrix(mask)?.view()))
}

#[pyfunction]
fn kl_loss(reference: Vec<Vec<f64>>, pruned: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    editlab::maskforge::kl_loss(matrix(reference)?.view(), matrix(pruned)?.view(), temperature).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (kl, sparsity, restoration, config_json=None))]
fn combined_loss(kl: f64, sparsity: f64, restoration: f64, config_json: Option<&str>) -> PyResult<f64> {
    let cfg: MaskTrainerConfig = parse(config_json)?;
    let c = LossComponents {
        kl,
        sparsity,
        restoration,
    };
    Ok(editlab::maskforge::combined_loss(&c, &cfg))
}

/// Welch test and Cohen's d between two samples.
#[pyfunction]
fn signal_stats(py: Python<'_>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Py<PyAny>> {
    to_py(py, &editlab::evaluator::signal_stats(&a, &b).map_err(err)?)
}

/// Default run configuration as JSON.
#[pyfunction]
fn default_config() -> String {
    editlab::runner::RunConfig::default().to_json()
}

/// Validates a run configuration; raises on bad keys or values.
#[pyfunction]
fn validate_config(json: &str) -> PyResult<String> {
    Ok(editlab::runner::RunConfig::from_json(json).map_err(err)?.to_json())
}

/// Runs the command-line driver with `args` (without the program name);
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("editlab".to_string()).chain(args).collect();
    py.detach(|| editlab::runner::run_cli(argv))
}

#[pymodule]
fn editlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EditlabError", m.py().get_type::<EditlabError>())?;
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(restoration_loss, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(combined_loss, m)?)?;
    m.add_function(wrap_pyfunction!(signal_stats, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
