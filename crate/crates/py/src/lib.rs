//! Python bindings: score functions, metrics and a loaded editor.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use scope_core::editor::{iterative_edit, EditConfig};
use scope_core::model::{load_mlm, MlmModel, Role};
use scope_core::text::{TokenId, TokenSeq, Vocabulary};

fn py_err(e: scope_core::Error) -> PyErr {
    match e {
        scope_core::Error::Config(_) | scope_core::Error::Empty(_) | scope_core::Error::NoSamples | scope_core::Error::NoTokens => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Per-position repetition penalty of a token sequence.
#[pyfunction]
fn repetition_scores(tokens: Vec<TokenId>) -> Vec<f64> {
    scope_core::scoring::repetition_per_pos(&tokens)
}

/// Mean fraction of unique n-grams per sample.
#[pyfunction]
fn distinct_n(samples: Vec<Vec<TokenId>>, n: usize) -> PyResult<f64> {
    let samples: Vec<TokenSeq> = samples.into_iter().map(TokenSeq).collect();
    scope_core::eval::distinct_n(&samples, n).map_err(py_err)
}

/// Seed of stream `index` derived from `seed`.
#[pyfunction]
fn derive_seed(seed: u64, index: u64) -> u64 {
    scope_core::generation::derive_seed(seed, index)
}

/// A masked-LM checkpoint together with its vocabulary.
#[pyclass(frozen)]
struct Editor {
    model: MlmModel,
    vocab: Vocabulary,
}

#[pymethods]
impl Editor {
    #[new]
    fn new(checkpoint: PathBuf, vocab: PathBuf) -> PyResult<Self> {
        let vocab = Vocabulary::load(vocab).map_err(py_err)?;
        let (model, _) = load_mlm(checkpoint, &vocab, None).map_err(py_err)?;
        Ok(Editor { model, vocab })
    }

    #[getter]
    fn role(&self) -> String {
        self.model.role.to_string()
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        self.vocab.encode(text).into_inner()
    }

    fn decode(&self, ids: Vec<TokenId>) -> PyResult<String> {
        self.vocab.decode(&ids).map_err(py_err)
    }

    /// Masked-LM score of every token of `text`.
    fn mlm_scores(&self, text: &str) -> PyResult<Vec<f64>> {
        let seq = self.vocab.encode(text);
        Ok(scope_core::scoring::mlm_score(&self.model, &seq).map_err(py_err)?.mlm_per_pos)
    }

    /// Rewrites `block` given the context `prefix` and returns the new block.
    #[pyo3(signature = (prefix, block, iterations = 2, seed = 0, temperature = 1.0))]
    fn edit(&self, py: Python<'_>, prefix: &str, block: &str, iterations: usize, seed: u64, temperature: f64) -> PyResult<String> {
        let x = self.vocab.encode(prefix);
        let y = self.vocab.encode(block);
        let cfg = EditConfig {
            block_size: y.len().max(1),
            iterations,
            seed,
            temperature,
        };
        let out = py
            .detach(|| iterative_edit(&self.model, &x, &y, 0..y.len(), &cfg, None))
            .map_err(py_err)?;
        self.vocab.decode(&out.output).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Editor(role={}, vocab_size={})", self.model.role, self.vocab.size())
    }
}

#[pymodule]
fn scope_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(repetition_scores, m)?)?;
    m.add_function(wrap_pyfunction!(distinct_n, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_class::<Editor>()?;
    m.add("EDITOR_ROLE", Role::Editor.to_string())?;
    Ok(())
}
