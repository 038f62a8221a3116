use std::path::PathBuf;

use dynaprompt::harness::{self, config_with_overrides};
use dynaprompt::model::{self, ClassEmbeddings, ModelConfig, Prompt};
use dynaprompt::stream::{collapse_stream, PRESET_NAMES};
use dynaprompt::{AugConfig, LabeledSample, StrategyKind, StrategyState};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: dynaprompt::Error) -> PyErr {
    match e {
        dynaprompt::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Frozen class-name embeddings of the toy encoder.
#[pyclass(name = "ClassEmbeddings", module = "pydynaprompt", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyClassEmbeddings {
    inner: ClassEmbeddings,
}

#[pymethods]
impl PyClassEmbeddings {
    #[new]
    #[pyo3(signature = (dim, num_classes, seed = 0))]
    fn new(dim: usize, num_classes: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig {
            dim,
            num_classes,
            seed,
            ..ModelConfig::default()
        };
        cfg.validate().map_err(to_py)?;
        Ok(Self {
            inner: ClassEmbeddings::generate(&cfg),
        })
    }

    #[staticmethod]
    fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: ClassEmbeddings::from_rows(rows).map_err(to_py)?,
        })
    }

    #[getter]
    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
}

#[pyclass(name = "Prompt", module = "pydynaprompt", skip_from_py_object)]
#[derive(Clone)]
struct PyPrompt {
    inner: Prompt,
}

#[pymethods]
impl PyPrompt {
    #[new]
    #[pyo3(signature = (tokens, id = 0))]
    fn new(tokens: Vec<Vec<f64>>, id: u64) -> PyResult<Self> {
        Ok(Self {
            inner: Prompt::from_tokens(id, tokens).map_err(to_py)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (prompt_len, dim, id = 0))]
    fn zeros(prompt_len: usize, dim: usize, id: u64) -> Self {
        Self {
            inner: Prompt::zeros(id, prompt_len, dim),
        }
    }

    #[getter]
    fn id(&self) -> u64 {
        self.inner.id
    }

    #[getter]
    fn tokens(&self) -> Vec<Vec<f64>> {
        self.inner.tokens.clone()
    }

    /// In-place gradient step `tokens -= alpha * grad`.
    fn descend(&mut self, grad: Vec<Vec<f64>>, alpha: f64) -> PyResult<()> {
        if grad.len() != self.inner.prompt_len() || grad.iter().any(|g| g.len() != self.inner.dim()) {
            return Err(PyValueError::new_err("gradient shape does not match the prompt"));
        }
        self.inner.descend(&grad, alpha);
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Prompt(id={}, prompt_len={}, dim={})",
            self.inner.id,
            self.inner.prompt_len(),
            self.inner.dim()
        )
    }
}

fn unwrap_prompts(prompts: &[PyRef<'_, PyPrompt>]) -> Vec<Prompt> {
    prompts.iter().map(|p| p.inner.clone()).collect()
}

#[pyfunction]
#[pyo3(signature = (x, prompt, classes, tau = 0.07))]
fn predict(x: Vec<f64>, prompt: &PyPrompt, classes: &PyClassEmbeddings, tau: f64) -> PyResult<Vec<f64>> {
    let p = model::predict(&x, &prompt.inner, &classes.inner, tau).map_err(to_py)?;
    Ok(p.as_slice().to_vec())
}

/// Entropy of the prediction averaged over all samples and prompts.
#[pyfunction]
#[pyo3(signature = (samples, prompts, classes, tau = 0.07))]
fn entropy_loss(
    samples: Vec<Vec<f64>>,
    prompts: Vec<PyRef<'_, PyPrompt>>,
    classes: &PyClassEmbeddings,
    tau: f64,
) -> PyResult<f64> {
    model::entropy_loss(&samples, &unwrap_prompts(&prompts), &classes.inner, tau).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (samples, prompts, classes, tau = 0.07))]
fn grad_entropy(
    samples: Vec<Vec<f64>>,
    prompts: Vec<PyRef<'_, PyPrompt>>,
    classes: &PyClassEmbeddings,
    tau: f64,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    model::grad_entropy(&samples, &unwrap_prompts(&prompts), &classes.inner, tau).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (samples, prompts, classes, tau = 0.07, epsilon = 1e-6))]
fn finite_diff_grad(
    samples: Vec<Vec<f64>>,
    prompts: Vec<PyRef<'_, PyPrompt>>,
    classes: &PyClassEmbeddings,
    tau: f64,
    epsilon: f64,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    model::finite_diff_grad(&samples, &unwrap_prompts(&prompts), &classes.inner, tau, epsilon).map_err(to_py)
}

/// One adaptation strategy fed sample by sample.
#[pyclass(name = "Strategy", module = "pydynaprompt")]
struct PyStrategy {
    inner: StrategyState,
    index: usize,
}

#[pymethods]
impl PyStrategy {
    #[new]
    #[pyo3(signature = (kind, classes, prompt_len = 4, tau = 0.07, alpha = 0.005, buffer_size = 10, seed = 0))]
    fn new(
        kind: &str,
        classes: &PyClassEmbeddings,
        prompt_len: usize,
        tau: f64,
        alpha: f64,
        buffer_size: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let kind: StrategyKind = kind.parse().map_err(to_py)?;
        let v0 = Prompt::zeros(0, prompt_len, classes.inner.dim());
        let aug = AugConfig {
            seed,
            ..AugConfig::default()
        };
        let inner =
            StrategyState::new(kind, classes.inner.clone(), tau, v0, aug, alpha, buffer_size, seed).map_err(to_py)?;
        Ok(Self { inner, index: 0 })
    }

    /// Adapts on `x` and returns the step outcome as a dict.
    fn step<'py>(&mut self, py: Python<'py>, x: Vec<f64>, label: usize) -> PyResult<Bound<'py, PyDict>> {
        let sample = LabeledSample {
            x,
            y_gt: label,
            domain_id: 0,
            index: self.index,
        };
        let o = self.inner.step(&sample).map_err(to_py)?;
        self.index += 1;
        let d = PyDict::new(py);
        d.set_item("step", o.step)?;
        d.set_item("predicted", o.predicted)?;
        d.set_item("label", o.label)?;
        d.set_item("correct", o.correct)?;
        d.set_item("selected_count", o.selected_count)?;
        d.set_item("appended", o.appended)?;
        d.set_item("deleted", o.deleted)?;
        d.set_item("buffer_len", o.buffer_len_after)?;
        d.set_item("pre_entropy", o.pre_step_entropy)?;
        d.set_item("post_entropy", o.post_step_entropy)?;
        d.set_item("reset", o.reset)?;
        Ok(d)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().as_str()
    }

    /// Prompts currently in the buffer, most recent first.
    fn buffer(&self) -> Vec<PyPrompt> {
        self.inner
            .buffer()
            .map(|b| b.slots().iter().map(|p| PyPrompt { inner: p.clone() }).collect())
            .unwrap_or_default()
    }

    #[getter]
    fn ops(&self) -> (u64, u64) {
        let ops = self.inner.ops();
        (ops.prompt_evals, ops.grad_evals)
    }
}

#[pyclass(name = "RunResult", module = "pydynaprompt", frozen)]
struct PyRunResult {
    inner: harness::RunResult,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn mean_accuracy(&self) -> f64 {
        self.inner.mean_accuracy
    }

    #[getter]
    fn block_accuracies(&self) -> Vec<f64> {
        self.inner.block_accuracies.clone()
    }

    fn predictions(&self) -> Vec<usize> {
        self.inner.predictions()
    }

    fn steps_csv(&self) -> String {
        harness::steps_csv(&self.inner)
    }

    fn summary_json(&self) -> PyResult<String> {
        harness::summary_json(&self.inner).map_err(to_py)
    }

    /// Writes steps.csv and summary.json into `dir`.
    fn emit(&self, dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        harness::emit(&self.inner, &dir).map_err(to_py)
    }
}

/// Runs one experiment from an optional JSON config plus `key=value` overrides.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = Vec::new()))]
fn run(py: Python<'_>, config: Option<&str>, overrides: Vec<String>) -> PyResult<PyRunResult> {
    let cfg = config_with_overrides(config, &overrides).map_err(to_py)?;
    let inner = py.detach(|| harness::run(&cfg)).map_err(to_py)?;
    Ok(PyRunResult { inner })
}

/// Returns `(passed, max_rel_error, max_abs_error)`.
#[pyfunction]
#[pyo3(signature = (trials = 100, epsilon = 1e-6, seed = 0))]
fn gradcheck(py: Python<'_>, trials: usize, epsilon: f64, seed: u64) -> PyResult<(bool, f64, f64)> {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::default()
    };
    let r = py.detach(|| harness::gradcheck(&cfg, trials, epsilon)).map_err(to_py)?;
    Ok((r.passed, r.max_rel_error, r.max_abs_error))
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    PRESET_NAMES.to_vec()
}

/// A stream preset as JSON.
#[pyfunction]
fn preset(name: &str) -> PyResult<String> {
    let cfg = collapse_stream(name).map_err(to_py)?;
    serde_json::to_string_pretty(&cfg).map_err(|e| to_py(e.into()))
}

#[pymodule]
pub fn pydynaprompt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyClassEmbeddings>()?;
    m.add_class::<PyPrompt>()?;
    m.add_class::<PyStrategy>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_loss, m)?)?;
    m.add_function(wrap_pyfunction!(grad_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(finite_diff_grad, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    Ok(())
}
