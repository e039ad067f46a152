//! Python bindings: configs, the prepared corpus, checkpoints, the
//! unlearning pipeline and the metric functions.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use gu_core::evalsuite as ev;
use gu_core::experiment::{self as ex, DataSource, ExperimentConfig, Prepared};
use gu_core::model::Checkpoint;
use gu_core::numkit::{self, Basis, Matrix};
use gu_core::promptsynth as ps;
use gu_core::trainer::Method;

fn err(e: gu_core::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn basis(columns: Vec<Vec<f64>>) -> PyResult<Basis> {
    let dim = columns.first().map_or(0, Vec::len);
    Basis::new(dim, columns).map_err(err)
}

#[pyclass(name = "Config")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, optionally overridden by a JSON object string.
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner: ExperimentConfig = match json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ExperimentConfig::default(),
        };
        inner.validate().map_err(err)?;
        Ok(PyConfig { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    ck: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            ck: Checkpoint::load(path.as_ref()).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.ck.save(path.as_ref()).map_err(err)
    }

    fn digest(&self) -> String {
        self.ck.digest()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.ck.n_params()
    }

    fn __repr__(&self) -> String {
        let c = self.ck.config();
        format!(
            "Model(layers={}, d_model={}, vocab={}, params={})",
            c.n_layers,
            c.d_model,
            c.vocab_size,
            self.ck.n_params()
        )
    }
}

/// Corpus, splits and tokenizer for one config, plus the pipeline steps.
#[pyclass(name = "Lab")]
struct PyLab {
    cfg: ExperimentConfig,
    prep: Prepared,
}

#[pymethods]
impl PyLab {
    #[new]
    fn new(py: Python<'_>, config: &PyConfig) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let prep = py.detach(|| ex::prepare(&cfg)).map_err(err)?;
        Ok(PyLab { cfg, prep })
    }

    fn anchors(&self) -> Vec<String> {
        self.prep.anchors()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.prep.tokenizer.vocab_size()
    }

    /// `{"forget": [...], "retain": [...], "holdout": [...]}` as question/answer dicts.
    fn splits<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let s = &self.prep.splits;
        to_py(
            py,
            &serde_json::json!({ "forget": s.forget, "retain": s.retain, "holdout": s.holdout }),
        )
    }

    fn train_base(&self, py: Python<'_>) -> PyResult<PyModel> {
        let (ck, _) = py.detach(|| ex::train_base(&self.cfg, &self.prep)).map_err(err)?;
        Ok(PyModel { ck })
    }

    fn train_retrain(&self, py: Python<'_>) -> PyResult<PyModel> {
        let ck = py.detach(|| ex::train_retrain(&self.cfg, &self.prep)).map_err(err)?;
        Ok(PyModel { ck })
    }

    fn forget_em(&self, model: &PyModel) -> PyResult<f64> {
        ex::forget_em(&model.ck, &self.prep).map_err(err)
    }

    /// Unlearned model and its per-epoch history.
    #[pyo3(signature = (base, method="gu", data="synthetic", anchor=None))]
    fn unlearn<'py>(
        &self,
        py: Python<'py>,
        base: &PyModel,
        method: &str,
        data: &str,
        anchor: Option<String>,
    ) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
        let method: Method = method.parse().map_err(err)?;
        let data: DataSource = data.parse().map_err(err)?;
        let anchors = match anchor {
            Some(a) => {
                self.prep.check_anchor(&a).map_err(err)?;
                vec![a]
            }
            None => self.prep.anchors(),
        };
        let out = py
            .detach(|| {
                let pools = ex::synthesize(&self.cfg, &anchors)?;
                ex::run_unlearn(&self.cfg, &self.prep, &base.ck, &pools, method, data)
            })
            .map_err(err)?;
        let history = to_py(py, &out.history)?;
        Ok((PyModel { ck: out.checkpoint }, history))
    }

    #[pyo3(signature = (model, retrain=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        model: &PyModel,
        retrain: Option<PyRef<'_, PyModel>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let r = retrain.as_ref().map(|m| &m.ck);
        let report = py
            .detach(|| ex::evaluate_checkpoint(&self.cfg, &self.prep, &model.ck, r))
            .map_err(err)?;
        to_py(py, &report)
    }

    /// Greedy answer to a free-form question.
    #[pyo3(signature = (model, question, max_new=32))]
    fn answer(&self, model: &PyModel, question: &str, max_new: usize) -> PyResult<String> {
        let prompt = self.prep.tokenizer.encode_prompt(question);
        let out = model
            .ck
            .greedy_generate(&prompt, max_new, gu_core::corpus::EOS_ID)
            .map_err(err)?;
        Ok(self.prep.tokenizer.detokenize(&out))
    }
}

/// Runs the full desk comparison and returns its report.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn desk_experiment<'py>(py: Python<'py>, config: Option<&PyConfig>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let report = py.detach(|| ex::desk_experiment(&cfg)).map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
fn reflect(v: Vec<f64>, columns: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    numkit::reflect(&v, &basis(columns)?).map_err(err)
}

/// `(inside, outside)` parts of `v` for the span of `columns`.
#[pyfunction]
fn decompose(v: Vec<f64>, columns: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    numkit::decompose(&v, &basis(columns)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, eps=1e-8))]
fn stabilized_cosine(a: Vec<f64>, b: Vec<f64>, eps: f64) -> PyResult<f64> {
    numkit::stabilized_cosine(&a, &b, eps).map_err(err)
}

/// `(mean, columns, explained_variance)` for the rows of `samples`.
#[pyfunction]
fn pca(samples: Vec<Vec<f64>>, rank: usize) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
    let m = Matrix::from_rows(&samples).map_err(err)?;
    let p = numkit::pca_basis(&m, rank).map_err(err)?;
    Ok((p.mean, p.basis.columns().to_vec(), p.explained_variance))
}

#[pyfunction]
fn kl_div(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    numkit::kl_div(&p, &q).map_err(err)
}

#[pyfunction]
fn rouge_l(hyp: &str, reference: &str) -> f64 {
    ev::rouge_l(hyp, reference)
}

#[pyfunction]
fn roc_auc(members: Vec<f64>, nonmembers: Vec<f64>) -> PyResult<f64> {
    ev::roc_auc(&members, &nonmembers).map_err(err)
}

#[pyfunction]
fn privleak(auc_unlearned: f64, auc_retrain: f64) -> PyResult<f64> {
    ev::privleak(auc_unlearned, auc_retrain).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (nll, k_percent=40.0))]
fn mia_min_k(nll: Vec<f64>, k_percent: f64) -> PyResult<f64> {
    ev::mia_min_k(&nll, k_percent).map_err(err)
}

#[pyfunction]
fn zlib_len(text: &str) -> PyResult<usize> {
    ev::zlib_len(text).map_err(err)
}

#[pyfunction]
fn model_utility(components: Vec<f64>) -> f64 {
    ev::model_utility(&components)
}

#[pyfunction]
#[pyo3(signature = (anchor, n=30, seed=7))]
fn virtual_prompts<'py>(py: Python<'py>, anchor: &str, n: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &ps::gen_virtual_prompts(anchor, n, seed).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (n=10, seed=7))]
fn safe_references<'py>(py: Python<'py>, n: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &ps::gen_safe_references(seed, n).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (anchor, n_ret=30, n_confusable=6, n_unrelated=6, seed=7))]
fn retain_pool<'py>(
    py: Python<'py>,
    anchor: &str,
    n_ret: usize,
    n_confusable: usize,
    n_unrelated: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let conf = ps::make_confusables(anchor, n_confusable, seed).map_err(err)?;
    let unrel = ps::make_unrelated(anchor, n_unrelated, seed).map_err(err)?;
    to_py(py, &ps::gen_retain_pool(anchor, &conf, &unrel, n_ret, seed).map_err(err)?)
}

#[pymodule]
fn gu_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", ex::TOOL_VERSION)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyLab>()?;
    m.add_function(wrap_pyfunction!(desk_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(reflect, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(stabilized_cosine, m)?)?;
    m.add_function(wrap_pyfunction!(pca, m)?)?;
    m.add_function(wrap_pyfunction!(kl_div, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(privleak, m)?)?;
    m.add_function(wrap_pyfunction!(mia_min_k, m)?)?;
    m.add_function(wrap_pyfunction!(zlib_len, m)?)?;
    m.add_function(wrap_pyfunction!(model_utility, m)?)?;
    m.add_function(wrap_pyfunction!(virtual_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(safe_references, m)?)?;
    m.add_function(wrap_pyfunction!(retain_pool, m)?)?;
    Ok(())
}
