//! Python bindings: configs, the label/difficulty/pairing algebra, the
//! classifier, and the training pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use semix::config::RunConfig;
use semix::corpus::{self, Example};
use semix::difficulty::{self, DifficultyScore};
use semix::encoder::{self, ModelConfig, ParamStore};
use semix::evalkit::{self, Stage1Cache};
use semix::mixup::{self, LambdaDist};
use semix::pairing;
use semix::rng;
use semix::smoothing::{self, SoftLabel};
use semix::trainer;
use semix::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::Data(_) | Error::Shape { .. } | Error::Numeric(_) | Error::NoPartner(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for semix::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Flat key=value run configuration.
#[pyclass(name = "Config", module = "semix_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, optionally overridden by `key=value` text and keyword
    /// arguments.
    #[new]
    #[pyo3(signature = (text = None, **overrides))]
    fn new(text: Option<&str>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = match text {
            Some(t) => RunConfig::from_text(t).py()?,
            None => RunConfig::default(),
        };
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string();
                let value = match value.as_str() {
                    "True" => "true".to_string(),
                    "False" => "false".to_string(),
                    _ => value,
                };
                inner.set(&key, &value).py()?;
            }
        }
        inner.train_config().py()?;
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).py()
    }

    fn get(&self, key: &str) -> PyResult<String> {
        if !RunConfig::is_key(key) {
            return Err(PyValueError::new_err(format!("unknown config key {key:?}")));
        }
        Ok(self.inner.get(key).to_string())
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn __repr__(&self) -> String {
        format!("Config(fingerprint={:?})", self.inner.fingerprint())
    }
}

/// The classifier's parameters.
#[pyclass(name = "Model", module = "semix_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    params: ParamStore,
    config: ModelConfig,
}

impl PyModel {
    fn example(&self, token_ids: Vec<usize>) -> PyResult<Example> {
        if let Some(bad) = token_ids.iter().find(|t| **t >= self.config.vocab_size) {
            return Err(PyValueError::new_err(format!("token id {bad} outside the vocabulary")));
        }
        Example::new(0, token_ids, 0, self.config.num_classes).py()
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (vocab_size, num_classes, embed_dim = 64, num_blocks = 2, seed = 0))]
    fn new(vocab_size: usize, num_classes: usize, embed_dim: usize, num_blocks: usize, seed: u64) -> PyResult<Self> {
        let config = ModelConfig {
            vocab_size,
            embed_dim,
            num_blocks,
            hidden_dim: embed_dim,
            num_classes,
            max_len: corpus::DEFAULT_MAX_LEN,
        };
        let params = ParamStore::init(&config, seed).py()?;
        Ok(Self { params, config })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, config) = encoder::load_checkpoint(&path).py()?;
        Ok(Self { params, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        encoder::save_checkpoint(&self.params, &self.config, &path).py()
    }

    /// Class distribution for one token-id sequence.
    fn predict_proba(&self, token_ids: Vec<usize>) -> PyResult<Vec<f32>> {
        let e = self.example(token_ids)?;
        Ok(encoder::forward(&self.params, &e).py()?.probs.into_data())
    }

    /// Pooled sentence representation.
    fn represent(&self, token_ids: Vec<usize>) -> PyResult<Vec<f32>> {
        let e = self.example(token_ids)?;
        pairing::represent(&self.params, &e).py()
    }

    /// Per-position saliency for the given label.
    fn saliency(&self, token_ids: Vec<usize>, label: usize) -> PyResult<Vec<f64>> {
        let e = Example::new(0, self.example(token_ids)?.token_ids, label, self.config.num_classes).py()?;
        mixup::saliency(&self.params, &e).py()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(vocab_size={}, num_classes={}, embed_dim={}, num_blocks={})",
            self.config.vocab_size, self.config.num_classes, self.config.embed_dim, self.config.num_blocks
        )
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    corpus::tokenize(text)
}

/// `p[label] − max_{j≠label} p[j]`.
#[pyfunction]
fn margin(probs: Vec<f64>, label: usize) -> PyResult<f64> {
    difficulty::margin(&probs, label).py()
}

/// Median split of difficulty scores (ids are list positions):
/// `(easy_ids, hard_ids, threshold)`.
#[pyfunction]
fn partition_by_median(scores: Vec<f64>) -> PyResult<(Vec<usize>, Vec<usize>, f64)> {
    let s: Vec<DifficultyScore> = scores
        .into_iter()
        .enumerate()
        .map(|(i, d)| DifficultyScore {
            example_id: i,
            d,
            probs: vec![],
        })
        .collect();
    let p = difficulty::partition_by_median(&s).py()?;
    Ok((p.easy, p.hard, p.threshold))
}

#[pyfunction]
fn cosine(u: Vec<f32>, v: Vec<f32>) -> PyResult<f64> {
    pairing::cosine(&u, &v).py()
}

/// `(partner_id, similarity)` for the anchor within the subset.
#[pyfunction]
fn nearest_partner(anchor_id: usize, subset: Vec<usize>, reprs: BTreeMap<usize, Vec<f32>>) -> PyResult<(usize, f64)> {
    let a = pairing::nearest_partner(anchor_id, &subset, &reprs).py()?;
    Ok((a.partner_id, a.similarity))
}

#[pyfunction]
fn smooth_uniform(one_hot: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    Ok(smoothing::smooth_uniform(&one_hot, alpha).py()?.into_inner())
}

#[pyfunction]
fn smooth_instance(one_hot: Vec<f64>, reference: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    Ok(smoothing::smooth_instance(&one_hot, &reference, alpha).py()?.into_inner())
}

#[pyfunction]
fn mix_labels(a: Vec<f64>, b: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    let a = SoftLabel::new(a).py()?;
    let b = SoftLabel::new(b).py()?;
    Ok(mixup::mix_labels(&a, &b, lam).py()?.into_inner())
}

#[pyfunction]
fn soft_cross_entropy(targets: Vec<Vec<f64>>, probs: Vec<Vec<f64>>) -> PyResult<f64> {
    let t = targets.into_iter().map(SoftLabel::new).collect::<semix::Result<Vec<_>>>().py()?;
    smoothing::soft_cross_entropy(&t, &probs).py()
}

#[pyfunction]
fn span_length(anchor_len: usize, partner_len: usize, lambda_target: f64) -> usize {
    mixup::span_length(anchor_len, partner_len, lambda_target)
}

/// `n` draws of the mixing weight from `dist` (`beta:a` or `fixed:v`).
#[pyfunction]
#[pyo3(signature = (dist, n, seed = 0))]
fn sample_lambdas(dist: &str, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    let d: LambdaDist = dist.parse().py()?;
    let mut r = rng::stream(seed, &[rng::tag::LAMBDA]);
    (0..n).map(|_| mixup::sample_lambda(&mut r, d).py()).collect()
}

#[pyfunction]
fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> PyResult<f64> {
    trainer::lr_schedule(step, total_steps, base_lr, warmup_fraction).py()
}

/// Train both stages for one seed; returns accuracies and the final model.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<(Bound<'py, PyDict>, PyModel)> {
    let cfg = config.inner.clone();
    let run = py
        .detach(|| evalkit::run_pipeline(&cfg, evalkit::source_for(&cfg).as_ref(), None))
        .py()?;
    let d = PyDict::new(py);
    d.set_item("seed", run.seed)?;
    d.set_item("stage1_dev_accuracy", run.stage1.record.best_dev_accuracy)?;
    d.set_item("dev_accuracy", run.dev_accuracy())?;
    d.set_item("test_accuracy", run.test_accuracy())?;
    d.set_item("easy_ids", run.stage2.partition.as_ref().map(|p| p.easy.clone()))?;
    d.set_item("hard_ids", run.stage2.partition.as_ref().map(|p| p.hard.clone()))?;
    d.set_item("batchlog", trainer::batchlog_tsv(&run.stage2.batch_log))?;
    let model = PyModel {
        params: run.final_params().clone(),
        config: run.model_config,
    };
    Ok((d, model))
}

/// Aggregate test-at-best-dev accuracy over seeds.
#[pyfunction]
fn multi_seed<'py>(py: Python<'py>, config: &PyConfig, seeds: Vec<u64>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let report = py
        .detach(|| {
            let source = evalkit::source_for(&cfg);
            evalkit::multi_seed(&cfg, &seeds, source.as_ref(), &mut Stage1Cache::default())
        })
        .py()?;
    let d = PyDict::new(py);
    d.set_item("mean", report.mean)?;
    d.set_item("sd", report.sd)?;
    d.set_item("dev_mean", report.dev_mean)?;
    d.set_item("dev_sd", report.dev_sd)?;
    d.set_item("n_seeds", report.n_seeds)?;
    d.set_item("fingerprint", report.fingerprint)?;
    let per_seed: Vec<(u64, f64, f64)> = report
        .per_seed
        .iter()
        .map(|r| (r.seed, r.dev_accuracy, r.test_accuracy))
        .collect();
    d.set_item("per_seed", per_seed)?;
    d.set_item("failures", report.failures)?;
    Ok(d)
}

#[pymodule]
fn semix_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(margin, m)?)?;
    m.add_function(wrap_pyfunction!(partition_by_median, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(nearest_partner, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_uniform, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_instance, m)?)?;
    m.add_function(wrap_pyfunction!(mix_labels, m)?)?;
    m.add_function(wrap_pyfunction!(soft_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(span_length, m)?)?;
    m.add_function(wrap_pyfunction!(sample_lambdas, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(multi_seed, m)?)?;
    Ok(())
}
