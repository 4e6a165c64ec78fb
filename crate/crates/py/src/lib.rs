use std::error::Error;
use std::path::Path;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use shiftgrid::cunet::{CUNetConfig, CUNetModel, Variant};
use shiftgrid::ingest::{self, IndividualSample, IngestConfig};
use shiftgrid::metrics::{self, MetricsReport};
use shiftgrid::synth::{self, SynthConfig};
use shiftgrid::trainer::{self, Checkpoint, TrainConfig};

/// I/O failures anywhere in the source chain become `OSError`, everything
/// else `ValueError`.
fn py_err<E: Error + 'static>(e: E) -> PyErr {
    let mut cur: Option<&(dyn Error + 'static)> = Some(&e);
    while let Some(err) = cur {
        if err.is::<std::io::Error>() {
            return PyOSError::new_err(e.to_string());
        }
        cur = err.source();
    }
    PyValueError::new_err(e.to_string())
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    text.map_or_else(|| Ok(T::default()), |t| serde_json::from_str(t).map_err(py_err))
}

fn parse_variant(name: &str) -> PyResult<Variant> {
    Variant::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown variant {name:?}")))
}

/// One individual: pre/post grids, reliance vector and spatial context.
#[pyclass(name = "Sample", module = "shiftgrid", frozen, from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: IndividualSample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn user_id(&self) -> u64 {
        self.inner.user_id
    }

    #[getter]
    fn g(&self) -> usize {
        self.inner.g()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn crop_offset(&self) -> (u32, u32) {
        self.inner.v_pre.crop_offset
    }

    /// Row-major `g*g` bitmap.
    #[getter]
    fn v_pre(&self) -> Vec<u8> {
        self.inner.v_pre.bitmap.clone()
    }

    #[getter]
    fn v_post(&self) -> Vec<u8> {
        self.inner.v_post.bitmap.clone()
    }

    #[getter]
    fn sir(&self) -> Vec<f64> {
        self.inner.sir.values.clone()
    }

    /// Category-major `k*g*g` values.
    #[getter]
    fn sc(&self) -> Vec<f64> {
        self.inner.sc.values.clone()
    }

    fn __repr__(&self) -> String {
        format!("Sample(user_id={}, g={}, k={})", self.inner.user_id, self.inner.g(), self.inner.k())
    }
}

fn unwrap_samples(samples: &[PySample]) -> Vec<IndividualSample> {
    samples.iter().map(|s| s.inner.clone()).collect()
}

fn wrap_samples(samples: Vec<IndividualSample>) -> Vec<PySample> {
    samples.into_iter().map(|inner| PySample { inner }).collect()
}

/// A conditioned UNet with fixed weights.
#[pyclass(name = "Model", module = "shiftgrid", frozen)]
struct PyModel {
    inner: CUNetModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (g, k, variant = "full", base_channels = 32, seed = 0, mlp_hidden = 64, mlp_layers = 2, attention_token_budget = 64))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        g: usize,
        k: usize,
        variant: &str,
        base_channels: usize,
        seed: u64,
        mlp_hidden: usize,
        mlp_layers: usize,
        attention_token_budget: usize,
    ) -> PyResult<Self> {
        let config = CUNetConfig {
            base_channels,
            seed,
            mlp_hidden,
            mlp_layers,
            attention_token_budget,
            ..CUNetConfig::new(g, k, parse_variant(variant)?)
        };
        Ok(Self { inner: CUNetModel::build(config).map_err(py_err)? })
    }

    /// Loads the weights of a saved checkpoint directory.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(Path::new(path)).map_err(py_err)?;
        Ok(Self { inner: ckpt.model().map_err(py_err)? })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config().variant.slug()
    }

    #[getter]
    fn g(&self) -> usize {
        self.inner.config().g
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.config().k
    }

    fn parameter_count(&self) -> usize {
        self.inner.count_parameters()
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(py_err)
    }

    /// Probability maps, one row-major `g*g` list per sample.
    #[pyo3(signature = (samples, batch_size = 16))]
    fn predict(&self, py: Python<'_>, samples: Vec<PySample>, batch_size: usize) -> PyResult<Vec<Vec<f32>>> {
        let samples = unwrap_samples(&samples);
        py.detach(|| metrics::predict_maps(&self.inner, &samples, batch_size)).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Model(variant={}, g={}, k={}, base_channels={})", c.variant.slug(), c.g, c.k, c.base_channels)
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("overall", r.overall)?;
    d.set_item("visited", r.visited)?;
    d.set_item("unvisited", r.unvisited)?;
    d.set_item("cellwise", r.cellwise)?;
    d.set_item("n_overall", r.n_overall)?;
    d.set_item("n_visited", r.n_visited)?;
    d.set_item("n_unvisited", r.n_unvisited)?;
    Ok(d)
}

/// Generates a synthetic world into `out_dir` and returns the
/// `(train, val, test)` user ids.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None, g = 32))]
fn generate_synthetic(py: Python<'_>, out_dir: &str, config: Option<&str>, g: usize) -> PyResult<(Vec<u64>, Vec<u64>, Vec<u64>)> {
    let cfg: SynthConfig = parse_json(config)?;
    let dir = Path::new(out_dir);
    let data = py.detach(|| synth::generate_dataset(&cfg)).map_err(py_err)?;
    data.write(dir).map_err(py_err)?;
    let ingest = serde_json::to_string_pretty(&cfg.ingest_config(g)).map_err(py_err)?;
    std::fs::write(dir.join("ingest_config.json"), ingest + "\n").map_err(py_err)?;
    let s = data.splits;
    Ok((s.train, s.val, s.test))
}

/// Builds samples from raw tables. `config` is an ingest-config JSON string.
#[pyfunction]
fn build_samples(py: Python<'_>, trajectories: &str, pois: &str, config: &str) -> PyResult<Vec<PySample>> {
    let cfg: IngestConfig = serde_json::from_str(config).map_err(py_err)?;
    let records = ingest::load_trajectories(Path::new(trajectories), cfg.world_dims(), cfg.total_days()).map_err(py_err)?;
    let table = ingest::load_pois(Path::new(pois), cfg.world_dims(), cfg.k).map_err(py_err)?;
    let built = py.detach(|| ingest::build_samples(&records, &table, &cfg)).map_err(py_err)?;
    Ok(wrap_samples(built.samples))
}

#[pyfunction]
fn load_split(dir: &str) -> PyResult<Vec<PySample>> {
    let (_, samples) = ingest::read_split(Path::new(dir)).map_err(py_err)?;
    Ok(wrap_samples(samples))
}

#[pyfunction]
fn write_split(dir: &str, samples: Vec<PySample>) -> PyResult<()> {
    let samples = unwrap_samples(&samples);
    let first = samples.first().ok_or_else(|| PyValueError::new_err("no samples"))?;
    ingest::write_split(Path::new(dir), &samples, first.g(), first.k()).map_err(py_err)?;
    Ok(())
}

/// Trains `model` and returns the best-validation model with the epoch log.
/// `config` is a training-config JSON string; `checkpoint_dir` receives the
/// best checkpoint when given.
#[pyfunction]
#[pyo3(signature = (model, train, val, config = None, checkpoint_dir = None))]
fn train<'py>(
    py: Python<'py>,
    model: &PyModel,
    train: Vec<PySample>,
    val: Vec<PySample>,
    config: Option<&str>,
    checkpoint_dir: Option<&str>,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let cfg: TrainConfig = parse_json(config)?;
    let (train, val) = (unwrap_samples(&train), unwrap_samples(&val));
    let start = model.inner.clone();
    let outcome = py.detach(|| trainer::fit(start, &train, &val, &cfg)).map_err(py_err)?;
    if let Some(dir) = checkpoint_dir {
        outcome.best.save(Path::new(dir)).map_err(py_err)?;
    }
    let log = outcome
        .log
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("train_loss", e.train_loss)?;
            d.set_item("val_loss", e.val_loss)?;
            d.set_item("lr", e.lr)?;
            d.set_item("grad_clip_rate", e.grad_clip_rate)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let best = outcome.best.model().map_err(py_err)?;
    Ok((PyModel { inner: best }, log))
}

/// Aggregated accuracy of `model` on `samples`.
#[pyfunction]
#[pyo3(signature = (model, samples, threshold = 0.5, batch_size = 16))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    samples: Vec<PySample>,
    threshold: f64,
    batch_size: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let samples = unwrap_samples(&samples);
    let report = py
        .detach(|| metrics::evaluate_model(&model.inner, &samples, threshold, batch_size))
        .map_err(py_err)?;
    report_dict(py, &report)
}

/// Overall, visited and unvisited accuracy of one binary prediction.
#[pyfunction]
fn accuracy_metrics<'py>(py: Python<'py>, pred_bin: Vec<u8>, v_post: Vec<u8>, v_pre: Vec<u8>) -> PyResult<Bound<'py, PyDict>> {
    let report = metrics::accuracy_metrics(&pred_bin, &v_post, &v_pre).map_err(py_err)?;
    report_dict(py, &report)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::cosine_similarity(&a, &b).map_err(py_err)
}

/// `(uid_a, uid_b, pre_cosine, sir_cosine)` for similar-history,
/// different-reliance pairs.
#[pyfunction]
#[pyo3(signature = (samples, pre_sim_min = metrics::DEFAULT_PRE_SIM_MIN, sir_sim_max = metrics::DEFAULT_SIR_SIM_MAX))]
fn find_similar_pairs(samples: Vec<PySample>, pre_sim_min: f64, sir_sim_max: f64) -> Vec<(u64, u64, f64, f64)> {
    metrics::find_similar_pairs(&unwrap_samples(&samples), pre_sim_min, sir_sim_max)
        .into_iter()
        .map(|p| (p.uid_a, p.uid_b, p.pre_cosine, p.sir_cosine))
        .collect()
}

/// Mean absolute difference between the two predicted maps.
#[pyfunction]
fn pair_divergence(model: &PyModel, a: &PySample, b: &PySample) -> PyResult<f64> {
    Ok(metrics::pair_divergence(&model.inner, &a.inner, &b.inner).map_err(py_err)?.map_l1_mean)
}

/// Visit-ratio weight `1 + (w_max - 1)(1 - r)` of one target grid.
#[pyfunction]
#[pyo3(signature = (grid, w_max = 10.0))]
fn sample_weight(grid: Vec<u8>, w_max: f64) -> f64 {
    trainer::sample_weight(trainer::visit_ratio(&grid), w_max)
}

#[pymodule(name = "shiftgrid")]
fn shiftgrid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("VARIANTS", Variant::ALL.map(Variant::slug).to_vec())?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(build_samples, m)?)?;
    m.add_function(wrap_pyfunction!(load_split, m)?)?;
    m.add_function(wrap_pyfunction!(write_split, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(find_similar_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(pair_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(sample_weight, m)?)?;
    Ok(())
}
