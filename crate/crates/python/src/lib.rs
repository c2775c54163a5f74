//! Python bindings. Tensors cross the boundary as a shape plus a flat
//! row-major list of floats; configs cross as TOML text.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use vfda::expcli::{self, ExpError, ExperimentConfig};
use vfda::federation::{self as fed, ClientUpdate, LayerStats};
use vfda::tensor::Tensor;
use vfda::vfda::{self as core, ChannelStats, PrototypeVariance};

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn exp_err(e: ExpError) -> PyErr {
    match e {
        ExpError::Config(_) => value_err(e),
        _ => runtime_err(e),
    }
}

/// Dense float64 array with an explicit shape.
#[pyclass(name = "Tensor", module = "pyvfda", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: Tensor::new(shape, data).map_err(value_err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Per-(batch, channel) spatial mean and stabilized std of a 5-D feature map.
#[pyfunction]
#[pyo3(signature = (z, eps_var = core::EPS_VAR))]
fn channel_stats(z: &PyTensor, eps_var: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = core::channel_stats(&z.inner, eps_var).map_err(value_err)?;
    Ok((s.mu().to_vec(), s.sigma().to_vec()))
}

/// Variance of the statistics across the batch axis, per channel.
#[pyfunction]
fn local_stat_variance(mu: Vec<f64>, sigma: Vec<f64>, batch: usize, channels: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let stats = ChannelStats::new(batch, channels, mu, sigma).map_err(value_err)?;
    let v = core::local_stat_variance(&stats);
    Ok((v.var_mu, v.var_sigma))
}

/// Population variance across clients of their accumulated statistics.
#[pyfunction]
fn global_stat_variance(mu_bar: Vec<Vec<f64>>, sigma_bar: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let v = fed::global_stat_variance(&mu_bar, &sigma_bar).map_err(value_err)?;
    Ok((v.var_mu, v.var_sigma))
}

#[pyfunction]
#[pyo3(signature = (round, eta0 = core::DEFAULT_ETA0))]
fn emd_factor(round: u32, eta0: f64) -> f64 {
    core::emd_factor(round, eta0)
}

/// Renormalizes `z` with statistics sampled around its own, using the given
/// combined variances. Deterministic in `seed`.
#[pyfunction]
#[pyo3(signature = (z, var_mu, var_sigma, seed, eps_var = core::EPS_VAR))]
fn vfda_augment(z: &PyTensor, var_mu: Vec<f64>, var_sigma: Vec<f64>, seed: u64, eps_var: f64) -> PyResult<PyTensor> {
    let stats = core::channel_stats(&z.inner, eps_var).map_err(value_err)?;
    let combined = PrototypeVariance { var_mu, var_sigma };
    if !combined.is_valid() {
        return Err(value_err("variances must be finite, non-negative and of equal length"));
    }
    let mut rng = vfda::rng::substream(seed, "python", &[]);
    let sampled = core::sample_statistics(&stats, &combined, &mut rng, eps_var).map_err(value_err)?;
    let (out, _) = core::vfda_forward(&z.inner, &stats, &sampled).map_err(value_err)?;
    Ok(PyTensor { inner: out })
}

#[pyfunction]
fn dice_score(pred: Vec<u8>, gt: Vec<u8>, class_id: u8) -> PyResult<f64> {
    expcli::dice_score(&pred, &gt, class_id).map_err(value_err)
}

/// Sample-weighted average of `(client_id, sample_count, params)` triples.
#[pyfunction]
fn aggregate(updates: Vec<(u32, u32, Vec<f64>)>) -> PyResult<Vec<f64>> {
    let updates: Vec<ClientUpdate> = updates
        .into_iter()
        .map(|(client_id, sample_count, params)| ClientUpdate {
            client_id,
            sample_count,
            params,
            stats: vec![],
        })
        .collect();
    fed::aggregate_weights(&updates).map_err(value_err)
}

/// FVM1 encoding of a client update. `stats` holds one `(mu_bar, sigma_bar)`
/// pair per encoder level.
#[pyfunction]
fn encode_update<'py>(
    py: Python<'py>,
    client_id: u32,
    sample_count: u32,
    params: Vec<f64>,
    stats: Vec<(Vec<f64>, Vec<f64>)>,
) -> PyResult<Bound<'py, PyBytes>> {
    let update = ClientUpdate {
        client_id,
        sample_count,
        params,
        stats: stats
            .into_iter()
            .map(|(mu_bar, sigma_bar)| LayerStats { mu_bar, sigma_bar })
            .collect(),
    };
    let bytes = fed::serialize_update(&update).map_err(value_err)?;
    Ok(PyBytes::new(py, &bytes))
}

#[allow(clippy::type_complexity)]
#[pyfunction]
fn decode_update(data: &[u8]) -> PyResult<(u32, u32, Vec<f64>, Vec<(Vec<f64>, Vec<f64>)>)> {
    let u = fed::deserialize_update(data).map_err(value_err)?;
    let stats = u.stats.into_iter().map(|s| (s.mu_bar, s.sigma_bar)).collect();
    Ok((u.client_id, u.sample_count, u.params, stats))
}

fn config_from(text: &str) -> PyResult<ExperimentConfig> {
    expcli::parse_config_str(text).map_err(value_err)
}

/// Validates a TOML config and returns it with every default spelled out.
#[pyfunction]
fn parse_config(text: &str) -> PyResult<String> {
    Ok(config_from(text)?.to_toml())
}

/// Writes the synthetic dataset to `out_dir` and returns its hash.
#[pyfunction]
fn gen_data(config: &str, out_dir: PathBuf) -> PyResult<String> {
    let mut cfg = config_from(config)?;
    cfg.out_dir = out_dir;
    Ok(expcli::cmd_gen_data(&cfg).map_err(exp_err)?.hash())
}

/// Runs a full training job into `out_dir`; returns `(round, global dice_mean)` per round.
#[pyfunction]
fn train(config: &str, out_dir: PathBuf) -> PyResult<Vec<(u32, f64)>> {
    let mut cfg = config_from(config)?;
    cfg.out_dir = out_dir;
    let out = expcli::cmd_train(&cfg).map_err(exp_err)?;
    Ok(out
        .logs
        .iter()
        .map(|l| (l.round, l.global.as_ref().map_or(f64::NAN, |g| g.dice_mean)))
        .collect())
}

/// Evaluates a saved model on a directory of volumes; returns the report as JSON.
#[pyfunction]
fn evaluate(model_path: PathBuf, data_dir: PathBuf) -> PyResult<String> {
    let report = expcli::cmd_eval(&model_path, &data_dir, None).map_err(exp_err)?;
    expcli::report_json(&report).map_err(exp_err)
}

/// In-memory federation over freshly generated data, stepped one round at a time.
#[pyclass(name = "Federation", module = "pyvfda")]
pub struct PyFederation {
    inner: fed::Federation,
}

#[pymethods]
impl PyFederation {
    #[new]
    fn new(config: &str) -> PyResult<Self> {
        let cfg = config_from(config)?;
        let data = expcli::generate_dataset(&cfg).map_err(exp_err)?;
        let inner = fed::Federation::new(cfg.federation, cfg.network, data.shards, data.heldout, cfg.seed)
            .map_err(runtime_err)?;
        Ok(PyFederation { inner })
    }

    #[getter]
    fn next_round(&self) -> u32 {
        self.inner.next_round()
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.is_finished()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.model().flat_params()
    }

    /// Global `(var_mu, var_sigma)` per encoder level.
    fn global_variances(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.inner
            .global_variances()
            .iter()
            .map(|v| (v.var_mu.clone(), v.var_sigma.clone()))
            .collect()
    }

    /// Runs one round and returns its log as a dict.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let log = self.inner.step().map_err(runtime_err)?;
        let d = PyDict::new(py);
        d.set_item("round", log.round)?;
        let losses: Vec<(u32, f64, f64)> = log.clients.iter().map(|c| (c.client_id, c.loss_ce, c.loss_dice)).collect();
        d.set_item("client_losses", losses)?;
        if let Some(g) = &log.global {
            d.set_item("dice", g.dice.clone())?;
            d.set_item("dice_mean", g.dice_mean)?;
        }
        Ok(d)
    }
}

#[pymodule]
fn pyvfda(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyFederation>()?;
    m.add_function(wrap_pyfunction!(channel_stats, m)?)?;
    m.add_function(wrap_pyfunction!(local_stat_variance, m)?)?;
    m.add_function(wrap_pyfunction!(global_stat_variance, m)?)?;
    m.add_function(wrap_pyfunction!(emd_factor, m)?)?;
    m.add_function(wrap_pyfunction!(vfda_augment, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(encode_update, m)?)?;
    m.add_function(wrap_pyfunction!(decode_update, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
