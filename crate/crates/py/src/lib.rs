//! Python bindings. Matrices cross the boundary as lists of rows and vectors
//! as lists of floats.

use std::path::PathBuf;

use attnlab_core as core;
use core::attention::{self, AttentionParams};
use core::bayes::RidgePrior;
use core::data::{self, DataDistribution, Prompt, TaskDistribution};
use core::gaussian::{GaussianSpec, NoiseSpec, RngStream};
use core::linalg::{Mat, Vector};
use core::theory::{self, TestEnvironment};
use core::{config, figures, harness, oracles, params_io, pretrain};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_mat(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(PyValueError::new_err("matrix rows have unequal lengths"));
    }
    Ok(Mat::from_fn(n, c, |i, j| rows[i][j]))
}

fn from_mat(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_vec(v: Vec<f64>) -> Vector {
    Vector::from_vec(v)
}

fn from_vec(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Inputs `N(x_mean, x_cov)`, tasks `N(w_mean, w_cov)`, label noise with
/// standard deviation `noise_std`.
#[pyclass(name = "DataDistribution", frozen)]
struct PyDataDistribution {
    inner: DataDistribution,
}

#[pymethods]
impl PyDataDistribution {
    #[new]
    fn new(
        x_mean: Vec<f64>,
        x_cov: Vec<Vec<f64>>,
        w_mean: Vec<f64>,
        w_cov: Vec<Vec<f64>>,
        noise_std: f64,
    ) -> PyResult<Self> {
        let inner = DataDistribution::new(
            GaussianSpec::new(to_vec(x_mean), to_mat(x_cov)?).map_err(err)?,
            TaskDistribution::new(GaussianSpec::new(to_vec(w_mean), to_mat(w_cov)?).map_err(err)?),
            NoiseSpec::from_std(noise_std).map_err(err)?,
        )
        .map_err(err)?;
        Ok(Self { inner })
    }

    /// Standard normal inputs and tasks.
    #[staticmethod]
    fn isotropic(d: usize, noise_std: f64) -> PyResult<Self> {
        Ok(Self {
            inner: DataDistribution::isotropic(d, noise_std).map_err(err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn sample_prompt(&self, l: usize, seed: u64, stream: u64) -> PyResult<PyPrompt> {
        let inner = data::sample_prompt(&self.inner, l, &RngStream::new(seed, stream)).map_err(err)?;
        Ok(PyPrompt { inner })
    }
}

#[pyclass(name = "Prompt", frozen)]
struct PyPrompt {
    inner: Prompt,
}

#[pymethods]
impl PyPrompt {
    #[new]
    fn new(inputs: Vec<Vec<f64>>, labels: Vec<f64>, true_query_label: f64, task_vector: Vec<f64>) -> PyResult<Self> {
        let inner = Prompt::new(to_mat(inputs)?, to_vec(labels), true_query_label, to_vec(task_vector)).map_err(err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        from_mat(self.inner.inputs())
    }

    #[getter]
    fn labels(&self) -> Vec<f64> {
        from_vec(self.inner.labels())
    }

    #[getter]
    fn query(&self) -> Vec<f64> {
        from_vec(&self.inner.query())
    }

    #[getter]
    fn true_query_label(&self) -> f64 {
        self.inner.true_query_label()
    }

    #[getter]
    fn task_vector(&self) -> Vec<f64> {
        from_vec(self.inner.task_vector())
    }
}

#[pyclass(name = "AttentionParams", frozen)]
struct PyAttentionParams {
    inner: AttentionParams,
}

#[pymethods]
impl PyAttentionParams {
    #[new]
    fn new(m11: Vec<Vec<f64>>, m21: Vec<f64>, v21: Vec<f64>, v22: f64, tau: f64) -> PyResult<Self> {
        let inner = AttentionParams::new(to_mat(m11)?, to_vec(m21), to_vec(v21), v22, tau).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn m11(&self) -> Vec<Vec<f64>> {
        from_mat(&self.inner.m11)
    }

    #[getter]
    fn m21(&self) -> Vec<f64> {
        from_vec(&self.inner.m21)
    }

    #[getter]
    fn v21(&self) -> Vec<f64> {
        from_vec(&self.inner.v21)
    }

    #[getter]
    fn v22(&self) -> f64 {
        self.inner.v22
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn with_tau(&self, tau: f64) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_tau(tau).map_err(err)?,
        })
    }

    /// True when every scale assumption holds with constant `c` at length `l`.
    fn satisfies_scale(&self, c: f64, l: usize) -> bool {
        self.inner.scale_check(c, l).all_ok()
    }

    fn to_text(&self) -> String {
        params_io::params_to_string(&self.inner)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: params_io::params_from_str(text).map_err(err)?,
        })
    }

    fn __eq__(&self, other: PyRef<'_, Self>) -> bool {
        self.inner == other.inner
    }
}

/// `(y_hat, w_att, b_att)` of the linearized model.
#[pyfunction]
fn predict_linearized(prompt: PyRef<'_, PyPrompt>, params: PyRef<'_, PyAttentionParams>) -> PyResult<(f64, Vec<f64>, f64)> {
    let p = attention::predict_linearized(&prompt.inner, &params.inner).map_err(err)?;
    Ok((p.y_hat, from_vec(&p.w_att), p.b_att))
}

#[pyfunction]
fn predict_linear_attention(prompt: PyRef<'_, PyPrompt>, params: PyRef<'_, PyAttentionParams>) -> PyResult<f64> {
    attention::predict_linear_attention(&prompt.inner, &params.inner).map_err(err)
}

#[pyfunction]
fn bayes_predict(prompt: PyRef<'_, PyPrompt>, mu0: Vec<f64>, sigma0: Vec<Vec<f64>>, noise_var: f64) -> PyResult<f64> {
    let prior = RidgePrior::new(to_vec(mu0), to_mat(sigma0)?, noise_var).map_err(err)?;
    core::bayes::bayes_predict(&prompt.inner, &prior).map_err(err)
}

#[pyfunction]
fn softmax_map(z: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    Ok(from_vec(&attention::softmax_map(&to_vec(z), tau).map_err(err)?))
}

#[pyfunction]
fn linearized_softmax_map(z: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    Ok(from_vec(&attention::linearized_softmax_map(&to_vec(z), tau).map_err(err)?))
}

/// Parameters built from the distribution's exact moments.
#[pyfunction]
fn pretrain_population(dist: PyRef<'_, PyDataDistribution>, l: usize) -> PyResult<PyAttentionParams> {
    Ok(PyAttentionParams {
        inner: pretrain::pretrain_population(&dist.inner, l).map_err(err)?,
    })
}

/// Parameters estimated from `m` sampled pretraining prompts.
#[pyfunction]
fn pretrain_sampled(dist: PyRef<'_, PyDataDistribution>, m: usize, l: usize, seed: u64) -> PyResult<PyAttentionParams> {
    let corpus = pretrain::PretrainCorpus::sample(&dist.inner, m, l, &RngStream::new(seed, 0)).map_err(err)?;
    let stats = pretrain::estimate_task_stats(&corpus).map_err(err)?;
    Ok(PyAttentionParams {
        inner: pretrain::pretrain_params(&corpus, &stats).map_err(err)?,
    })
}

/// Coefficients `(a, b, c)` of `G(tau) = a/tau^2 - b/tau + c`.
#[pyfunction]
fn error_curve(params: PyRef<'_, PyAttentionParams>, test: PyRef<'_, PyDataDistribution>, l: usize) -> PyResult<(f64, f64, f64)> {
    let env = TestEnvironment::from_distribution(&test.inner, l).map_err(err)?;
    let c = theory::error_curve(&params.inner, &env).map_err(err)?;
    Ok((c.a, c.b, c.c))
}

#[pyfunction]
fn generalization_error(params: PyRef<'_, PyAttentionParams>, test: PyRef<'_, PyDataDistribution>, l: usize) -> PyResult<f64> {
    let env = TestEnvironment::from_distribution(&test.inner, l).map_err(err)?;
    theory::generalization_error(&params.inner, &env).map_err(err)
}

/// `2a/b`, or None when the optimum is undefined.
#[pyfunction]
fn optimal_temperature(a: f64, b: f64, c: f64) -> Option<f64> {
    theory::optimal_temperature(&theory::ErrorCurve { a, b, c }).value()
}

#[pyfunction]
#[pyo3(signature = (m11, sigma_x, scale=None))]
fn heuristic_temperature(m11: Vec<Vec<f64>>, sigma_x: Vec<Vec<f64>>, scale: Option<f64>) -> PyResult<Option<f64>> {
    let m11 = to_mat(m11)?;
    let scale = scale.unwrap_or_else(|| theory::default_heuristic_scale(m11.nrows()));
    Ok(theory::heuristic_temperature(&m11, &to_mat(sigma_x)?, scale).map_err(err)?.value())
}

#[pyfunction]
fn moment_sandwich(n: usize, divisor: usize, sigma: Vec<Vec<f64>>, a: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(from_mat(&theory::moment_sandwich(n, divisor, &to_mat(sigma)?, &to_mat(a)?).map_err(err)?))
}

/// `(mean, stderr)` of the squared query error over fresh prompts.
#[pyfunction]
fn mc_generalization_error(
    params: PyRef<'_, PyAttentionParams>,
    dist: PyRef<'_, PyDataDistribution>,
    l: usize,
    n_prompts: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let e = harness::mc_generalization_error(&params.inner, &dist.inner, l, n_prompts, &RngStream::new(seed, 0))
        .map_err(err)?;
    Ok((e.mean, e.stderr))
}

/// Runs every scenario of a config document and returns the CSV text.
#[pyfunction]
#[pyo3(signature = (text, overrides=Vec::new()))]
fn run_config(py: Python<'_>, text: &str, overrides: Vec<String>) -> PyResult<String> {
    let set = config::parse_config(text, &overrides).map_err(err)?;
    py.detach(|| {
        let reports = figures::run_set(&set, |_| {})?;
        harness::to_csv_string(&reports.iter().collect::<Vec<_>>())
    })
    .map_err(err)
}

/// Runs a bundled figure into `out_dir`; returns the CSV path.
#[pyfunction]
#[pyo3(signature = (figure, out_dir, overrides=Vec::new()))]
fn reproduce(py: Python<'_>, figure: &str, out_dir: PathBuf, overrides: Vec<String>) -> PyResult<PathBuf> {
    py.detach(|| figures::reproduce(figure, &overrides, &out_dir, |_| {}))
        .map_err(err)
}

/// `(passed, detail)` for one of "moments", "taylor", "argmin".
#[pyfunction]
fn oracle(which: &str, trials: usize, seed: u64) -> PyResult<(bool, String)> {
    let r = match which {
        "moments" => oracles::moment_oracle(trials, seed),
        "taylor" => oracles::taylor_oracle(trials, seed),
        "argmin" => oracles::argmin_oracle(trials, seed),
        other => return Err(PyValueError::new_err(format!("unknown oracle {other:?}"))),
    }
    .map_err(err)?;
    Ok((r.passed, r.detail))
}

#[pymodule]
fn attnlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataDistribution>()?;
    m.add_class::<PyPrompt>()?;
    m.add_class::<PyAttentionParams>()?;
    m.add_function(wrap_pyfunction!(predict_linearized, m)?)?;
    m.add_function(wrap_pyfunction!(predict_linear_attention, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_predict, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_map, m)?)?;
    m.add_function(wrap_pyfunction!(linearized_softmax_map, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_population, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_sampled, m)?)?;
    m.add_function(wrap_pyfunction!(error_curve, m)?)?;
    m.add_function(wrap_pyfunction!(generalization_error, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(heuristic_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(moment_sandwich, m)?)?;
    m.add_function(wrap_pyfunction!(mc_generalization_error, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(reproduce, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add("CSV_HEADER", harness::CSV_HEADER.join(","))?;
    Ok(())
}
