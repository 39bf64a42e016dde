//! Python bindings for the spiking-network training kit.
//!
//! Exposes the scalar neuron step, surrogate-gradient evaluation, the
//! running-mean initializer state, distribution diagnostics, the membrane
//! Markov-chain lab, and the full experiment runner. Heavy lifting stays in
//! the core crate; this layer only converts types at the boundary.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use snn_forge::diagnostics as diag;
use snn_forge::lif::{self, ResetMode};
use snn_forge::mpinit::MpInitState;
use snn_forge::surrogate::{self, ScaleMode, SurrogateConfig, SurrogateShape};
use snn_forge::theory::{self, ChainConfig, InitMode, InputDist};
use snn_forge::{config, runner, Tensor};

fn to_py(e: snn_forge::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_reset(s: &str) -> PyResult<ResetMode> {
    match s {
        "soft" => Ok(ResetMode::Soft),
        "hard" => Ok(ResetMode::Hard),
        _ => Err(PyValueError::new_err(format!(
            "unknown reset `{s}` (expected soft|hard)"
        ))),
    }
}

fn parse_shape(s: &str) -> PyResult<SurrogateShape> {
    match s {
        "rectangular" => Ok(SurrogateShape::Rectangular),
        "triangular" => Ok(SurrogateShape::Triangular),
        "arctan" => Ok(SurrogateShape::Arctan),
        "sigmoid" => Ok(SurrogateShape::Sigmoid),
        _ => Err(PyValueError::new_err(format!(
            "unknown shape `{s}` (expected rectangular|triangular|arctan|sigmoid)"
        ))),
    }
}

fn parse_mode(s: &str) -> PyResult<ScaleMode> {
    match s {
        "absolute" => Ok(ScaleMode::Absolute),
        "relative" => Ok(ScaleMode::Relative),
        "threshold_invariant" => Ok(ScaleMode::ThresholdInvariant),
        _ => Err(PyValueError::new_err(format!(
            "unknown mode `{s}` (expected absolute|relative|threshold_invariant)"
        ))),
    }
}

fn parse_dist(kind: &str, a: f64, b: f64) -> PyResult<InputDist> {
    match kind {
        "gaussian" => Ok(InputDist::Gaussian { mean: a, std: b }),
        "uniform" => Ok(InputDist::Uniform { a, b }),
        _ => Err(PyValueError::new_err(format!(
            "unknown dist `{kind}` (expected gaussian|uniform)"
        ))),
    }
}

fn parse_u0(u0: &Bound<'_, PyAny>) -> PyResult<InitMode> {
    if let Ok(s) = u0.extract::<&str>() {
        if s == "stationary-mean" {
            return Ok(InitMode::StationaryMean);
        }
        return Err(PyValueError::new_err(format!(
            "unknown u0 `{s}` (expected a number or \"stationary-mean\")"
        )));
    }
    Ok(InitMode::Value(u0.extract::<f64>()?))
}

/// One discrete neuron update. Returns (pre-reset membrane, spike, next state).
#[pyfunction]
#[pyo3(signature = (u, i, tau, vthr, reset = "soft"))]
fn scalar_step(u: f64, i: f64, tau: f64, vthr: f64, reset: &str) -> PyResult<(f64, f64, f64)> {
    Ok(lif::scalar_step(u, i, tau, vthr, parse_reset(reset)?))
}

/// Raw window derivative f'(x) for one surrogate shape.
#[pyfunction]
fn sg_derivative(shape: &str, x: f64, gamma: f64) -> PyResult<f64> {
    Ok(surrogate::sg_derivative(parse_shape(shape)?, x, gamma))
}

/// d(out)/d(membrane) of the spike node under the given scaling mode.
#[pyfunction]
#[pyo3(signature = (m, vthr, shape = "sigmoid", mode = "threshold_invariant", gamma = 1.0))]
fn spike_grad(m: f64, vthr: f64, shape: &str, mode: &str, gamma: f64) -> PyResult<f64> {
    let cfg = SurrogateConfig::new(parse_shape(shape)?, parse_mode(mode)?, gamma).map_err(to_py)?;
    Ok(surrogate::spike_grad_wrt_m(&cfg, m, vthr))
}

/// d(out)/d(threshold) of the spike node under the given scaling mode.
#[pyfunction]
#[pyo3(signature = (m, vthr, shape = "sigmoid", mode = "threshold_invariant", gamma = 1.0))]
fn spike_grad_vthr(m: f64, vthr: f64, shape: &str, mode: &str, gamma: f64) -> PyResult<f64> {
    let cfg = SurrogateConfig::new(parse_shape(shape)?, parse_mode(mode)?, gamma).map_err(to_py)?;
    Ok(surrogate::spike_grad_wrt_vthr(&cfg, m, vthr))
}

/// Binary spike decision m >= vthr as 0.0/1.0.
#[pyfunction]
fn heaviside(m: f64, vthr: f64) -> f64 {
    surrogate::heaviside(m, vthr)
}

/// Multiplier applied to the spike on the forward pass (vthr under
/// threshold-invariant scaling, 1 otherwise).
#[pyfunction]
fn forward_scale(mode: &str, vthr: f64) -> PyResult<f64> {
    Ok(surrogate::forward_scale(parse_mode(mode)?, vthr))
}

/// Energy in millijoules for the given accumulate / multiply-accumulate counts.
#[pyfunction]
fn energy_estimate(ac: f64, mac: f64) -> f64 {
    diag::energy_estimate(ac, mac)
}

/// Half the L1 distance between two histograms on the same binning.
#[pyfunction]
fn tv_distance(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    diag::tv_distance(&p, &q).map_err(to_py)
}

/// Normalized histogram of `values` over [lo, hi) with the given bin count.
#[pyfunction]
fn histogram(values: Vec<f64>, lo: f64, hi: f64, bins: usize) -> PyResult<Vec<f64>> {
    diag::histogram(&values, lo, hi, bins).map_err(to_py)
}

/// Lag-1 whiteness check over a batch of series. Returns a dict with
/// pass_fraction, tested, and zero_variance counts.
#[pyfunction]
#[pyo3(signature = (series, alpha = 0.05))]
fn ljung_box_lag1(py: Python<'_>, series: Vec<Vec<f64>>, alpha: f64) -> PyResult<Py<PyDict>> {
    let s = diag::ljung_box_lag1(&series, alpha).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("pass_fraction", s.pass_fraction)?;
    d.set_item("tested", s.tested)?;
    d.set_item("zero_variance", s.zero_variance)?;
    Ok(d.unbind())
}

/// Layer gradient health: mean |g|, fraction of surrogate args inside the
/// active window, and the coefficient of variation of |g|.
#[pyfunction]
fn gradient_report(
    py: Python<'_>,
    grads: Vec<f64>,
    args_x: Vec<f64>,
    gamma: f64,
) -> PyResult<Py<PyDict>> {
    let r = diag::gradient_report(&grads, &args_x, gamma).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("abs_str", r.abs_str)?;
    d.set_item("ratio_ag", r.ratio_ag)?;
    d.set_item("grad_cv", r.grad_cv)?;
    Ok(d.unbind())
}

/// Long-run mean membrane state of the single-neuron chain, estimated by
/// burn-in simulation.
#[pyfunction]
#[pyo3(signature = (dist, a, b, tau, vthr, reset = "soft", n_samples = 1000, seed = 0))]
fn stationary_mean(
    dist: &str,
    a: f64,
    b: f64,
    tau: f64,
    vthr: f64,
    reset: &str,
    n_samples: usize,
    seed: u64,
) -> PyResult<f64> {
    theory::stationary_mean(
        parse_dist(dist, a, b)?,
        tau,
        vthr,
        parse_reset(reset)?,
        n_samples,
        seed,
    )
    .map_err(to_py)
}

/// Simulate the membrane chain and fit the TV decay curve. Returns a dict
/// with finals, tvs, and the log-linear fit (rate, intercept, r_squared) when
/// enough points sit above the floor. u0 is a number or "stationary-mean".
#[pyfunction]
#[pyo3(signature = (dist, a, b, tau, vthr, u0, reset = "soft", t_steps = 10, n_samples = 10_000, seed = 0, fit_floor = theory::TV_FIT_FLOOR))]
#[allow(clippy::too_many_arguments)]
fn simulate_chain(
    py: Python<'_>,
    dist: &str,
    a: f64,
    b: f64,
    tau: f64,
    vthr: f64,
    u0: &Bound<'_, PyAny>,
    reset: &str,
    t_steps: usize,
    n_samples: usize,
    seed: u64,
    fit_floor: f64,
) -> PyResult<Py<PyDict>> {
    let cfg = ChainConfig {
        dist: parse_dist(dist, a, b)?,
        tau,
        vthr,
        reset: parse_reset(reset)?,
        t_steps,
        n_samples,
        u0: parse_u0(u0)?,
        seed,
    };
    let trace = theory::simulate_chain(&cfg).map_err(to_py)?;
    let (tvs, fit) = theory::tv_decay_curve(&trace.u, fit_floor).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("finals", trace.final_samples().to_vec())?;
    d.set_item("tvs", tvs)?;
    match fit {
        Some(f) => {
            d.set_item("rate", f.rate)?;
            d.set_item("intercept", f.intercept)?;
            d.set_item("r_squared", f.r_squared)?;
        }
        None => {
            d.set_item("rate", py.None())?;
            d.set_item("intercept", py.None())?;
            d.set_item("r_squared", py.None())?;
        }
    }
    Ok(d.unbind())
}

/// Grid argmin of mean((U - c)^2) over the sample range versus the sample
/// mean. Returns a dict with c_star, sample_mean, grid_step.
#[pyfunction]
#[pyo3(signature = (samples, grid_step = 0.01))]
fn lemma1_check(py: Python<'_>, samples: Vec<f64>, grid_step: f64) -> PyResult<Py<PyDict>> {
    let o = theory::lemma1_check(&samples, grid_step).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("c_star", o.c_star)?;
    d.set_item("sample_mean", o.sample_mean)?;
    d.set_item("grid_step", o.grid_step)?;
    Ok(d.unbind())
}

/// Sampling-noise scale of tv_distance on one population: mean TV between
/// random half-splits.
#[pyfunction]
#[pyo3(signature = (samples, rounds = 4, seed = 0))]
fn split_half_tv(samples: Vec<f64>, rounds: usize, seed: u64) -> PyResult<f64> {
    theory::split_half_tv(&samples, rounds, seed).map_err(to_py)
}

/// Streaming estimate of the mean final-step membrane, used to warm-start
/// initial states. Mirrors the trainer's running-mean update rule.
#[pyclass]
struct RunningMean {
    inner: MpInitState,
}

#[pymethods]
impl RunningMean {
    #[new]
    #[pyo3(signature = (beta = 0.9))]
    fn new(beta: f64) -> PyResult<Self> {
        MpInitState::new(beta)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    /// Fold one batch of final-step membrane values into the estimate.
    /// `active` masks out silent neurons; omitted means all active.
    #[pyo3(signature = (values, active = None))]
    fn update(&mut self, values: Vec<f64>, active: Option<Vec<bool>>) -> PyResult<()> {
        let t = Tensor::<f64>::from_f64_slice(&[values.len()], &values).map_err(to_py)?;
        let act = active.unwrap_or_else(|| vec![true; values.len()]);
        self.inner.update(&t, &act).map_err(to_py)
    }

    /// Stop accepting updates; the estimate becomes read-only.
    fn freeze(&mut self) {
        self.inner.freeze()
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.inner.mu()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta()
    }

    #[getter]
    fn frozen(&self) -> bool {
        self.inner.is_frozen()
    }

    #[getter]
    fn updates(&self) -> u64 {
        self.inner.updates()
    }

    #[getter]
    fn silent_batches(&self) -> u64 {
        self.inner.silent_batches()
    }

    fn __repr__(&self) -> String {
        format!(
            "RunningMean(mu={}, beta={}, updates={}, frozen={})",
            self.inner.mu(),
            self.inner.beta(),
            self.inner.updates(),
            self.inner.is_frozen()
        )
    }
}

/// Run a full experiment from a JSON config string, with optional dotted-path
/// overrides like ("train.lr", "0.05"). Returns (exit_code, out_dir,
/// summary_json); artifacts land in the config's out_dir.
#[pyfunction]
#[pyo3(signature = (config_json, sets = None))]
fn run_experiment(
    config_json: &str,
    sets: Option<Vec<(String, String)>>,
) -> PyResult<(i32, String, String)> {
    let doc: serde_json::Value = serde_json::from_str(config_json)
        .map_err(|e| PyValueError::new_err(format!("config is not valid JSON: {e}")))?;
    let cfg = config::config_from_value(doc, &sets.unwrap_or_default()).map_err(to_py)?;
    let outcome = runner::run(&cfg).map_err(to_py)?;
    Ok((
        outcome.exit_code,
        outcome.out_dir.display().to_string(),
        outcome.summary.to_string(),
    ))
}

#[pymodule]
fn snn_forge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(scalar_step, m)?)?;
    m.add_function(wrap_pyfunction!(sg_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(spike_grad, m)?)?;
    m.add_function(wrap_pyfunction!(spike_grad_vthr, m)?)?;
    m.add_function(wrap_pyfunction!(heaviside, m)?)?;
    m.add_function(wrap_pyfunction!(forward_scale, m)?)?;
    m.add_function(wrap_pyfunction!(energy_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(tv_distance, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(ljung_box_lag1, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_report, m)?)?;
    m.add_function(wrap_pyfunction!(stationary_mean, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_chain, m)?)?;
    m.add_function(wrap_pyfunction!(lemma1_check, m)?)?;
    m.add_function(wrap_pyfunction!(split_half_tv, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<RunningMean>()?;
    Ok(())
}
