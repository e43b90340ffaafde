//! Python bindings: the target network with its gradient oracles, the
//! sum-of-ReLUs builder, projected-GD trajectories, and the full
//! build-run-verify pipeline.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use icgd_core::activation::Activation;
use icgd_core::approx::{build_pwl_approx, measure_sup_error, SumOfRelus};
use icgd_core::network::{
    exact_gradient, finite_diff_gradient, forward_all, gd_trajectory, loss, Dataset, DomainBox,
    NetworkParams, NetworkShape,
};
use icgd_core::pipeline::run_instance;
use icgd_core::ExperimentConfig;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(format!("{e}"))
}

/// An N-layer sigmoid network with a flat parameter vector.
#[pyclass]
struct Network {
    params: NetworkParams,
    act: Activation,
}

#[pymethods]
impl Network {
    /// Zero-initialized unless `w` or `seed` is given.
    #[new]
    #[pyo3(signature = (input_dim, output_dim, width, depth, w=None, seed=None, scale=1.0))]
    fn new(
        input_dim: usize,
        output_dim: usize,
        width: usize,
        depth: usize,
        w: Option<Vec<f64>>,
        seed: Option<u64>,
        scale: f64,
    ) -> PyResult<Self> {
        let shape = NetworkShape::new(input_dim, output_dim, width, depth).map_err(err)?;
        let params = match (w, seed) {
            (Some(w), _) => NetworkParams::from_vec(shape, w).map_err(err)?,
            (None, Some(seed)) => NetworkParams::random(shape, scale, seed),
            (None, None) => NetworkParams::zeros(shape),
        };
        Ok(Network {
            params,
            act: Activation::Sigmoid,
        })
    }

    /// Total parameter count D_N.
    #[getter]
    fn param_count(&self) -> usize {
        self.params.shape.param_count()
    }

    /// Cumulative per-layer parameter offsets D_0..D_N.
    fn layer_offsets(&self) -> Vec<usize> {
        self.params.shape.layer_offsets()
    }

    /// The flat parameter vector.
    #[getter]
    fn w(&self) -> Vec<f64> {
        self.params.as_slice().to_vec()
    }

    /// Layer outputs p(0..N) for one input.
    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        forward_all(&self.params, self.act, &x).map_err(err)
    }

    /// Network output p(N) for one input.
    fn predict(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let mut p = self.forward(x)?;
        Ok(p.pop().expect("depth >= 2"))
    }

    /// Empirical risk on (xs, ys) under squared loss.
    fn loss(&self, xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>) -> PyResult<f64> {
        loss(&self.params, self.act, &dataset(&self.params.shape, xs, ys)?).map_err(err)
    }

    /// Exact gradient via the backpropagation recursion.
    fn gradient(&self, xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        exact_gradient(&self.params, self.act, &dataset(&self.params.shape, xs, ys)?).map_err(err)
    }

    /// Central finite differences (the independent oracle).
    #[pyo3(signature = (xs, ys, h=1e-5))]
    fn finite_diff_gradient(
        &self,
        xs: Vec<Vec<f64>>,
        ys: Vec<Vec<f64>>,
        h: f64,
    ) -> PyResult<Vec<f64>> {
        finite_diff_gradient(
            &self.params,
            self.act,
            &dataset(&self.params.shape, xs, ys)?,
            h,
        )
        .map_err(err)
    }
}

fn dataset(shape: &NetworkShape, xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>) -> PyResult<Dataset> {
    if xs.len() != ys.len() {
        return Err(PyValueError::new_err("xs and ys must have equal length"));
    }
    let query = vec![0.0; shape.input_dim];
    Dataset::new(xs.into_iter().zip(ys).collect(), query).map_err(err)
}

/// A sum-of-ReLUs approximator of a scalar function on [-radius, radius].
#[pyclass]
struct PwlApprox {
    inner: SumOfRelus,
    act: Activation,
    derivative: bool,
}

#[pymethods]
impl PwlApprox {
    /// Piecewise-linear sum-of-ReLUs interpolant of sigmoid (or its
    /// derivative) at equispaced knots.
    #[new]
    #[pyo3(signature = (radius, segments, derivative=false))]
    fn new(radius: f64, segments: usize, derivative: bool) -> PyResult<Self> {
        let act = Activation::Sigmoid;
        let inner = if derivative {
            build_pwl_approx(|t| act.derivative(t), radius, segments)
        } else {
            build_pwl_approx(|t| act.value(t), radius, segments)
        }
        .map_err(err)?;
        Ok(PwlApprox {
            inner,
            act,
            derivative,
        })
    }

    /// Term count H.
    #[getter]
    fn h(&self) -> usize {
        self.inner.term_count()
    }

    /// Coefficient mass C = sum |c|.
    #[getter]
    fn c(&self) -> f64 {
        self.inner.coeff_sum()
    }

    fn evaluate(&self, z: f64) -> f64 {
        self.inner.evaluate1(z)
    }

    /// Max deviation from the target over a uniform grid.
    #[pyo3(signature = (grid_points=100_001))]
    fn sup_error(&self, grid_points: usize) -> PyResult<f64> {
        let act = self.act;
        let f: Box<dyn Fn(&[f64]) -> f64> = if self.derivative {
            Box::new(move |z: &[f64]| act.derivative(z[0]))
        } else {
            Box::new(move |z: &[f64]| act.value(z[0]))
        };
        Ok(measure_sup_error(&self.inner, f, grid_points, 0.0)
            .map_err(err)?
            .sup_error)
    }

    /// JSON round trip of the term list.
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }
}

/// Cumulative per-layer parameter offsets D_0..D_N for a shape.
#[pyfunction]
fn layer_offsets(input_dim: usize, output_dim: usize, width: usize, depth: usize) -> PyResult<Vec<usize>> {
    Ok(NetworkShape::new(input_dim, output_dim, width, depth)
        .map_err(err)?
        .layer_offsets())
}

/// Exact projected-GD trajectory w^0..w^L from w^0 = 0.
#[pyfunction]
#[pyo3(name = "gd_trajectory", signature = (input_dim, output_dim, width, depth, xs, ys, eta, steps, box_b))]
#[allow(clippy::too_many_arguments)]
fn gd_trajectory_py(
    input_dim: usize,
    output_dim: usize,
    width: usize,
    depth: usize,
    xs: Vec<Vec<f64>>,
    ys: Vec<Vec<f64>>,
    eta: f64,
    steps: usize,
    box_b: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let shape = NetworkShape::new(input_dim, output_dim, width, depth).map_err(err)?;
    let data = dataset(&shape, xs, ys)?;
    let domain = DomainBox::new(box_b).map_err(err)?;
    gd_trajectory(shape, Activation::Sigmoid, &data, eta, steps, domain).map_err(err)
}

/// The default experiment configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_json().map_err(err)
}

/// Build the constructed stack for a JSON config, run it on the seeded
/// prompt, and return the carried-parameter trajectory w(0)..w(L).
#[pyfunction]
fn stack_trajectory(config_json: &str) -> PyResult<Vec<Vec<f64>>> {
    use icgd_core::builder::{assemble, run};
    use icgd_core::layout::encode_prompt;
    use icgd_core::pipeline::plan_from_config;
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    let (plan, data) = plan_from_config(&cfg).map_err(err)?;
    let stack = assemble(&plan, cfg.steps, &cfg.caps())
        .map_err(|e| PyRuntimeError::new_err(format!("{e}")))?;
    let w0 = vec![0.0; plan.shape.param_count()];
    let prompt = encode_prompt(&data, &w0, &plan.layout).map_err(err)?;
    let trace = run(&stack, &prompt, false).map_err(|e| PyRuntimeError::new_err(format!("{e}")))?;
    Ok(trace.w_trajectory)
}

/// Run the full build-run-verify pipeline on a JSON config; returns a JSON
/// summary (pass flag, failures, bound rows, per-step trajectory deviations).
#[pyfunction]
fn verify(config_json: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    let outcome = run_instance(&cfg, false).map_err(|e| PyRuntimeError::new_err(format!("{e}")))?;
    let summary = serde_json::json!({
        "config": outcome.config_hash,
        "mode": format!("{}", outcome.mode),
        "pass": outcome.pass,
        "failures": outcome.failures,
        "layer_count": outcome.stack_layer_count,
        "heads_per_block": outcome.stack_heads_per_block,
        "eps_measured": {
            "r": outcome.eps_r_measured,
            "rprime": outcome.eps_rprime_measured,
            "loss": outcome.eps_loss_measured,
        },
        "max_w_spread": outcome.max_w_spread,
        "max_traj_deviation": outcome.max_traj_deviation,
        "bounds": outcome.bound_rows,
        "layer_norms": outcome.norm_rows,
        "steps": outcome.steps,
        "convergence": outcome.convergence,
        "radii": outcome.radii,
    });
    serde_json::to_string(&summary).map_err(err)
}

#[pymodule]
fn icgd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_class::<PwlApprox>()?;
    m.add_function(wrap_pyfunction!(layer_offsets, m)?)?;
    m.add_function(wrap_pyfunction!(gd_trajectory_py, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(stack_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
