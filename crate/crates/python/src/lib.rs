use std::path::PathBuf;

use flowcast::dynsys::{ChannelRole, Dataset as CoreDataset, Field, PHYSICAL_ROLES};
use flowcast::metrics::{self, Boundary};
use flowcast::nn::VelocityModel;
use flowcast::odesolve::{solve, Scheme, SolverConfig};
use flowcast::Tensor;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(pyflowcast, FlowcastError, PyException);

fn to_py(e: flowcast::Error) -> PyErr {
    FlowcastError::new_err(e.to_string())
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(to_py)
}

fn physical_field(data: Vec<f64>, height: usize, width: usize) -> PyResult<Field> {
    Field::new(tensor(vec![3, height, width], data)?, PHYSICAL_ROLES.to_vec(), 0.0).map_err(to_py)
}

fn boundary(name: &str) -> PyResult<Boundary> {
    match name {
        "periodic" => Ok(Boundary::Periodic),
        "clamped_rows" => Ok(Boundary::ClampedRows),
        other => Err(PyValueError::new_err(format!("unknown boundary `{other}`"))),
    }
}

/// Run the command line tool with `args` (without the program name) and
/// return its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    flowcast::cli::main_with_args(std::iter::once("flowcast".to_string()).chain(args))
}

/// A trajectory dataset read from an FMDS file.
#[pyclass(frozen)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset { inner: CoreDataset::load(&path).map_err(to_py)? })
    }

    /// `(channels, height, width)` of every state.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    #[getter]
    fn num_trajectories(&self) -> usize {
        self.inner.trajectories.len()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dt_sim(&self) -> f64 {
        self.inner.dt_sim()
    }

    #[getter]
    fn roles(&self) -> Vec<&'static str> {
        self.inner
            .roles()
            .iter()
            .map(|r| match r {
                ChannelRole::Density => "density",
                ChannelRole::MomentumX => "momentum_x",
                ChannelRole::MomentumY => "momentum_y",
                ChannelRole::CondPos => "cond_pos",
                ChannelRole::CondTime => "cond_time",
            })
            .collect()
    }

    /// Per-channel mean and standard deviation of the fitted normalization.
    #[getter]
    fn normalization(&self) -> (Vec<f64>, Vec<f64>) {
        (self.inner.norm.mean.clone(), self.inner.norm.std.clone())
    }

    /// Flat `[C*H*W]` values of one state.
    fn state(&self, trajectory: usize, step: usize) -> PyResult<Vec<f64>> {
        let t = self
            .inner
            .trajectories
            .get(trajectory)
            .ok_or_else(|| PyValueError::new_err(format!("trajectory {trajectory} out of range")))?;
        let s = t.states.get(step).ok_or_else(|| PyValueError::new_err(format!("step {step} out of range")))?;
        Ok(s.channels.data().to_vec())
    }
}

/// A velocity model loaded from a checkpoint and its architecture sidecar.
#[pyclass(frozen)]
struct Model {
    inner: VelocityModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model { inner: VelocityModel::load(&path).map_err(to_py)? })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Velocity `v_t(x | cond)` for a batch given as flat data plus shape.
    #[pyo3(signature = (x, shape, t, cond=None, cond_shape=None))]
    fn velocity(
        &self,
        x: Vec<f64>,
        shape: Vec<usize>,
        t: Vec<f64>,
        cond: Option<Vec<f64>>,
        cond_shape: Option<Vec<usize>>,
    ) -> PyResult<Vec<f64>> {
        let x = tensor(shape, x)?;
        let cond = match (cond, cond_shape) {
            (Some(c), Some(s)) => Some(tensor(s, c)?),
            (None, None) => None,
            _ => return Err(PyValueError::new_err("cond and cond_shape go together")),
        };
        let v = self.inner.forward(&x, &t, cond.as_ref()).map_err(to_py)?;
        Ok(v.data().to_vec())
    }

    /// Integrate the flow from `x0` over `[0, 1]` with a fixed-step scheme.
    #[pyo3(signature = (x0, shape, steps=10, scheme="euler", cond=None, cond_shape=None))]
    fn sample(
        &self,
        x0: Vec<f64>,
        shape: Vec<usize>,
        steps: usize,
        scheme: &str,
        cond: Option<Vec<f64>>,
        cond_shape: Option<Vec<usize>>,
    ) -> PyResult<Vec<f64>> {
        let scheme = match scheme {
            "euler" => Scheme::Euler,
            "midpoint" => Scheme::Midpoint,
            other => return Err(PyValueError::new_err(format!("unknown scheme `{other}`"))),
        };
        let x0 = tensor(shape, x0)?;
        let cond = match (cond, cond_shape) {
            (Some(c), Some(s)) => Some(tensor(s, c)?),
            (None, None) => None,
            _ => return Err(PyValueError::new_err("cond and cond_shape go together")),
        };
        let x1 = solve(&self.inner, &x0, cond.as_ref(), &SolverConfig::new(scheme, steps)).map_err(to_py)?;
        Ok(x1.data().to_vec())
    }
}

/// Mean kinetic energy of a `[3, H, W]` field given as flat data.
#[pyfunction]
fn kinetic_energy(data: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    metrics::kinetic_energy(&physical_field(data, height, width)?).map_err(to_py)
}

#[pyfunction]
fn ke_error(real: Vec<f64>, pred: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    metrics::ke_error(&physical_field(real, height, width)?, &physical_field(pred, height, width)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (data, height, width, boundary_kind="periodic"))]
fn sharpness(data: Vec<f64>, height: usize, width: usize, boundary_kind: &str) -> PyResult<f64> {
    metrics::sharpness(&physical_field(data, height, width)?, boundary(boundary_kind)?).map_err(to_py)
}

/// Radially binned kinetic energy spectrum as `(wavenumbers, density)`.
#[pyfunction]
fn energy_spectrum(data: Vec<f64>, height: usize, width: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let s = metrics::energy_spectrum(&physical_field(data, height, width)?).map_err(to_py)?;
    Ok((s.wavenumbers, s.energy_density))
}

#[pymodule]
fn pyflowcast(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FlowcastError", m.py().get_type::<FlowcastError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(kinetic_energy, m)?)?;
    m.add_function(wrap_pyfunction!(ke_error, m)?)?;
    m.add_function(wrap_pyfunction!(sharpness, m)?)?;
    m.add_function(wrap_pyfunction!(energy_spectrum, m)?)?;
    Ok(())
}
