//! Python bindings for `ddflow`.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ddflow::behavior::{
    dd_predict, lift_angles, DataDrivenModel, LiftMode, Trajectory, DEFAULT_RANK_TOL,
};
use ddflow::excitation::{generate_excitation, ExcitationOptions};
use ddflow::grid::Grid;
use ddflow::microgrid::report::results_table;
use ddflow::microgrid::{
    audit_closed_loop, generate_profiles, run_closed_loop, MicrogridConfig, MpcOptions,
    ProfileShape,
};
use ddflow::opf::{ApplicationConstraints, OpfObjective, OpfProblem, OpfVariant, VariantTag};
use ddflow::opt::MixedBinaryOptions;
use ddflow::physics::{
    flows_from_angles, grid_coeffs, injections_from_flows, solve_radial_pf, RadialPfOptions,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn mode(name: &str) -> PyResult<LiftMode> {
    match name {
        "per-edge" => Ok(LiftMode::PerEdge),
        "all-pairs" => Ok(LiftMode::AllPairs),
        other => Err(value_err(format!("unknown lift mode {other:?}"))),
    }
}

fn variant_tag(name: &str) -> PyResult<VariantTag> {
    match name {
        "reference" => Ok(VariantTag::Reference),
        "dd" => Ok(VariantTag::NonconvexDd),
        "dd-convex" => Ok(VariantTag::ConvexDd),
        "dd-generalized" => Ok(VariantTag::GeneralizedDd),
        other => Err(value_err(format!("unknown variant {other:?}"))),
    }
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Radial grid with unit or fixed voltage magnitudes.
#[pyclass(name = "Grid", module = "ddflow_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGrid(Grid);

#[pymethods]
impl PyGrid {
    #[staticmethod]
    fn case_study() -> Self {
        Self(Grid::case_study())
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Grid::from_toml(text).map(Self).map_err(value_err)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    #[getter]
    fn nodes(&self) -> Vec<usize> {
        self.0.nodes().iter().map(|&n| n as usize).collect()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.0
            .edges()
            .iter()
            .map(|&(a, b)| (a as usize, b as usize))
            .collect()
    }

    /// Directional line powers `[p_ij, p_ji]` per edge.
    fn flows(&self, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        flows_from_angles(&self.0, &grid_coeffs(&self.0), &theta).map_err(value_err)
    }

    fn injections(&self, p_e: Vec<f64>) -> PyResult<Vec<f64>> {
        injections_from_flows(&self.0, &p_e).map_err(value_err)
    }

    /// Edge angle differences and slack injection for the given injections.
    fn power_flow(&self, injections: Vec<f64>, slack: usize) -> PyResult<(Vec<f64>, f64)> {
        let slack = slack.try_into().map_err(value_err)?;
        let s = solve_radial_pf(&self.0, &injections, slack, &RadialPfOptions::default())
            .map_err(runtime_err)?;
        Ok((s.theta, s.slack_injection))
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid(nodes={}, lines={})",
            self.0.node_count(),
            self.0.edge_count()
        )
    }
}

/// Simulated measurements: rows are channels, columns samples.
#[pyclass(name = "Trajectory", module = "ddflow_py", frozen, skip_from_py_object)]
struct PyTrajectory(Arc<Trajectory>);

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn theta(&self) -> Vec<Vec<f64>> {
        rows(&self.0.theta)
    }

    #[getter]
    fn phi(&self) -> Vec<Vec<f64>> {
        rows(&self.0.phi)
    }

    #[getter]
    fn p_e(&self) -> Vec<Vec<f64>> {
        rows(&self.0.p_e)
    }

    #[getter]
    fn p_g(&self) -> Vec<Vec<f64>> {
        rows(&self.0.p_g)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyfunction]
#[pyo3(signature = (grid, samples, mode = "per-edge", seed = 0, angle_range = 0.3))]
fn generate_data(
    grid: &PyGrid,
    samples: usize,
    mode: &str,
    seed: u64,
    angle_range: f64,
) -> PyResult<PyTrajectory> {
    let mut opts = ExcitationOptions::new(samples, self::mode(mode)?, seed);
    opts.angle_range = angle_range;
    generate_excitation(&grid.0, &opts)
        .map(|t| PyTrajectory(Arc::new(t)))
        .map_err(runtime_err)
}

/// Line-flow model fitted from a per-edge trajectory.
#[pyclass(name = "LineFlowModel", module = "ddflow_py", frozen)]
struct PyModel(DataDrivenModel);

#[pymethods]
impl PyModel {
    #[new]
    fn new(data: &PyTrajectory) -> PyResult<Self> {
        DataDrivenModel::line_flows(&data.0, DEFAULT_RANK_TOL)
            .map(Self)
            .map_err(value_err)
    }

    /// Predicted `[p_ij, p_ji]` per edge at the given edge angles.
    fn predict(&self, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        dd_predict(&self.0, &lift_angles(&theta)).map_err(value_err)
    }

    #[getter]
    fn rank(&self) -> usize {
        self.0.certificate().rank
    }
}

fn variant(
    grid: &Grid,
    name: &str,
    data: Option<&PyTrajectory>,
    beta: f64,
) -> PyResult<OpfVariant> {
    let tag = variant_tag(name)?;
    if tag == VariantTag::Reference {
        return Ok(OpfVariant::reference(grid, beta));
    }
    let owned;
    let traj = match data {
        Some(t) => &*t.0,
        None => {
            let m = tag.lift_mode();
            let n = ExcitationOptions::minimal_samples(grid, m);
            owned =
                generate_excitation(grid, &ExcitationOptions::new(n, m, 0)).map_err(runtime_err)?;
            &owned
        }
    };
    OpfVariant::from_trajectory(tag, traj, beta, DEFAULT_RANK_TOL).map_err(value_err)
}

/// Loss-minimizing OPF with optional fixed injections (`None` leaves a node free).
#[pyfunction]
#[pyo3(signature = (grid, variant = "reference", injections = None, data = None, beta = 1.0, line_limit = None))]
fn solve_opf<'py>(
    py: Python<'py>,
    grid: &PyGrid,
    variant: &str,
    injections: Option<Vec<Option<f64>>>,
    data: Option<&PyTrajectory>,
    beta: f64,
    line_limit: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let g = &grid.0;
    let v = self::variant(g, variant, data, beta)?;
    let mut app = injections
        .map(|i| ApplicationConstraints::fixed_injections(&i))
        .unwrap_or_default();
    if let Some(l) = line_limit {
        app = app.line_limits(-l, l, g.edge_count());
    }
    let problem = OpfProblem::new(g.clone(), v, app, OpfObjective::losses(g));
    let sol = py
        .detach(|| problem.solve(&MixedBinaryOptions::default()))
        .map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("variant", sol.tag.as_str())?;
    d.set_item("objective", sol.objective)?;
    d.set_item("theta", sol.theta)?;
    d.set_item("phi", sol.phi)?;
    d.set_item("p_e", sol.p_e)?;
    d.set_item("p_g", sol.p_g)?;
    d.set_item("max_tightness_residual", sol.tightness.max_residual)?;
    Ok(d)
}

/// Closed-loop MPC on the case-study microgrid.
#[pyfunction]
#[pyo3(signature = (variant = "reference", steps = 48, profile_seed = 0, config = None))]
fn run_mpc<'py>(
    py: Python<'py>,
    variant: &str,
    steps: usize,
    profile_seed: u64,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = match config {
        Some(text) => MicrogridConfig::from_toml(text).map_err(value_err)?,
        None => MicrogridConfig::table1(),
    };
    let grid = Grid::case_study();
    let v = self::variant(&grid, variant, None, cfg.beta)?;
    let profiles = generate_profiles(profile_seed, steps, &ProfileShape::for_config(&cfg), &cfg)
        .map_err(value_err)?;
    let (result, audit) = py
        .detach(|| {
            let r = run_closed_loop(&cfg, &grid, &profiles, &v, steps, &MpcOptions::default())?;
            let a = audit_closed_loop(&cfg, &grid, &profiles, &r)?;
            Ok::<_, ddflow::error::MicrogridError>((r, a))
        })
        .map_err(runtime_err)?;
    let table = results_table(&cfg, &grid, &result);
    let d = PyDict::new(py);
    d.set_item("mean_operating_cost", result.kpis.mean_operating_cost)?;
    d.set_item("mean_loss_cost", result.kpis.mean_loss_cost)?;
    d.set_item("audit", audit)?;
    d.set_item("header", table.header)?;
    d.set_item("rows", table.rows)?;
    Ok(d)
}

#[pymodule]
fn ddflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(solve_opf, m)?)?;
    m.add_function(wrap_pyfunction!(run_mpc, m)?)?;
    Ok(())
}
