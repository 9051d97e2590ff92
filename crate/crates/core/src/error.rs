use thiserror::Error;

use crate::grid::NodeId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid has no nodes")]
    Empty,
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("duplicate line {{{0},{1}}}")]
    DuplicateEdge(NodeId, NodeId),
    #[error("line from node {0} to itself")]
    SelfLoop(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("voltage magnitude at node {0} must be positive")]
    NonpositiveVoltage(NodeId),
    #[error("expected {expected} voltage magnitudes, got {got}")]
    VoltageCount { expected: usize, got: usize },
    #[error("line {{{0},{1}}} has zero series admittance")]
    ZeroSeriesAdmittance(NodeId, NodeId),
    #[error("line {{{0},{1}}} has negative shunt conductance")]
    NegativeShuntConductance(NodeId, NodeId),
    #[error("grid contains a cycle closed by lines {0:?}")]
    CycleDetected(Vec<(NodeId, NodeId)>),
    #[error("grid is disconnected: components {0:?}")]
    Disconnected(Vec<Vec<NodeId>>),
    #[error("edge at position {0} breaks lexicographic order")]
    EdgeOrderViolation(usize),
    #[error("grid file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhysicsError {
    #[error("voltage magnitudes must be positive")]
    NonpositiveVoltage,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("power flow did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("angle on line {edge} leaves the trust region")]
    AngleOutOfTrustRegion { edge: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BehaviorError {
    #[error("Hankel order {order} needs more than {samples} samples")]
    OrderTooLarge { order: usize, samples: usize },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("data not persistently exciting: rank {rank} < {required}")]
    NotPersistentlyExciting { rank: usize, required: usize },
    #[error("query outside the span of the measured inputs (residual {residual:e})")]
    InconsistentQuery { residual: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Error)]
pub enum ExcitationError {
    #[error("excitation failed after {attempts} attempts: rank {rank} < {required}")]
    ExcitationFailed {
        attempts: usize,
        rank: usize,
        required: usize,
    },
    #[error("invalid excitation options: {0}")]
    InvalidOptions(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema error at column `{0}`")]
    Schema(String),
    #[error(transparent)]
    Behavior(#[from] BehaviorError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptError {
    #[error("interior-point iteration broke down at iteration {iteration}")]
    NumericalBreakdown { iteration: u32 },
    #[error("{count} binaries exceed the enumeration cap of {cap} assignments")]
    TooManyBinaries { count: usize, cap: usize },
    #[error("malformed program: {0}")]
    InvalidProgram(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OpfError {
    #[error("data-driven model is not persistently exciting")]
    ModelNotPE,
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("projected point violates application constraints by {violation:e}")]
    ProjectionInfeasible { violation: f64 },
    #[error("optimal power flow problem is infeasible")]
    Infeasible,
    #[error("optimal power flow problem is unbounded")]
    Unbounded,
    #[error("solver stopped before reaching tolerance")]
    ToleranceNotMet,
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Behavior(#[from] BehaviorError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MicrogridError {
    #[error("forecast window has {got} steps, horizon needs {needed}")]
    ForecastTooShort { needed: usize, got: usize },
    #[error("stored energy {value} of storage {unit} outside [{min}, {max}]")]
    StateBoundViolation {
        unit: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("peak demand {peak} exceeds fleet capacity {capacity}")]
    InfeasibleProfile { peak: f64, capacity: f64 },
    #[error("invalid microgrid configuration: {0}")]
    InvalidConfig(String),
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<MicrogridError>,
    },
    #[error(transparent)]
    Opf(#[from] OpfError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Behavior(#[from] BehaviorError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("runs differ in length: {expected} vs {got} rows")]
    LengthMismatch { expected: usize, got: usize },
}

impl From<std::io::Error> for ReportError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<csv::Error> for ReportError {
    fn from(e: csv::Error) -> Self {
        match e.kind() {
            csv::ErrorKind::Io(_) => Self::Io(e.to_string()),
            _ => Self::Schema(e.to_string()),
        }
    }
}
