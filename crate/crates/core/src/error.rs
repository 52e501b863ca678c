//! Error types, one enum per subsystem plus a crate-level wrapper.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("regular polygon needs at least 3 edges and a positive radius (got n = {n_edges}, r = {radius})")]
    InvalidRegularPolygon { n_edges: usize, radius: f64 },
    #[error("degenerate triangle with signed area {area}")]
    DegenerateTriangle { area: f64 },
    #[error("feature {id} does not intersect the domain")]
    FeatureOutsideDomain { id: usize },
    #[error("feature {id} has no boundary inside the domain")]
    EmptyFeatureBoundary { id: usize },
    #[error("features {a} and {b} overlap or touch")]
    OverlappingFeatures { a: usize, b: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid mesh size h = {0}")]
    InvalidSize(f64),
    #[error("triangle {0} out of range")]
    TriangleOutOfRange(usize),
    #[error("vertex {0} has no active incident triangle (fully trimmed vertex)")]
    FullyTrimmedVertex(usize),
    #[error("point ({x}, {y}) is outside the patch of vertex {vertex}")]
    OutsidePatch { vertex: usize, x: f64, y: f64 },
    #[error("meshes do not share a common root triangulation")]
    NotNested,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("unsupported quadrature degree {degree} (supported: {min}..={max})")]
    UnsupportedDegree { degree: usize, min: usize, max: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: matrix is {rows}x{cols}, right-hand side has {rhs}")]
    DimensionMismatch { rows: usize, cols: usize, rhs: usize },
    #[error("solver did not converge: relative residual {residual:e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("singular system{}: relative residual {residual:e}, pivot ratio {pivot_ratio:e}", patch.map(|p| format!(" in patch {p}")).unwrap_or_default())]
    Singular { patch: Option<usize>, residual: f64, pivot_ratio: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluxError {
    #[error("patch {vertex} has zero active measure")]
    EmptyPatch { vertex: usize },
    #[error("patch {vertex}: {source}")]
    Solve { vertex: usize, source: LinalgError },
    #[error("element {triangle}: {source}")]
    Element { triangle: usize, source: LinalgError },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("non-positive length {0} passed to the boundary constant")]
    NonPositiveLength(f64),
    #[error("negative weight {name} = {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("feature {id} boundary is not covered by the active mesh ({covered} of {total})")]
    FeatureOutsideMesh { id: usize, covered: f64, total: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdaptiveError {
    #[error("marking fraction {0} is outside (0, 1]")]
    InvalidTheta(f64),
    #[error("indicator of {kind} {id} is negative or not finite ({value})")]
    InvalidIndicator { kind: &'static str, id: usize, value: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("`{key}` = {value} is out of range ({range})")]
    OutOfRange { key: String, value: String, range: String },
    #[error("feature table line {line}: {message}")]
    FeatureTable { line: usize, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("cannot read `{path}`: {message}")]
    Read { path: String, message: String },
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Flux(#[from] FluxError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Adaptive(#[from] AdaptiveError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors raised while solving, as opposed to bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Error::Linalg(_) | Error::Flux(_) | Error::Estimator(_) | Error::Mesh(_) | Error::Adaptive(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
