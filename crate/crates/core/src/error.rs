use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry does not fit in grid: {0}")]
    GeometryDoesNotFit(String),

    #[error("support radius R_K = {r_k} must be smaller than domain radius R_M = {r_m}")]
    InvalidRadii { r_k: f64, r_m: f64 },

    #[error("fields are defined on different grids")]
    GridMismatch,

    #[error("field is not supported in {region}: max |value| outside = {outside:e}, max |value| = {max:e}")]
    SupportViolation {
        region: &'static str,
        outside: f64,
        max: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time step {dt:e} exceeds the CFL limit {limit:e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("padding {have:.4} is smaller than the required {need:.4}")]
    InsufficientPadding { have: f64, need: f64 },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    SolverNotConverged { iterations: usize, residual: f64 },

    #[error("eigenvalue iteration did not converge after {iterations} iterations")]
    EigenNotConverged { iterations: usize },

    #[error("boundary trace is degenerate: {0}")]
    DegenerateTrace(String),

    #[error("weight is not strictly convex: {0}")]
    NotConvex(String),

    #[error("weight has a critical point in M near ({x:.4}, {y:.4})")]
    CriticalPoint { x: f64, y: f64 },

    #[error("ray left the computational box at ({x:.4}, {y:.4}) before crossing the boundary")]
    RayLeftGrid { x: f64, y: f64 },

    #[error("ray did not exit M before t_max = {t_max}")]
    Trapped { t_max: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
