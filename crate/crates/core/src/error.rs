use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong between parsing a scenario and writing its report.
#[derive(Debug, Error)]
pub enum WkbError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid value at `{path}`: {message}")]
    Validation { path: String, message: String },

    #[error("potential evaluation produced a non-finite value at t = {t}, x = {x:?}")]
    PotentialEvaluation { t: f64, x: [f64; 2] },

    #[error("flow inversion failed at t = {t} for x = {x:?} after {iterations} iterations (residual {residual:e})")]
    Inversion {
        t: f64,
        x: [f64; 2],
        iterations: usize,
        residual: f64,
    },

    #[error("time {t} is at or past the caustic (Jacobian determinant {det:e})")]
    PastCaustic { t: f64, det: f64 },

    #[error("numerical instability at t = {t}: {detail}")]
    NumericalInstability { t: f64, detail: String },

    #[error("computational box too small at t = {t}: boundary mass fraction {fraction:e}")]
    DomainTooSmall { t: f64, fraction: f64 },

    #[error("grid under-resolves the phase: spacing {spacing:e} exceeds {allowed:e}; use at least {min_points} points per axis")]
    Resolution {
        spacing: f64,
        allowed: f64,
        min_points: usize,
    },

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("shock or blow-up detected at t = {t}: {detail}")]
    Shock { t: f64, detail: String },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("time {0} is not one of the stored sample times")]
    UnknownTime(f64),

    #[error("{context}: {source}")]
    Annotated {
        context: String,
        #[source]
        source: Box<WkbError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl WkbError {
    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        WkbError::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn annotate(self, context: impl Into<String>) -> Self {
        WkbError::Annotated {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by the input rather than by a numerical failure.
    pub fn is_validation(&self) -> bool {
        match self {
            WkbError::Config(_) | WkbError::Validation { .. } | WkbError::Json(_) => true,
            WkbError::Annotated { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, WkbError>;
