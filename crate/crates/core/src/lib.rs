//! Semiclassical nonlinear Schrödinger laboratory.

pub mod diagnostics;
pub mod error;
pub mod grenier;
pub mod grid;
pub mod model;
pub mod nls;
pub mod rays;
pub mod scenario;
pub mod weak;

pub use error::{Result, WkbError};
pub use grid::{Grid, Norms, Point, RealField, WaveField};
