//! Nonlinearities and amplitude profiles shared by the solvers.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Result, WkbError};
use crate::grid::{Grid, Point};

type LawFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// The nonlinearity `f` in `ε^κ f(|u|²) u`.
#[derive(Clone)]
pub enum Nonlinearity {
    None,
    /// `f(y) = y`
    Cubic,
    /// `f(y) = y + g y²`
    CubicQuintic { g: f64 },
    /// `f(y) = y / (1 + y)`
    Saturable,
    Custom { name: String, f: LawFn, df: LawFn },
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Nonlinearity::None => write!(f, "None"),
            Nonlinearity::Cubic => write!(f, "Cubic"),
            Nonlinearity::CubicQuintic { g } => write!(f, "CubicQuintic {{ g: {g} }}"),
            Nonlinearity::Saturable => write!(f, "Saturable"),
            Nonlinearity::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl Nonlinearity {
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Nonlinearity::Custom {
            name: name.into(),
            f: Arc::new(f),
            df: Arc::new(df),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Nonlinearity::None)
    }

    pub fn is_cubic(&self) -> bool {
        matches!(self, Nonlinearity::Cubic)
    }

    pub fn f(&self, y: f64) -> f64 {
        match self {
            Nonlinearity::None => 0.0,
            Nonlinearity::Cubic => y,
            Nonlinearity::CubicQuintic { g } => y + g * y * y,
            Nonlinearity::Saturable => y / (1.0 + y),
            Nonlinearity::Custom { f, .. } => f(y),
        }
    }

    pub fn df(&self, y: f64) -> f64 {
        match self {
            Nonlinearity::None => 0.0,
            Nonlinearity::Cubic => 1.0,
            Nonlinearity::CubicQuintic { g } => 1.0 + 2.0 * g * y,
            Nonlinearity::Saturable => 1.0 / ((1.0 + y) * (1.0 + y)),
            Nonlinearity::Custom { df, .. } => df(y),
        }
    }

    /// Smallest sampled `f′` on `[0, y_max]` (4097 equispaced samples).
    pub fn min_derivative(&self, y_max: f64) -> f64 {
        const SAMPLES: usize = 4096;
        (0..=SAMPLES)
            .map(|k| self.df(y_max * k as f64 / SAMPLES as f64))
            .fold(f64::INFINITY, f64::min)
    }

    /// Rejects laws that are not strictly increasing on `[0, y_max]`.
    pub fn check_defocusing(&self, y_max: f64) -> Result<()> {
        if self.is_none() {
            return Ok(());
        }
        let m = self.min_derivative(y_max);
        if m > 0.0 && m.is_finite() {
            Ok(())
        } else {
            Err(WkbError::AssumptionViolation(format!(
                "nonlinearity {self:?} has inf f' = {m} on [0, {y_max}]; a defocusing law is required"
            )))
        }
    }
}

/// Nonlinearity together with its coupling exponent `κ`.
#[derive(Clone, Debug)]
pub struct NonlinearitySpec {
    pub law: Nonlinearity,
    pub kappa: f64,
}

impl NonlinearitySpec {
    pub fn new(law: Nonlinearity, kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(WkbError::validation("nonlinearity.kappa", "must be finite and nonnegative"));
        }
        Ok(NonlinearitySpec { law, kappa })
    }

    pub fn linear() -> Self {
        NonlinearitySpec {
            law: Nonlinearity::None,
            kappa: 0.0,
        }
    }

    /// `ε^κ`
    pub fn coupling(&self, epsilon: f64) -> f64 {
        epsilon.powf(self.kappa)
    }
}

type ProfileFn = Arc<dyn Fn(Point) -> Complex64 + Send + Sync>;

/// Spatial amplitude profile (`a₀`, `a₁`, …).
#[derive(Clone)]
pub enum Profile {
    Zero,
    /// `amplitude · exp(-|x - center|² / (2 width²))`
    Gaussian { center: Point, width: f64, amplitude: f64 },
    /// `(x₀ - c₀) · Gaussian`, odd in the first coordinate.
    Hermite1 { center: Point, width: f64, amplitude: f64 },
    /// Compactly supported `amplitude · exp(1 - 1/(1 - r²/R²))` for `r < R`.
    Bump { center: Point, radius: f64, amplitude: f64 },
    /// Piecewise-linear table in `x₀` (1-d) or in `|x|` (2-d); zero outside.
    Table { xs: Vec<f64>, values: Vec<f64> },
    Custom { name: String, eval: ProfileFn },
}

impl fmt::Debug for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Profile::Zero => write!(f, "Zero"),
            Profile::Gaussian { center, width, amplitude } => {
                write!(f, "Gaussian {{ center: {center:?}, width: {width}, amplitude: {amplitude} }}")
            }
            Profile::Hermite1 { center, width, amplitude } => {
                write!(f, "Hermite1 {{ center: {center:?}, width: {width}, amplitude: {amplitude} }}")
            }
            Profile::Bump { center, radius, amplitude } => {
                write!(f, "Bump {{ center: {center:?}, radius: {radius}, amplitude: {amplitude} }}")
            }
            Profile::Table { xs, .. } => write!(f, "Table({} nodes)", xs.len()),
            Profile::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

fn dist2(x: Point, c: Point, dim: usize) -> f64 {
    (0..dim).map(|i| (x[i] - c[i]).powi(2)).sum()
}

impl Profile {
    pub fn gaussian(width: f64, amplitude: f64) -> Self {
        Profile::Gaussian {
            center: [0.0; 2],
            width,
            amplitude,
        }
    }

    pub fn custom(name: impl Into<String>, eval: impl Fn(Point) -> Complex64 + Send + Sync + 'static) -> Self {
        Profile::Custom {
            name: name.into(),
            eval: Arc::new(eval),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Profile::Zero)
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(WkbError::validation(format!("{path}.{what}"), "must be positive and finite"))
            }
        };
        match self {
            Profile::Gaussian { width, amplitude, .. } | Profile::Hermite1 { width, amplitude, .. } => {
                positive(*width, "width")?;
                if !amplitude.is_finite() {
                    return Err(WkbError::validation(format!("{path}.amplitude"), "must be finite"));
                }
                Ok(())
            }
            Profile::Bump { radius, .. } => positive(*radius, "radius"),
            Profile::Table { xs, values } => {
                if xs.len() < 2 || xs.len() != values.len() {
                    return Err(WkbError::validation(
                        path,
                        "table needs at least two nodes and matching xs/values lengths",
                    ));
                }
                if xs.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(WkbError::validation(format!("{path}.xs"), "must be strictly increasing"));
                }
                if values.iter().chain(xs).any(|v| !v.is_finite()) {
                    return Err(WkbError::validation(path, "table entries must be finite"));
                }
                Ok(())
            }
            Profile::Zero | Profile::Custom { .. } => Ok(()),
        }
    }

    pub fn eval(&self, x: Point, dim: usize) -> Complex64 {
        let re = |v: f64| Complex64::new(v, 0.0);
        match self {
            Profile::Zero => re(0.0),
            Profile::Gaussian { center, width, amplitude } => {
                re(amplitude * (-dist2(x, *center, dim) / (2.0 * width * width)).exp())
            }
            Profile::Hermite1 { center, width, amplitude } => {
                re((x[0] - center[0]) * amplitude * (-dist2(x, *center, dim) / (2.0 * width * width)).exp())
            }
            Profile::Bump { center, radius, amplitude } => {
                let s = dist2(x, *center, dim) / (radius * radius);
                if s < 1.0 {
                    re(amplitude * (1.0 - 1.0 / (1.0 - s)).exp())
                } else {
                    re(0.0)
                }
            }
            Profile::Table { xs, values } => {
                let r = if dim == 1 { x[0] } else { dist2(x, [0.0; 2], dim).sqrt() };
                if r < xs[0] || r > xs[xs.len() - 1] {
                    return re(0.0);
                }
                let j = xs.partition_point(|&s| s <= r).clamp(1, xs.len() - 1);
                let (x0, x1) = (xs[j - 1], xs[j]);
                let w = (r - x0) / (x1 - x0);
                re(values[j - 1] * (1.0 - w) + values[j] * w)
            }
            Profile::Custom { eval, .. } => eval(x),
        }
    }

    pub fn sample(&self, grid: &Grid) -> Vec<Complex64> {
        let dim = grid.dim();
        grid.sample_complex(|x| self.eval(x, dim))
    }

    /// Largest sampled modulus on the grid.
    pub fn sup(&self, grid: &Grid) -> f64 {
        self.sample(grid).iter().fold(0.0, |m, z| m.max(z.norm()))
    }
}
