//! Scenario configuration, presets, the ε-sweep driver and report files.
//!
//! A scenario is a JSON document. Every key is optional except
//! `nonlinearity`, `epsilons`, `t_final` and `regime`; a top-level
//! `"preset": "<name>"` starts from a built-in scenario and merges the
//! remaining keys over it (objects merge key by key, a changed `kind`
//! replaces the whole object). Unknown keys are rejected.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diagnostics::{
    conservation_ledger, field_error, fit_affine, fit_rate, write_ledger_csv, AffineFit, Conserved, ErrorRecord, Ledger,
    RateFit,
};
use crate::error::{Result, WkbError};
use crate::grenier::{
    assemble_super, euler_residual, reconstruct, solve_corrector, solve_grenier, CorrectorPair, EulerResidual,
    GrenierOptions, GrenierTrajectory,
};
use crate::grid::{Grid, Point};
use crate::model::{Nonlinearity, NonlinearitySpec, Profile};
use crate::nls::{initial_data, solve, NlsModel, NlsRun, SolveOptions, DEFAULT_MASS_TOLERANCE};
use crate::rays::{
    build_eikonal_at, caustic_horizon, label_grid_for, trace_rays, uniform_times, EikonalField, Phase, Potential,
    RayBundle, DEFAULT_C0,
};
use crate::weak::{assemble_weak, build_weak, limit_phase_mol, WeakWkbField};

pub const DEFAULT_POINTS: usize = 1024;
pub const DEFAULT_HALF_WIDTH: f64 = 12.0;
pub const DEFAULT_SNAPSHOTS: usize = 50;

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
}

fn one() -> usize {
    1
}
fn default_points() -> usize {
    DEFAULT_POINTS
}
fn default_half_width() -> f64 {
    DEFAULT_HALF_WIDTH
}
fn default_snapshots() -> usize {
    DEFAULT_SNAPSHOTS
}
fn default_substeps() -> usize {
    20
}
fn default_label_factor() -> f64 {
    1.5
}
fn default_name() -> String {
    "custom".into()
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            dim: 1,
            points: DEFAULT_POINTS,
            half_width: DEFAULT_HALF_WIDTH,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PotentialSpec {
    #[default]
    Zero,
    /// `Σ ω_j² x_j² / 2`
    Harmonic { omega: Vec<f64> },
    GaussianWell { depth: f64, width: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhaseSpec {
    #[default]
    Zero,
    QuadraticFocusing { t_focus: f64 },
    PowerFocusing { t_focus: f64, delta: f64 },
    GaussianBump { alpha: f64, width: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LawName {
    None,
    Cubic,
    CubicQuintic,
    Saturable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearityConfig {
    pub law: LawName,
    pub kappa: f64,
    /// Coefficient `g` of `cubic-quintic`.
    #[serde(default, skip_serializing_if = "is_zero_f64")]
    pub quintic: f64,
}

fn is_zero_f64(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProfileSpec {
    #[default]
    Zero,
    Gaussian {
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        center: Vec<f64>,
        width: f64,
        amplitude: f64,
    },
    Hermite1 {
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        center: Vec<f64>,
        width: f64,
        amplitude: f64,
    },
    Bump {
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        center: Vec<f64>,
        radius: f64,
        amplitude: f64,
    },
    Table { xs: Vec<f64>, values: Vec<f64> },
}

impl ProfileSpec {
    pub fn gaussian(width: f64, amplitude: f64) -> Self {
        ProfileSpec::Gaussian {
            center: Vec::new(),
            width,
            amplitude,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// `κ > 1/2`: transported amplitude with the phase shift `G`.
    Weak,
    /// `κ = 0`: Grenier limit system with first-order corrector.
    Super,
    ReferenceOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_mass")]
    pub mass: f64,
    /// Jacobian floor defining the caustic horizon.
    #[serde(default = "default_c0")]
    pub caustic_c0: f64,
}

fn default_mass() -> f64 {
    DEFAULT_MASS_TOLERANCE
}
fn default_c0() -> f64 {
    DEFAULT_C0
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            mass: DEFAULT_MASS_TOLERANCE,
            caustic_c0: DEFAULT_C0,
        }
    }
}

/// Small-time study of the uncorrected supercritical approximant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmallTimeSpec {
    pub epsilon: f64,
    pub times: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub potential: PotentialSpec,
    #[serde(default)]
    pub phase: PhaseSpec,
    pub nonlinearity: NonlinearityConfig,
    #[serde(default = "default_a0")]
    pub a0: ProfileSpec,
    #[serde(default)]
    pub a1: ProfileSpec,
    pub epsilons: Vec<f64>,
    pub t_final: f64,
    #[serde(default = "default_snapshots")]
    pub snapshot_count: usize,
    pub regime: Regime,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Stored ray times per snapshot interval (quadrature nodes for `G`).
    #[serde(default = "default_substeps")]
    pub ray_substeps: usize,
    /// Label box half width relative to the spatial box.
    #[serde(default = "default_label_factor")]
    pub label_factor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub small_time: Option<SmallTimeSpec>,
    /// Euler residuals of the limit system at the base and halved snapshot interval.
    #[serde(default)]
    pub euler_check: bool,
    /// Solve the `ε > 0` Grenier system and compare its reconstruction with the reference.
    #[serde(default)]
    pub grenier_oracle: bool,
    #[serde(default)]
    pub dump_snapshots: bool,
}

fn default_a0() -> ProfileSpec {
    ProfileSpec::gaussian(1.0, 1.0)
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(WkbError::validation(path, format!("must be positive and finite, got {v}")))
    }
}

fn point(path: &str, center: &[f64], dim: usize) -> Result<Point> {
    if center.len() > dim {
        return Err(WkbError::validation(
            path,
            format!("has {} coordinates but the grid is {dim}-dimensional", center.len()),
        ));
    }
    let mut p = [0.0; 2];
    for (slot, v) in p.iter_mut().zip(center) {
        if !v.is_finite() {
            return Err(WkbError::validation(path, "coordinates must be finite"));
        }
        *slot = *v;
    }
    Ok(p)
}

impl PotentialSpec {
    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            PotentialSpec::Zero => Ok(()),
            PotentialSpec::Harmonic { omega } => {
                if omega.len() != dim {
                    return Err(WkbError::validation(
                        "potential.omega",
                        format!("needs {dim} frequencies, got {}", omega.len()),
                    ));
                }
                if omega.iter().any(|w| !w.is_finite()) {
                    return Err(WkbError::validation("potential.omega", "frequencies must be finite"));
                }
                Ok(())
            }
            PotentialSpec::GaussianWell { depth, width } => {
                if !depth.is_finite() {
                    return Err(WkbError::validation("potential.depth", "must be finite"));
                }
                positive("potential.width", *width)
            }
        }
    }

    pub fn build(&self) -> Potential {
        match self {
            PotentialSpec::Zero => Potential::Zero,
            PotentialSpec::Harmonic { omega } => Potential::harmonic(omega),
            PotentialSpec::GaussianWell { depth, width } => Potential::gaussian_well(*depth, *width),
        }
    }
}

impl PhaseSpec {
    fn validate(&self) -> Result<()> {
        match self {
            PhaseSpec::Zero => Ok(()),
            PhaseSpec::QuadraticFocusing { t_focus } => positive("phase.t_focus", *t_focus),
            PhaseSpec::PowerFocusing { t_focus, delta } => {
                positive("phase.t_focus", *t_focus)?;
                if !(*delta >= 0.0 && delta.is_finite()) {
                    return Err(WkbError::validation("phase.delta", "must be nonnegative and finite"));
                }
                Ok(())
            }
            PhaseSpec::GaussianBump { alpha, width } => {
                if !alpha.is_finite() {
                    return Err(WkbError::validation("phase.alpha", "must be finite"));
                }
                positive("phase.width", *width)
            }
        }
    }

    pub fn build(&self) -> Phase {
        match self {
            PhaseSpec::Zero => Phase::Zero,
            PhaseSpec::QuadraticFocusing { t_focus } => Phase::QuadraticFocusing { t_focus: *t_focus },
            PhaseSpec::PowerFocusing { t_focus, delta } => Phase::power_focusing(*t_focus, *delta),
            PhaseSpec::GaussianBump { alpha, width } => Phase::gaussian_bump(*alpha, *width),
        }
    }
}

impl NonlinearityConfig {
    pub fn build(&self) -> Result<NonlinearitySpec> {
        if self.quintic != 0.0 && self.law != LawName::CubicQuintic {
            return Err(WkbError::validation(
                "nonlinearity.quintic",
                "only applies to the cubic-quintic law",
            ));
        }
        if !self.quintic.is_finite() {
            return Err(WkbError::validation("nonlinearity.quintic", "must be finite"));
        }
        let law = match self.law {
            LawName::None => Nonlinearity::None,
            LawName::Cubic => Nonlinearity::Cubic,
            LawName::CubicQuintic => Nonlinearity::CubicQuintic { g: self.quintic },
            LawName::Saturable => Nonlinearity::Saturable,
        };
        NonlinearitySpec::new(law, self.kappa)
    }
}

impl ProfileSpec {
    pub fn build(&self, path: &str, dim: usize) -> Result<Profile> {
        let profile = match self {
            ProfileSpec::Zero => Profile::Zero,
            ProfileSpec::Gaussian { center, width, amplitude } => Profile::Gaussian {
                center: point(&format!("{path}.center"), center, dim)?,
                width: *width,
                amplitude: *amplitude,
            },
            ProfileSpec::Hermite1 { center, width, amplitude } => Profile::Hermite1 {
                center: point(&format!("{path}.center"), center, dim)?,
                width: *width,
                amplitude: *amplitude,
            },
            ProfileSpec::Bump { center, radius, amplitude } => Profile::Bump {
                center: point(&format!("{path}.center"), center, dim)?,
                radius: *radius,
                amplitude: *amplitude,
            },
            ProfileSpec::Table { xs, values } => Profile::Table {
                xs: xs.clone(),
                values: values.clone(),
            },
        };
        profile.validate(path)?;
        Ok(profile)
    }
}

impl ScenarioConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.dim, self.grid.points, self.grid.half_width)
    }

    /// Checks every invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        let dim = grid.dim();
        let spec = self.nonlinearity.build()?;
        let kappa = spec.kappa;
        match self.regime {
            Regime::Weak if kappa <= 0.5 => {
                return Err(WkbError::validation(
                    "regime",
                    format!("the weak regime requires kappa > 1/2, got kappa = {kappa}"),
                ))
            }
            Regime::Super if kappa != 0.0 => {
                return Err(WkbError::validation(
                    "regime",
                    format!("the super regime requires kappa = 0, got kappa = {kappa}"),
                ))
            }
            Regime::Super if spec.law.is_none() => {
                return Err(WkbError::validation(
                    "nonlinearity.law",
                    "the super regime needs a defocusing nonlinearity",
                ))
            }
            _ => {}
        }
        self.potential.validate(dim)?;
        self.phase.validate()?;
        let a0 = self.a0.build("a0", dim)?;
        if a0.is_zero() {
            return Err(WkbError::validation("a0", "must not vanish identically"));
        }
        self.a1.build("a1", dim)?;
        if self.epsilons.is_empty() {
            return Err(WkbError::validation("epsilons", "needs at least one value"));
        }
        for (i, e) in self.epsilons.iter().enumerate() {
            if !(*e > 0.0 && *e <= 1.0) {
                return Err(WkbError::validation(format!("epsilons[{i}]"), format!("must lie in (0, 1], got {e}")));
            }
        }
        positive("t_final", self.t_final)?;
        if self.snapshot_count < 2 {
            return Err(WkbError::validation("snapshot_count", "must be at least 2"));
        }
        if self.ray_substeps == 0 {
            return Err(WkbError::validation("ray_substeps", "must be at least 1"));
        }
        if !(self.label_factor >= 1.0 && self.label_factor.is_finite()) {
            return Err(WkbError::validation("label_factor", "must be at least 1"));
        }
        positive("tolerances.mass", self.tolerances.mass)?;
        let c0 = self.tolerances.caustic_c0;
        if !(c0 > 0.0 && c0 < 1.0) {
            return Err(WkbError::validation("tolerances.caustic_c0", format!("must lie in (0, 1), got {c0}")));
        }
        let super_only = |flag: bool, path: &str| {
            if flag && self.regime != Regime::Super {
                Err(WkbError::validation(path, "is only available in the super regime"))
            } else {
                Ok(())
            }
        };
        super_only(self.small_time.is_some(), "small_time")?;
        super_only(self.euler_check, "euler_check")?;
        super_only(self.grenier_oracle, "grenier_oracle")?;
        if let Some(st) = &self.small_time {
            if !(st.epsilon > 0.0 && st.epsilon <= 1.0) {
                return Err(WkbError::validation("small_time.epsilon", "must lie in (0, 1]"));
            }
            if st.times.len() < 3 {
                return Err(WkbError::validation("small_time.times", "needs at least three times"));
            }
            if st.times[0] <= 0.0 || st.times.windows(2).any(|w| !(w[1] > w[0])) || st.times.iter().any(|t| !t.is_finite()) {
                return Err(WkbError::validation("small_time.times", "must be positive and strictly increasing"));
            }
        }
        Ok(())
    }

    /// Replaces the ε list and revalidates.
    pub fn override_epsilons(&mut self, epsilons: Vec<f64>) -> Result<()> {
        self.epsilons = epsilons;
        self.validate()
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        uniform_times(self.t_final, self.snapshot_count)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let kind_changed = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changed {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses and validates a scenario document, expanding `preset`.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let mut value: Value = serde_json::from_str(text)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| WkbError::validation(".", "a scenario must be a JSON object"))?;
    if let Some(p) = obj.remove("preset") {
        let name = p
            .as_str()
            .ok_or_else(|| WkbError::validation("preset", "must be a string"))?
            .to_string();
        let mut base = serde_json::to_value(preset(&name)?)?;
        merge(&mut base, Value::Object(std::mem::take(obj)));
        value = base;
    }
    let config: ScenarioConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        WkbError::validation(path, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// presets

pub const PRESETS: &[(&str, &str)] = &[
    ("caustic-delta0", "V = 0, quadratic focusing phase (T = 1), cubic kappa = 1; rays meet at t = 1"),
    ("harmonic-trap", "harmonic potential (omega = 1), flat phase, cubic kappa = 1"),
    ("critical-free", "free flow, cubic kappa = 1, phase shift G at leading order"),
    ("subcritical-free", "free flow, cubic kappa = 2, no leading-order nonlinear effect"),
    ("intermediate-free", "free flow, cubic kappa = 0.75"),
    ("supercritical-free", "free flow, cubic kappa = 0, Grenier limit and corrector, small-time and Euler checks"),
    ("reference-linear", "linear free flow, reference solver and conservation ledgers only"),
];

fn weak_free(name: &str, kappa: f64) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        grid: GridSpec::default(),
        potential: PotentialSpec::Zero,
        phase: PhaseSpec::Zero,
        nonlinearity: NonlinearityConfig {
            law: LawName::Cubic,
            kappa,
            quintic: 0.0,
        },
        a0: default_a0(),
        a1: ProfileSpec::Zero,
        epsilons: vec![0.2, 0.1, 0.05, 0.025],
        t_final: 0.5,
        snapshot_count: DEFAULT_SNAPSHOTS,
        regime: Regime::Weak,
        tolerances: Tolerances::default(),
        ray_substeps: default_substeps(),
        label_factor: default_label_factor(),
        small_time: None,
        euler_check: false,
        grenier_oracle: false,
        dump_snapshots: false,
    }
}

/// Built-in scenario by name.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let config = match name {
        "caustic-delta0" => ScenarioConfig {
            phase: PhaseSpec::QuadraticFocusing { t_focus: 1.0 },
            grid: GridSpec {
                points: 4096,
                ..GridSpec::default()
            },
            epsilons: vec![0.2, 0.1, 0.05],
            t_final: 0.4,
            label_factor: 2.0,
            ..weak_free(name, 1.0)
        },
        "harmonic-trap" => ScenarioConfig {
            potential: PotentialSpec::Harmonic { omega: vec![1.0] },
            grid: GridSpec {
                points: 4096,
                ..GridSpec::default()
            },
            ..weak_free(name, 1.0)
        },
        "critical-free" => weak_free(name, 1.0),
        "subcritical-free" => weak_free(name, 2.0),
        "intermediate-free" => weak_free(name, 0.75),
        "supercritical-free" => ScenarioConfig {
            nonlinearity: NonlinearityConfig {
                law: LawName::Cubic,
                kappa: 0.0,
                quintic: 0.0,
            },
            a1: ProfileSpec::Hermite1 {
                center: Vec::new(),
                width: 1.0,
                amplitude: 1.0,
            },
            epsilons: vec![0.1, 0.05, 0.025],
            regime: Regime::Super,
            ray_substeps: 1,
            small_time: Some(SmallTimeSpec {
                epsilon: 0.01,
                times: vec![0.02, 0.04, 0.08],
            }),
            euler_check: true,
            grenier_oracle: true,
            ..weak_free(name, 0.0)
        },
        "reference-linear" => ScenarioConfig {
            nonlinearity: NonlinearityConfig {
                law: LawName::None,
                kappa: 0.0,
                quintic: 0.0,
            },
            epsilons: vec![0.1],
            regime: Regime::ReferenceOnly,
            ..weak_free(name, 0.0)
        },
        other => {
            let known: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
            return Err(WkbError::validation(
                "preset",
                format!("unknown preset `{other}`; known presets: {}", known.join(", ")),
            ));
        }
    };
    Ok(config)
}

// ---------------------------------------------------------------------------
// report

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorSeries {
    pub label: String,
    pub records: Vec<ErrorRecord>,
}

/// One scalar error per ε feeding a rate fit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClaimValue {
    pub claim: String,
    pub epsilon: f64,
    /// Time at which the error was taken (the maximizer for `-sup` claims).
    pub t: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClaimFit {
    pub claim: String,
    pub fit: RateFit,
}

/// Stored fields of one sweep member, written only when requested.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub reference: Vec<Complex64>,
    pub approximant: Option<Vec<Complex64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemberReport {
    pub epsilon: f64,
    pub dt: f64,
    pub mass_drift: f64,
    pub errors: Vec<ErrorSeries>,
    pub conservation: Vec<Ledger>,
    #[serde(skip)]
    pub snapshots: Vec<Snapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Horizons {
    pub caustic_c0: f64,
    /// `None` when the Jacobian stays above `caustic_c0` up to `t_final`.
    pub caustic: Option<f64>,
    /// Largest `|∇v|` met by the limit system.
    pub max_velocity_gradient: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmallTimeReport {
    pub epsilon: f64,
    pub records: Vec<ErrorRecord>,
    pub fit: AffineFit,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EulerReport {
    pub base: Vec<EulerResidual>,
    pub halved: Vec<EulerResidual>,
    pub base_max: [f64; 2],
    pub halved_max: [f64; 2],
    /// `base_max / halved_max` for (mass, momentum).
    pub ratio: [f64; 2],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepReport {
    pub scenario: String,
    pub regime: Option<Regime>,
    pub kappa: Option<f64>,
    pub times: Vec<f64>,
    pub horizons: Option<Horizons>,
    pub members: Vec<MemberReport>,
    pub claims: Vec<ClaimValue>,
    pub rates: Vec<ClaimFit>,
    pub small_time: Option<SmallTimeReport>,
    pub euler: Option<EulerReport>,
    /// `max |φ̃ - G|` between the Eulerian and Lagrangian phase shifts.
    pub phase_shift_check: Option<f64>,
}

impl SweepReport {
    pub fn empty(scenario: impl Into<String>) -> Self {
        SweepReport {
            scenario: scenario.into(),
            ..SweepReport::default()
        }
    }

    pub fn member(&self, epsilon: f64) -> Option<&MemberReport> {
        self.members.iter().find(|m| m.epsilon == epsilon)
    }

    pub fn rate(&self, claim: &str) -> Option<&RateFit> {
        self.rates.iter().find(|c| c.claim == claim).map(|c| &c.fit)
    }

    pub fn claim_values(&self, claim: &str) -> Vec<&ClaimValue> {
        self.claims.iter().filter(|c| c.claim == claim).collect()
    }
}

pub const CLAIM_WEAK: &str = "weak-final";
pub const CLAIM_WEAK_NO_SHIFT: &str = "weak-no-shift-final";
pub const CLAIM_SUPER_CORRECTED: &str = "super-corrected-sup";
pub const CLAIM_SUPER_UNCORRECTED: &str = "super-uncorrected-sup";
pub const CLAIM_GRENIER_ORACLE: &str = "grenier-oracle-sup";

// ---------------------------------------------------------------------------
// sweep

enum Approximant {
    None,
    Weak {
        eikonal: EikonalField,
        wkb: WeakWkbField,
    },
    Super {
        eikonal: EikonalField,
        limit: GrenierTrajectory,
        corrector: CorrectorPair,
    },
}

struct Setup<'c> {
    config: &'c ScenarioConfig,
    grid: Grid,
    model: NlsModel,
    potential: Potential,
    phase: Phase,
    a0: Profile,
    a1: Profile,
    times: Vec<f64>,
    approximant: Approximant,
}

fn trace(config: &ScenarioConfig, grid: &Grid, potential: &Potential, phase: &Phase, times: &[f64]) -> Result<RayBundle> {
    trace_rays(potential, phase, label_grid_for(grid, config.label_factor)?, times)
}

fn eikonal_on(config: &ScenarioConfig, grid: Grid, bundle: &RayBundle, stride: usize) -> Result<EikonalField> {
    let indices: Vec<usize> = (0..bundle.times.len()).step_by(stride).collect();
    build_eikonal_at(bundle, grid, &indices, config.tolerances.caustic_c0)
}

fn max_pair(res: &[EulerResidual]) -> [f64; 2] {
    res.iter()
        .fold([0.0f64; 2], |m, r| [m[0].max(r.mass_res), m[1].max(r.momentum_res)])
}

impl<'c> Setup<'c> {
    fn new(config: &'c ScenarioConfig) -> Result<(Self, Option<f64>)> {
        let grid = config.grid()?;
        let dim = grid.dim();
        let nonlinearity = config.nonlinearity.build()?;
        let potential = config.potential.build();
        let phase = config.phase.build();
        let a0 = config.a0.build("a0", dim)?;
        let a1 = config.a1.build("a1", dim)?;
        let times = config.snapshot_times();
        let sub = if config.regime == Regime::Weak { config.ray_substeps } else { 1 };
        let bundle = trace(config, &grid, &potential, &phase, &uniform_times(config.t_final, config.snapshot_count * sub))?;
        let horizon = caustic_horizon(&bundle, config.tolerances.caustic_c0);
        let horizon = horizon.is_finite().then_some(horizon);
        let law = nonlinearity.law.clone();
        let approximant = match config.regime {
            Regime::ReferenceOnly => Approximant::None,
            Regime::Weak => {
                let eikonal = eikonal_on(config, grid, &bundle, sub)?;
                let wkb = build_weak(&bundle, &eikonal, &a0, &law, nonlinearity.kappa)?;
                Approximant::Weak { eikonal, wkb }
            }
            Regime::Super => {
                let eikonal = eikonal_on(config, grid, &bundle, 1)?;
                let options = GrenierOptions {
                    store_dense: true,
                    ..GrenierOptions::default()
                };
                let limit = solve_grenier(&eikonal, &a0.sample(&grid), &law, 0.0, &times, &options)?;
                let corrector = solve_corrector(&limit, &eikonal, &a1, &law, 1.0)?;
                Approximant::Super {
                    eikonal,
                    limit,
                    corrector,
                }
            }
        };
        let model = NlsModel {
            potential: potential.clone(),
            nonlinearity,
        };
        Ok((
            Setup {
                config,
                grid,
                model,
                potential,
                phase,
                a0,
                a1,
                times,
                approximant,
            },
            horizon,
        ))
    }

    fn corrections(&self) -> Vec<(f64, Profile)> {
        if self.a1.is_zero() {
            Vec::new()
        } else {
            vec![(1.0, self.a1.clone())]
        }
    }

    fn reference(&self, epsilon: f64, times: &[f64]) -> Result<NlsRun> {
        let u0 = initial_data(&self.grid, &self.a0, &self.corrections(), &self.phase, epsilon)?;
        let options = SolveOptions {
            mass_tolerance: self.config.tolerances.mass,
            ..SolveOptions::default()
        };
        solve(&self.model, &u0, times, options)
    }

    fn member(&self, epsilon: f64) -> Result<(MemberReport, Vec<ClaimValue>)> {
        let run = self.reference(epsilon, &self.times)?;
        let conservation = Conserved::ALL
            .iter()
            .filter(|q| q.applies_to(&self.model))
            .map(|&q| conservation_ledger(&run, q))
            .collect::<Result<Vec<_>>>()?;

        let mut errors = Vec::new();
        let mut claims = Vec::new();
        let mut approximants: Vec<Option<Vec<Complex64>>> = vec![None; self.times.len()];
        let series = |label: &str, f: &dyn Fn(f64) -> Result<crate::grid::WaveField>, keep: bool, slots: &mut Vec<Option<Vec<Complex64>>>| -> Result<ErrorSeries> {
            let mut records = Vec::with_capacity(self.times.len());
            for (m, &t) in self.times.iter().enumerate() {
                let app = f(t)?;
                records.push(field_error(t, &run.fields[m], &app)?);
                if keep {
                    slots[m] = Some(app.into_values());
                }
            }
            Ok(ErrorSeries {
                label: label.into(),
                records,
            })
        };
        let dump = self.config.dump_snapshots;
        match &self.approximant {
            Approximant::None => {}
            Approximant::Weak { eikonal, wkb } => {
                let with = series("weak", &|t| assemble_weak(wkb, eikonal, epsilon, t, true), dump, &mut approximants)?;
                let without = series("weak-no-shift", &|t| assemble_weak(wkb, eikonal, epsilon, t, false), false, &mut approximants)?;
                for (claim, s) in [(CLAIM_WEAK, &with), (CLAIM_WEAK_NO_SHIFT, &without)] {
                    let last = s.records[s.records.len() - 1];
                    claims.push(ClaimValue {
                        claim: claim.into(),
                        epsilon,
                        t: last.t,
                        error: last.l2,
                    });
                }
                errors.push(with);
                errors.push(without);
            }
            Approximant::Super {
                eikonal,
                limit,
                corrector,
            } => {
                let with = series(
                    "super-corrected",
                    &|t| assemble_super(limit, Some(corrector), eikonal, epsilon, t),
                    dump,
                    &mut approximants,
                )?;
                let without = series(
                    "super-uncorrected",
                    &|t| assemble_super(limit, None, eikonal, epsilon, t),
                    false,
                    &mut approximants,
                )?;
                claims.push(sup_claim(CLAIM_SUPER_CORRECTED, epsilon, &with));
                claims.push(sup_claim(CLAIM_SUPER_UNCORRECTED, epsilon, &without));
                errors.push(with);
                errors.push(without);
                if self.config.grenier_oracle {
                    let a_init = initial_data(&self.grid, &self.a0, &self.corrections(), &Phase::Zero, epsilon)?;
                    let traj = solve_grenier(
                        eikonal,
                        a_init.values(),
                        &self.model.nonlinearity.law,
                        epsilon,
                        &self.times,
                        &GrenierOptions::default(),
                    )?;
                    let oracle = series("grenier-oracle", &|t| reconstruct(&traj, eikonal, t), false, &mut approximants)?;
                    claims.push(sup_claim(CLAIM_GRENIER_ORACLE, epsilon, &oracle));
                    errors.push(oracle);
                }
            }
        }

        let snapshots = if dump {
            self.times
                .iter()
                .zip(&run.fields)
                .zip(approximants)
                .map(|((&t, u), app)| Snapshot {
                    t,
                    reference: u.values().to_vec(),
                    approximant: app,
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((
            MemberReport {
                epsilon,
                dt: run.dt,
                mass_drift: run.mass_drift(),
                errors,
                conservation,
                snapshots,
            },
            claims,
        ))
    }

    fn small_time(&self, spec: &SmallTimeSpec) -> Result<SmallTimeReport> {
        let mut times = vec![0.0];
        times.extend_from_slice(&spec.times);
        let bundle = trace(self.config, &self.grid, &self.potential, &self.phase, &times)?;
        let eikonal = eikonal_on(self.config, self.grid, &bundle, 1)?;
        let law = &self.model.nonlinearity.law;
        let limit = solve_grenier(&eikonal, &self.a0.sample(&self.grid), law, 0.0, &times, &GrenierOptions::default())?;
        let run = self.reference(spec.epsilon, &times)?;
        let records = (1..times.len())
            .map(|m| {
                let app = assemble_super(&limit, None, &eikonal, spec.epsilon, times[m])?;
                field_error(times[m], &run.fields[m], &app)
            })
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.t, r.l2)).collect();
        Ok(SmallTimeReport {
            epsilon: spec.epsilon,
            fit: fit_affine(&pairs)?,
            records,
        })
    }

    fn euler(&self) -> Result<Option<EulerReport>> {
        let Approximant::Super { eikonal, limit, .. } = &self.approximant else {
            return Ok(None);
        };
        let law = &self.model.nonlinearity.law;
        let base = euler_residual(limit, eikonal, &self.potential, law)?;
        let fine_times = uniform_times(self.config.t_final, 2 * self.config.snapshot_count);
        let bundle = trace(self.config, &self.grid, &self.potential, &self.phase, &fine_times)?;
        let fine_eikonal = eikonal_on(self.config, self.grid, &bundle, 1)?;
        let fine = solve_grenier(
            &fine_eikonal,
            &self.a0.sample(&self.grid),
            law,
            0.0,
            &fine_times,
            &GrenierOptions::default(),
        )?;
        let halved = euler_residual(&fine, &fine_eikonal, &self.potential, law)?;
        let base_max = max_pair(&base);
        let halved_max = max_pair(&halved);
        Ok(Some(EulerReport {
            ratio: [base_max[0] / halved_max[0], base_max[1] / halved_max[1]],
            base,
            halved,
            base_max,
            halved_max,
        }))
    }

    fn phase_shift_check(&self) -> Result<Option<f64>> {
        let Approximant::Weak { eikonal, wkb } = &self.approximant else {
            return Ok(None);
        };
        let (_, shifts) = limit_phase_mol(eikonal, &self.a0, &self.model.nonlinearity.law)?;
        let mut worst: f64 = 0.0;
        for (phit, g) in shifts.iter().zip(&wkb.g) {
            for (a, b) in phit.values().iter().zip(g.values()) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(Some(worst))
    }
}

fn sup_claim(claim: &str, epsilon: f64, s: &ErrorSeries) -> ClaimValue {
    let worst = s
        .records
        .iter()
        .fold(s.records[0], |m, r| if r.l2 > m.l2 { *r } else { m });
    ClaimValue {
        claim: claim.into(),
        epsilon,
        t: worst.t,
        error: worst.l2,
    }
}

/// Runs the reference solver and the regime's approximants for every ε
/// (concurrently), then fits rates across ε.
pub fn run_sweep(config: &ScenarioConfig) -> Result<SweepReport> {
    config.validate()?;
    let scenario = |e: WkbError| e.annotate(format!("scenario `{}`", config.name));
    let (setup, caustic) = Setup::new(config).map_err(scenario)?;

    let members = config
        .epsilons
        .par_iter()
        .map(|&eps| {
            setup
                .member(eps)
                .map_err(|e| e.annotate(format!("scenario `{}`, epsilon = {eps}", config.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let small_time = match &config.small_time {
        Some(spec) => Some(setup.small_time(spec).map_err(|e| {
            e.annotate(format!("scenario `{}`, small-time epsilon = {}", config.name, spec.epsilon))
        })?),
        None => None,
    };
    let euler = setup.euler().map_err(scenario)?;
    let phase_shift_check = setup.phase_shift_check().map_err(scenario)?;

    let mut claims: Vec<ClaimValue> = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut reports = Vec::with_capacity(members.len());
    for (report, member_claims) in members {
        for c in &member_claims {
            if !order.contains(&c.claim) {
                order.push(c.claim.clone());
            }
        }
        claims.extend(member_claims);
        reports.push(report);
    }
    claims.sort_by_key(|c| order.iter().position(|o| *o == c.claim));
    let mut rates = Vec::new();
    for claim in &order {
        let pairs: Vec<(f64, f64)> = claims
            .iter()
            .filter(|c| &c.claim == claim)
            .map(|c| (c.epsilon, c.error))
            .collect();
        if pairs.len() >= 3 && pairs.iter().all(|p| p.1 > 0.0) {
            rates.push(ClaimFit {
                claim: claim.clone(),
                fit: fit_rate(&pairs)?,
            });
        }
    }
    let max_velocity_gradient = match &setup.approximant {
        Approximant::Super { limit, .. } => Some(limit.max_velocity_gradient),
        _ => None,
    };
    Ok(SweepReport {
        scenario: config.name.clone(),
        regime: Some(config.regime),
        kappa: Some(config.nonlinearity.kappa),
        times: setup.times.clone(),
        horizons: Some(Horizons {
            caustic_c0: config.tolerances.caustic_c0,
            caustic,
            max_velocity_gradient,
        }),
        members: reports,
        claims,
        rates,
        small_time,
        euler,
        phase_shift_check,
    })
}

// ---------------------------------------------------------------------------
// output

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WkbError + '_ {
    move |source| WkbError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(io_err(path))
}

/// Writes `report.json`, `tables.csv`, one ledger CSV per ε and, when
/// snapshots were kept, one field CSV per ε under `snapshots/`.
pub fn emit_report(report: &SweepReport, out_dir: &Path, grid: Option<&Grid>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();

    let path = out_dir.join("report.json");
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    written.push(path);

    let path = out_dir.join("tables.csv");
    {
        let mut w = csv::Writer::from_writer(create(&path)?);
        w.write_record(["claim", "epsilon", "t", "error"])?;
        for c in &report.claims {
            w.write_record([c.claim.clone(), c.epsilon.to_string(), c.t.to_string(), c.error.to_string()])?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    written.push(path);

    for m in &report.members {
        let path = out_dir.join(format!("ledger-eps{}.csv", m.epsilon));
        write_ledger_csv(&m.conservation, create(&path)?).map_err(|e| e.annotate(path.display().to_string()))?;
        written.push(path);
    }

    let with_snapshots: Vec<&MemberReport> = report.members.iter().filter(|m| !m.snapshots.is_empty()).collect();
    if let (Some(grid), false) = (grid, with_snapshots.is_empty()) {
        let dir = out_dir.join("snapshots");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for m in with_snapshots {
            let path = dir.join(format!("eps{}.csv", m.epsilon));
            let mut w = csv::Writer::from_writer(create(&path)?);
            let mut header = vec!["t", "x0"];
            if grid.dim() == 2 {
                header.push("x1");
            }
            header.extend(["re_u", "im_u", "re_approx", "im_approx"]);
            w.write_record(&header)?;
            for s in &m.snapshots {
                for (i, u) in s.reference.iter().enumerate() {
                    let x = grid.node(i);
                    let mut row = vec![s.t.to_string(), x[0].to_string()];
                    if grid.dim() == 2 {
                        row.push(x[1].to_string());
                    }
                    let app = s.approximant.as_ref().map(|a| a[i]);
                    row.push(u.re.to_string());
                    row.push(u.im.to_string());
                    row.push(app.map_or(String::new(), |z| z.re.to_string()));
                    row.push(app.map_or(String::new(), |z| z.im.to_string()));
                    w.write_record(&row)?;
                }
            }
            w.flush().map_err(io_err(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Plain-text summary of a report.
pub fn summarize<W: Write>(report: &SweepReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "scenario {}", report.scenario)?;
    if let Some(h) = &report.horizons {
        match h.caustic {
            Some(t) => writeln!(out, "  caustic horizon (c0 = {}): t = {t}", h.caustic_c0)?,
            None => writeln!(out, "  no caustic before t_final (c0 = {})", h.caustic_c0)?,
        }
        if let Some(g) = h.max_velocity_gradient {
            writeln!(out, "  limit system max |grad v| = {g:.4e}")?;
        }
    }
    for m in &report.members {
        write!(out, "  eps = {:<8} dt = {:.3e}  mass drift = {:.2e}", m.epsilon, m.dt, m.mass_drift)?;
        for l in &m.conservation {
            if l.quantity != Conserved::Mass {
                write!(out, "  {:?} = {:.2e}", l.quantity, l.max_drift)?;
            }
        }
        writeln!(out)?;
    }
    for c in &report.claims {
        writeln!(out, "  {:<24} eps = {:<8} t = {:<6} error = {:.4e}", c.claim, c.epsilon, c.t, c.error)?;
    }
    for r in &report.rates {
        writeln!(out, "  rate {:<19} slope = {:.4}  r2 = {:.5}", r.claim, r.fit.slope, r.fit.r2)?;
    }
    if let Some(s) = &report.small_time {
        writeln!(
            out,
            "  small time (eps = {}): slope = {:.4e}, max relative residual = {:.3e}",
            s.epsilon, s.fit.slope, s.fit.max_relative_residual
        )?;
    }
    if let Some(e) = &report.euler {
        writeln!(
            out,
            "  Euler residuals: base {:.3e}/{:.3e}, halved {:.3e}/{:.3e}, ratios {:.3}/{:.3}",
            e.base_max[0], e.base_max[1], e.halved_max[0], e.halved_max[1], e.ratio[0], e.ratio[1]
        )?;
    }
    if let Some(p) = report.phase_shift_check {
        writeln!(out, "  max |phi~ - G| = {p:.3e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn minimal() -> &'static str {
        r#"{"nonlinearity": {"law": "cubic", "kappa": 1}, "epsilons": [0.1], "t_final": 0.5, "regime": "weak"}"#
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config(minimal()).unwrap();
        assert_eq!(c.grid, GridSpec { dim: 1, points: 1024, half_width: 12.0 });
        assert_eq!(c.snapshot_count, 50);
        assert_eq!(c.potential, PotentialSpec::Zero);
        assert_eq!(c.tolerances, Tolerances::default());
    }

    #[test]
    fn weak_regime_rejects_small_kappa() {
        let text = minimal().replace("\"kappa\": 1", "\"kappa\": 0.3");
        let err = parse_config(&text).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("kappa > 1/2"), "{err}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = minimal().replace("\"t_final\"", "\"grid\": {\"pionts\": 64}, \"t_final\"");
        let err = parse_config(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("grid") && msg.contains("pionts"), "{msg}");
    }

    #[test]
    fn grid_must_be_power_of_two() {
        let text = minimal().replace("\"t_final\"", "\"grid\": {\"points\": 1000}, \"t_final\"");
        let err = parse_config(&text).unwrap_err();
        assert!(err.to_string().contains("grid.points"), "{err}");
    }

    #[test]
    fn regime_super_needs_kappa_zero() {
        let text = minimal().replace("\"weak\"", "\"super\"");
        assert!(parse_config(&text).unwrap_err().to_string().contains("kappa = 0"));
    }

    #[test]
    fn caustic_preset_expands() {
        let c = parse_config(r#"{"preset": "caustic-delta0"}"#).unwrap();
        assert_eq!(c.potential, PotentialSpec::Zero);
        assert_eq!(c.phase, PhaseSpec::QuadraticFocusing { t_focus: 1.0 });
    }

    #[test]
    fn preset_overrides_merge() {
        let c = parse_config(r#"{"preset": "critical-free", "nonlinearity": {"kappa": 2}, "potential": {"kind": "harmonic", "omega": [2.0]}}"#).unwrap();
        assert_eq!(c.nonlinearity.kappa, 2.0);
        assert_eq!(c.nonlinearity.law, LawName::Cubic);
        assert_eq!(c.potential, PotentialSpec::Harmonic { omega: vec![2.0] });
        assert_eq!(c.epsilons.len(), 4);
    }

    #[test]
    fn every_preset_validates_and_round_trips() {
        for (name, _) in PRESETS {
            let c = preset(name).unwrap();
            c.validate().unwrap();
            let text = serde_json::to_string(&c).unwrap();
            assert_eq!(parse_config(&text).unwrap(), c, "{name}");
        }
        assert!(preset("nope").unwrap_err().to_string().contains("caustic-delta0"));
    }

    #[test]
    fn field_paths_for_values() {
        let text = minimal().replace("[0.1]", "[0.1, -0.2]");
        assert!(parse_config(&text).unwrap_err().to_string().contains("epsilons[1]"));
        let text = minimal().replace("\"t_final\"", "\"a0\": {\"kind\": \"gaussian\", \"width\": -1, \"amplitude\": 1}, \"t_final\"");
        assert!(parse_config(&text).unwrap_err().to_string().contains("a0.width"));
    }

    proptest! {
        #[test]
        fn valid_configs_round_trip(
            eps in proptest::collection::vec(1e-3f64..1.0, 1..6),
            kappa in 0.51f64..4.0,
            log_points in 3u32..13,
            snaps in 2usize..200,
        ) {
            let mut c = preset("critical-free").unwrap();
            c.epsilons = eps;
            c.nonlinearity.kappa = kappa;
            c.grid.points = 1 << log_points;
            c.snapshot_count = snaps;
            c.validate().unwrap();
            let text = serde_json::to_string(&c).unwrap();
            prop_assert_eq!(parse_config(&text).unwrap(), c.clone());
            let over = format!(r#"{{"preset": "critical-free", "epsilons": {:?}, "nonlinearity": {{"kappa": {kappa:?}}}, "grid": {{"points": {}}}, "snapshot_count": {snaps}}}"#, c.epsilons, c.grid.points);
            prop_assert_eq!(parse_config(&over).unwrap(), c);
        }

        #[test]
        fn weak_rejects_every_kappa_up_to_one_half(kappa in 0.0f64..=0.5) {
            let mut c = preset("critical-free").unwrap();
            c.nonlinearity.kappa = kappa;
            let err = c.validate().unwrap_err();
            prop_assert!(err.is_validation());
            prop_assert!(err.to_string().contains("kappa > 1/2"));
        }
    }

    #[test]
    fn empty_report_serializes_with_empty_arrays() {
        let v = serde_json::to_value(SweepReport::empty("none")).unwrap();
        assert_eq!(v["members"], serde_json::json!([]));
        assert_eq!(v["claims"], serde_json::json!([]));
        assert_eq!(v["rates"], serde_json::json!([]));
    }
}
