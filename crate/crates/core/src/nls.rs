//! Strang-split spectral solver for
//! `iε ∂ₜu + (ε²/2) Δu = V u + ε^κ f(|u|²) u`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Result, WkbError};
use crate::grid::{Grid, WaveField};
use crate::model::{NonlinearitySpec, Profile};
use crate::rays::{Phase, Potential};

/// Grid points required per local wavelength `2πε/|∇φ|`.
pub const POINTS_PER_WAVELENGTH: f64 = 6.0;

/// Amplitudes below this fraction of the peak do not count as mass-supporting.
pub const SUPPORT_THRESHOLD: f64 = 1e-8;

pub const DEFAULT_MASS_TOLERANCE: f64 = 1e-11;

/// Largest fraction of mass tolerated within `L/8` of the box edge.
pub const BOUNDARY_MASS_LIMIT: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct NlsModel {
    pub potential: Potential,
    pub nonlinearity: NonlinearitySpec,
}

/// Indices of nodes where `|a| > SUPPORT_THRESHOLD · max|a|`.
pub fn support_mask(values: &[Complex64]) -> Vec<bool> {
    let peak = values.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    values.iter().map(|z| z.norm() > SUPPORT_THRESHOLD * peak).collect()
}

/// Fails if the spacing exceeds `2πε / (POINTS_PER_WAVELENGTH · max|∇φ|)`.
pub fn check_resolution(grid: &Grid, max_gradient: f64, epsilon: f64) -> Result<()> {
    if max_gradient <= 0.0 {
        return Ok(());
    }
    let allowed = 2.0 * PI * epsilon / (POINTS_PER_WAVELENGTH * max_gradient);
    let spacing = grid.spacing();
    if spacing <= allowed {
        return Ok(());
    }
    let needed = (2.0 * grid.half_width() / allowed).ceil() as usize;
    Err(WkbError::Resolution {
        spacing,
        allowed,
        min_points: needed.next_power_of_two(),
    })
}

/// `(a₀ + Σ ε^γ a_γ) e^{iφ₀/ε}` sampled on the grid.
pub fn initial_data(
    grid: &Grid,
    a0: &Profile,
    corrections: &[(f64, Profile)],
    phase: &Phase,
    epsilon: f64,
) -> Result<WaveField> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(WkbError::validation("epsilon", "must lie in (0, 1]"));
    }
    let dim = grid.dim();
    let mut amp = a0.sample(grid);
    for (gamma, profile) in corrections {
        let w = epsilon.powf(*gamma);
        for (a, x) in amp.iter_mut().zip(grid.nodes()) {
            *a += w * profile.eval(x, dim);
        }
    }
    let support = support_mask(&amp);
    let max_grad = grid
        .nodes()
        .zip(&support)
        .filter(|(_, &s)| s)
        .map(|(x, _)| {
            let g = phase.gradient(x);
            (0..dim).map(|a| g[a] * g[a]).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    check_resolution(grid, max_grad, epsilon)?;
    let values = amp
        .iter()
        .zip(grid.nodes())
        .map(|(a, x)| a * Complex64::from_polar(1.0, phase.value(x) / epsilon))
        .collect();
    WaveField::new(*grid, values, Some(epsilon))
}

/// Reusable split-step propagator for one grid, ε and model.
pub struct SplitStepper<'m> {
    grid: Grid,
    epsilon: f64,
    coupling: f64,
    model: &'m NlsModel,
    half_kinetic: Option<(f64, Vec<Complex64>)>,
    static_potential: Option<Vec<f64>>,
}

impl<'m> SplitStepper<'m> {
    pub fn new(grid: Grid, epsilon: f64, model: &'m NlsModel) -> Self {
        let static_potential = if model.potential.is_time_dependent() {
            None
        } else {
            Some(model.potential.sample(&grid, 0.0))
        };
        SplitStepper {
            grid,
            epsilon,
            coupling: model.nonlinearity.coupling(epsilon),
            model,
            half_kinetic: None,
            static_potential,
        }
    }

    fn kinetic(&mut self, dt: f64) -> &[Complex64] {
        let stale = !matches!(&self.half_kinetic, Some((h, _)) if *h == dt);
        if stale {
            let eps = self.epsilon;
            let grid = self.grid;
            let m = (0..grid.len())
                .map(|idx| {
                    let k = grid.wave_vector(idx);
                    Complex64::from_polar(1.0, -eps * (k[0] * k[0] + k[1] * k[1]) * dt / 4.0)
                })
                .collect();
            self.half_kinetic = Some((dt, m));
        }
        &self.half_kinetic.as_ref().expect("kinetic multiplier cached").1
    }

    fn kinetic_half_step(&mut self, u: &mut [Complex64], dt: f64) {
        let grid = self.grid;
        grid.forward(u);
        let m = self.kinetic(dt);
        for (z, w) in u.iter_mut().zip(m) {
            *z *= w;
        }
        grid.inverse(u);
    }

    /// One Strang step from `t` to `t + dt`, in place.
    pub fn step(&mut self, u: &mut [Complex64], t: f64, dt: f64) {
        self.kinetic_half_step(u, dt);
        let law = &self.model.nonlinearity.law;
        let c = self.coupling;
        let scale = -dt / self.epsilon;
        match &self.static_potential {
            Some(v) => {
                for (z, vv) in u.iter_mut().zip(v) {
                    let phase = scale * (vv + c * law.f(z.norm_sqr()));
                    *z *= Complex64::from_polar(1.0, phase);
                }
            }
            None => {
                let tm = t + 0.5 * dt;
                for (z, x) in u.iter_mut().zip(self.grid.nodes()) {
                    let phase = scale * (self.model.potential.value(tm, x) + c * law.f(z.norm_sqr()));
                    *z *= Complex64::from_polar(1.0, phase);
                }
            }
        }
        self.kinetic_half_step(u, dt);
    }
}

/// A single Strang step of `u` (which must carry its ε).
pub fn strang_step(u: &WaveField, t: f64, dt: f64, model: &NlsModel) -> Result<WaveField> {
    if !(dt > 0.0) {
        return Err(WkbError::Config("time step must be positive".into()));
    }
    let eps = u
        .epsilon()
        .ok_or_else(|| WkbError::Config("wave field carries no epsilon".into()))?;
    let mut values = u.values().to_vec();
    SplitStepper::new(*u.grid(), eps, model).step(&mut values, t, dt);
    WaveField::new(*u.grid(), values, Some(eps))
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    /// Overrides the default `min(T/2000, 0.1 ε)`.
    pub dt: Option<f64>,
    pub mass_tolerance: f64,
    pub check_boundary: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            dt: None,
            mass_tolerance: DEFAULT_MASS_TOLERANCE,
            check_boundary: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MassSample {
    pub t: f64,
    pub mass: f64,
}

#[derive(Clone, Debug)]
pub struct NlsRun {
    pub epsilon: f64,
    pub model: NlsModel,
    pub times: Vec<f64>,
    pub fields: Vec<WaveField>,
    /// Mass after every step, starting with the initial datum.
    pub mass_record: Vec<MassSample>,
    pub dt: f64,
}

impl NlsRun {
    pub fn grid(&self) -> &Grid {
        self.fields[0].grid()
    }

    /// Largest `|M(t) - M(0)| / M(0)` over the per-step record.
    pub fn mass_drift(&self) -> f64 {
        let m0 = self.mass_record[0].mass;
        if m0 == 0.0 {
            return 0.0;
        }
        self.mass_record
            .iter()
            .map(|s| (s.mass - m0).abs() / m0)
            .fold(0.0, f64::max)
    }

    pub fn field_at(&self, t: f64) -> Result<&WaveField> {
        crate::rays::find_time(&self.times, t).map(|m| &self.fields[m])
    }
}

pub fn default_dt(t_final: f64, epsilon: f64) -> f64 {
    (t_final / 2000.0).min(0.1 * epsilon)
}

/// Integrates from `times[0]` and stores `u` at every entry of `times`.
pub fn solve(model: &NlsModel, u0: &WaveField, times: &[f64], options: SolveOptions) -> Result<NlsRun> {
    let epsilon = u0
        .epsilon()
        .ok_or_else(|| WkbError::Config("initial datum carries no epsilon".into()))?;
    if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(WkbError::Config("snapshot times must be strictly increasing".into()));
    }
    let grid = *u0.grid();
    let span = times[times.len() - 1] - times[0];
    let dt = options.dt.unwrap_or_else(|| default_dt(span, epsilon));
    if !(dt > 0.0) {
        return Err(WkbError::Config("time step must be positive".into()));
    }

    let mut stepper = SplitStepper::new(grid, epsilon, model);
    let mut u = u0.values().to_vec();
    let m0 = u0.mass();
    let mut mass_record = vec![MassSample { t: times[0], mass: m0 }];
    let mut fields = Vec::with_capacity(times.len());
    let boundary_width = grid.half_width() / 8.0;

    let check_snapshot = |field: &WaveField, t: f64| -> Result<()> {
        if options.check_boundary {
            let fraction = field.boundary_mass_fraction(boundary_width);
            if fraction > BOUNDARY_MASS_LIMIT {
                return Err(WkbError::DomainTooSmall { t, fraction });
            }
        }
        Ok(())
    };

    fields.push(u0.clone());
    check_snapshot(u0, times[0])?;
    let mut t = times[0];
    for &target in &times[1..] {
        let n = ((target - t) / dt - 1e-9).ceil().max(1.0) as usize;
        let h = (target - t) / n as f64;
        for k in 0..n {
            let tk = t + k as f64 * h;
            stepper.step(&mut u, tk, h);
            let mass = grid.integrate_real(&u.iter().map(|z| z.norm_sqr()).collect::<Vec<_>>());
            let t_now = tk + h;
            if !mass.is_finite() || (m0 > 0.0 && (mass - m0).abs() / m0 > options.mass_tolerance) {
                return Err(WkbError::NumericalInstability {
                    t: t_now,
                    detail: format!("relative mass drift {:e}", (mass - m0).abs() / m0),
                });
            }
            mass_record.push(MassSample { t: t_now, mass });
        }
        t = target;
        let field = WaveField::new(grid, u.clone(), Some(epsilon))?;
        check_snapshot(&field, t)?;
        fields.push(field);
    }

    Ok(NlsRun {
        epsilon,
        model: model.clone(),
        times: times.to_vec(),
        fields,
        mass_record,
        dt,
    })
}
