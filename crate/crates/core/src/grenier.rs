//! Supercritical regime (`κ = 0`): the phase–amplitude system
//!
//! ```text
//! ∂ₜφ + ½|∇φ|² + ∇φ_eik·∇φ + f(|a|²) = 0
//! ∂ₜa + (∇φ + ∇φ_eik)·∇a + ½a(Δφ + Δφ_eik) = (iε/2)Δa
//! ```
//!
//! in velocity form (`v = ∇φ` evolved alongside `φ`), its `ε = 0` limit, the
//! first-order corrector `(a⁽¹⁾, φ⁽¹⁾)`, the assembled approximants and the
//! residuals of the limiting Euler system.

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Result, WkbError};
use crate::grid::{Grid, WaveField};
use crate::model::{Nonlinearity, Profile};
use crate::nls::{check_resolution, support_mask};
use crate::rays::{EikonalField, EikonalSlice, Potential};

/// Shock monitor: abort once `max|∇v|` exceeds this multiple of
/// `max(initial max|∇v|, 1)`.
pub const SHOCK_GROWTH: f64 = 10.0;

/// Blow-up monitor: abort once `max|a|` exceeds this multiple of its initial value.
pub const BLOWUP_GROWTH: f64 = 1e3;

const FLOOR_SAMPLES: usize = 10_000;

/// `inf f′` on `[0, 4 a0_sup²]` by dense sampling; must be positive.
pub fn symmetrizer_floor(law: &Nonlinearity, a0_sup: f64) -> Result<f64> {
    let top = 4.0 * a0_sup * a0_sup;
    let floor = (0..=FLOOR_SAMPLES)
        .map(|k| law.df(top * k as f64 / FLOOR_SAMPLES as f64))
        .fold(f64::INFINITY, f64::min);
    if floor > 0.0 && floor.is_finite() {
        Ok(floor)
    } else {
        Err(WkbError::AssumptionViolation(format!(
            "inf f' on [0, {top}] is {floor}; the supercritical system needs a defocusing law"
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrenierState {
    pub a: Vec<Complex64>,
    /// `v[axis][node]`
    pub v: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
}

impl GrenierState {
    pub fn zeros(grid: &Grid) -> Self {
        GrenierState {
            a: vec![Complex64::new(0.0, 0.0); grid.len()],
            v: vec![vec![0.0; grid.len()]; grid.dim()],
            phi: vec![0.0; grid.len()],
        }
    }

    pub fn a_re(&self) -> Vec<f64> {
        self.a.iter().map(|z| z.re).collect()
    }

    pub fn a_im(&self) -> Vec<f64> {
        self.a.iter().map(|z| z.im).collect()
    }

    fn axpy(&self, h: f64, d: &GrenierState) -> GrenierState {
        GrenierState {
            a: self.a.iter().zip(&d.a).map(|(x, k)| x + h * k).collect(),
            v: self
                .v
                .iter()
                .zip(&d.v)
                .map(|(x, k)| x.iter().zip(k).map(|(x, k)| x + h * k).collect())
                .collect(),
            phi: self.phi.iter().zip(&d.phi).map(|(x, k)| x + h * k).collect(),
        }
    }

    fn rk4_combine(&self, h: f64, k: [&GrenierState; 4]) -> GrenierState {
        let w = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
        let mut out = self.clone();
        for (kk, wk) in k.iter().zip(w) {
            out = out.axpy(wk, kk);
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.a.iter().all(|z| z.re.is_finite() && z.im.is_finite())
            && self.v.iter().flatten().all(|x| x.is_finite())
            && self.phi.iter().all(|x| x.is_finite())
    }

    fn max_a(&self) -> f64 {
        self.a.iter().fold(0.0, |m, z| m.max(z.norm()))
    }
}

/// Largest entry of the spectral Jacobian `∂_i v_j`.
fn max_velocity_gradient(grid: &Grid, v: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for comp in v {
        for axis in 0..grid.dim() {
            m = grid.d_real(comp, axis, 1).iter().fold(m, |acc, x| acc.max(x.abs()));
        }
    }
    m
}

/// Largest `|∂₀v₁ - ∂₁v₀|`; zero in one dimension.
pub fn max_curl(grid: &Grid, v: &[Vec<f64>]) -> f64 {
    if grid.dim() < 2 {
        return 0.0;
    }
    let a = grid.d_real(&v[1], 0, 1);
    let b = grid.d_real(&v[0], 1, 1);
    a.iter().zip(&b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Largest `|∇φ - v|` over the grid.
pub fn gradient_mismatch(grid: &Grid, state: &GrenierState) -> f64 {
    let g = grid.gradient_real(&state.phi);
    g.iter()
        .zip(&state.v)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct GrenierOptions {
    /// Fixed step; by default a CFL-type bound capped by a quarter snapshot interval.
    pub dt: Option<f64>,
    /// Keep every step (needed by the corrector, which steps over pairs).
    pub store_dense: bool,
    /// Multiplies `f` (set to `ε^κ` to explore `κ > 0`; 1 in the supercritical regime).
    pub coupling: f64,
    pub dealias: bool,
}

impl Default for GrenierOptions {
    fn default() -> Self {
        GrenierOptions {
            dt: None,
            store_dense: false,
            coupling: 1.0,
            dealias: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GrenierTrajectory {
    pub grid: Grid,
    /// Zero for the limit system.
    pub epsilon: f64,
    pub times: Vec<f64>,
    pub states: Vec<GrenierState>,
    pub dt: f64,
    /// `(t, state)` after every step, when requested.
    pub dense: Vec<(f64, GrenierState)>,
    pub max_velocity_gradient: f64,
}

impl GrenierTrajectory {
    pub fn state_at(&self, t: f64) -> Result<&GrenierState> {
        crate::rays::find_time(&self.times, t).map(|m| &self.states[m])
    }
}

struct Rhs<'a> {
    grid: Grid,
    eikonal: &'a EikonalField,
    law: &'a Nonlinearity,
    epsilon: f64,
    coupling: f64,
    dealias: bool,
    trivial_eikonal: bool,
}

impl Rhs<'_> {
    fn slice(&self, t: f64) -> Result<Option<EikonalSlice>> {
        if self.trivial_eikonal {
            Ok(None)
        } else {
            self.eikonal.slice_at(t).map(Some)
        }
    }

    fn eval(&self, t: f64, s: &GrenierState) -> Result<GrenierState> {
        let grid = self.grid;
        let n = grid.len();
        let dim = grid.dim();
        let e = self.slice(t)?;
        let ga = grid.gradient_complex(&s.a);
        let gv: Vec<Vec<Vec<f64>>> = s.v.iter().map(|c| grid.gradient_real(c)).collect();
        let lap_a = if self.epsilon > 0.0 {
            Some(grid.laplacian_complex(&s.a))
        } else {
            None
        };
        let half_ie = Complex64::new(0.0, 0.5 * self.epsilon);

        let mut da = vec![Complex64::new(0.0, 0.0); n];
        let mut dv = vec![vec![0.0; n]; dim];
        let mut dphi = vec![0.0; n];
        for i in 0..n {
            let a = s.a[i];
            let rho = a.norm_sqr();
            let mut w = [0.0; 2];
            let mut div_v = 0.0;
            for ax in 0..dim {
                w[ax] = s.v[ax][i] + e.as_ref().map_or(0.0, |e| e.grad[ax][i]);
                div_v += gv[ax][ax][i];
            }
            let lap_eik = e.as_ref().map_or(0.0, |e| e.lap[i]);

            let mut adv_a = Complex64::new(0.0, 0.0);
            for ax in 0..dim {
                adv_a += w[ax] * ga[ax][i];
            }
            da[i] = -adv_a - 0.5 * a * (div_v + lap_eik);
            if let Some(l) = &lap_a {
                da[i] += half_ie * l[i];
            }

            let mut speed2 = 0.0;
            let mut cross = 0.0;
            for ax in 0..dim {
                speed2 += s.v[ax][i] * s.v[ax][i];
                cross += e.as_ref().map_or(0.0, |e| e.grad[ax][i]) * s.v[ax][i];
            }
            dphi[i] = -0.5 * speed2 - cross - self.coupling * self.law.f(rho);

            let fp = self.coupling * self.law.df(rho);
            for j in 0..dim {
                // (w·∇)v_j + (Hess φ_eik · v)_j + ∂_j f(|a|²)
                let mut r = 0.0;
                for ax in 0..dim {
                    r += w[ax] * gv[j][ax][i];
                    if let Some(e) = &e {
                        r += e.hess[j * dim + ax][i] * s.v[ax][i];
                    }
                }
                r += fp * 2.0 * (a.conj() * ga[j][i]).re;
                dv[j][i] = -r;
            }
        }
        if self.dealias {
            grid.dealias_complex(&mut da);
            for c in dv.iter_mut() {
                grid.dealias_real(c);
            }
            grid.dealias_real(&mut dphi);
        }
        Ok(GrenierState { a: da, v: dv, phi: dphi })
    }
}

fn eikonal_is_trivial(eikonal: &EikonalField) -> bool {
    eikonal.phi.iter().all(|p| p.max_abs() == 0.0)
        && eikonal.grad_phi.iter().flatten().all(|g| g.max_abs() == 0.0)
        && eikonal.hess_phi.iter().flatten().all(|g| g.max_abs() == 0.0)
}

fn stable_dt(grid: &Grid, eikonal: &EikonalField, state: &GrenierState, law: &Nonlinearity, epsilon: f64, coupling: f64) -> f64 {
    let kmax = std::f64::consts::PI / grid.spacing();
    let eik_speed = eikonal
        .grad_phi
        .iter()
        .flatten()
        .map(|g| g.max_abs())
        .fold(0.0f64, f64::max);
    let v_speed = state.v.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let sound = state
        .a
        .iter()
        .map(|z| (coupling * law.df(z.norm_sqr()) * z.norm_sqr()).max(0.0).sqrt())
        .fold(0.0f64, f64::max);
    let rate = (eik_speed + v_speed + 2.0 * sound + 1.0) * kmax * grid.dim() as f64
        + 0.5 * epsilon * kmax * kmax * grid.dim() as f64;
    1.0 / rate
}

/// Method-of-lines RK4 integration from `(a(0), φ(0) = 0, v(0) = 0)` to every
/// time in `times` (which must be eikonal times). `epsilon = 0` gives the
/// limit system.
pub fn solve_grenier(
    eikonal: &EikonalField,
    a_init: &[Complex64],
    law: &Nonlinearity,
    epsilon: f64,
    times: &[f64],
    options: &GrenierOptions,
) -> Result<GrenierTrajectory> {
    let grid = eikonal.grid;
    if a_init.len() != grid.len() {
        return Err(WkbError::GridMismatch);
    }
    if times.is_empty() || times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(WkbError::Config("Grenier times must start at 0 and increase".into()));
    }
    let t_end = times[times.len() - 1];
    if t_end >= eikonal.valid_until || t_end > *eikonal.times.last().unwrap_or(&0.0) + 1e-12 {
        return Err(WkbError::PastCaustic { t: t_end, det: f64::NAN });
    }
    let a_sup = a_init.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    if a_sup > 0.0 && !law.is_none() {
        symmetrizer_floor(law, a_sup)?;
    }

    let mut state = GrenierState::zeros(&grid);
    state.a = a_init.to_vec();
    let rhs = Rhs {
        grid,
        eikonal,
        law,
        epsilon,
        coupling: options.coupling,
        dealias: options.dealias,
        trivial_eikonal: eikonal_is_trivial(eikonal),
    };
    let dt_target = options
        .dt
        .unwrap_or_else(|| stable_dt(&grid, eikonal, &state, law, epsilon, options.coupling));
    let a0_max = state.max_a();
    let grad0 = max_velocity_gradient(&grid, &state.v);
    let shock_limit = SHOCK_GROWTH * grad0.max(1.0);
    let mut max_grad = grad0;

    let mut out = GrenierTrajectory {
        grid,
        epsilon,
        times: times.to_vec(),
        states: vec![state.clone()],
        dt: dt_target,
        dense: Vec::new(),
        max_velocity_gradient: grad0,
    };
    if options.store_dense {
        out.dense.push((0.0, state.clone()));
    }

    let mut t = 0.0;
    for &target in &times[1..] {
        let span = target - t;
        let mut steps = (span / dt_target.min(span / 4.0) - 1e-9).ceil().max(2.0) as usize;
        if steps % 2 == 1 {
            steps += 1;
        }
        let h = span / steps as f64;
        for k in 0..steps {
            let tk = t + k as f64 * h;
            let k1 = rhs.eval(tk, &state)?;
            let k2 = rhs.eval(tk + 0.5 * h, &state.axpy(0.5 * h, &k1))?;
            let k3 = rhs.eval(tk + 0.5 * h, &state.axpy(0.5 * h, &k2))?;
            let k4 = rhs.eval(tk + h, &state.axpy(h, &k3))?;
            state = state.rk4_combine(h, [&k1, &k2, &k3, &k4]);
            let t_now = tk + h;
            if !state.is_finite() {
                return Err(WkbError::NumericalInstability {
                    t: t_now,
                    detail: "non-finite Grenier state".into(),
                });
            }
            if a0_max > 0.0 && state.max_a() > BLOWUP_GROWTH * a0_max {
                return Err(WkbError::Shock {
                    t: t_now,
                    detail: format!("max|a| = {:e} exceeds {BLOWUP_GROWTH:e} x initial", state.max_a()),
                });
            }
            if options.store_dense {
                out.dense.push((t_now, state.clone()));
            }
        }
        let g = max_velocity_gradient(&grid, &state.v);
        if g > shock_limit {
            return Err(WkbError::Shock {
                t: target,
                detail: format!("max|grad v| = {g:e} exceeds {shock_limit:e}"),
            });
        }
        max_grad = max_grad.max(g);
        t = target;
        out.states.push(state.clone());
    }
    out.max_velocity_gradient = max_grad;
    Ok(out)
}

/// First-order corrector along a limit trajectory.
#[derive(Clone, Debug)]
pub struct CorrectorPair {
    pub times: Vec<f64>,
    pub a1: Vec<Vec<Complex64>>,
    pub phi1: Vec<Vec<f64>>,
}

impl CorrectorPair {
    pub fn phi1_at(&self, t: f64) -> Result<&[f64]> {
        crate::rays::find_time(&self.times, t).map(|m| self.phi1[m].as_slice())
    }
}

struct CorrectorRhs<'a> {
    grid: Grid,
    eikonal: &'a EikonalField,
    law: &'a Nonlinearity,
    coupling: f64,
    dealias: bool,
    trivial_eikonal: bool,
}

impl CorrectorRhs<'_> {
    fn eval(&self, t: f64, lim: &GrenierState, a1: &[Complex64], phi1: &[f64]) -> Result<(Vec<Complex64>, Vec<f64>)> {
        let grid = self.grid;
        let n = grid.len();
        let dim = grid.dim();
        let e = if self.trivial_eikonal { None } else { Some(self.eikonal.slice_at(t)?) };
        let ga = grid.gradient_complex(&lim.a);
        let lap_a = grid.laplacian_complex(&lim.a);
        let ga1 = grid.gradient_complex(a1);
        let gp1 = grid.gradient_real(phi1);
        let lap_p1 = grid.laplacian_real(phi1);
        let div_v = grid.divergence(&lim.v);
        let mut da1 = vec![Complex64::new(0.0, 0.0); n];
        let mut dp1 = vec![0.0; n];
        let half_i = Complex64::new(0.0, 0.5);
        for i in 0..n {
            let a = lim.a[i];
            let mut adv_a1 = Complex64::new(0.0, 0.0);
            let mut adv_p1 = 0.0;
            let mut cross = Complex64::new(0.0, 0.0);
            for ax in 0..dim {
                let w = lim.v[ax][i] + e.as_ref().map_or(0.0, |e| e.grad[ax][i]);
                adv_a1 += w * ga1[ax][i];
                adv_p1 += w * gp1[ax][i];
                cross += gp1[ax][i] * ga[ax][i];
            }
            let lap_total = div_v[i] + e.as_ref().map_or(0.0, |e| e.lap[i]);
            dp1[i] = -adv_p1 - 2.0 * (a.conj() * a1[i]).re * self.coupling * self.law.df(a.norm_sqr());
            da1[i] = -adv_a1 - cross - 0.5 * a1[i] * lap_total - 0.5 * a * lap_p1[i] + half_i * lap_a[i];
        }
        if self.dealias {
            grid.dealias_complex(&mut da1);
            grid.dealias_real(&mut dp1);
        }
        Ok((da1, dp1))
    }
}

/// Integrates the linearization about `limit` (which must be dense and have
/// `ε = 0`) from `(a₁, 0)`, stepping over pairs of limit steps so every RK4
/// stage falls on a stored state.
pub fn solve_corrector(
    limit: &GrenierTrajectory,
    eikonal: &EikonalField,
    a1: &Profile,
    law: &Nonlinearity,
    coupling: f64,
) -> Result<CorrectorPair> {
    if limit.epsilon != 0.0 {
        return Err(WkbError::Config("corrector needs the limit (epsilon = 0) trajectory".into()));
    }
    if limit.dense.len() < 3 || !(limit.dense.len() - 1).is_multiple_of(2) {
        return Err(WkbError::Config("corrector needs a dense limit trajectory with an even step count".into()));
    }
    let grid = limit.grid;
    let rhs = CorrectorRhs {
        grid,
        eikonal,
        law,
        coupling,
        dealias: true,
        trivial_eikonal: eikonal_is_trivial(eikonal),
    };
    let mut a = a1.sample(&grid);
    let mut p = vec![0.0; grid.len()];
    let mut out = CorrectorPair {
        times: limit.times.clone(),
        a1: vec![a.clone()],
        phi1: vec![p.clone()],
    };
    let mut next_snapshot = 1;
    let scale = limit.times.last().copied().unwrap_or(1.0).max(1.0);
    let mut k = 0;
    while k + 2 < limit.dense.len() {
        let (t0, s0) = (&limit.dense[k].0, &limit.dense[k].1);
        let s1 = &limit.dense[k + 1].1;
        let (t2, s2) = (&limit.dense[k + 2].0, &limit.dense[k + 2].1);
        let h = t2 - t0;
        let comb = |x: &[Complex64], d: &[Complex64], c: f64| -> Vec<Complex64> { x.iter().zip(d).map(|(x, d)| x + c * d).collect() };
        let combr = |x: &[f64], d: &[f64], c: f64| -> Vec<f64> { x.iter().zip(d).map(|(x, d)| x + c * d).collect() };
        let (k1a, k1p) = rhs.eval(*t0, s0, &a, &p)?;
        let (k2a, k2p) = rhs.eval(t0 + 0.5 * h, s1, &comb(&a, &k1a, 0.5 * h), &combr(&p, &k1p, 0.5 * h))?;
        let (k3a, k3p) = rhs.eval(t0 + 0.5 * h, s1, &comb(&a, &k2a, 0.5 * h), &combr(&p, &k2p, 0.5 * h))?;
        let (k4a, k4p) = rhs.eval(*t2, s2, &comb(&a, &k3a, h), &combr(&p, &k3p, h))?;
        for i in 0..grid.len() {
            a[i] += h / 6.0 * (k1a[i] + 2.0 * k2a[i] + 2.0 * k3a[i] + k4a[i]);
            p[i] += h / 6.0 * (k1p[i] + 2.0 * k2p[i] + 2.0 * k3p[i] + k4p[i]);
        }
        if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) || p.iter().any(|x| !x.is_finite()) {
            return Err(WkbError::NumericalInstability {
                t: *t2,
                detail: "non-finite corrector".into(),
            });
        }
        k += 2;
        if next_snapshot < limit.times.len() && (t2 - limit.times[next_snapshot]).abs() <= 1e-12 * scale {
            out.a1.push(a.clone());
            out.phi1.push(p.clone());
            next_snapshot += 1;
        }
    }
    if out.phi1.len() != limit.times.len() {
        return Err(WkbError::Config(
            "corrector steps do not land on the limit snapshot times".into(),
        ));
    }
    Ok(out)
}

/// `a e^{i(φ+φ_eik)/ε}`, optionally times `e^{iφ⁽¹⁾}`, at a stored time.
pub fn assemble_super(
    limit: &GrenierTrajectory,
    corrector: Option<&CorrectorPair>,
    eikonal: &EikonalField,
    epsilon: f64,
    t: f64,
) -> Result<WaveField> {
    let state = limit.state_at(t)?;
    let me = eikonal.time_index(t)?;
    let grid = limit.grid;
    let dim = grid.dim();
    let support = support_mask(&state.a);
    let max_grad = (0..grid.len())
        .filter(|&i| support[i])
        .map(|i| {
            (0..dim)
                .map(|ax| (state.v[ax][i] + eikonal.grad_phi[me][ax].values[i]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    check_resolution(&grid, max_grad, epsilon)?;
    let phi1 = match corrector {
        Some(c) => Some(c.phi1_at(t)?),
        None => None,
    };
    let values = (0..grid.len())
        .map(|i| {
            let mut theta = (state.phi[i] + eikonal.phi[me].values[i]) / epsilon;
            if let Some(p) = phi1 {
                theta += p[i];
            }
            state.a[i] * Complex64::from_polar(1.0, theta)
        })
        .collect();
    WaveField::new(grid, values, Some(epsilon))
}

/// Reconstruction `a^ε e^{i(φ^ε+φ_eik)/ε}` of an `ε > 0` trajectory.
pub fn reconstruct(traj: &GrenierTrajectory, eikonal: &EikonalField, t: f64) -> Result<WaveField> {
    if traj.epsilon <= 0.0 {
        return Err(WkbError::Config("reconstruction needs epsilon > 0".into()));
    }
    assemble_super(traj, None, eikonal, traj.epsilon, t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EulerResidual {
    pub t: f64,
    pub mass_res: f64,
    pub momentum_res: f64,
}

/// L² residuals of `∂ₜρ + ∇·(ρu)` and `∂ₜu + (u·∇)u + ∇V + ∇f(ρ)` with
/// `ρ = |a|²`, `u = v + ∇φ_eik`, at interior snapshots, restricted to the
/// support of `a`. Time derivatives are three-point centered differences.
pub fn euler_residual(
    limit: &GrenierTrajectory,
    eikonal: &EikonalField,
    potential: &Potential,
    law: &Nonlinearity,
) -> Result<Vec<EulerResidual>> {
    let grid = limit.grid;
    let n = grid.len();
    let dim = grid.dim();
    let nt = limit.times.len();
    let mut out = Vec::new();
    let velocity = |m: usize| -> Result<Vec<Vec<f64>>> {
        let me = eikonal.time_index(limit.times[m])?;
        Ok((0..dim)
            .map(|ax| {
                limit.states[m].v[ax]
                    .iter()
                    .zip(&eikonal.grad_phi[me][ax].values)
                    .map(|(v, g)| v + g)
                    .collect()
            })
            .collect())
    };
    for m in 1..nt.saturating_sub(1) {
        let t = limit.times[m];
        let dt = limit.times[m + 1] - limit.times[m - 1];
        let me = eikonal.time_index(t)?;
        let s = &limit.states[m];
        let rho: Vec<f64> = s.a.iter().map(|z| z.norm_sqr()).collect();
        let support = support_mask(&s.a);
        let u = velocity(m)?;
        let up = velocity(m + 1)?;
        let um = velocity(m - 1)?;
        let rho_p: Vec<f64> = limit.states[m + 1].a.iter().map(|z| z.norm_sqr()).collect();
        let rho_m: Vec<f64> = limit.states[m - 1].a.iter().map(|z| z.norm_sqr()).collect();
        let flux: Vec<Vec<f64>> = (0..dim).map(|ax| (0..n).map(|i| rho[i] * u[ax][i]).collect()).collect();
        let div = grid.divergence(&flux);
        let grad_v: Vec<Vec<Vec<f64>>> = s.v.iter().map(|c| grid.gradient_real(c)).collect();
        let pressure: Vec<f64> = rho.iter().map(|r| law.f(*r)).collect();
        let grad_p = grid.gradient_real(&pressure);
        let mut mass = vec![0.0; n];
        let mut mom = vec![0.0; n];
        for i in 0..n {
            if !support[i] {
                continue;
            }
            mass[i] = ((rho_p[i] - rho_m[i]) / dt + div[i]).powi(2);
            let x = grid.node(i);
            let gv = potential.gradient(t, x);
            let mut r2 = 0.0;
            for j in 0..dim {
                let mut adv = 0.0;
                for ax in 0..dim {
                    let du = grad_v[j][ax][i] + eikonal.hess_phi[me][j * dim + ax].values[i];
                    adv += u[ax][i] * du;
                }
                let r = (up[j][i] - um[j][i]) / dt + adv + gv[j] + grad_p[j][i];
                r2 += r * r;
            }
            mom[i] = r2;
        }
        out.push(EulerResidual {
            t,
            mass_res: grid.integrate_real(&mass).sqrt(),
            momentum_res: grid.integrate_real(&mom).sqrt(),
        });
    }
    Ok(out)
}

/// `∫|a|²` and `∫|a|²(v + ∇φ_eik)` at every snapshot.
pub fn limit_invariants(limit: &GrenierTrajectory, eikonal: &EikonalField) -> Result<Vec<(f64, f64, Vec<f64>)>> {
    let grid = limit.grid;
    let dim = grid.dim();
    limit
        .times
        .iter()
        .zip(&limit.states)
        .map(|(&t, s)| {
            let me = eikonal.time_index(t)?;
            let rho: Vec<f64> = s.a.iter().map(|z| z.norm_sqr()).collect();
            let mass = grid.integrate_real(&rho);
            let momentum = (0..dim)
                .map(|ax| {
                    let dens: Vec<f64> = (0..grid.len())
                        .map(|i| rho[i] * (s.v[ax][i] + eikonal.grad_phi[me][ax].values[i]))
                        .collect();
                    grid.integrate_real(&dens)
                })
                .collect();
            Ok((t, mass, momentum))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rays::{build_eikonal, label_grid_for, trace_rays, uniform_times, Phase};

    fn free_eikonal(grid: Grid, t_final: f64, frames: usize) -> EikonalField {
        let times = uniform_times(t_final, frames);
        let b = trace_rays(&Potential::Zero, &Phase::Zero, label_grid_for(&grid, 1.5).unwrap(), &times).unwrap();
        build_eikonal(&b, grid).unwrap()
    }

    #[test]
    fn floor_examples() {
        assert_eq!(symmetrizer_floor(&Nonlinearity::Cubic, 3.0).unwrap(), 1.0);
        assert_eq!(symmetrizer_floor(&Nonlinearity::CubicQuintic { g: 1.0 }, 1.0).unwrap(), 1.0);
        assert!((symmetrizer_floor(&Nonlinearity::Saturable, 1.0).unwrap() - 1.0 / 25.0).abs() < 1e-15);
        assert!(matches!(
            symmetrizer_floor(&Nonlinearity::None, 1.0),
            Err(WkbError::AssumptionViolation(_))
        ));
    }

    #[test]
    fn zero_data_is_a_fixed_point() {
        let grid = Grid::new(1, 128, 8.0).unwrap();
        let eik = free_eikonal(grid, 0.2, 4);
        let a0 = vec![Complex64::new(0.0, 0.0); grid.len()];
        let traj = solve_grenier(&eik, &a0, &Nonlinearity::Cubic, 0.1, &eik.times, &GrenierOptions::default()).unwrap();
        for s in &traj.states {
            assert!(s.a.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
            assert!(s.phi.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn phase_and_velocity_stay_consistent() {
        let grid = Grid::new(1, 256, 8.0).unwrap();
        let eik = free_eikonal(grid, 0.3, 6);
        let a0 = Profile::gaussian(1.0, 1.0).sample(&grid);
        let traj = solve_grenier(&eik, &a0, &Nonlinearity::Cubic, 0.0, &eik.times, &GrenierOptions::default()).unwrap();
        for s in &traj.states {
            assert!(gradient_mismatch(&grid, s) < 1e-6);
        }
        for (_, mass, momentum) in limit_invariants(&traj, &eik).unwrap() {
            let m0 = grid.integrate_real(&a0.iter().map(|z| z.norm_sqr()).collect::<Vec<_>>());
            assert!((mass - m0).abs() < 1e-6 * m0);
            assert!(momentum[0].abs() < 1e-5);
        }
    }

    #[test]
    fn corrector_initial_derivatives() {
        // a real, φ = φ_eik = 0, a₁ = 0 at t = 0: φ⁽¹⁾ₜ = 0 and a⁽¹⁾ₜ = (i/2)Δa
        let grid = Grid::new(1, 128, 8.0).unwrap();
        let eik = free_eikonal(grid, 0.1, 2);
        let mut lim = GrenierState::zeros(&grid);
        lim.a = Profile::gaussian(1.0, 1.0).sample(&grid);
        let rhs = CorrectorRhs {
            grid,
            eikonal: &eik,
            law: &Nonlinearity::Cubic,
            coupling: 1.0,
            dealias: false,
            trivial_eikonal: true,
        };
        let zero_a = vec![Complex64::new(0.0, 0.0); grid.len()];
        let (da, dp) = rhs.eval(0.0, &lim, &zero_a, &vec![0.0; grid.len()]).unwrap();
        let lap = grid.laplacian_complex(&lim.a);
        assert!(dp.iter().all(|x| *x == 0.0));
        for (d, l) in da.iter().zip(&lap) {
            assert!((d - Complex64::new(0.0, 0.5) * l).norm() < 1e-14);
        }
    }

    #[test]
    fn corrector_with_zero_background_is_static() {
        let grid = Grid::new(1, 128, 8.0).unwrap();
        let eik = free_eikonal(grid, 0.2, 4);
        let zero = vec![Complex64::new(0.0, 0.0); grid.len()];
        let opts = GrenierOptions {
            store_dense: true,
            ..Default::default()
        };
        let lim = solve_grenier(&eik, &zero, &Nonlinearity::Cubic, 0.0, &eik.times, &opts).unwrap();
        let a1 = Profile::gaussian(1.0, 0.5);
        let c = solve_corrector(&lim, &eik, &a1, &Nonlinearity::Cubic, 1.0).unwrap();
        let expected = a1.sample(&grid);
        for (a, p) in c.a1.iter().zip(&c.phi1) {
            assert!(p.iter().all(|x| x.abs() < 1e-15));
            for (x, y) in a.iter().zip(&expected) {
                assert!((x - y).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn assembled_moduli_agree() {
        let grid = Grid::new(1, 512, 10.0).unwrap();
        let eik = free_eikonal(grid, 0.2, 4);
        let a0 = Profile::gaussian(1.0, 1.0).sample(&grid);
        let opts = GrenierOptions {
            store_dense: true,
            ..Default::default()
        };
        let lim = solve_grenier(&eik, &a0, &Nonlinearity::Cubic, 0.0, &eik.times, &opts).unwrap();
        let a1 = Profile::Hermite1 {
            center: [0.0; 2],
            width: 1.0,
            amplitude: 1.0,
        };
        let c = solve_corrector(&lim, &eik, &a1, &Nonlinearity::Cubic, 1.0).unwrap();
        let eps = 0.05;
        let t0 = assemble_super(&lim, Some(&c), &eik, eps, 0.0).unwrap();
        for (z, a) in t0.values().iter().zip(&a0) {
            assert!((z - a).norm() < 1e-15);
        }
        let plain = assemble_super(&lim, None, &eik, eps, 0.2).unwrap();
        let corr = assemble_super(&lim, Some(&c), &eik, eps, 0.2).unwrap();
        let phi1 = c.phi1_at(0.2).unwrap();
        let mut diff2 = vec![0.0; grid.len()];
        for i in 0..grid.len() {
            assert!((plain.values()[i].norm() - corr.values()[i].norm()).abs() < 1e-14);
            diff2[i] = (plain.values()[i] - corr.values()[i]).norm_sqr();
        }
        let direct: Vec<f64> = (0..grid.len())
            .map(|i| (lim.states[4].a[i] * (Complex64::from_polar(1.0, phi1[i]) - 1.0)).norm_sqr())
            .collect();
        assert!((grid.integrate_real(&diff2).sqrt() - grid.integrate_real(&direct).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn euler_residual_of_zero_data_vanishes() {
        let grid = Grid::new(1, 64, 6.0).unwrap();
        let eik = free_eikonal(grid, 0.2, 4);
        let zero = vec![Complex64::new(0.0, 0.0); grid.len()];
        let lim = solve_grenier(&eik, &zero, &Nonlinearity::Cubic, 0.0, &eik.times, &GrenierOptions::default()).unwrap();
        for r in euler_residual(&lim, &eik, &Potential::Zero, &Nonlinearity::Cubic).unwrap() {
            assert_eq!(r.mass_res, 0.0);
            assert_eq!(r.momentum_res, 0.0);
        }
    }

    #[test]
    fn curl_of_a_gradient_vanishes() {
        let grid = Grid::new(2, 32, 4.0).unwrap();
        let phi = grid.sample_real(|x| (-(x[0] * x[0] + 2.0 * x[1] * x[1])).exp() * (1.0 + x[0]));
        let v = grid.gradient_real(&phi);
        assert!(max_curl(&grid, &v) < 1e-6);
    }
}
