//! Hamilton flow of `τ + |ξ|²/2 + V(t, x)`, its Jacobian, inversion of the
//! flow map and the eikonal phase on the Eulerian grid.
//!
//! Every ray carries its position `x`, momentum `ξ`, the variational
//! matrices `∇_y x`, `∇_y ξ` and the accumulated action, all integrated with
//! classical RK4. Eulerian quantities are obtained by inverting `y ↦ x(t, y)`
//! with a damped Newton iteration whose Jacobian inverse is the adjugate over
//! the determinant.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Result, WkbError};
use crate::grid::{Grid, Point, RealField};

pub type Mat = [[f64; 2]; 2];

pub const IDENTITY: Mat = [[1.0, 0.0], [0.0, 1.0]];

/// Default lower bound on `|det ∇_y x|` defining the usable horizon.
pub const DEFAULT_C0: f64 = 0.2;

/// Default cap on the RK4 step used between stored ray times.
pub const DEFAULT_MAX_RAY_STEP: f64 = 1e-3;

const NEWTON_MAX_ITER: usize = 50;
const NEWTON_MAX_HALVINGS: usize = 30;

pub(crate) fn det(m: &Mat, dim: usize) -> f64 {
    match dim {
        1 => m[0][0],
        _ => m[0][0] * m[1][1] - m[0][1] * m[1][0],
    }
}

pub(crate) fn adjugate(m: &Mat, dim: usize) -> Mat {
    match dim {
        1 => [[1.0, 0.0], [0.0, 0.0]],
        _ => [[m[1][1], -m[0][1]], [-m[1][0], m[0][0]]],
    }
}

pub(crate) fn mat_mul(a: &Mat, b: &Mat, dim: usize) -> Mat {
    let mut c = [[0.0; 2]; 2];
    for i in 0..dim {
        for j in 0..dim {
            c[i][j] = (0..dim).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn mat_vec(a: &Mat, v: &Point, dim: usize) -> Point {
    let mut out = [0.0; 2];
    for i in 0..dim {
        out[i] = (0..dim).map(|k| a[i][k] * v[k]).sum();
    }
    out
}

fn norm(v: &Point, dim: usize) -> f64 {
    v[..dim].iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn mask(m: Mat, dim: usize) -> Mat {
    if dim == 1 {
        [[m[0][0], 0.0], [0.0, 0.0]]
    } else {
        m
    }
}

type ScalarFn = Arc<dyn Fn(f64, Point) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(f64, Point) -> Point + Send + Sync>;
type MatrixFn = Arc<dyn Fn(f64, Point) -> Mat + Send + Sync>;

/// A user-supplied smooth potential together with its first two derivatives.
#[derive(Clone)]
pub struct CustomPotential {
    pub name: String,
    pub time_dependent: bool,
    pub value: ScalarFn,
    pub gradient: VectorFn,
    pub hessian: MatrixFn,
}

#[derive(Clone)]
pub enum Potential {
    Zero,
    /// `V = Σ ω_j² x_j² / 2`
    Harmonic { omega: [f64; 2] },
    Custom(CustomPotential),
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Potential::Zero => write!(f, "Zero"),
            Potential::Harmonic { omega } => write!(f, "Harmonic {{ omega: {omega:?} }}"),
            Potential::Custom(c) => write!(f, "Custom({})", c.name),
        }
    }
}

impl Potential {
    pub fn harmonic(omega: &[f64]) -> Self {
        let mut w = [0.0; 2];
        for (slot, v) in w.iter_mut().zip(omega) {
            *slot = *v;
        }
        Potential::Harmonic { omega: w }
    }

    /// Attractive Gaussian well `-depth · exp(-|x|²/(2 width²))`.
    pub fn gaussian_well(depth: f64, width: f64) -> Self {
        let s2 = width * width;
        Potential::Custom(CustomPotential {
            name: format!("gaussian-well(depth={depth}, width={width})"),
            time_dependent: false,
            value: Arc::new(move |_, x| -depth * (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp()),
            gradient: Arc::new(move |_, x| {
                let e = depth * (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp() / s2;
                [e * x[0], e * x[1]]
            }),
            hessian: Arc::new(move |_, x| {
                let e = depth * (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp() / s2;
                [
                    [e * (1.0 - x[0] * x[0] / s2), -e * x[0] * x[1] / s2],
                    [-e * x[0] * x[1] / s2, e * (1.0 - x[1] * x[1] / s2)],
                ]
            }),
        })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Potential::Zero)
    }

    pub fn is_time_dependent(&self) -> bool {
        matches!(self, Potential::Custom(c) if c.time_dependent)
    }

    pub fn value(&self, t: f64, x: Point) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Harmonic { omega } => {
                0.5 * (omega[0] * omega[0] * x[0] * x[0] + omega[1] * omega[1] * x[1] * x[1])
            }
            Potential::Custom(c) => (c.value)(t, x),
        }
    }

    pub fn gradient(&self, t: f64, x: Point) -> Point {
        match self {
            Potential::Zero => [0.0; 2],
            Potential::Harmonic { omega } => [omega[0] * omega[0] * x[0], omega[1] * omega[1] * x[1]],
            Potential::Custom(c) => (c.gradient)(t, x),
        }
    }

    pub fn hessian(&self, t: f64, x: Point) -> Mat {
        match self {
            Potential::Zero => [[0.0; 2]; 2],
            Potential::Harmonic { omega } => [[omega[0] * omega[0], 0.0], [0.0, omega[1] * omega[1]]],
            Potential::Custom(c) => (c.hessian)(t, x),
        }
    }

    pub fn sample(&self, grid: &Grid, t: f64) -> Vec<f64> {
        grid.sample_real(|x| self.value(t, x))
    }

    /// Samples `∇²V` on the grid at the given times and returns the largest
    /// entry; fails if any sample is not finite.
    pub fn check_subquadratic(&self, grid: &Grid, times: &[f64]) -> Result<f64> {
        let dim = grid.dim();
        let mut bound: f64 = 0.0;
        for &t in times {
            for x in grid.nodes() {
                let h = mask(self.hessian(t, x), dim);
                for row in h.iter() {
                    for v in row {
                        if !v.is_finite() {
                            return Err(WkbError::PotentialEvaluation { t, x });
                        }
                        bound = bound.max(v.abs());
                    }
                }
            }
        }
        Ok(bound)
    }
}

type PhaseValueFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
type PhaseGradFn = Arc<dyn Fn(Point) -> Point + Send + Sync>;
type PhaseHessFn = Arc<dyn Fn(Point) -> Mat + Send + Sync>;

#[derive(Clone)]
pub struct CustomPhase {
    pub name: String,
    pub value: PhaseValueFn,
    pub gradient: PhaseGradFn,
    pub hessian: PhaseHessFn,
}

/// Initial phase `φ₀`.
#[derive(Clone)]
pub enum Phase {
    Zero,
    /// `φ₀ = -(|x|² + 1)/(2T)`: every ray reaches the origin at `t = T`.
    QuadraticFocusing { t_focus: f64 },
    Custom(CustomPhase),
}

impl fmt::Debug for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Zero => write!(f, "Zero"),
            Phase::QuadraticFocusing { t_focus } => write!(f, "QuadraticFocusing {{ t_focus: {t_focus} }}"),
            Phase::Custom(c) => write!(f, "Custom({})", c.name),
        }
    }
}

impl Phase {
    /// `φ₀ = -(|x|² + 1)^{1+δ} / ((2 + 2δ) T)`. Superquadratic for `δ > 0`.
    pub fn power_focusing(t_focus: f64, delta: f64) -> Self {
        let t = t_focus;
        Phase::Custom(CustomPhase {
            name: format!("power-focusing(T={t_focus}, delta={delta})"),
            value: Arc::new(move |x| {
                -(x[0] * x[0] + x[1] * x[1] + 1.0).powf(1.0 + delta) / ((2.0 + 2.0 * delta) * t)
            }),
            gradient: Arc::new(move |x| {
                let s = (x[0] * x[0] + x[1] * x[1] + 1.0).powf(delta) / t;
                [-s * x[0], -s * x[1]]
            }),
            hessian: Arc::new(move |x| {
                let r = x[0] * x[0] + x[1] * x[1] + 1.0;
                let s = r.powf(delta) / t;
                let c = 2.0 * delta * r.powf(delta - 1.0) / t;
                [
                    [-s - c * x[0] * x[0], -c * x[0] * x[1]],
                    [-c * x[0] * x[1], -s - c * x[1] * x[1]],
                ]
            }),
        })
    }

    /// Bounded smooth phase `α · exp(-|x|²/(2 s²))`.
    pub fn gaussian_bump(alpha: f64, width: f64) -> Self {
        let s2 = width * width;
        Phase::Custom(CustomPhase {
            name: format!("gaussian-bump(alpha={alpha}, width={width})"),
            value: Arc::new(move |x| alpha * (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp()),
            gradient: Arc::new(move |x| {
                let e = alpha * (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp() / s2;
                [-e * x[0], -e * x[1]]
            }),
            hessian: Arc::new(move |x| {
                let e = alpha * (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp() / s2;
                [
                    [e * (x[0] * x[0] / s2 - 1.0), e * x[0] * x[1] / s2],
                    [e * x[0] * x[1] / s2, e * (x[1] * x[1] / s2 - 1.0)],
                ]
            }),
        })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Phase::Zero)
    }

    pub fn value(&self, x: Point) -> f64 {
        match self {
            Phase::Zero => 0.0,
            Phase::QuadraticFocusing { t_focus } => -(x[0] * x[0] + x[1] * x[1] + 1.0) / (2.0 * t_focus),
            Phase::Custom(c) => (c.value)(x),
        }
    }

    pub fn gradient(&self, x: Point) -> Point {
        match self {
            Phase::Zero => [0.0; 2],
            Phase::QuadraticFocusing { t_focus } => [-x[0] / t_focus, -x[1] / t_focus],
            Phase::Custom(c) => (c.gradient)(x),
        }
    }

    pub fn hessian(&self, x: Point) -> Mat {
        match self {
            Phase::Zero => [[0.0; 2]; 2],
            Phase::QuadraticFocusing { t_focus } => [[-1.0 / t_focus, 0.0], [0.0, -1.0 / t_focus]],
            Phase::Custom(c) => (c.hessian)(x),
        }
    }

    /// Largest sampled entry of `∇²φ₀`; fails on non-finite samples.
    pub fn check_subquadratic(&self, grid: &Grid) -> Result<f64> {
        let mut bound: f64 = 0.0;
        for x in grid.nodes() {
            for row in mask(self.hessian(x), grid.dim()).iter() {
                for v in row {
                    if !v.is_finite() {
                        return Err(WkbError::validation("phase", format!("non-finite Hessian at {x:?}")));
                    }
                    bound = bound.max(v.abs());
                }
            }
        }
        Ok(bound)
    }
}

/// One stored time of a ray bundle; every vector is indexed by label.
#[derive(Clone, Debug)]
pub struct RayFrame {
    pub x: Vec<Point>,
    pub xi: Vec<Point>,
    pub jac: Vec<Mat>,
    pub dxi: Vec<Mat>,
    /// Action `∫₀ᵗ (|ξ|²/2 - V) ds` accumulated along the ray.
    pub action: Vec<f64>,
    pub jac_det: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RayBundle {
    pub label_grid: Grid,
    pub times: Vec<f64>,
    pub frames: Vec<RayFrame>,
    pub potential: Potential,
    pub phase: Phase,
}

#[derive(Clone, Copy)]
struct RayState {
    x: Point,
    xi: Point,
    jac: Mat,
    dxi: Mat,
    action: f64,
}

impl RayState {
    fn axpy(&self, h: f64, d: &RayState) -> RayState {
        let mut out = *self;
        for i in 0..2 {
            out.x[i] += h * d.x[i];
            out.xi[i] += h * d.xi[i];
            for j in 0..2 {
                out.jac[i][j] += h * d.jac[i][j];
                out.dxi[i][j] += h * d.dxi[i][j];
            }
        }
        out.action += h * d.action;
        out
    }
}

fn ray_rhs(potential: &Potential, t: f64, s: &RayState, dim: usize) -> Result<RayState> {
    let grad = potential.gradient(t, s.x);
    let hess = mask(potential.hessian(t, s.x), dim);
    let v = potential.value(t, s.x);
    if !(v.is_finite() && grad[..dim].iter().all(|g| g.is_finite()) && hess.iter().flatten().all(|h| h.is_finite())) {
        return Err(WkbError::PotentialEvaluation { t, x: s.x });
    }
    let mut d = RayState {
        x: [0.0; 2],
        xi: [0.0; 2],
        jac: [[0.0; 2]; 2],
        dxi: [[0.0; 2]; 2],
        action: 0.0,
    };
    for i in 0..dim {
        d.x[i] = s.xi[i];
        d.xi[i] = -grad[i];
    }
    d.jac = s.dxi;
    let hj = mat_mul(&hess, &s.jac, dim);
    for i in 0..dim {
        for j in 0..dim {
            d.dxi[i][j] = -hj[i][j];
        }
    }
    d.action = 0.5 * s.xi[..dim].iter().map(|v| v * v).sum::<f64>() - v;
    Ok(d)
}

fn rk4_step(potential: &Potential, t: f64, h: f64, s: &RayState, dim: usize) -> Result<RayState> {
    let k1 = ray_rhs(potential, t, s, dim)?;
    let k2 = ray_rhs(potential, t + 0.5 * h, &s.axpy(0.5 * h, &k1), dim)?;
    let k3 = ray_rhs(potential, t + 0.5 * h, &s.axpy(0.5 * h, &k2), dim)?;
    let k4 = ray_rhs(potential, t + h, &s.axpy(h, &k3), dim)?;
    let mut out = *s;
    out = out.axpy(h / 6.0, &k1);
    out = out.axpy(h / 3.0, &k2);
    out = out.axpy(h / 3.0, &k3);
    out = out.axpy(h / 6.0, &k4);
    Ok(out)
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() || times[0] != 0.0 {
        return Err(WkbError::Config("ray times must start at 0".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(WkbError::Config("ray times must be strictly increasing".into()));
    }
    Ok(())
}

/// Integrates the Hamilton flow and its variational equations for every label.
pub fn trace_rays(potential: &Potential, phase: &Phase, label_grid: Grid, times: &[f64]) -> Result<RayBundle> {
    trace_rays_with_step(potential, phase, label_grid, times, DEFAULT_MAX_RAY_STEP)
}

pub fn trace_rays_with_step(
    potential: &Potential,
    phase: &Phase,
    label_grid: Grid,
    times: &[f64],
    max_step: f64,
) -> Result<RayBundle> {
    check_times(times)?;
    let dim = label_grid.dim();
    let per_label: Vec<Vec<RayState>> = (0..label_grid.len())
        .into_par_iter()
        .map(|l| {
            let y = label_grid.node(l);
            let mut state = RayState {
                x: y,
                xi: phase.gradient(y),
                jac: mask(IDENTITY, dim),
                dxi: mask(phase.hessian(y), dim),
                action: 0.0,
            };
            if dim == 1 {
                state.xi[1] = 0.0;
            }
            let mut out = Vec::with_capacity(times.len());
            out.push(state);
            for w in times.windows(2) {
                let span = w[1] - w[0];
                let steps = (span / max_step).ceil().max(1.0) as usize;
                let h = span / steps as f64;
                for k in 0..steps {
                    state = rk4_step(potential, w[0] + k as f64 * h, h, &state, dim)?;
                }
                out.push(state);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let frames = (0..times.len())
        .map(|m| {
            let states = per_label.iter().map(|traj| &traj[m]);
            let mut frame = RayFrame {
                x: Vec::with_capacity(label_grid.len()),
                xi: Vec::with_capacity(label_grid.len()),
                jac: Vec::with_capacity(label_grid.len()),
                dxi: Vec::with_capacity(label_grid.len()),
                action: Vec::with_capacity(label_grid.len()),
                jac_det: Vec::with_capacity(label_grid.len()),
            };
            for s in states {
                frame.x.push(s.x);
                frame.xi.push(s.xi);
                frame.jac.push(s.jac);
                frame.dxi.push(s.dxi);
                frame.action.push(s.action);
                frame.jac_det.push(det(&s.jac, dim));
            }
            frame
        })
        .collect();

    Ok(RayBundle {
        label_grid,
        times: times.to_vec(),
        frames,
        potential: potential.clone(),
        phase: phase.clone(),
    })
}

/// First stored time at which `min_y |det ∇_y x|` drops below `c0`;
/// `f64::INFINITY` if that never happens.
pub fn caustic_horizon(bundle: &RayBundle, c0: f64) -> f64 {
    bundle
        .frames
        .iter()
        .zip(&bundle.times)
        .find(|(frame, _)| frame.jac_det.iter().any(|d| d.abs() < c0))
        .map(|(_, &t)| t)
        .unwrap_or(f64::INFINITY)
}

/// Cubic Lagrange stencil on the label grid: at most 16 `(index, weight)` pairs.
#[derive(Clone, Copy)]
pub(crate) struct Stencil {
    idx: [usize; 16],
    w: [f64; 16],
    len: usize,
}

impl Stencil {
    pub(crate) fn apply(&self, values: &[f64]) -> f64 {
        (0..self.len).map(|k| self.w[k] * values[self.idx[k]]).sum()
    }

    fn apply_point(&self, values: &[Point]) -> Point {
        let mut out = [0.0; 2];
        for k in 0..self.len {
            let v = values[self.idx[k]];
            out[0] += self.w[k] * v[0];
            out[1] += self.w[k] * v[1];
        }
        out
    }

    fn apply_mat(&self, values: &[Mat]) -> Mat {
        let mut out = [[0.0; 2]; 2];
        for k in 0..self.len {
            let v = values[self.idx[k]];
            for i in 0..2 {
                for j in 0..2 {
                    out[i][j] += self.w[k] * v[i][j];
                }
            }
        }
        out
    }
}

fn lagrange4(u: f64) -> [f64; 4] {
    [
        -(u - 1.0) * (u - 2.0) * (u - 3.0) / 6.0,
        u * (u - 2.0) * (u - 3.0) / 2.0,
        -u * (u - 1.0) * (u - 3.0) / 2.0,
        u * (u - 1.0) * (u - 2.0) / 6.0,
    ]
}

/// Returns `None` when `y` lies outside the span of the label nodes.
pub(crate) fn label_stencil(grid: &Grid, y: Point) -> Option<Stencil> {
    let n = grid.points();
    let h = grid.spacing();
    let mut base = [0usize; 2];
    let mut weights = [[0.0; 4]; 2];
    for a in 0..grid.dim() {
        let s = (y[a] + grid.half_width()) / h;
        if !(s >= 0.0 && s <= (n - 1) as f64) {
            return None;
        }
        let j0 = (s.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
        base[a] = j0;
        weights[a] = lagrange4(s - j0 as f64);
    }
    let mut st = Stencil {
        idx: [0; 16],
        w: [0.0; 16],
        len: 0,
    };
    if grid.dim() == 1 {
        for p in 0..4 {
            st.idx[p] = base[0] + p;
            st.w[p] = weights[0][p];
        }
        st.len = 4;
    } else {
        for p in 0..4 {
            for q in 0..4 {
                let k = p * 4 + q;
                st.idx[k] = (base[0] + p) * n + base[1] + q;
                st.w[k] = weights[0][p] * weights[1][q];
            }
        }
        st.len = 16;
    }
    Some(st)
}

/// Interpolated ray data at a (generally off-node) label.
#[derive(Clone, Copy, Debug)]
pub struct RaySample {
    pub x: Point,
    pub xi: Point,
    pub jac: Mat,
    pub dxi: Mat,
    pub action: f64,
    pub jac_det: f64,
}

impl RayBundle {
    pub fn dim(&self) -> usize {
        self.label_grid.dim()
    }

    pub fn time_index(&self, t: f64) -> Result<usize> {
        find_time(&self.times, t)
    }

    pub fn sample(&self, m: usize, y: Point) -> Option<RaySample> {
        let st = label_stencil(&self.label_grid, y)?;
        let f = &self.frames[m];
        Some(RaySample {
            x: st.apply_point(&f.x),
            xi: st.apply_point(&f.xi),
            jac: st.apply_mat(&f.jac),
            dxi: st.apply_mat(&f.dxi),
            action: st.apply(&f.action),
            jac_det: st.apply(&f.jac_det),
        })
    }

    fn position(&self, m: usize, y: Point) -> Option<(Point, Mat)> {
        let st = label_stencil(&self.label_grid, y)?;
        let f = &self.frames[m];
        Some((st.apply_point(&f.x), st.apply_mat(&f.jac)))
    }

    fn newton_tol(&self) -> f64 {
        1e-10 * self.label_grid.half_width()
    }

    /// Label node whose image at time index `m` is closest to `x`.
    fn nearest_label(&self, m: usize, x: Point) -> Point {
        let dim = self.dim();
        let frame = &self.frames[m];
        let best = (0..frame.x.len())
            .min_by(|&a, &b| {
                let da = dist2(&frame.x[a], &x, dim);
                let db = dist2(&frame.x[b], &x, dim);
                da.total_cmp(&db)
            })
            .unwrap_or(0);
        self.label_grid.node(best)
    }

    /// Damped Newton solve of `x(t_m, y) = x_query` from `guess`.
    pub(crate) fn invert_from(&self, m: usize, x_query: Point, guess: Point) -> Result<Point> {
        let dim = self.dim();
        let tol = self.newton_tol();
        let t = self.times[m];
        let fail = |iterations, residual| WkbError::Inversion {
            t,
            x: x_query,
            iterations,
            residual,
        };
        let mut y = guess;
        let (mut xy, mut jac) = self.position(m, y).ok_or_else(|| fail(0, f64::INFINITY))?;
        let mut r = [xy[0] - x_query[0], xy[1] - x_query[1]];
        let mut res = norm(&r, dim);
        for iter in 0..NEWTON_MAX_ITER {
            if res < tol {
                return Ok(y);
            }
            let d = det(&jac, dim);
            if d.abs() < 1e-300 {
                return Err(fail(iter, res));
            }
            let adj = adjugate(&jac, dim);
            let corr = mat_vec(&adj, &r, dim);
            let step = [-corr[0] / d, -corr[1] / d];
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..NEWTON_MAX_HALVINGS {
                let trial = [y[0] + lambda * step[0], y[1] + lambda * step[1]];
                if let Some((xt, jt)) = self.position(m, trial) {
                    let rt = [xt[0] - x_query[0], xt[1] - x_query[1]];
                    let rest = norm(&rt, dim);
                    if rest < res {
                        y = trial;
                        xy = xt;
                        jac = jt;
                        r = rt;
                        res = rest;
                        accepted = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if !accepted {
                return Err(fail(iter, res));
            }
        }
        let _ = xy;
        if res < tol {
            Ok(y)
        } else {
            Err(fail(NEWTON_MAX_ITER, res))
        }
    }
}

fn dist2(a: &Point, b: &Point, dim: usize) -> f64 {
    (0..dim).map(|i| (a[i] - b[i]).powi(2)).sum()
}

pub(crate) fn find_time(times: &[f64], t: f64) -> Result<usize> {
    let scale = times.last().copied().unwrap_or(1.0).abs().max(1.0);
    times
        .iter()
        .position(|&s| (s - t).abs() <= 1e-12 * scale)
        .ok_or(WkbError::UnknownTime(t))
}

/// Label `y` with `x(t, y) = x_query`. `t` must be one of the stored times.
pub fn invert_flow(bundle: &RayBundle, t: f64, x_query: Point) -> Result<Point> {
    let m = bundle.time_index(t)?;
    let guess = bundle.nearest_label(m, x_query);
    bundle.invert_from(m, x_query, guess)
}

/// Eikonal phase with its gradient and Hessian on the Eulerian grid.
#[derive(Clone, Debug)]
pub struct EikonalField {
    pub grid: Grid,
    pub times: Vec<f64>,
    pub phi: Vec<RealField>,
    /// `grad_phi[m][axis]`
    pub grad_phi: Vec<Vec<RealField>>,
    /// `hess_phi[m][i * dim + j]`
    pub hess_phi: Vec<Vec<RealField>>,
    pub lap_phi: Vec<RealField>,
    /// Preimage `y(t, x)` of every grid node.
    pub labels: Vec<Vec<Point>>,
    /// Indices into the bundle's time axis.
    pub bundle_index: Vec<usize>,
    pub valid_until: f64,
}

/// Eikonal data at one (possibly interpolated) time, as plain vectors.
#[derive(Clone, Debug)]
pub struct EikonalSlice {
    pub phi: Vec<f64>,
    pub grad: Vec<Vec<f64>>,
    pub hess: Vec<Vec<f64>>,
    pub lap: Vec<f64>,
}

/// Builds `φ_eik` at every stored bundle time.
pub fn build_eikonal(bundle: &RayBundle, grid: Grid) -> Result<EikonalField> {
    let all: Vec<usize> = (0..bundle.times.len()).collect();
    build_eikonal_at(bundle, grid, &all, DEFAULT_C0)
}

/// Builds `φ_eik` at the given bundle time indices (increasing).
///
/// The value is the action along the ray through `(t, x)` plus `φ₀` at its
/// foot, the gradient is the transported momentum and the Hessian is
/// `∇_y ξ · adj(∇_y x) / det(∇_y x)`.
pub fn build_eikonal_at(bundle: &RayBundle, grid: Grid, indices: &[usize], c0: f64) -> Result<EikonalField> {
    if grid.dim() != bundle.dim() {
        return Err(WkbError::GridMismatch);
    }
    if indices.windows(2).any(|w| w[1] <= w[0]) {
        return Err(WkbError::Config("eikonal time indices must be increasing".into()));
    }
    let valid_until = caustic_horizon(bundle, c0);
    if let Some(&last) = indices.last() {
        let t = bundle.times[last];
        if t >= valid_until {
            let det_min = bundle.frames[last].jac_det.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
            return Err(WkbError::PastCaustic { t, det: det_min });
        }
    }
    let dim = grid.dim();

    // Each node is followed through time so the previous preimage seeds Newton.
    let per_node: Vec<Vec<Point>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.node(i);
            let mut guess = x;
            let mut labels = Vec::with_capacity(indices.len());
            let mut prev_m = 0usize;
            for &m in indices {
                // walk through skipped frames so the guess stays close
                for mm in (prev_m + 1)..m {
                    if let Ok(y) = bundle.invert_from(mm, x, guess) {
                        guess = y;
                    }
                }
                let y = match bundle.invert_from(m, x, guess) {
                    Ok(y) => y,
                    Err(_) => bundle.invert_from(m, x, bundle.nearest_label(m, x))?,
                };
                labels.push(y);
                guess = y;
                prev_m = m;
            }
            Ok(labels)
        })
        .collect::<Result<_>>()?;

    let mut field = EikonalField {
        grid,
        times: indices.iter().map(|&m| bundle.times[m]).collect(),
        phi: Vec::with_capacity(indices.len()),
        grad_phi: Vec::with_capacity(indices.len()),
        hess_phi: Vec::with_capacity(indices.len()),
        lap_phi: Vec::with_capacity(indices.len()),
        labels: Vec::with_capacity(indices.len()),
        bundle_index: indices.to_vec(),
        valid_until,
    };

    for (k, &m) in indices.iter().enumerate() {
        let n = grid.len();
        let mut phi = vec![0.0; n];
        let mut grad = vec![vec![0.0; n]; dim];
        let mut hess = vec![vec![0.0; n]; dim * dim];
        let mut lap = vec![0.0; n];
        let mut labels = Vec::with_capacity(n);
        for (i, node_labels) in per_node.iter().enumerate() {
            let y = node_labels[k];
            let s = bundle.sample(m, y).ok_or(WkbError::Inversion {
                t: bundle.times[m],
                x: grid.node(i),
                iterations: 0,
                residual: f64::INFINITY,
            })?;
            phi[i] = bundle.phase.value(y) + s.action;
            for a in 0..dim {
                grad[a][i] = s.xi[a];
            }
            let d = det(&s.jac, dim);
            let h = mat_mul(&s.dxi, &adjugate(&s.jac, dim), dim);
            for a in 0..dim {
                for b in 0..dim {
                    hess[a * dim + b][i] = h[a][b] / d;
                }
                lap[i] += h[a][a] / d;
            }
            labels.push(y);
        }
        field.phi.push(RealField::new(grid, phi)?);
        field.grad_phi.push(grad.into_iter().map(|g| RealField { grid, values: g }).collect());
        field.hess_phi.push(hess.into_iter().map(|g| RealField { grid, values: g }).collect());
        field.lap_phi.push(RealField::new(grid, lap)?);
        field.labels.push(labels);
    }
    Ok(field)
}

impl EikonalField {
    pub fn time_index(&self, t: f64) -> Result<usize> {
        find_time(&self.times, t)
    }

    pub fn slice(&self, m: usize) -> EikonalSlice {
        EikonalSlice {
            phi: self.phi[m].values.clone(),
            grad: self.grad_phi[m].iter().map(|g| g.values.clone()).collect(),
            hess: self.hess_phi[m].iter().map(|g| g.values.clone()).collect(),
            lap: self.lap_phi[m].values.clone(),
        }
    }

    /// Eikonal data at an arbitrary time in `[0, times.last()]`, by cubic
    /// Lagrange interpolation over the four nearest stored times.
    pub fn slice_at(&self, t: f64) -> Result<EikonalSlice> {
        if let Ok(m) = self.time_index(t) {
            return Ok(self.slice(m));
        }
        let last = *self.times.last().unwrap_or(&0.0);
        if t < 0.0 || t > last || self.times.len() < 2 {
            return Err(WkbError::UnknownTime(t));
        }
        let nt = self.times.len();
        let pos = self.times.partition_point(|&s| s <= t).saturating_sub(1);
        let width = nt.min(4);
        let start = pos.saturating_sub(1).min(nt - width);
        let nodes: Vec<usize> = (start..start + width).collect();
        let weights: Vec<f64> = nodes
            .iter()
            .map(|&j| {
                nodes
                    .iter()
                    .filter(|&&k| k != j)
                    .map(|&k| (t - self.times[k]) / (self.times[j] - self.times[k]))
                    .product()
            })
            .collect();
        let n = self.grid.len();
        let mix = |pick: &dyn for<'a> Fn(&'a EikonalField, usize) -> &'a [f64]| -> Vec<f64> {
            let mut out = vec![0.0; n];
            for (&j, &w) in nodes.iter().zip(&weights) {
                for (o, v) in out.iter_mut().zip(pick(self, j)) {
                    *o += w * v;
                }
            }
            out
        };
        let dim = self.grid.dim();
        Ok(EikonalSlice {
            phi: mix(&|e, j| &e.phi[j].values),
            grad: (0..dim).map(|a| mix(&|e, j| &e.grad_phi[j][a].values)).collect(),
            hess: (0..dim * dim).map(|a| mix(&|e, j| &e.hess_phi[j][a].values)).collect(),
            lap: mix(&|e, j| &e.lap_phi[j].values),
        })
    }
}

/// Writes `(t, y.., x.., xi.., jac_det)` rows for every stored time and label.
pub fn write_ray_csv<W: Write>(bundle: &RayBundle, out: W) -> Result<()> {
    let dim = bundle.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    for prefix in ["y", "x", "xi"] {
        for a in 0..dim {
            header.push(if dim == 1 { prefix.to_string() } else { format!("{prefix}{a}") });
        }
    }
    header.push("jac_det".into());
    w.write_record(&header)?;
    for (frame, t) in bundle.frames.iter().zip(&bundle.times) {
        for l in 0..bundle.label_grid.len() {
            let y = bundle.label_grid.node(l);
            let mut row = vec![format!("{t}")];
            for v in [y, frame.x[l], frame.xi[l]] {
                for c in v.iter().take(dim) {
                    row.push(format!("{c}"));
                }
            }
            row.push(format!("{}", frame.jac_det[l]));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| WkbError::Io {
        path: "<ray csv>".into(),
        source: e,
    })?;
    Ok(())
}

/// Label grid `factor` times wider than `grid` with the same node count.
pub fn label_grid_for(grid: &Grid, factor: f64) -> Result<Grid> {
    Grid::new(grid.dim(), grid.points(), grid.half_width() * factor)
}

/// `n + 1` equally spaced times on `[0, t_final]`.
pub fn uniform_times(t_final: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| t_final * k as f64 / n as f64).collect()
}
