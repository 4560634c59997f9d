//! Periodic uniform grids on `[-L, L)^n`, FFT-based differentiation, quadrature
//! and norms.
//!
//! Nodes are stored row-major: in two dimensions the flat index is
//! `i * points + j` where `i` runs along axis 0 and `j` along axis 1.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WkbError};

/// Position in at most two dimensions; unused components are zero.
pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    points: usize,
    half_width: f64,
}

impl Grid {
    pub fn new(dim: usize, points: usize, half_width: f64) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(WkbError::validation("grid.dim", format!("dimension must be 1 or 2, got {dim}")));
        }
        if points < 8 || !points.is_power_of_two() {
            return Err(WkbError::validation(
                "grid.points",
                format!("points per axis must be a power of two >= 8, got {points}"),
            ));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(WkbError::validation(
                "grid.half_width",
                format!("half width must be positive and finite, got {half_width}"),
            ));
        }
        Ok(Grid {
            dim,
            points,
            half_width,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.points as f64
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing()
    }

    pub fn node(&self, index: usize) -> Point {
        match self.dim {
            1 => [self.coordinate(index), 0.0],
            _ => [
                self.coordinate(index / self.points),
                self.coordinate(index % self.points),
            ],
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len()).map(move |i| self.node(i))
    }

    /// Angular wavenumber of FFT bin `i` along one axis.
    pub fn wavenumber(&self, i: usize) -> f64 {
        let n = self.points as isize;
        let i = i as isize;
        let m = if i < n / 2 { i } else { i - n };
        PI * m as f64 / self.half_width
    }

    fn is_nyquist(&self, i: usize) -> bool {
        i == self.points / 2
    }

    fn axis_indices(&self, index: usize) -> [usize; 2] {
        match self.dim {
            1 => [index, 0],
            _ => [index / self.points, index % self.points],
        }
    }

    /// Wave vector at flat index `index` of a transformed array.
    pub fn wave_vector(&self, index: usize) -> Point {
        let [i, j] = self.axis_indices(index);
        match self.dim {
            1 => [self.wavenumber(i), 0.0],
            _ => [self.wavenumber(i), self.wavenumber(j)],
        }
    }

    /// Largest distance from `x` to the box boundary measured per axis, used by
    /// the boundary-mass diagnostic.
    pub fn distance_to_boundary(&self, x: Point) -> f64 {
        (0..self.dim)
            .map(|a| (self.half_width - x[a].abs()).max(0.0))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn sample_real(&self, f: impl Fn(Point) -> f64) -> Vec<f64> {
        self.nodes().map(f).collect()
    }

    pub fn sample_complex(&self, f: impl Fn(Point) -> Complex64) -> Vec<Complex64> {
        self.nodes().map(f).collect()
    }

    fn check_axis_order(&self, axis: usize, order: usize) -> Result<()> {
        if axis >= self.dim {
            return Err(WkbError::Config(format!(
                "axis {axis} out of range for a {}-d grid",
                self.dim
            )));
        }
        if order != 1 && order != 2 {
            return Err(WkbError::Config(format!(
                "spectral derivative order must be 1 or 2, got {order}"
            )));
        }
        Ok(())
    }

    // ---- transforms -------------------------------------------------------

    pub(crate) fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    /// Inverse transform including the `1/N` normalisation.
    pub(crate) fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, true);
        let scale = 1.0 / self.len() as f64;
        for z in data.iter_mut() {
            *z *= scale;
        }
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        debug_assert_eq!(data.len(), self.len());
        let fft = plan(self.points, inverse);
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        // rows: contiguous chunks along the last axis
        fft.process_with_scratch(data, &mut scratch);
        if self.dim == 2 {
            let n = self.points;
            let mut column = vec![Complex64::new(0.0, 0.0); n];
            for j in 0..n {
                for i in 0..n {
                    column[i] = data[i * n + j];
                }
                fft.process_with_scratch(&mut column, &mut scratch);
                for i in 0..n {
                    data[i * n + j] = column[i];
                }
            }
        }
    }

    /// Applies a Fourier multiplier `m(k)` to complex samples.
    pub(crate) fn apply_multiplier(
        &self,
        values: &[Complex64],
        multiplier: impl Fn(usize, Point) -> Complex64,
    ) -> Vec<Complex64> {
        let mut data = values.to_vec();
        self.forward(&mut data);
        for (idx, z) in data.iter_mut().enumerate() {
            *z *= multiplier(idx, self.wave_vector(idx));
        }
        self.inverse(&mut data);
        data
    }

    fn derivative_multiplier(&self, axis: usize, order: usize) -> impl Fn(usize, Point) -> Complex64 + '_ {
        move |idx, k| {
            let kk = k[axis];
            match order {
                1 => {
                    if self.is_nyquist(self.axis_indices(idx)[axis]) {
                        Complex64::new(0.0, 0.0)
                    } else {
                        Complex64::new(0.0, kk)
                    }
                }
                _ => Complex64::new(-kk * kk, 0.0),
            }
        }
    }

    pub(crate) fn d_complex(&self, values: &[Complex64], axis: usize, order: usize) -> Vec<Complex64> {
        self.apply_multiplier(values, self.derivative_multiplier(axis, order))
    }

    pub(crate) fn d_real(&self, values: &[f64], axis: usize, order: usize) -> Vec<f64> {
        let data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.d_complex(&data, axis, order).into_iter().map(|z| z.re).collect()
    }

    pub(crate) fn gradient_real(&self, values: &[f64]) -> Vec<Vec<f64>> {
        (0..self.dim).map(|a| self.d_real(values, a, 1)).collect()
    }

    pub(crate) fn gradient_complex(&self, values: &[Complex64]) -> Vec<Vec<Complex64>> {
        (0..self.dim).map(|a| self.d_complex(values, a, 1)).collect()
    }

    pub(crate) fn laplacian_complex(&self, values: &[Complex64]) -> Vec<Complex64> {
        self.apply_multiplier(values, |_, k| Complex64::new(-(k[0] * k[0] + k[1] * k[1]), 0.0))
    }

    pub(crate) fn laplacian_real(&self, values: &[f64]) -> Vec<f64> {
        let data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.laplacian_complex(&data).into_iter().map(|z| z.re).collect()
    }

    pub(crate) fn divergence(&self, components: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (axis, c) in components.iter().enumerate() {
            for (o, d) in out.iter_mut().zip(self.d_real(c, axis, 1)) {
                *o += d;
            }
        }
        out
    }

    /// Two-thirds rule: zero every mode with `|k_j| > (2/3) k_max` on some axis.
    pub(crate) fn dealias_real(&self, values: &mut [f64]) {
        let cutoff = self.points / 3;
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut data);
        for (idx, z) in data.iter_mut().enumerate() {
            if self.beyond_cutoff(idx, cutoff) {
                *z = Complex64::new(0.0, 0.0);
            }
        }
        self.inverse(&mut data);
        for (v, z) in values.iter_mut().zip(data) {
            *v = z.re;
        }
    }

    pub(crate) fn dealias_complex(&self, values: &mut [Complex64]) {
        let cutoff = self.points / 3;
        self.forward(values);
        for (idx, z) in values.iter_mut().enumerate() {
            if self.beyond_cutoff(idx, cutoff) {
                *z = Complex64::new(0.0, 0.0);
            }
        }
        self.inverse(values);
    }

    fn beyond_cutoff(&self, idx: usize, cutoff: usize) -> bool {
        let n = self.points as isize;
        let [i, j] = self.axis_indices(idx);
        let folded = |m: usize| {
            let m = m as isize;
            (if m < n / 2 { m } else { n - m }) as usize
        };
        folded(i) > cutoff || (self.dim == 2 && folded(j) > cutoff)
    }

    pub(crate) fn integrate_real(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() * self.cell_volume()
    }

    pub(crate) fn integrate_complex(&self, values: &[Complex64]) -> Complex64 {
        values.iter().sum::<Complex64>() * self.cell_volume()
    }
}

type PlanCache = HashMap<(usize, bool), Arc<dyn Fft<f64>>>;

thread_local! {
    static PLANS: RefCell<PlanCache> = RefCell::new(HashMap::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry((n, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

fn check_finite_real(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(WkbError::NumericalInstability {
            t: f64::NAN,
            detail: format!("non-finite sample at node {i}"),
        }),
        None => Ok(()),
    }
}

fn check_len(grid: &Grid, len: usize) -> Result<()> {
    if len != grid.len() {
        return Err(WkbError::Config(format!(
            "field has {len} values but the grid has {} nodes",
            grid.len()
        )));
    }
    Ok(())
}

/// Real scalar samples on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RealField {
    pub(crate) grid: Grid,
    pub(crate) values: Vec<f64>,
}

impl RealField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        check_len(&grid, values.len())?;
        check_finite_real(&values)?;
        Ok(RealField { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        RealField {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(Point) -> f64) -> Result<Self> {
        Self::new(grid, grid.sample_real(f))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn spectral_derivative(&self, axis: usize, order: usize) -> Result<RealField> {
        self.grid.check_axis_order(axis, order)?;
        Ok(RealField {
            grid: self.grid,
            values: self.grid.d_real(&self.values, axis, order),
        })
    }

    /// Rectangle rule, spectrally accurate for smooth periodic data.
    pub fn integrate(&self) -> f64 {
        self.grid.integrate_real(&self.values)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Complex samples, typically of `u^ε` or of an amplitude.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveField {
    pub(crate) grid: Grid,
    pub(crate) values: Vec<Complex64>,
    pub(crate) epsilon: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Norms {
    pub l2: f64,
    pub linf: f64,
    pub l4: f64,
}

impl WaveField {
    pub fn new(grid: Grid, values: Vec<Complex64>, epsilon: Option<f64>) -> Result<Self> {
        check_len(&grid, values.len())?;
        if let Some(i) = values.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(WkbError::NumericalInstability {
                t: f64::NAN,
                detail: format!("non-finite sample at node {i}"),
            });
        }
        Ok(WaveField {
            grid,
            values,
            epsilon,
        })
    }

    pub fn zeros(grid: Grid, epsilon: Option<f64>) -> Self {
        WaveField {
            grid,
            values: vec![Complex64::new(0.0, 0.0); grid.len()],
            epsilon,
        }
    }

    pub fn from_fn(grid: Grid, epsilon: Option<f64>, f: impl Fn(Point) -> Complex64) -> Result<Self> {
        Self::new(grid, grid.sample_complex(f), epsilon)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn spectral_derivative(&self, axis: usize, order: usize) -> Result<WaveField> {
        self.grid.check_axis_order(axis, order)?;
        Ok(WaveField {
            grid: self.grid,
            values: self.grid.d_complex(&self.values, axis, order),
            epsilon: self.epsilon,
        })
    }

    pub fn integrate(&self) -> Complex64 {
        self.grid.integrate_complex(&self.values)
    }

    pub fn modulus_squared(&self) -> RealField {
        RealField {
            grid: self.grid,
            values: self.values.iter().map(|z| z.norm_sqr()).collect(),
        }
    }

    pub fn mass(&self) -> f64 {
        self.grid
            .integrate_real(&self.values.iter().map(|z| z.norm_sqr()).collect::<Vec<_>>())
    }

    pub fn norms(&self) -> Norms {
        let h = self.grid.cell_volume();
        let mut s2 = 0.0;
        let mut s4 = 0.0;
        let mut linf: f64 = 0.0;
        for z in &self.values {
            let m = z.norm_sqr();
            s2 += m;
            s4 += m * m;
            linf = linf.max(m.sqrt());
        }
        Norms {
            l2: (s2 * h).sqrt(),
            linf,
            l4: (s4 * h).powf(0.25),
        }
    }

    /// Fraction of the mass lying within `width` of the box boundary.
    pub fn boundary_mass_fraction(&self, width: f64) -> f64 {
        let total: f64 = self.values.iter().map(|z| z.norm_sqr()).sum();
        if total == 0.0 {
            return 0.0;
        }
        let edge: f64 = self
            .values
            .iter()
            .enumerate()
            .filter(|(i, _)| self.grid.distance_to_boundary(self.grid.node(*i)) < width)
            .map(|(_, z)| z.norm_sqr())
            .sum();
        edge / total
    }
}
