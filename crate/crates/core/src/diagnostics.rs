//! Error norms, rate fits and conservation ledgers.

use std::io::Write;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Result, WkbError};
use crate::grid::WaveField;
use crate::nls::{NlsModel, NlsRun};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorRecord {
    pub t: f64,
    pub l2: f64,
    pub linf: f64,
}

/// L² and max-norm of `u - v`.
pub fn field_error(t: f64, u: &WaveField, v: &WaveField) -> Result<ErrorRecord> {
    if u.grid() != v.grid() {
        return Err(WkbError::GridMismatch);
    }
    let mut s2 = 0.0;
    let mut linf: f64 = 0.0;
    for (a, b) in u.values().iter().zip(v.values()) {
        let d = (a - b).norm_sqr();
        s2 += d;
        linf = linf.max(d.sqrt());
    }
    Ok(ErrorRecord {
        t,
        l2: (s2 * u.grid().cell_volume()).sqrt(),
        linf,
    })
}

/// `‖(1 + |k|²)^{s/2} û‖`, the spectral `H^s` norm of `u - v`.
pub fn sobolev_error(u: &WaveField, v: &WaveField, s: f64) -> Result<f64> {
    if u.grid() != v.grid() {
        return Err(WkbError::GridMismatch);
    }
    let grid = *u.grid();
    let mut d: Vec<Complex64> = u.values().iter().zip(v.values()).map(|(a, b)| a - b).collect();
    grid.forward(&mut d);
    let total: f64 = d
        .iter()
        .enumerate()
        .map(|(idx, z)| {
            let k = grid.wave_vector(idx);
            (1.0 + k[0] * k[0] + k[1] * k[1]).powf(s) * z.norm_sqr()
        })
        .sum();
    Ok((total * grid.cell_volume() / grid.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    (slope, intercept, r2)
}

/// Least squares on `(ln x, ln err)`.
pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<RateFit> {
    if pairs.len() < 3 {
        return Err(WkbError::Config("rate fit needs at least three pairs".into()));
    }
    if pairs.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(WkbError::Config("rate fit needs positive finite inputs".into()));
    }
    let lx: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, r2) = least_squares(&lx, &ly);
    Ok(RateFit {
        xs: pairs.iter().map(|p| p.0).collect(),
        ys: pairs.iter().map(|p| p.1).collect(),
        slope,
        intercept,
        r2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AffineFit {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Largest `|y - (intercept + slope x)| / y`.
    pub max_relative_residual: f64,
}

/// Least squares `y ≈ intercept + slope · x`.
pub fn fit_affine(pairs: &[(f64, f64)]) -> Result<AffineFit> {
    if pairs.len() < 3 {
        return Err(WkbError::Config("affine fit needs at least three pairs".into()));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (slope, intercept, _) = least_squares(&xs, &ys);
    let max_relative_residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).abs() / y.abs())
        .fold(0.0, f64::max);
    Ok(AffineFit {
        xs,
        ys,
        slope,
        intercept,
        max_relative_residual,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conserved {
    Mass,
    Energy,
    Momentum,
    PseudoConformal,
}

impl Conserved {
    pub const ALL: [Conserved; 4] = [
        Conserved::Mass,
        Conserved::Energy,
        Conserved::Momentum,
        Conserved::PseudoConformal,
    ];

    /// Whether the quantity obeys a known law for `model`.
    pub fn applies_to(self, model: &NlsModel) -> bool {
        let law = &model.nonlinearity.law;
        let cubic_like = law.is_cubic() || law.is_none();
        match self {
            Conserved::Mass => true,
            Conserved::Energy => cubic_like && !model.potential.is_time_dependent(),
            Conserved::Momentum => model.potential.is_zero(),
            Conserved::PseudoConformal => cubic_like && model.potential.is_zero(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerPoint {
    pub t: f64,
    pub value: f64,
    /// Right-hand side of the evolution law (pseudo-conformal entry only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    /// `|value - value(0)|` relative, or the normalized law mismatch.
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ledger {
    pub quantity: Conserved,
    pub points: Vec<LedgerPoint>,
    pub max_drift: f64,
}

fn gradient_sq_norm(u: &WaveField, scale: f64) -> f64 {
    let grid = u.grid();
    let g = grid.gradient_complex(u.values());
    let dens: Vec<f64> = (0..grid.len())
        .map(|i| g.iter().map(|c| (scale * c[i]).norm_sqr()).sum())
        .collect();
    grid.integrate_real(&dens)
}

fn l4_pow4(u: &WaveField) -> f64 {
    let dens: Vec<f64> = u.values().iter().map(|z| z.norm_sqr().powi(2)).collect();
    u.grid().integrate_real(&dens)
}

/// `‖ε∇u‖² + 2∫V|u|² + ε^κ‖u‖⁴₄`.
fn energy(run: &NlsRun, t: f64, u: &WaveField) -> f64 {
    let eps = run.epsilon;
    let grid = u.grid();
    let pot: Vec<f64> = grid
        .nodes()
        .zip(u.values())
        .map(|(x, z)| run.model.potential.value(t, x) * z.norm_sqr())
        .collect();
    let nonlinear = nonlinear_coupling(run) * l4_pow4(u);
    gradient_sq_norm(u, eps) + 2.0 * grid.integrate_real(&pot) + nonlinear
}

fn momentum(run: &NlsRun, u: &WaveField) -> Vec<f64> {
    let grid = u.grid();
    grid.gradient_complex(u.values())
        .iter()
        .map(|g| {
            let dens: Vec<f64> = u
                .values()
                .iter()
                .zip(g)
                .map(|(z, d)| (z.conj() * run.epsilon * d).im)
                .collect();
            grid.integrate_real(&dens)
        })
        .collect()
}

/// `‖(x + iεt∇)u‖² + ε^κ t²‖u‖⁴₄`.
fn pseudo_conformal(run: &NlsRun, t: f64, u: &WaveField) -> f64 {
    let grid = u.grid();
    let g = grid.gradient_complex(u.values());
    let dens: Vec<f64> = (0..grid.len())
        .map(|i| {
            let x = grid.node(i);
            (0..grid.dim())
                .map(|ax| (x[ax] * u.values()[i] + Complex64::new(0.0, run.epsilon * t) * g[ax][i]).norm_sqr())
                .sum()
        })
        .collect();
    grid.integrate_real(&dens) + nonlinear_coupling(run) * t * t * l4_pow4(u)
}

fn nonlinear_coupling(run: &NlsRun) -> f64 {
    if run.model.nonlinearity.law.is_none() {
        0.0
    } else {
        run.model.nonlinearity.coupling(run.epsilon)
    }
}

/// Per-snapshot values of a conserved quantity with its drift.
///
/// The mass entry reads the solver's per-step record, so its drift is exactly
/// the run's. The pseudo-conformal entry compares the centered time
/// derivative of `Q(t)` with `ε^κ t (2 - n)‖u‖⁴₄`; the mismatch is normalized
/// by `ε^κ · t_final · max_t ‖u‖⁴₄`, or by `max_t Q` for the linear law.
pub fn conservation_ledger(run: &NlsRun, which: Conserved) -> Result<Ledger> {
    let relative = |values: &[(f64, f64)]| -> Vec<LedgerPoint> {
        let v0 = values[0].1;
        let scale = if v0.abs() > 0.0 { v0.abs() } else { 1.0 };
        values
            .iter()
            .map(|&(t, v)| LedgerPoint {
                t,
                value: v,
                rate: None,
                drift: (v - v0).abs() / scale,
            })
            .collect()
    };
    if !which.applies_to(&run.model) {
        return Err(WkbError::Config(format!(
            "{which:?} obeys no known law for this model (cubic or linear law, static or vanishing V required)"
        )));
    }
    let points = match which {
        Conserved::Mass => {
            let series: Vec<(f64, f64)> = run.mass_record.iter().map(|s| (s.t, s.mass)).collect();
            relative(&series)
        }
        Conserved::Energy => {
            let series: Vec<(f64, f64)> = run
                .times
                .iter()
                .zip(&run.fields)
                .map(|(&t, u)| (t, energy(run, t, u)))
                .collect();
            relative(&series)
        }
        Conserved::Momentum => {
            // drift of the Euclidean momentum vector, relative to the L² mass scale
            let values: Vec<Vec<f64>> = run.fields.iter().map(|u| momentum(run, u)).collect();
            let mass = run.mass_record[0].mass.max(f64::MIN_POSITIVE);
            run.times
                .iter()
                .zip(&values)
                .map(|(&t, p)| {
                    let drift = p
                        .iter()
                        .zip(&values[0])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    LedgerPoint {
                        t,
                        value: p.iter().map(|c| c * c).sum::<f64>().sqrt(),
                        rate: None,
                        drift: drift / mass,
                    }
                })
                .collect()
        }
        Conserved::PseudoConformal => {
            let n = run.grid().dim() as f64;
            let c = nonlinear_coupling(run);
            let q: Vec<f64> = run
                .times
                .iter()
                .zip(&run.fields)
                .map(|(&t, u)| pseudo_conformal(run, t, u))
                .collect();
            let l4: Vec<f64> = run.fields.iter().map(l4_pow4).collect();
            let t_final = run.times[run.times.len() - 1];
            let scale = if c > 0.0 {
                c * t_final * l4.iter().cloned().fold(0.0, f64::max)
            } else {
                q.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
            }
            .max(f64::MIN_POSITIVE);
            (1..run.times.len().saturating_sub(1))
                .map(|m| {
                    let t = run.times[m];
                    let dq = crate::weak::time_derivative(&run.times, m, |k| Complex64::new(q[k], 0.0)).re;
                    let rhs = c * t * (2.0 - n) * l4[m];
                    LedgerPoint {
                        t,
                        value: q[m],
                        rate: Some(rhs),
                        drift: (dq - rhs).abs() / scale,
                    }
                })
                .collect()
        }
    };
    let max_drift = points.iter().map(|p| p.drift).fold(0.0, f64::max);
    Ok(Ledger {
        quantity: which,
        points,
        max_drift,
    })
}

/// Writes `(t, quantity, value, drift)` rows.
pub fn write_ledger_csv<W: Write>(ledgers: &[Ledger], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "quantity", "value", "drift"])?;
    for l in ledgers {
        let name = serde_json::to_value(l.quantity)?;
        let name = name.as_str().unwrap_or_default().to_string();
        for p in &l.points {
            w.write_record([p.t.to_string(), name.clone(), p.value.to_string(), p.drift.to_string()])?;
        }
    }
    w.flush().map_err(|e| WkbError::Io {
        path: "<ledger csv>".into(),
        source: e,
    })?;
    Ok(())
}
