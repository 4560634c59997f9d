//! WKB approximants for `κ > 1/2`: transported amplitude `a = a₀(y)/√J`,
//! nonlinear phase shift `G`, and the assembled field
//! `a · e^{iε^{κ-1}G} · e^{iφ_eik/ε}`.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Result, WkbError};
use crate::grid::{Grid, Point, RealField, WaveField};
use crate::model::{Nonlinearity, Profile};
use crate::nls::{check_resolution, support_mask};
use crate::rays::{invert_flow, label_stencil, EikonalField, RayBundle};

#[derive(Clone, Debug)]
pub struct WeakWkbField {
    pub grid: Grid,
    pub times: Vec<f64>,
    pub a: Vec<WaveField>,
    pub g: Vec<RealField>,
    pub kappa: f64,
}

fn jac_det_at(bundle: &RayBundle, m: usize, y: Point) -> Result<f64> {
    let st = label_stencil(&bundle.label_grid, y).ok_or(WkbError::Inversion {
        t: bundle.times[m],
        x: y,
        iterations: 0,
        residual: f64::INFINITY,
    })?;
    let d = st.apply(&bundle.frames[m].jac_det);
    if d <= 0.0 {
        return Err(WkbError::PastCaustic { t: bundle.times[m], det: d });
    }
    Ok(d)
}

/// Composite Simpson weights for `n + 1` equispaced samples with step `h`;
/// odd interval counts end with a 3/8 panel, a single interval is trapezoidal.
pub(crate) fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; n + 1];
    match n {
        0 => {}
        1 => {
            w[0] = 0.5 * h;
            w[1] = 0.5 * h;
        }
        _ => {
            let (even_end, tail) = if n.is_multiple_of(2) { (n, false) } else { (n - 3, true) };
            for k in (0..even_end).step_by(2) {
                w[k] += h / 3.0;
                w[k + 1] += 4.0 * h / 3.0;
                w[k + 2] += h / 3.0;
            }
            if tail {
                let s = even_end;
                w[s] += 3.0 * h / 8.0;
                w[s + 1] += 9.0 * h / 8.0;
                w[s + 2] += 9.0 * h / 8.0;
                w[s + 3] += 3.0 * h / 8.0;
            }
        }
    }
    w
}

fn uniform_step(times: &[f64], upto: usize) -> Result<f64> {
    if upto == 0 {
        return Ok(0.0);
    }
    let h = times[1] - times[0];
    let uniform = times[..=upto]
        .windows(2)
        .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs().max(1e-300));
    if uniform {
        Ok(h)
    } else {
        Err(WkbError::Config("phase-shift quadrature needs equispaced ray times".into()))
    }
}

/// `a(t_m, ·)` and `G(t_m, ·)` from the preimages `labels` of the grid nodes.
fn amplitude_and_shift(
    bundle: &RayBundle,
    m: usize,
    labels: &[Point],
    a0: &Profile,
    law: &Nonlinearity,
) -> Result<(Vec<Complex64>, Vec<f64>)> {
    let dim = bundle.dim();
    let h = uniform_step(&bundle.times, m)?;
    let weights = simpson_weights(m, h);
    let pairs: Vec<(Complex64, f64)> = labels
        .par_iter()
        .map(|&y| {
            let a0y = a0.eval(y, dim);
            let j = jac_det_at(bundle, m, y)?;
            let a = a0y / j.sqrt();
            let mut g = 0.0;
            if !law.is_none() && a0y.norm_sqr() > 0.0 {
                for (s, w) in weights.iter().enumerate() {
                    let js = jac_det_at(bundle, s, y)?;
                    g -= w * law.f(a0y.norm_sqr() / js);
                }
            }
            Ok((a, g))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

fn labels_by_inversion(bundle: &RayBundle, t: f64, grid: &Grid) -> Result<Vec<Point>> {
    (0..grid.len())
        .into_par_iter()
        .map(|i| invert_flow(bundle, t, grid.node(i)))
        .collect()
}

/// `a(t, x) = a₀(y(t, x)) / √J_t(y(t, x))`.
pub fn transport_amplitude(bundle: &RayBundle, a0: &Profile, t: f64, grid: &Grid) -> Result<WaveField> {
    let m = bundle.time_index(t)?;
    let labels = labels_by_inversion(bundle, t, grid)?;
    let (a, _) = amplitude_and_shift(bundle, m, &labels, a0, &Nonlinearity::None)?;
    WaveField::new(*grid, a, None)
}

/// `G(t, x) = -∫₀ᵗ f(|a₀(y)|² / J_s(y)) ds` along the ray through `(t, x)`.
pub fn phase_shift_g(bundle: &RayBundle, a0: &Profile, law: &Nonlinearity, t: f64, grid: &Grid) -> Result<RealField> {
    let m = bundle.time_index(t)?;
    let labels = labels_by_inversion(bundle, t, grid)?;
    let (_, g) = amplitude_and_shift(bundle, m, &labels, a0, law)?;
    RealField::new(*grid, g)
}

/// Amplitude and phase shift at every time of `eikonal`, reusing its preimages.
pub fn build_weak(
    bundle: &RayBundle,
    eikonal: &EikonalField,
    a0: &Profile,
    law: &Nonlinearity,
    kappa: f64,
) -> Result<WeakWkbField> {
    check_kappa(kappa)?;
    let grid = eikonal.grid;
    let mut a = Vec::with_capacity(eikonal.times.len());
    let mut g = Vec::with_capacity(eikonal.times.len());
    for (k, &m) in eikonal.bundle_index.iter().enumerate() {
        let (ak, gk) = amplitude_and_shift(bundle, m, &eikonal.labels[k], a0, law)?;
        a.push(WaveField::new(grid, ak, None)?);
        g.push(RealField::new(grid, gk)?);
    }
    Ok(WeakWkbField {
        grid,
        times: eikonal.times.clone(),
        a,
        g,
        kappa,
    })
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.5 {
        Ok(())
    } else {
        Err(WkbError::validation(
            "nonlinearity.kappa",
            format!("weak-regime approximant requires kappa > 1/2, got {kappa}; use the supercritical solver for kappa = 0"),
        ))
    }
}

/// `a · e^{iε^{κ-1}G} · e^{iφ_eik/ε}` at stored time `t`; `with_shift = false`
/// drops the `G` factor.
pub fn assemble_weak(
    wkb: &WeakWkbField,
    eikonal: &EikonalField,
    epsilon: f64,
    t: f64,
    with_shift: bool,
) -> Result<WaveField> {
    check_kappa(wkb.kappa)?;
    let m = crate::rays::find_time(&wkb.times, t)?;
    let me = eikonal.time_index(t)?;
    let grid = wkb.grid;
    let a = wkb.a[m].values();
    let g = &wkb.g[m].values;
    let phi = &eikonal.phi[me].values;
    let shift = if with_shift { epsilon.powf(wkb.kappa - 1.0) } else { 0.0 };

    let support = support_mask(a);
    let dim = grid.dim();
    let grad_g = grid.gradient_real(g);
    let max_grad = (0..grid.len())
        .filter(|&i| support[i])
        .map(|i| {
            (0..dim)
                .map(|ax| {
                    let c = eikonal.grad_phi[me][ax].values[i] + epsilon * shift * grad_g[ax][i];
                    c * c
                })
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    check_resolution(&grid, max_grad, epsilon)?;

    let values = (0..grid.len())
        .map(|i| a[i] * Complex64::from_polar(1.0, shift * g[i] + phi[i] / epsilon))
        .collect();
    WaveField::new(grid, values, Some(epsilon))
}

/// Eulerian method-of-lines solution of `∂ₜa + ∇φ_eik·∇a + ½aΔφ_eik = 0`
/// together with `∂ₜφ̃ + ∇φ_eik·∇φ̃ + f(|a|²) = 0`, `φ̃(0) = 0`, reported at
/// the eikonal times.
pub fn limit_phase_mol(eikonal: &EikonalField, a0: &Profile, law: &Nonlinearity) -> Result<(Vec<WaveField>, Vec<RealField>)> {
    let grid = eikonal.grid;
    let n = grid.len();
    let dim = grid.dim();
    let max_speed = eikonal
        .grad_phi
        .iter()
        .flat_map(|g| g.iter().flat_map(|c| c.values.iter()))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let kmax = std::f64::consts::PI / grid.spacing();
    let dt_cap = if max_speed > 0.0 { 1.0 / (max_speed * kmax * dim as f64) } else { f64::INFINITY };

    let mut a = a0.sample(&grid);
    let mut phi = vec![0.0; n];
    let mut out_a = vec![WaveField::new(grid, a.clone(), None)?];
    let mut out_phi = vec![RealField::new(grid, phi.clone())?];

    let rhs = |t: f64, a: &[Complex64], phi: &[f64]| -> Result<(Vec<Complex64>, Vec<f64>)> {
        let e = eikonal.slice_at(t)?;
        let ga = grid.gradient_complex(a);
        let gp = grid.gradient_real(phi);
        let da = (0..n)
            .map(|i| {
                let adv: Complex64 = (0..dim).map(|ax| e.grad[ax][i] * ga[ax][i]).sum();
                -adv - 0.5 * a[i] * e.lap[i]
            })
            .collect();
        let dp = (0..n)
            .map(|i| {
                let adv: f64 = (0..dim).map(|ax| e.grad[ax][i] * gp[ax][i]).sum();
                -adv - law.f(a[i].norm_sqr())
            })
            .collect();
        Ok((da, dp))
    };

    for w in eikonal.times.windows(2) {
        let span = w[1] - w[0];
        let steps = (span / dt_cap).ceil().max(1.0) as usize;
        let h = span / steps as f64;
        for s in 0..steps {
            let t = w[0] + s as f64 * h;
            let (k1a, k1p) = rhs(t, &a, &phi)?;
            let stage = |ka: &[Complex64], kp: &[f64], c: f64| -> (Vec<Complex64>, Vec<f64>) {
                (
                    a.iter().zip(ka).map(|(x, k)| x + c * h * k).collect(),
                    phi.iter().zip(kp).map(|(x, k)| x + c * h * k).collect(),
                )
            };
            let (a2, p2) = stage(&k1a, &k1p, 0.5);
            let (k2a, k2p) = rhs(t + 0.5 * h, &a2, &p2)?;
            let (a3, p3) = stage(&k2a, &k2p, 0.5);
            let (k3a, k3p) = rhs(t + 0.5 * h, &a3, &p3)?;
            let (a4, p4) = stage(&k3a, &k3p, 1.0);
            let (k4a, k4p) = rhs(t + h, &a4, &p4)?;
            for i in 0..n {
                a[i] += h / 6.0 * (k1a[i] + 2.0 * k2a[i] + 2.0 * k3a[i] + k4a[i]);
                phi[i] += h / 6.0 * (k1p[i] + 2.0 * k2p[i] + 2.0 * k3p[i] + k4p[i]);
            }
        }
        out_a.push(WaveField::new(grid, a.clone(), None)?);
        out_phi.push(RealField::new(grid, phi.clone())?);
    }
    Ok((out_a, out_phi))
}

/// Fourth-order difference at interior index `m` on equispaced samples
/// (centered where possible, shifted one node near the ends); three-point
/// centered otherwise.
pub(crate) fn time_derivative(times: &[f64], m: usize, f: impl Fn(usize) -> Complex64) -> Complex64 {
    let n = times.len();
    let h = times[m + 1] - times[m];
    let uniform = n >= 5 && times.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h);
    if !uniform {
        return (f(m + 1) - f(m - 1)) / (times[m + 1] - times[m - 1]);
    }
    if m >= 2 && m + 2 < n {
        (f(m - 2) - 8.0 * f(m - 1) + 8.0 * f(m + 1) - f(m + 2)) / (12.0 * h)
    } else if m < 2 {
        (-3.0 * f(m - 1) - 10.0 * f(m) + 18.0 * f(m + 1) - 6.0 * f(m + 2) + f(m + 3)) / (12.0 * h)
    } else {
        (-f(m - 3) + 6.0 * f(m - 2) - 18.0 * f(m - 1) + 10.0 * f(m) + 3.0 * f(m + 1)) / (12.0 * h)
    }
}

/// Per interior snapshot: `‖∂ₜa + ∇φ_eik·∇a + ½aΔφ_eik‖_{L²}` and
/// `‖∂ₜ|a|² + ∇·(|a|²∇φ_eik)‖_{L¹}`, both restricted to the support of `a`,
/// with centered time differences.
pub fn transport_residuals(wkb: &WeakWkbField, eikonal: &EikonalField) -> Result<Vec<(f64, f64, f64)>> {
    let grid = wkb.grid;
    let n = grid.len();
    let dim = grid.dim();
    let mut out = Vec::new();
    for m in 1..wkb.times.len().saturating_sub(1) {
        let me = eikonal.time_index(wkb.times[m])?;
        let a = wkb.a[m].values();
        let support = support_mask(a);
        let ga = grid.gradient_complex(a);
        let rho: Vec<f64> = a.iter().map(|z| z.norm_sqr()).collect();
        let flux: Vec<Vec<f64>> = (0..dim)
            .map(|ax| (0..n).map(|i| rho[i] * eikonal.grad_phi[me][ax].values[i]).collect())
            .collect();
        let div = grid.divergence(&flux);
        let mut amp = vec![0.0; n];
        let mut modulus = vec![0.0; n];
        for i in 0..n {
            if !support[i] {
                continue;
            }
            let at = time_derivative(&wkb.times, m, |k| wkb.a[k].values()[i]);
            let adv: Complex64 = (0..dim).map(|ax| eikonal.grad_phi[me][ax].values[i] * ga[ax][i]).sum();
            amp[i] = (at + adv + 0.5 * a[i] * eikonal.lap_phi[me].values[i]).norm_sqr();
            let rt = time_derivative(&wkb.times, m, |k| Complex64::new(wkb.a[k].values()[i].norm_sqr(), 0.0)).re;
            modulus[i] = (rt + div[i]).abs();
        }
        out.push((wkb.times[m], grid.integrate_real(&amp).sqrt(), grid.integrate_real(&modulus)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rays::{build_eikonal, label_grid_for, trace_rays, uniform_times, Phase, Potential};

    fn setup(phase: Phase, t_final: f64, frames: usize) -> (Grid, RayBundle, EikonalField) {
        let grid = Grid::new(1, 256, 8.0).unwrap();
        let times = uniform_times(t_final, frames);
        let bundle = trace_rays(&Potential::Zero, &phase, label_grid_for(&grid, 2.0).unwrap(), &times).unwrap();
        let eik = build_eikonal(&bundle, grid).unwrap();
        (grid, bundle, eik)
    }

    #[test]
    fn time_derivative_is_fourth_order_exact_on_quartics() {
        let times = uniform_times(1.0, 8);
        let f = |t: f64| t.powi(4) - 2.0 * t.powi(3) + t;
        let df = |t: f64| 4.0 * t.powi(3) - 6.0 * t * t + 1.0;
        for m in 1..8 {
            let d = time_derivative(&times, m, |k| Complex64::new(f(times[k]), 0.0)).re;
            assert!((d - df(times[m])).abs() < 1e-12, "m = {m}");
        }
    }

    #[test]
    fn simpson_weights_integrate_cubics() {
        for n in 1..9 {
            let h = 0.3 / n as f64;
            let w = simpson_weights(n, h);
            let integral: f64 = w.iter().enumerate().map(|(k, wk)| wk * (k as f64 * h).powi(2)).sum();
            let tol = if n == 1 { 1e-2 } else { 1e-14 };
            assert!((integral - 0.009).abs() < tol, "n = {n}");
        }
    }

    #[test]
    fn amplitude_examples() {
        let a0 = Profile::gaussian(1.0, 1.0);
        let (grid, bundle, _) = setup(Phase::Zero, 0.5, 10);
        let a = transport_amplitude(&bundle, &a0, 0.5, &grid).unwrap();
        for (z, x) in a.values().iter().zip(grid.nodes()) {
            assert!((z - a0.eval(x, 1)).norm() < 1e-14);
        }

        let t_focus = 1.0;
        let (grid, bundle, _) = setup(Phase::QuadraticFocusing { t_focus }, 0.4, 40);
        let a = transport_amplitude(&bundle, &a0, 0.0, &grid).unwrap();
        for (z, x) in a.values().iter().zip(grid.nodes()) {
            assert!((z - a0.eval(x, 1)).norm() < 1e-14);
        }
        let t = 0.4;
        let a = transport_amplitude(&bundle, &a0, t, &grid).unwrap();
        let s = 1.0 - t / t_focus;
        for (z, x) in a.values().iter().zip(grid.nodes()) {
            let exact = (-(x[0] / s).powi(2) / 2.0).exp() / s.sqrt();
            assert!((z.re - exact).abs() < 1e-9);
        }
        let norm0 = WaveField::new(grid, a0.sample(&grid), None).unwrap().norms().l2;
        assert!((a.norms().l2 - norm0).abs() < 1e-8);
    }

    #[test]
    fn phase_shift_examples() {
        let a0 = Profile::gaussian(1.0, 1.0);
        let (grid, bundle, _) = setup(Phase::Zero, 0.5, 10);
        let g = phase_shift_g(&bundle, &a0, &Nonlinearity::None, 0.5, &grid).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        let g = phase_shift_g(&bundle, &Profile::Zero, &Nonlinearity::Cubic, 0.5, &grid).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        let g = phase_shift_g(&bundle, &a0, &Nonlinearity::Cubic, 0.5, &grid).unwrap();
        for (v, x) in g.values().iter().zip(grid.nodes()) {
            assert!((v + 0.5 * a0.eval(x, 1).norm_sqr()).abs() < 1e-14);
        }

        let t_focus = 1.0;
        let (grid, bundle, _) = setup(Phase::QuadraticFocusing { t_focus }, 0.4, 80);
        let t = 0.4;
        let g = phase_shift_g(&bundle, &a0, &Nonlinearity::Cubic, t, &grid).unwrap();
        for (v, x) in g.values().iter().zip(grid.nodes()) {
            let y = x[0] / (1.0 - t / t_focus);
            let exact = -a0.eval([y, 0.0], 1).norm_sqr() * t_focus * (1.0 / (1.0 - t / t_focus)).ln();
            assert!((v - exact).abs() < 1e-8);
        }
    }

    #[test]
    fn assembly_examples() {
        let a0 = Profile::gaussian(1.0, 1.0);
        let (grid, bundle, eik) = setup(Phase::Zero, 0.5, 10);
        let wkb = build_weak(&bundle, &eik, &a0, &Nonlinearity::Cubic, 1.0).unwrap();
        assert_eq!(wkb.g[0].max_abs(), 0.0);
        let u = assemble_weak(&wkb, &eik, 0.1, 0.5, true).unwrap();
        for (z, x) in u.values().iter().zip(grid.nodes()) {
            let a = a0.eval(x, 1).re;
            let exact = Complex64::from_polar(a, -0.5 * a * a);
            assert!((z - exact).norm() < 1e-14);
        }

        let wkb2 = build_weak(&bundle, &eik, &a0, &Nonlinearity::Cubic, 2.0).unwrap();
        let eps = 0.05;
        let with = assemble_weak(&wkb2, &eik, eps, 0.5, true).unwrap();
        let without = assemble_weak(&wkb2, &eik, eps, 0.5, false).unwrap();
        let gsup = wkb2.g[10].max_abs();
        let d = with.values().iter().zip(without.values()).fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
        assert!(d <= gsup * eps * 1.0 + 1e-12);

        let zero = build_weak(&bundle, &eik, &Profile::Zero, &Nonlinearity::Cubic, 1.0).unwrap();
        assert_eq!(assemble_weak(&zero, &eik, 0.1, 0.5, true).unwrap().norms().linf, 0.0);

        assert!(build_weak(&bundle, &eik, &a0, &Nonlinearity::Cubic, 0.5).unwrap_err().is_validation());
    }

    #[test]
    fn eulerian_phase_matches_ray_quadrature() {
        let a0 = Profile::gaussian(1.0, 1.0);
        let (_, bundle, eik) = setup(Phase::QuadraticFocusing { t_focus: 1.0 }, 0.4, 40);
        let wkb = build_weak(&bundle, &eik, &a0, &Nonlinearity::Cubic, 1.0).unwrap();
        let (a_mol, phi_mol) = limit_phase_mol(&eik, &a0, &Nonlinearity::Cubic).unwrap();
        for m in 0..wkb.times.len() {
            let dg = wkb.g[m].values.iter().zip(&phi_mol[m].values).fold(0.0f64, |s, (a, b)| s.max((a - b).abs()));
            assert!(dg < 1e-6, "m = {m}: {dg}");
            let da = wkb.a[m].values().iter().zip(a_mol[m].values()).fold(0.0f64, |s, (a, b)| s.max((a - b).norm()));
            assert!(da < 1e-6, "m = {m}: {da}");
        }
    }

    #[test]
    fn transport_residuals_are_small() {
        let a0 = Profile::gaussian(1.0, 1.0);
        let (grid, bundle, eik) = setup(Phase::QuadraticFocusing { t_focus: 1.0 }, 0.4, 40);
        let wkb = build_weak(&bundle, &eik, &a0, &Nonlinearity::Cubic, 1.0).unwrap();
        let norm0 = WaveField::new(grid, a0.sample(&grid), None).unwrap().norms().l2;
        for (_, amp, modulus) in transport_residuals(&wkb, &eik).unwrap() {
            assert!(amp < 1e-5 * norm0);
            assert!(modulus < 1e-5);
        }
    }
}
