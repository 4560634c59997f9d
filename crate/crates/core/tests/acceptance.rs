//! Acceptance criteria. Every test writes one `PASS`/`FAIL` line to stderr
//! (bypassing output capture) and then asserts.

use std::io::Write;
use std::sync::OnceLock;

use num_complex::Complex64;
use wkb_lab::diagnostics::{conservation_ledger, Conserved};
use wkb_lab::grid::{Grid, WaveField};
use wkb_lab::model::{Nonlinearity, NonlinearitySpec, Profile};
use wkb_lab::nls::{initial_data, solve, NlsModel, SolveOptions};
use wkb_lab::rays::{build_eikonal_at, caustic_horizon, trace_rays, uniform_times, Phase, Potential};
use wkb_lab::scenario::{
    preset, run_sweep, SweepReport, CLAIM_GRENIER_ORACLE, CLAIM_SUPER_CORRECTED, CLAIM_WEAK, CLAIM_WEAK_NO_SHIFT,
};

fn verdict(n: usize, title: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {n:>2} {title}: {detail}");
    assert!(pass, "criterion {n} ({title}) failed: {detail}");
}

fn sweep(name: &'static str, cell: &'static OnceLock<SweepReport>) -> &'static SweepReport {
    cell.get_or_init(|| run_sweep(&preset(name).unwrap()).unwrap())
}

static CRITICAL: OnceLock<SweepReport> = OnceLock::new();
static SUPER: OnceLock<SweepReport> = OnceLock::new();

fn critical() -> &'static SweepReport {
    sweep("critical-free", &CRITICAL)
}

fn supercritical() -> &'static SweepReport {
    sweep("supercritical-free", &SUPER)
}

/// Independent least-squares slope and r² of `(ln x, ln y)`.
fn log_fit(pairs: &[(f64, f64)]) -> (f64, f64) {
    let n = pairs.len() as f64;
    let lx: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    (sxy / sxx, sxy * sxy / (sxx * syy))
}

fn claim_pairs(report: &SweepReport, claim: &str) -> Vec<(f64, f64)> {
    report.claim_values(claim).iter().map(|c| (c.epsilon, c.error)).collect()
}

/// Recomputes the rate of `claim` and checks it against the report's own fit.
fn rate(report: &SweepReport, claim: &str, epsilons: &[f64]) -> (f64, f64) {
    let pairs = claim_pairs(report, claim);
    let eps: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    assert_eq!(eps, epsilons, "{claim}: unexpected epsilon list");
    let (slope, r2) = log_fit(&pairs);
    let fit = report.rate(claim).expect("rate present");
    assert!((fit.slope - slope).abs() < 1e-9 && (fit.r2 - r2).abs() < 1e-9);
    (slope, r2)
}

fn max_on_central_half(grid: &Grid, values: &[f64], oracle: impl Fn(f64) -> f64) -> f64 {
    let half = grid.half_width() / 2.0;
    (0..grid.len())
        .map(|i| grid.coordinate(i))
        .zip(values)
        .filter(|(x, _)| x.abs() <= half)
        .map(|(x, v)| (v - oracle(x)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_01_eikonal_fixtures() {
    let grid = Grid::new(1, 1024, 12.0).unwrap();
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();

    // focusing phase, T = 1
    let cfg = preset("caustic-delta0").unwrap();
    let t_focus = 1.0;
    let times = uniform_times(1.0, 200);
    let labels = Grid::new(1, 1024, 24.0).unwrap();
    let bundle = trace_rays(&cfg.potential.build(), &cfg.phase.build(), labels, &times).unwrap();
    let horizon = caustic_horizon(&bundle, wkb_lab::rays::DEFAULT_C0);
    let idx: Vec<usize> = (0..times.len()).filter(|&m| times[m] <= 0.5 * horizon).collect();
    let eik = build_eikonal_at(&bundle, grid, &idx, wkb_lab::rays::DEFAULT_C0).unwrap();
    let mut e1: f64 = 0.0;
    for (k, &t) in eik.times.iter().enumerate() {
        e1 = e1.max(max_on_central_half(&grid, eik.phi[k].values(), |x| {
            x * x / (2.0 * (t - t_focus)) - 1.0 / (2.0 * t_focus)
        }));
    }
    worst = worst.max(e1);
    detail.push(format!("focusing {e1:.2e} up to t = {:.3} (horizon {horizon:.3})", eik.times[eik.times.len() - 1]));

    // harmonic trap, omega = 1
    let cfg = preset("harmonic-trap").unwrap();
    let omega = 1.0;
    let times = uniform_times(2.0, 400);
    let labels = Grid::new(1, 1024, 18.0).unwrap();
    let bundle = trace_rays(&cfg.potential.build(), &cfg.phase.build(), labels, &times).unwrap();
    let horizon = caustic_horizon(&bundle, wkb_lab::rays::DEFAULT_C0);
    let idx: Vec<usize> = (0..times.len()).filter(|&m| times[m] <= 0.5 * horizon).collect();
    let eik = build_eikonal_at(&bundle, grid, &idx, wkb_lab::rays::DEFAULT_C0).unwrap();
    let mut e2: f64 = 0.0;
    for (k, &t) in eik.times.iter().enumerate() {
        e2 = e2.max(max_on_central_half(&grid, eik.phi[k].values(), |x| {
            -0.5 * omega * x * x * (omega * t).tan()
        }));
    }
    worst = worst.max(e2);
    detail.push(format!("harmonic {e2:.2e} up to t = {:.3} (horizon {horizon:.3})", eik.times[eik.times.len() - 1]));

    verdict(1, "eikonal fixtures, max error < 1e-6", worst < 1e-6, detail.join("; "));
}

#[test]
fn criterion_02_caustic_detection() {
    let t_focus = 1.0;
    let steps = 400;
    let times = uniform_times(1.5, steps);
    let dt = times[1];
    // a floor below one step's worth of Jacobian decay pins the crossing to the step containing it
    let c0 = 0.5 * dt / t_focus;

    let cfg = preset("caustic-delta0").unwrap();
    let labels = Grid::new(1, 256, 3.0).unwrap();
    let bundle = trace_rays(&Potential::Zero, &cfg.phase.build(), labels, &times).unwrap();
    let h0 = caustic_horizon(&bundle, c0);
    let ok0 = (h0 - t_focus).abs() <= dt;

    let delta = 0.5;
    let phase = Phase::power_focusing(t_focus, delta);
    let bundle = trace_rays(&Potential::Zero, &phase, labels, &times).unwrap();
    let h1 = caustic_horizon(&bundle, c0);
    let rings: Vec<f64> = (0..labels.len()).map(|i| labels.coordinate(i).abs()).collect();
    let focus_bound = rings
        .iter()
        .map(|r| t_focus / (r * r + 1.0).powf(delta))
        .fold(f64::INFINITY, f64::min);
    // first zero of J = 1 - t ∂_y[(y² + 1)^δ y] / T over the sampled labels
    let first_caustic = rings
        .iter()
        .map(|&r| {
            let s = (r * r + 1.0).powf(delta) + 2.0 * delta * r * r * (r * r + 1.0).powf(delta - 1.0);
            t_focus / s
        })
        .fold(f64::INFINITY, f64::min);
    let ok1 = h1 <= focus_bound + dt && (h1 - first_caustic).abs() <= dt;

    verdict(
        2,
        "caustic detection within one stored step",
        ok0 && ok1,
        format!(
            "delta = 0: horizon {h0:.4} vs T = {t_focus} (step {dt:.4}); delta = {delta}: horizon {h1:.4}, \
             ring bound {focus_bound:.4}, first caustic {first_caustic:.4}"
        ),
    );
}

#[test]
fn criterion_03_linear_oracle() {
    let cfg = preset("reference-linear").unwrap();
    let grid = cfg.grid().unwrap();
    let eps = 0.1;
    let t = 0.5;
    let model = NlsModel {
        potential: Potential::Zero,
        nonlinearity: NonlinearitySpec::linear(),
    };
    let u0 = initial_data(&grid, &Profile::gaussian(1.0, 1.0), &[], &Phase::Zero, eps).unwrap();
    let run = solve(&model, &u0, &[0.0, t], SolveOptions::default()).unwrap();
    // exact free evolution of exp(-x²/2): variance 1 + iεt
    let s = Complex64::new(1.0, eps * t);
    let exact = WaveField::from_fn(grid, Some(eps), |x| (-(x[0] * x[0]) / (2.0 * s)).exp() / s.sqrt()).unwrap();
    let err = wkb_lab::diagnostics::field_error(t, &run.fields[1], &exact).unwrap().l2;
    verdict(3, "linear oracle, L2 error < 1e-8", err < 1e-8, format!("L2 error {err:.3e} at t = {t}, eps = {eps}"));
}

#[test]
fn criterion_04_conservation() {
    let mut worst_mass: f64 = 0.0;
    let mut worst_energy: f64 = 0.0;
    let mut worst_pc1: f64 = 0.0;
    for r in [critical(), supercritical()] {
        for m in &r.members {
            worst_mass = worst_mass.max(m.mass_drift);
            for l in &m.conservation {
                match l.quantity {
                    Conserved::Energy if r.kappa == Some(0.0) => worst_energy = worst_energy.max(l.max_drift),
                    Conserved::PseudoConformal => worst_pc1 = worst_pc1.max(l.max_drift),
                    _ => {}
                }
            }
        }
    }

    // n = 2: the law degenerates to exact conservation
    let grid = Grid::new(2, 128, 8.0).unwrap();
    let model = NlsModel {
        potential: Potential::Zero,
        nonlinearity: NonlinearitySpec::new(Nonlinearity::Cubic, 0.0).unwrap(),
    };
    let u0 = initial_data(&grid, &Profile::gaussian(1.0, 1.0), &[], &Phase::Zero, 0.2).unwrap();
    let run = solve(&model, &u0, &uniform_times(0.2, 20), SolveOptions::default()).unwrap();
    worst_mass = worst_mass.max(run.mass_drift());
    let pc2 = conservation_ledger(&run, Conserved::PseudoConformal).unwrap();
    let rhs_zero = pc2.points.iter().all(|p| p.rate == Some(0.0));
    let worst_pc = worst_pc1.max(pc2.max_drift);

    verdict(
        4,
        "conservation (mass < 1e-11, energy < 1e-6, pseudo-conformal < 1e-5)",
        worst_mass < 1e-11 && worst_energy < 1e-6 && worst_pc < 1e-5 && rhs_zero,
        format!(
            "mass {worst_mass:.2e}, cubic kappa = 0 energy {worst_energy:.2e}, pseudo-conformal n = 1 {worst_pc1:.2e}, n = 2 {:.2e}",
            pc2.max_drift
        ),
    );
}

#[test]
fn criterion_05_critical_rate() {
    let (slope, r2) = rate(critical(), CLAIM_WEAK, &[0.2, 0.1, 0.05, 0.025]);
    verdict(
        5,
        "critical kappa = 1 rate, slope >= 0.8 and r2 >= 0.98",
        slope >= 0.8 && r2 >= 0.98,
        format!("slope {slope:.4}, r2 {r2:.5}, errors {:?}", claim_pairs(critical(), CLAIM_WEAK)),
    );
}

#[test]
fn criterion_06_subcritical_rate() {
    let report = run_sweep(&preset("subcritical-free").unwrap()).unwrap();
    assert_eq!(report.kappa, Some(2.0));
    let (slope, r2) = rate(&report, CLAIM_WEAK_NO_SHIFT, &[0.2, 0.1, 0.05, 0.025]);
    verdict(
        6,
        "subcritical kappa = 2 without G, slope >= 0.8",
        slope >= 0.8,
        format!("slope {slope:.4}, r2 {r2:.5}"),
    );
}

#[test]
fn criterion_07_intermediate_rate() {
    let report = run_sweep(&preset("intermediate-free").unwrap()).unwrap();
    assert_eq!(report.kappa, Some(0.75));
    let (slope, r2) = rate(&report, CLAIM_WEAK, &[0.2, 0.1, 0.05, 0.025]);
    verdict(
        7,
        "intermediate kappa = 0.75, slope >= 0.55 and r2 >= 0.95",
        slope >= 0.55 && r2 >= 0.95,
        format!("slope {slope:.4}, r2 {r2:.5}"),
    );
}

#[test]
fn criterion_08_small_time_law() {
    let st = supercritical().small_time.as_ref().expect("small-time study");
    assert_eq!(st.epsilon, 0.01);
    let pairs: Vec<(f64, f64)> = st.records.iter().map(|r| (r.t, r.l2)).collect();
    assert_eq!(pairs.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0.02, 0.04, 0.08]);
    // independent affine least squares
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let b = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pairs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let a = my - b * mx;
    let resid = pairs.iter().map(|p| (p.1 - a - b * p.0).abs() / p.1).fold(0.0, f64::max);
    assert!((resid - st.fit.max_relative_residual).abs() < 1e-9);
    verdict(
        8,
        "supercritical small-time affine growth, residual < 10%",
        resid < 0.1 && b > 0.0,
        format!("errors {pairs:?}, slope {b:.4}, max relative residual {resid:.3e}"),
    );
}

#[test]
fn criterion_09_uniform_corrected_rate() {
    let (slope, r2) = rate(supercritical(), CLAIM_SUPER_CORRECTED, &[0.1, 0.05, 0.025]);
    verdict(
        9,
        "supercritical corrected sup error, slope >= 0.7",
        slope >= 0.7,
        format!("slope {slope:.4}, r2 {r2:.5}, errors {:?}", claim_pairs(supercritical(), CLAIM_SUPER_CORRECTED)),
    );
}

#[test]
fn criterion_10_grenier_oracle() {
    let c = supercritical()
        .claim_values(CLAIM_GRENIER_ORACLE)
        .into_iter()
        .find(|c| c.epsilon == 0.05)
        .expect("oracle at eps = 0.05");
    verdict(
        10,
        "Grenier reconstruction vs reference at eps = 0.05, L2 < 1e-3",
        c.error < 1e-3,
        format!("sup over snapshots {:.3e} (at t = {})", c.error, c.t),
    );
}

#[test]
fn criterion_11_euler_consistency() {
    let e = supercritical().euler.as_ref().expect("Euler check");
    let small = e.base_max.iter().all(|&r| r < 1e-3);
    let shrink = e.ratio.iter().all(|&r| r >= 4.0);
    verdict(
        11,
        "Euler residuals < 1e-3 and shrink >= 4x under halving",
        small && shrink,
        format!(
            "base (mass, momentum) = ({:.3e}, {:.3e}) [{}], halved ({:.3e}, {:.3e}), ratios ({:.4}, {:.4}) [{}]",
            e.base_max[0],
            e.base_max[1],
            if small { "ok" } else { "too large" },
            e.halved_max[0],
            e.halved_max[1],
            e.ratio[0],
            e.ratio[1],
            if shrink { "ok" } else { "below 4" }
        ),
    );
}

#[test]
fn criterion_12_phase_shift_cross_check() {
    let report = critical();
    let check = report.phase_shift_check.expect("weak regime reports the cross-check");
    verdict(
        12,
        "Eulerian phase shift vs G, max-norm < 1e-4",
        check < 1e-4,
        format!("max |phi~ - G| = {check:.3e}"),
    );
}
