use std::path::Path;
use std::process::Command;

use wkb_lab::grenier::{assemble_super, solve_corrector, solve_grenier, GrenierOptions};
use wkb_lab::model::{Nonlinearity, Profile};
use wkb_lab::rays::{build_eikonal, label_grid_for, trace_rays, uniform_times, Phase, Potential};
use wkb_lab::scenario::{parse_config, run_sweep, CLAIM_SUPER_CORRECTED, CLAIM_SUPER_UNCORRECTED};
use wkb_lab::Grid;

const SMALL_WEAK: &str = r#"{
  "name": "small-weak",
  "grid": {"points": 256},
  "nonlinearity": {"law": "cubic", "kappa": 1},
  "epsilons": [0.2, 0.1, 0.05, 0.025],
  "t_final": 0.2,
  "snapshot_count": 10,
  "ray_substeps": 4,
  "regime": "weak"
}"#;

fn wkblab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_wkblab")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL_WEAK);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = wkblab(&["run", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(o.stdout.is_empty());
    }
    let ra = std::fs::read(a.join("report.json")).unwrap();
    let rb = std::fs::read(b.join("report.json")).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(
        std::fs::read(a.join("tables.csv")).unwrap(),
        std::fs::read(b.join("tables.csv")).unwrap()
    );
}

#[test]
fn tables_have_one_row_per_epsilon_per_claim() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL_WEAK);
    let out = dir.path().join("out");
    let o = wkblab(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("rate weak-final"));

    let mut rdr = csv::Reader::from_path(out.join("tables.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["claim", "epsilon", "t", "error"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let mut claims: Vec<String> = rows.iter().map(|r| r[0].to_string()).collect();
    claims.dedup();
    assert_eq!(claims, vec!["weak-final", "weak-no-shift-final"]);
    for c in &claims {
        assert_eq!(rows.iter().filter(|r| &r[0] == c.as_str()).count(), 4);
    }
    for eps in ["0.2", "0.1", "0.05", "0.025"] {
        assert!(out.join(format!("ledger-eps{eps}.csv")).exists());
    }

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["members"].as_array().unwrap().len(), 4);
    assert!(report["rates"][0]["fit"]["slope"].as_f64().unwrap() > 0.8);
}

#[test]
fn epsilon_override_and_snapshot_dump() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_WEAK.replace("\"regime\"", "\"dump_snapshots\": true, \"regime\"");
    let cfg = write(dir.path(), "small.json", &text);
    let out = dir.path().join("out");
    let o = wkblab(&["run", &cfg, "--out", out.to_str().unwrap(), "--epsilon-override", "0.1,0.05", "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let eps: Vec<f64> = report["members"].as_array().unwrap().iter().map(|m| m["epsilon"].as_f64().unwrap()).collect();
    assert_eq!(eps, vec![0.1, 0.05]);
    // two values are too few for a rate fit
    assert_eq!(report["rates"], serde_json::json!([]));
    let mut rdr = csv::Reader::from_path(out.join("snapshots").join("eps0.1.csv")).unwrap();
    assert_eq!(rdr.records().count(), 11 * 256);
}

#[test]
fn reference_only_reports_ledgers_only() {
    let report = run_sweep(&parse_config(r#"{"preset": "reference-linear", "grid": {"points": 256}, "t_final": 0.1, "snapshot_count": 5}"#).unwrap()).unwrap();
    assert!(report.claims.is_empty() && report.rates.is_empty());
    assert!(report.euler.is_none() && report.small_time.is_none() && report.phase_shift_check.is_none());
    let m = &report.members[0];
    assert!(m.errors.is_empty());
    assert_eq!(m.conservation.len(), 4);
    assert!(m.conservation.iter().all(|l| l.max_drift < 1e-9));
}

#[test]
fn super_sweep_without_a1_reports_both_variants() {
    let report = run_sweep(
        &parse_config(
            r#"{"preset": "supercritical-free", "grid": {"points": 256}, "a1": {"kind": "zero"},
                "t_final": 0.1, "snapshot_count": 10, "small_time": null, "euler_check": false,
                "grenier_oracle": false, "epsilons": [0.1, 0.05, 0.025]}"#,
        )
        .unwrap(),
    )
    .unwrap();
    assert_eq!(report.claim_values(CLAIM_SUPER_CORRECTED).len(), 3);
    assert_eq!(report.claim_values(CLAIM_SUPER_UNCORRECTED).len(), 3);

    // |e^{iφ⁽¹⁾}| = 1, so the two approximants share their modulus
    let grid = Grid::new(1, 256, 12.0).unwrap();
    let times = uniform_times(0.1, 10);
    let bundle = trace_rays(&Potential::Zero, &Phase::Zero, label_grid_for(&grid, 1.5).unwrap(), &times).unwrap();
    let eik = build_eikonal(&bundle, grid).unwrap();
    let a0 = Profile::gaussian(1.0, 1.0);
    let opts = GrenierOptions {
        store_dense: true,
        ..GrenierOptions::default()
    };
    let limit = solve_grenier(&eik, &a0.sample(&grid), &Nonlinearity::Cubic, 0.0, &times, &opts).unwrap();
    let corr = solve_corrector(&limit, &eik, &Profile::Zero, &Nonlinearity::Cubic, 1.0).unwrap();
    for &t in &times {
        let with = assemble_super(&limit, Some(&corr), &eik, 0.05, t).unwrap();
        let without = assemble_super(&limit, None, &eik, 0.05, t).unwrap();
        for (p, q) in with.values().iter().zip(without.values()) {
            assert!((p.norm() - q.norm()).abs() < 1e-14);
        }
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", &SMALL_WEAK.replace("\"kappa\": 1", "\"kappa\": 0.3"));
    let o = wkblab(&["check", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("kappa > 1/2"));

    let unknown = write(dir.path(), "unknown.json", &SMALL_WEAK.replace("\"regime\"", "\"regiem\": 1, \"regime\""));
    let o = wkblab(&["run", &unknown, "--out", dir.path().join("u").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("regiem"));

    let good = write(dir.path(), "good.json", SMALL_WEAK);
    assert_eq!(wkblab(&["check", &good]).status.code(), Some(0));
    assert_eq!(wkblab(&["check", "critical-free"]).status.code(), Some(0));

    // the focusing preset run past its caustic is a solver failure
    let past = write(dir.path(), "past.json", r#"{"preset": "caustic-delta0", "grid": {"points": 256}, "epsilons": [0.2], "t_final": 0.95, "snapshot_count": 5}"#);
    let o = wkblab(&["run", &past, "--out", dir.path().join("p").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("caustic"));

    let o = wkblab(&["presets"]);
    assert!(o.status.success());
    let listing = String::from_utf8_lossy(&o.stdout);
    for name in ["caustic-delta0", "harmonic-trap", "supercritical-free", "reference-linear"] {
        assert!(listing.contains(name));
    }
    let o = wkblab(&["presets", "harmonic-trap"]);
    let shown: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(shown["potential"]["kind"], "harmonic");
}
