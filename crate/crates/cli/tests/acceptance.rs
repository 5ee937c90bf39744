//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line (run with `--nocapture` to see the lines for passing
//! criteria). Everything runs at the default desk scale of 2·10⁵ paths on
//! a 64-step unit-horizon grid with a fixed seed.

use std::process::Command;
use std::sync::Arc;

use pathfbsde_core::{
    check_assumptions, ito_decay_study, oracle_coupled_ou, oracle_path_integral, oracle_riccati,
    picard_solve, regularity_probe, stats, CoefficientSet, FDConfig, FnFunctional,
    FunctionalEstimator, GridPath, OracleProblem, RiccatiParams, Scheme, SolverConfig, Verdict,
};
use pathfbsde_core::functional_calculus::vertical_derivative;

const SEED: u64 = 42;
const N_PATHS: usize = 200_000;
const N_STEPS: usize = 64;
const HORIZON: f64 = 1.0;

fn default_cfg() -> SolverConfig {
    SolverConfig {
        n_steps: N_STEPS,
        n_paths: N_PATHS,
        seed: SEED,
        ..Default::default()
    }
}

fn dt() -> f64 {
    HORIZON / N_STEPS as f64
}

/// Flat zero driving-noise history up to time `t` (a single node at t = 0).
fn flat_gamma(t: f64) -> GridPath {
    GridPath::constant(dt(), t, &[0.0]).unwrap()
}

fn oracles() -> Vec<OracleProblem> {
    vec![
        oracle_coupled_ou(1.0, 1.0, HORIZON).unwrap(),
        oracle_riccati(RiccatiParams::default(), HORIZON).unwrap(),
        oracle_path_integral(HORIZON).unwrap(),
    ]
}

fn canonical_x(id: &str) -> Vec<f64> {
    match id {
        "path_integral" => vec![0.0],
        _ => vec![1.0],
    }
}

fn report(n: u32, name: &str, r: Result<(), String>) {
    match &r {
        Ok(()) => println!("criterion {n:2} ({name}): PASS"),
        Err(e) => println!("criterion {n:2} ({name}): FAIL — {e}"),
    }
    if let Err(e) = r {
        panic!("criterion {n} ({name}) failed: {e}");
    }
}

fn ensure(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

#[test]
fn criterion_01_coupled_oracle_value() {
    let run = || -> Result<(), String> {
        let p = oracle_coupled_ou(1.0, 1.0, HORIZON).unwrap();
        let gamma = flat_gamma(0.0);
        let est = FunctionalEstimator::new(p.coeffs.clone(), default_cfg())
            .map_err(|e| e.to_string())?;
        let (u, se) = est.evaluate_u(&gamma, &[1.0]).map_err(|e| e.to_string())?;
        ensure(
            (u[0] - 1.0).abs() <= 3.0 * se[0] + 0.01,
            format!("u {} vs 1.0 (se {})", u[0], se[0]),
        )?;
        let sol = picard_solve(&p.coeffs, &gamma, &[1.0], &default_cfg())
            .map_err(|e| e.to_string())?;
        for i in sol.t_idx..sol.n_nodes - 1 {
            let m = sol.z_mean(i)[0];
            ensure(
                (m - 0.5).abs() <= 0.05,
                format!("node {i} Z mean {m} vs 0.5"),
            )?;
        }
        Ok(())
    };
    report(1, "coupled oracle value", run());
}

#[test]
fn criterion_02_riccati_oracle() {
    let run = || -> Result<(), String> {
        let p = oracle_riccati(RiccatiParams::default(), HORIZON).unwrap();
        let gamma = flat_gamma(0.0);
        let phi0 = (p.exact.u)(&gamma, &[1.0])[0];
        let est = FunctionalEstimator::new(p.coeffs, default_cfg()).map_err(|e| e.to_string())?;
        let (u, _) = est.evaluate_u(&gamma, &[1.0]).map_err(|e| e.to_string())?;
        ensure(
            (u[0] - phi0).abs() / phi0.abs() <= 0.02,
            format!("u {} vs φ(0) {}", u[0], phi0),
        )
    };
    report(2, "Riccati oracle", run());
}

#[test]
fn criterion_03_path_dependent_oracle() {
    let run = || -> Result<(), String> {
        let p = oracle_path_integral(HORIZON).unwrap();
        let est = FunctionalEstimator::new(p.coeffs, default_cfg()).map_err(|e| e.to_string())?;
        let gamma0 = flat_gamma(0.0);
        let exact0 = (p.exact.u)(&gamma0, &[0.0])[0];
        let (u, se) = est.evaluate_u(&gamma0, &[0.0]).map_err(|e| e.to_string())?;
        ensure(
            (u[0] - exact0).abs() <= 3.0 * se[0] + 0.01,
            format!("u {} vs {} (se {})", u[0], exact0, se[0]),
        )?;
        for &t in &[0.25, 0.5, 0.75] {
            let gamma = flat_gamma(t);
            let fd = FDConfig::default_for(&gamma);
            let dz =
                vertical_derivative(&est, &gamma, &[0.0], &fd).map_err(|e| e.to_string())?;
            ensure(
                (dz[0] - (HORIZON - t)).abs() <= 0.02,
                format!("D_z u {} vs {} at t={t}", dz[0], HORIZON - t),
            )?;
        }
        Ok(())
    };
    report(3, "path-dependent oracle", run());
}

#[test]
fn criterion_04_z_representation() {
    let run = || -> Result<(), String> {
        for p in oracles() {
            let x = canonical_x(p.id);
            let est =
                FunctionalEstimator::new(p.coeffs, default_cfg()).map_err(|e| e.to_string())?;
            let rep = est
                .z_representation_check(&flat_gamma(0.25), &x)
                .map_err(|e| e.to_string())?;
            ensure(
                rep.discrepancy <= 0.05,
                format!("{}: discrepancy {}", p.id, rep.discrepancy),
            )?;
        }
        Ok(())
    };
    report(4, "Z-representation", run());
}

#[test]
fn criterion_05_flow_property() {
    let run = || -> Result<(), String> {
        let p = oracle_coupled_ou(1.0, 1.0, HORIZON).unwrap();
        let est = FunctionalEstimator::new(p.coeffs, default_cfg()).map_err(|e| e.to_string())?;
        let rep = est
            .flow_property_check(&flat_gamma(0.0), &[1.0], 8, 16, N_PATHS / 8)
            .map_err(|e| e.to_string())?;
        ensure(
            matches!(rep.verdict, Verdict::Pass),
            format!(
                "max deviation {} budget {}",
                rep.max_deviation, rep.budget
            ),
        )
    };
    report(5, "flow property", run());
}

#[test]
fn criterion_06_ppde_residual() {
    let run = || -> Result<(), String> {
        for p in oracles() {
            let x = canonical_x(p.id);
            let gamma = flat_gamma(0.25);
            let fd = FDConfig::default_for(&gamma);
            let est =
                FunctionalEstimator::new(p.coeffs, default_cfg()).map_err(|e| e.to_string())?;
            let rep = est
                .ppde_residual(&gamma, &x, &fd)
                .map_err(|e| e.to_string())?;
            ensure(
                rep.residual <= rep.budget,
                format!("{}: residual {} budget {}", p.id, rep.residual, rep.budget),
            )?;
            ensure(
                rep.budget <= 0.1,
                format!("{}: budget {} above 0.1", p.id, rep.budget),
            )?;
        }
        Ok(())
    };
    report(6, "PPDE residual", run());
}

#[test]
fn criterion_07_regularity() {
    let run = || -> Result<(), String> {
        let h = dt();
        let bumps: Vec<(f64, f64)> = [0.01, 0.02, 0.04].iter().map(|&b| (b, 0.0)).collect();
        let shifts: Vec<(f64, f64)> = [1.0, 2.0, 4.0].iter().map(|&k| (0.0, k * h)).collect();
        for p in oracles() {
            let x = canonical_x(p.id);
            let gamma = flat_gamma(0.25);
            for (family, perts) in [("bumps", &bumps), ("shifts", &shifts)] {
                let table = regularity_probe(&p.coeffs, &gamma, &x, perts, &default_cfg())
                    .map_err(|e| e.to_string())?;
                let (sx, sy, sz) = table.ratio_spreads();
                ensure(
                    sx <= 4.0 && sy <= 4.0 && sz <= 4.0,
                    format!("{} {family}: spreads ({sx}, {sy}, {sz})", p.id),
                )?;
            }
        }
        Ok(())
    };
    report(7, "regularity ratios", run());
}

#[test]
fn criterion_08_monotonicity_checker() {
    let run = || -> Result<(), String> {
        for p in oracles() {
            let rep = check_assumptions(&p.coeffs, SEED, 10_000).map_err(|e| e.to_string())?;
            ensure(
                !matches!(rep.verdict, Verdict::Fail) && rep.c2_hat >= 0.0,
                format!("{}: c2_hat {} verdict {:?}", p.id, rep.c2_hat, rep.verdict),
            )?;
        }
        // Flipping the drift to b = +y breaks the one-sided inequality.
        let good = oracle_coupled_ou(1.0, 1.0, HORIZON).unwrap().coeffs;
        let flipped = CoefficientSet {
            b: Arc::new(|_p, _x, y, _z, out: &mut [f64]| out[0] = y[0]),
            ..good
        };
        let rep = check_assumptions(&flipped, SEED, 10_000).map_err(|e| e.to_string())?;
        ensure(
            matches!(rep.verdict, Verdict::Fail),
            format!("flipped instance not rejected: c2_hat {}", rep.c2_hat),
        )
    };
    report(8, "monotonicity checker", run());
}

#[test]
fn criterion_09_picard_convergence() {
    let run = || -> Result<(), String> {
        for p in oracles() {
            let x = canonical_x(p.id);
            let sol = picard_solve(&p.coeffs, &flat_gamma(0.0), &x, &default_cfg())
                .map_err(|e| format!("{}: {e}", p.id))?;
            let h = &sol.picard_history;
            let ratio = if h.len() >= 2 {
                h[h.len() - 1] / h[h.len() - 2]
            } else {
                0.0
            };
            ensure(
                ratio < 0.9 && sol.picard_iters <= 25,
                format!(
                    "{}: contraction {} after {} iterations",
                    p.id, ratio, sol.picard_iters
                ),
            )?;
        }
        Ok(())
    };
    report(9, "Picard convergence", run());
}

#[test]
fn criterion_10_functional_ito_formula() {
    let run = || -> Result<(), String> {
        let rep = ito_decay_study(SEED, &[4, 5, 6, 7, 8], 64).map_err(|e| e.to_string())?;
        ensure(
            rep.slope >= 0.4,
            format!("decay slope {} below 0.4", rep.slope),
        )
    };
    report(10, "functional Itô formula", run());
}

#[test]
fn criterion_11_determinism() {
    let run = || -> Result<(), String> {
        let bin = env!("CARGO_BIN_EXE_pathfbsde");
        let root = std::env::temp_dir().join(format!("acceptance_det_{}", std::process::id()));
        std::fs::create_dir_all(&root).map_err(|e| e.to_string())?;
        let config = serde_json::json!({
            "problem": {"id": "coupled_ou", "t": 0.25, "x": [1.0]},
            "solver": {"n_steps": 16, "n_paths": 4000, "seed": SEED},
        });
        let cfg_path = root.join("config.json");
        std::fs::write(&cfg_path, serde_json::to_vec_pretty(&config).unwrap())
            .map_err(|e| e.to_string())?;

        let mut payloads = Vec::new();
        for (label, threads) in [("a", "1"), ("b", "4")] {
            let out = root.join(label);
            let status = Command::new(bin)
                .arg("run")
                .arg(&cfg_path)
                .arg("--out")
                .arg(&out)
                .arg("--quiet")
                .env("PATHFBSDE_THREADS", threads)
                .status()
                .map_err(|e| e.to_string())?;
            ensure(
                status.code() == Some(0),
                format!("run {label} exited with {:?}", status.code()),
            )?;
            let raw = std::fs::read_to_string(out.join("record.json")).map_err(|e| e.to_string())?;
            let mut v: serde_json::Value = serde_json::from_str(&raw).map_err(|e| e.to_string())?;
            // Wall-clock duration is the one legitimately non-deterministic field.
            v.as_object_mut().unwrap().remove("duration_seconds");
            payloads.push(serde_json::to_string(&v).unwrap());
        }
        ensure(
            payloads[0] == payloads[1],
            "records differ across thread settings".to_string(),
        )
    };
    report(11, "determinism", run());
}

#[test]
fn criterion_12_fd_calculus() {
    let run = || -> Result<(), String> {
        let path = GridPath::new(0.125, 1, vec![0.0, 0.3, -0.2, 0.5]).unwrap();
        let quad = FnFunctional {
            f: |p: &GridPath, _x: &[f64]| {
                let w = p.last()[0];
                vec![1.0 + 2.0 * w + 3.0 * w * w]
            },
            m: 1,
            name: "quadratic".to_string(),
        };
        let exact = 2.0 + 6.0 * path.last()[0];
        for &h in &[0.5, 0.1, 1e-3] {
            let cfg = FDConfig {
                h_vert: h,
                h_vert2: h,
                h_time: 0.125,
                scheme: Scheme::Central,
            };
            let d = vertical_derivative(&quad, &path, &[], &cfg).map_err(|e| e.to_string())?;
            ensure(
                (d[0] - exact).abs() < 1e-10,
                format!("quadratic derivative error {:e} at h={h}", (d[0] - exact).abs()),
            )?;
        }

        let smooth = FnFunctional {
            f: |p: &GridPath, _x: &[f64]| vec![p.last()[0].sin()],
            m: 1,
            name: "sine".to_string(),
        };
        let truth = path.last()[0].cos();
        let hs = [0.4, 0.2, 0.1, 0.05];
        let errs: Vec<f64> = hs
            .iter()
            .map(|&h| {
                let cfg = FDConfig {
                    h_vert: h,
                    h_vert2: h,
                    h_time: 0.125,
                    scheme: Scheme::Central,
                };
                let d = vertical_derivative(&smooth, &path, &[], &cfg).unwrap();
                (d[0] - truth).abs()
            })
            .collect();
        let slope = stats::fit_loglog_slope(&hs, &errs);
        ensure(
            (1.8..=2.2).contains(&slope),
            format!("convergence slope {slope} outside [1.8, 2.2]"),
        )
    };
    report(12, "finite-difference calculus", run());
}
