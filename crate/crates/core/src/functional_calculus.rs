//! Finite-difference realization of the Dupire derivatives: vertical (bump
//! the path endpoint), second vertical, horizontal (flat time extension),
//! plus a functional Itô-formula residual accumulator.

use crate::error::{Error, Result};
use crate::path_space::GridPath;
use serde::{Deserialize, Serialize};

/// A deterministic path functional (γ_t, x) ↦ R^m.
///
/// Implementations must be pure: equal inputs give bitwise-equal outputs.
pub trait PathFunctional: Sync {
    fn eval(&self, path: &GridPath, x: &[f64]) -> Result<Vec<f64>>;
    /// Output dimension m.
    fn output_dim(&self) -> usize;
    fn label(&self) -> &str {
        "functional"
    }
}

/// Wrap a closure as a functional.
pub struct FnFunctional<F> {
    pub f: F,
    pub m: usize,
    pub name: String,
}

impl<F> PathFunctional for FnFunctional<F>
where
    F: Fn(&GridPath, &[f64]) -> Vec<f64> + Sync,
{
    fn eval(&self, path: &GridPath, x: &[f64]) -> Result<Vec<f64>> {
        Ok((self.f)(path, x))
    }

    fn output_dim(&self) -> usize {
        self.m
    }

    fn label(&self) -> &str {
        &self.name
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Central,
    Forward,
}

/// Step sizes for the finite-difference derivatives.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FDConfig {
    /// Vertical bump size, in state units.
    pub h_vert: f64,
    /// Bump size for second vertical differences. Second-order stencils
    /// amplify any evaluation noise by 1/h^2, so this wants to be far
    /// larger than `h_vert` when the functional is Monte Carlo valued.
    #[serde(default = "default_h_vert2")]
    pub h_vert2: f64,
    /// Horizontal step, a multiple of the grid step.
    pub h_time: f64,
    pub scheme: Scheme,
}

fn default_h_vert2() -> f64 {
    0.05
}

impl FDConfig {
    /// Default bump: relative in the path endpoint, one grid step in time.
    pub fn default_for(path: &GridPath) -> Self {
        let last = path.last().iter().map(|v| v * v).sum::<f64>().sqrt();
        FDConfig {
            h_vert: 1e-3 * last.max(1.0),
            h_vert2: 0.05 * last.max(1.0),
            h_time: path.dt(),
            scheme: Scheme::Central,
        }
    }
}

fn checked_eval(
    u: &dyn PathFunctional,
    path: &GridPath,
    x: &[f64],
    what: &str,
) -> Result<Vec<f64>> {
    let v = u.eval(path, x)?;
    if v.len() != u.output_dim() {
        return Err(Error::Evaluation(format!(
            "{} returned {} values, expected {}",
            u.label(),
            v.len(),
            u.output_dim()
        )));
    }
    if v.iter().any(|t| !t.is_finite()) {
        return Err(Error::Evaluation(format!(
            "{} is non-finite at {what}",
            u.label()
        )));
    }
    Ok(v)
}

fn unit_bump(d: usize, i: usize, h: f64) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[i] = h;
    e
}

/// D_z u: sensitivity of the functional to a bump of the path endpoint.
/// Returns an m×d matrix, row-major. The forward scheme realizes the
/// one-sided difference quotients Δ_h^i.
pub fn vertical_derivative(
    u: &dyn PathFunctional,
    path: &GridPath,
    x: &[f64],
    cfg: &FDConfig,
) -> Result<Vec<f64>> {
    let d = path.dim();
    let m = u.output_dim();
    let h = cfg.h_vert;
    let mut out = vec![0.0; m * d];
    let base = match cfg.scheme {
        Scheme::Central => None,
        Scheme::Forward => Some(checked_eval(u, path, x, "base point")?),
    };
    for i in 0..d {
        let up = checked_eval(
            u,
            &path.vertical_bump(&unit_bump(d, i, h))?,
            x,
            &format!("vertical bump +{h}·e_{i}"),
        )?;
        let col: Vec<f64> = match &base {
            None => {
                let dn = checked_eval(
                    u,
                    &path.vertical_bump(&unit_bump(d, i, -h))?,
                    x,
                    &format!("vertical bump -{h}·e_{i}"),
                )?;
                up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            }
            Some(b0) => up.iter().zip(b0).map(|(a, b)| (a - b) / h).collect(),
        };
        for (r, v) in col.iter().enumerate() {
            out[r * d + i] = *v;
        }
    }
    Ok(out)
}

/// D_zz u via the standard second-order stencils, symmetrized in the two
/// path indices. Returns an m×d×d tensor, row-major.
pub fn second_vertical_derivative(
    u: &dyn PathFunctional,
    path: &GridPath,
    x: &[f64],
    cfg: &FDConfig,
) -> Result<Vec<f64>> {
    let d = path.dim();
    let m = u.output_dim();
    let mut raw = second_vertical_derivative_raw(u, path, x, cfg)?;
    for r in 0..m {
        for i in 0..d {
            for j in (i + 1)..d {
                let a = raw[r * d * d + i * d + j];
                let b = raw[r * d * d + j * d + i];
                let s = 0.5 * (a + b);
                raw[r * d * d + i * d + j] = s;
                raw[r * d * d + j * d + i] = s;
            }
        }
    }
    Ok(raw)
}

/// The unsymmetrized stencil, exposed so tests can bound the raw asymmetry.
pub fn second_vertical_derivative_raw(
    u: &dyn PathFunctional,
    path: &GridPath,
    x: &[f64],
    cfg: &FDConfig,
) -> Result<Vec<f64>> {
    let d = path.dim();
    let m = u.output_dim();
    let h = cfg.h_vert2;
    let mut out = vec![0.0; m * d * d];
    let center = checked_eval(u, path, x, "base point")?;
    for i in 0..d {
        let up = checked_eval(u, &path.vertical_bump(&unit_bump(d, i, h))?, x, "diag +h")?;
        let dn = checked_eval(u, &path.vertical_bump(&unit_bump(d, i, -h))?, x, "diag -h")?;
        for r in 0..m {
            out[r * d * d + i * d + i] = (up[r] - 2.0 * center[r] + dn[r]) / (h * h);
        }
        for j in 0..d {
            if j == i {
                continue;
            }
            // 4-point cross stencil.
            let bump = |si: f64, sj: f64| -> Result<Vec<f64>> {
                let mut e = vec![0.0; d];
                e[i] = si * h;
                e[j] = sj * h;
                checked_eval(u, &path.vertical_bump(&e)?, x, "cross stencil")
            };
            let pp = bump(1.0, 1.0)?;
            let pm = bump(1.0, -1.0)?;
            let mp = bump(-1.0, 1.0)?;
            let mm = bump(-1.0, -1.0)?;
            for r in 0..m {
                out[r * d * d + i * d + j] =
                    (pp[r] - pm[r] - mp[r] + mm[r]) / (4.0 * h * h);
            }
        }
    }
    Ok(out)
}

/// D_t u: one-sided by definition (the path only extends forward in time).
pub fn horizontal_derivative(
    u: &dyn PathFunctional,
    path: &GridPath,
    x: &[f64],
    cfg: &FDConfig,
) -> Result<Vec<f64>> {
    let h = cfg.h_time;
    if h < path.dt() * (1.0 - 1e-9) {
        return Err(Error::invalid(format!(
            "horizontal step {h} is below the grid step {}",
            path.dt()
        )));
    }
    let extended = path.horizontal_extension(path.t() + h)?;
    let up = checked_eval(u, &extended, x, "horizontal extension")?;
    let base = checked_eval(u, path, x, "base point")?;
    Ok(up.iter().zip(&base).map(|(a, b)| (a - b) / h).collect())
}

/// Accumulate u(X_t) − u(X_0) − Σ[D_s u Δs + D_x u·ΔX + ½ D_xx u : Δ⟨X⟩]
/// over the grid with the left-point rule. A small value certifies the
/// functional Itô formula numerically along this path.
///
/// `quad_variation` holds one d×d matrix per grid step, row-major.
pub fn ito_residual(
    u: &dyn PathFunctional,
    driving_path: &GridPath,
    quad_variation: &[f64],
    cfg: &FDConfig,
) -> Result<f64> {
    if u.output_dim() != 1 {
        return Err(Error::invalid("ito_residual requires a scalar functional"));
    }
    let d = driving_path.dim();
    let steps = driving_path.n_nodes() - 1;
    if quad_variation.len() != steps * d * d {
        return Err(Error::invalid(format!(
            "expected {} quadratic-variation entries, got {}",
            steps * d * d,
            quad_variation.len()
        )));
    }
    let x: &[f64] = &[];
    let dt = driving_path.dt();
    let step_cfg = FDConfig {
        h_time: dt,
        ..*cfg
    };
    let mut acc = 0.0;
    for i in 0..steps {
        let prefix = driving_path.prefix(i);
        let ds = horizontal_derivative(u, &prefix, x, &step_cfg)?[0];
        let dx = vertical_derivative(u, &prefix, x, &step_cfg)?;
        let dxx = second_vertical_derivative(u, &prefix, x, &step_cfg)?;
        acc += ds * dt;
        let cur = driving_path.node(i);
        let next = driving_path.node(i + 1);
        for j in 0..d {
            acc += dx[j] * (next[j] - cur[j]);
        }
        let qv = &quad_variation[i * d * d..(i + 1) * d * d];
        for j in 0..d {
            for k in 0..d {
                acc += 0.5 * dxx[j * d + k] * qv[j * d + k];
            }
        }
    }
    let total = checked_eval(u, driving_path, x, "full path")?[0]
        - checked_eval(u, &driving_path.prefix(0), x, "initial node")?[0];
    Ok(total - acc)
}

/// One resolution level of the Itô-residual decay study.
#[derive(Debug, Clone, Serialize)]
pub struct ItoDecayRow {
    pub dt: f64,
    pub rms_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ItoDecayReport {
    pub rows: Vec<ItoDecayRow>,
    /// Fitted log-log slope of rms_residual against dt.
    pub slope: f64,
}

/// RMS Itô residual of the benchmark functional u(γ) = γ(t)² over
/// simulated Brownian paths on [0, 1], at grid steps Δt = 2^{-k} for each
/// exponent. For W² the residual telescopes to Σ(ΔW² − Δt), so the RMS
/// decays like √Δt and the fitted slope certifies first-order consistency
/// of the discrete functional Itô formula.
pub fn ito_decay_study(
    seed: u64,
    dt_exponents: &[u32],
    n_paths: usize,
) -> Result<ItoDecayReport> {
    if dt_exponents.len() < 2 {
        return Err(Error::invalid("need at least two resolutions to fit a slope"));
    }
    if n_paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    let u = FnFunctional {
        f: |p: &GridPath, _x: &[f64]| vec![p.last()[0] * p.last()[0]],
        m: 1,
        name: "endpoint squared".to_string(),
    };
    let mut rows = Vec::with_capacity(dt_exponents.len());
    for &k in dt_exponents {
        let steps = 1usize << k;
        let dt = 1.0 / steps as f64;
        let fd = FDConfig {
            h_vert: 1e-4,
            h_vert2: 1e-4,
            h_time: dt,
            scheme: Scheme::Central,
        };
        let qv = vec![dt; steps];
        let mut acc = 0.0;
        for pid in 0..n_paths {
            let mut values = Vec::with_capacity(steps + 1);
            let mut w = 0.0;
            values.push(w);
            for i in 0..steps {
                w += dt.sqrt() * crate::rng::standard_normal(seed, pid as u64, i as u64, 0);
                values.push(w);
            }
            let path = GridPath::new(dt, 1, values)?;
            acc += ito_residual(&u, &path, &qv, &fd)?.powi(2);
        }
        rows.push(ItoDecayRow {
            dt,
            rms_residual: (acc / n_paths as f64).sqrt(),
        });
    }
    let dts: Vec<f64> = rows.iter().map(|r| r.dt).collect();
    let errs: Vec<f64> = rows.iter().map(|r| r.rms_residual).collect();
    let slope = crate::stats::fit_loglog_slope(&dts, &errs);
    Ok(ItoDecayReport { rows, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal;

    fn scalar<F>(name: &str, f: F) -> FnFunctional<impl Fn(&GridPath, &[f64]) -> Vec<f64>>
    where
        F: Fn(&GridPath) -> f64,
    {
        FnFunctional {
            f: move |p: &GridPath, _x: &[f64]| vec![f(p)],
            m: 1,
            name: name.to_string(),
        }
    }

    fn cfg(h: f64) -> FDConfig {
        FDConfig {
            h_vert: h,
            h_vert2: h,
            h_time: 0.1,
            scheme: Scheme::Central,
        }
    }

    #[test]
    fn vertical_exact_on_square() {
        let u = scalar("endpoint^2", |p| p.last()[0] * p.last()[0]);
        let p = GridPath::constant(0.1, 0.3, &[3.0]).unwrap();
        let d = vertical_derivative(&u, &p, &[], &cfg(0.1)).unwrap();
        assert!((d[0] - 6.0).abs() < 1e-10);
    }

    #[test]
    fn vertical_zero_on_left_quadrature() {
        // The final node carries no time-measure under the left rule.
        let u = scalar("integral", |p| p.view().integral_left()[0]);
        let p = GridPath::new(0.1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let d = vertical_derivative(&u, &p, &[], &cfg(0.1)).unwrap();
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn vertical_zero_on_interior_max() {
        let u = scalar("running max", |p| {
            (0..p.n_nodes()).map(|i| p.node(i)[0]).fold(f64::MIN, f64::max)
        });
        // Interior maximum 2.0 strictly exceeds the bumped endpoint 1 ± 0.1.
        let p = GridPath::new(0.1, 1, vec![0.0, 2.0, 1.0]).unwrap();
        let d = vertical_derivative(&u, &p, &[], &cfg(0.1)).unwrap();
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn second_vertical_examples() {
        let p = GridPath::constant(0.1, 0.2, &[1.0]).unwrap();
        let u2 = scalar("sq", |p| p.last()[0] * p.last()[0]);
        let d = second_vertical_derivative(&u2, &p, &[], &cfg(0.1)).unwrap();
        assert!((d[0] - 2.0).abs() < 1e-9);

        let ul = scalar("lin", |p| 3.0 * p.last()[0] + 1.0);
        let d = second_vertical_derivative(&ul, &p, &[], &cfg(0.1)).unwrap();
        assert!(d[0].abs() < 1e-9);

        let u4 = scalar("quartic", |p| p.last()[0].powi(4));
        let d = second_vertical_derivative(&u4, &p, &[], &cfg(0.01)).unwrap();
        assert!((d[0] - 12.0).abs() < 1e-2, "got {}", d[0]);
    }

    #[test]
    fn quadratic_exactness_any_step() {
        let u = scalar("poly2", |p| {
            let v = p.last()[0];
            0.7 - 1.3 * v + 2.5 * v * v
        });
        let p = GridPath::constant(0.05, 0.25, &[0.4]).unwrap();
        for h in [1e-3, 0.1, 1.0] {
            let d1 = vertical_derivative(&u, &p, &[], &cfg(h)).unwrap();
            let d2 = second_vertical_derivative(&u, &p, &[], &cfg(h)).unwrap();
            assert!((d1[0] - (-1.3 + 5.0 * 0.4)).abs() < 1e-10);
            assert!((d2[0] - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn central_difference_is_second_order() {
        let u = scalar("sin", |p| p.last()[0].sin());
        let p = GridPath::constant(0.1, 0.2, &[0.3]).unwrap();
        let exact = 0.3f64.cos();
        let hs = [0.4, 0.2, 0.1, 0.05];
        let errs: Vec<f64> = hs
            .iter()
            .map(|&h| (vertical_derivative(&u, &p, &[], &cfg(h)).unwrap()[0] - exact).abs())
            .collect();
        let slope = fit_slope(&hs, &errs);
        assert!((1.8..=2.2).contains(&slope), "slope {slope}, errors {errs:?}");
    }

    #[test]
    fn raw_cross_stencil_nearly_symmetric() {
        let u = FnFunctional {
            f: |p: &GridPath, _x: &[f64]| {
                let v = p.last();
                vec![(v[0] * v[1]).sin() + v[0] * v[0] * v[1]]
            },
            m: 1,
            name: "smooth2d".into(),
        };
        let p = GridPath::new(0.1, 2, vec![0.3, -0.2]).unwrap();
        let raw = second_vertical_derivative_raw(&u, &p, &[], &cfg(1e-3)).unwrap();
        let asym = (raw[1] - raw[2]).abs();
        assert!(asym < 1e-6, "raw asymmetry {asym}");
        let sym = second_vertical_derivative(&u, &p, &[], &cfg(1e-3)).unwrap();
        assert_eq!(sym[1], sym[2]);
    }

    #[test]
    fn horizontal_examples() {
        let p = GridPath::constant(0.1, 0.3, &[2.0]).unwrap();
        let hcfg = FDConfig {
            h_vert: 0.1,
            h_vert2: 0.1,
            h_time: 0.1,
            scheme: Scheme::Central,
        };
        let u_end = scalar("endpoint", |p| p.last()[0]);
        assert_eq!(horizontal_derivative(&u_end, &p, &[], &hcfg).unwrap()[0], 0.0);

        let u_t = scalar("t times endpoint", |p| p.t() * p.last()[0]);
        let d = horizontal_derivative(&u_t, &p, &[], &hcfg).unwrap();
        assert!((d[0] - 2.0).abs() < 1e-12);

        let p3 = GridPath::constant(0.1, 0.2, &[3.0]).unwrap();
        let u_int = scalar("integral", |p| p.view().integral_left()[0]);
        let d = horizontal_derivative(&u_int, &p3, &[], &hcfg).unwrap();
        assert!((d[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn horizontal_rejects_sub_grid_step() {
        let p = GridPath::constant(0.1, 0.2, &[1.0]).unwrap();
        let bad = FDConfig {
            h_vert: 0.1,
            h_vert2: 0.1,
            h_time: 0.05,
            scheme: Scheme::Central,
        };
        let u = scalar("endpoint", |p| p.last()[0]);
        assert!(horizontal_derivative(&u, &p, &[], &bad).is_err());
    }

    fn brownian_path(dt: f64, steps: usize, seed: u64, path_id: u64) -> GridPath {
        let mut values = vec![0.0];
        for k in 0..steps {
            let z = standard_normal(seed, path_id, k as u64, 0);
            values.push(values[k] + z * dt.sqrt());
        }
        GridPath::new(dt, 1, values).unwrap()
    }

    #[test]
    fn ito_residual_telescopes_for_identity() {
        let u = scalar("endpoint", |p| p.last()[0]);
        let p = brownian_path(0.0625, 16, 5, 0);
        let qv = vec![0.0625; 16];
        let r = ito_residual(&u, &p, &qv, &cfg(1e-3)).unwrap();
        assert!(r.abs() < 1e-9, "residual {r}");

        let c = scalar("constant", |_| 4.2);
        let r = ito_residual(&c, &p, &qv, &cfg(1e-3)).unwrap();
        assert!(r.abs() < 1e-9);
    }

    #[test]
    fn ito_residual_decays_for_square() {
        // Classical Itô for W²: the residual is Σ(ΔW² − Δt), RMS O(√Δt).
        let u = scalar("endpoint^2", |p| p.last()[0] * p.last()[0]);
        let mut dts = Vec::new();
        let mut errs = Vec::new();
        for k in [16usize, 32, 64, 128] {
            let dt = 1.0 / k as f64;
            let n_paths = 40;
            let mut acc = 0.0;
            for pid in 0..n_paths {
                let p = brownian_path(dt, k, 11, pid);
                let qv = vec![dt; k];
                acc += ito_residual(&u, &p, &qv, &cfg(1e-4)).unwrap().powi(2);
            }
            dts.push(dt);
            errs.push((acc / n_paths as f64).sqrt());
        }
        let slope = fit_slope(&dts, &errs);
        assert!(slope >= 0.4, "slope {slope}, errors {errs:?}");
    }

    use crate::stats::fit_loglog_slope as fit_slope;
}
