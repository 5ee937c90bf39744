//! Forward–backward SDE solver: Euler–Maruyama forward simulation, a
//! least-squares Monte Carlo backward sweep, and an outer Picard iteration
//! over the regression predictors of (Y, Z).
//!
//! Coupling is handled by feeding the previous iteration's predictors into
//! the forward drift and diffusion. All Brownian increments come from the
//! counter-based generator in [`crate::rng`], keyed by absolute node index,
//! so repeated solves (including bumped-path solves) see common random
//! numbers and the output is bitwise-independent of the worker thread count.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde_problem::CoefficientSet;
use crate::path_space::{node_index, GridPath, PathView};
use crate::regression::{
    factor_normal_equations, solve_coefficients, Feature, PolynomialBasis, RegressionBasisSpec,
};
use crate::rng;

/// Tuning knobs for a single Picard solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Grid steps on the full horizon [0, T].
    pub n_steps: usize,
    pub n_paths: usize,
    pub picard_max: usize,
    pub picard_tol: f64,
    /// Mixing weight on the freshly fitted predictors (1.0 = undamped).
    pub damping: f64,
    pub basis: RegressionBasisSpec,
    pub ridge: f64,
    pub seed: u64,
    pub antithetic: bool,
    /// Keep the raw Brownian increments on the solution; they can always be
    /// regenerated from the seed, so the default saves memory.
    pub keep_increments: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            n_steps: 64,
            n_paths: 20_000,
            picard_max: 40,
            picard_tol: 1e-4,
            damping: 0.5,
            basis: RegressionBasisSpec::default(),
            ridge: 1e-4,
            seed: 42,
            antithetic: false,
            keep_increments: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be positive"));
        }
        if self.n_paths == 0 {
            return Err(Error::invalid("n_paths must be positive"));
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(Error::invalid("antithetic sampling needs an even n_paths"));
        }
        if self.picard_max < 2 {
            return Err(Error::invalid("picard_max must be at least 2"));
        }
        if !(self.picard_tol > 0.0) {
            return Err(Error::invalid("picard_tol must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid("damping must lie in (0, 1]"));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::invalid("ridge must be non-negative"));
        }
        self.basis.validate()
    }
}

/// Fitted regression coefficients for Y and Z at every interior grid node.
///
/// Entry `y[i]` has length `m·n` (component-major), entry `z[i]` length
/// `m·n·d`; nodes before the initial node and the terminal node are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePredictors {
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// Per-node clamp range for Y read-outs, stored as `[lo…, hi…]` (2n
    /// scalars). Polynomial predictors are clamped to the target range seen
    /// while fitting, which keeps the forward feedback loop from blowing up
    /// in the tails of the simulated ensemble. Empty = no clamping.
    pub y_bounds: Vec<Vec<f64>>,
    /// Same for Z read-outs (2·n·d scalars per node).
    pub z_bounds: Vec<Vec<f64>>,
}

impl NodePredictors {
    pub fn zeros(n_nodes: usize) -> Self {
        NodePredictors {
            y: vec![Vec::new(); n_nodes],
            z: vec![Vec::new(); n_nodes],
            y_bounds: vec![Vec::new(); n_nodes],
            z_bounds: vec![Vec::new(); n_nodes],
        }
    }

    fn mix_into(&mut self, fresh: &NodePredictors, theta: f64) {
        for (old, new) in self
            .y
            .iter_mut()
            .zip(&fresh.y)
            .chain(self.z.iter_mut().zip(&fresh.z))
        {
            if old.len() != new.len() {
                old.clear();
                old.extend_from_slice(new);
            } else {
                for (o, nv) in old.iter_mut().zip(new) {
                    *o = (1.0 - theta) * *o + theta * nv;
                }
            }
        }
        // Bounds widen to the union so mixed read-outs stay admissible.
        for (old, new) in self
            .y_bounds
            .iter_mut()
            .zip(&fresh.y_bounds)
            .chain(self.z_bounds.iter_mut().zip(&fresh.z_bounds))
        {
            if old.len() != new.len() {
                old.clear();
                old.extend_from_slice(new);
            } else {
                let half = old.len() / 2;
                for (k, (o, nv)) in old.iter_mut().zip(new).enumerate() {
                    *o = if k < half { o.min(*nv) } else { o.max(*nv) };
                }
            }
        }
    }
}

/// Resolved feature layout: which raw scalars are extracted at a node.
#[derive(Debug, Clone)]
struct FeatureLayout {
    features: Vec<Feature>,
    checkpoints: Vec<usize>,
    raw_len: usize,
    needs_avg: bool,
    needs_max: bool,
    basis: PolynomialBasis,
}

impl FeatureLayout {
    fn new(spec: &RegressionBasisSpec, n: usize, d: usize, n_steps_total: usize) -> Self {
        let mut checkpoints = Vec::new();
        let mut needs_avg = false;
        let mut needs_max = false;
        for f in &spec.features {
            match f {
                Feature::RunningAverageW => needs_avg = true,
                Feature::RunningMaxW => needs_max = true,
                Feature::CheckpointsW { count } => {
                    for j in 1..=*count {
                        let node = (j as f64 * n_steps_total as f64 / (*count as f64 + 1.0))
                            .round() as usize;
                        checkpoints.push(node.min(n_steps_total));
                    }
                }
                _ => {}
            }
        }
        let raw_len = spec.raw_len(n, d);
        FeatureLayout {
            features: spec.features.clone(),
            checkpoints,
            raw_len,
            needs_avg,
            needs_max,
            basis: PolynomialBasis::new(raw_len, spec.poly_degree),
        }
    }

    /// Extract raw features at node `i` into `out`.
    ///
    /// `w_row`, `avg_row`, `max_row` are per-path node-major blocks of
    /// length `n_nodes·d` (the latter two possibly empty when unused).
    fn raw(
        &self,
        i: usize,
        x_i: &[f64],
        w_row: &[f64],
        avg_row: &[f64],
        max_row: &[f64],
        d: usize,
        out: &mut [f64],
    ) {
        let mut k = 0;
        let mut cp = 0;
        for f in &self.features {
            match f {
                Feature::CurrentX => {
                    out[k..k + x_i.len()].copy_from_slice(x_i);
                    k += x_i.len();
                }
                Feature::CurrentW => {
                    out[k..k + d].copy_from_slice(&w_row[i * d..(i + 1) * d]);
                    k += d;
                }
                Feature::RunningAverageW => {
                    out[k..k + d].copy_from_slice(&avg_row[i * d..(i + 1) * d]);
                    k += d;
                }
                Feature::RunningMaxW => {
                    out[k..k + d].copy_from_slice(&max_row[i * d..(i + 1) * d]);
                    k += d;
                }
                Feature::CheckpointsW { count } => {
                    for _ in 0..*count {
                        let node = self.checkpoints[cp].min(i);
                        cp += 1;
                        out[k..k + d].copy_from_slice(&w_row[node * d..(node + 1) * d]);
                        k += d;
                    }
                }
            }
        }
        debug_assert_eq!(k, self.raw_len);
    }
}

/// Full simulated ensemble at the Picard fixed point.
///
/// State arrays are path-major, node-major, component-minor; nodes before
/// the initial node carry the (deterministic) prefix of the driving path in
/// `w` and zeros in `x`, `y`, `z`.
pub struct EnsembleSolution {
    pub n: usize,
    pub d: usize,
    pub n_paths: usize,
    /// Total nodes on [0, T], i.e. n_steps + 1.
    pub n_nodes: usize,
    /// Grid node of the initial time t.
    pub t_idx: usize,
    pub dt: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    pub dw: Option<Vec<f64>>,
    /// Per-path one-step estimates of Y at the initial node.
    pub y0_samples: Vec<f64>,
    /// Per-path one-step estimates of Z at the initial node.
    pub z0_samples: Vec<f64>,
    pub picard_iters: usize,
    pub picard_history: Vec<f64>,
    pub predictors: NodePredictors,
    /// Root-mean-square regression residual per interior node.
    pub fit_rms: Vec<f64>,
    pub seed: u64,
    pub antithetic: bool,
}

impl EnsembleSolution {
    #[inline]
    pub fn x_at(&self, p: usize, i: usize) -> &[f64] {
        let n = self.n;
        &self.x[(p * self.n_nodes + i) * n..(p * self.n_nodes + i + 1) * n]
    }

    #[inline]
    pub fn y_at(&self, p: usize, i: usize) -> &[f64] {
        let n = self.n;
        &self.y[(p * self.n_nodes + i) * n..(p * self.n_nodes + i + 1) * n]
    }

    #[inline]
    pub fn z_at(&self, p: usize, i: usize) -> &[f64] {
        let nd = self.n * self.d;
        &self.z[(p * self.n_nodes + i) * nd..(p * self.n_nodes + i + 1) * nd]
    }

    #[inline]
    pub fn w_at(&self, p: usize, i: usize) -> &[f64] {
        let d = self.d;
        &self.w[(p * self.n_nodes + i) * d..(p * self.n_nodes + i + 1) * d]
    }

    /// u(γ_t, x) = E[Y(t)]: the value stored at the initial node.
    pub fn u_value(&self) -> Vec<f64> {
        self.y_at(0, self.t_idx).to_vec()
    }

    /// Monte Carlo standard error of each component of `u_value`.
    pub fn u_se(&self) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|c| {
                let col: Vec<f64> = (0..self.n_paths)
                    .map(|p| self.y0_samples[p * n + c])
                    .collect();
                crate::stats::standard_error(&col)
            })
            .collect()
    }

    pub fn z0_value(&self) -> Vec<f64> {
        self.z_at(0, self.t_idx).to_vec()
    }

    pub fn z0_se(&self) -> Vec<f64> {
        let nd = self.n * self.d;
        (0..nd)
            .map(|c| {
                let col: Vec<f64> = (0..self.n_paths)
                    .map(|p| self.z0_samples[p * nd + c])
                    .collect();
                crate::stats::standard_error(&col)
            })
            .collect()
    }

    /// Ensemble mean of Z at node `i`.
    pub fn z_mean(&self, i: usize) -> Vec<f64> {
        let nd = self.n * self.d;
        let mut out = vec![0.0; nd];
        for p in 0..self.n_paths {
            for (o, v) in out.iter_mut().zip(self.z_at(p, i)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= self.n_paths as f64;
        }
        out
    }

    /// Brownian increment of path `p` over step `i`, regenerated from the
    /// seed when increments were not kept.
    pub fn dw_at(&self, p: usize, i: usize, buf: &mut [f64]) {
        if let Some(dw) = &self.dw {
            let d = self.d;
            buf.copy_from_slice(&dw[(p * (self.n_nodes - 1) + i) * d..][..d]);
        } else {
            draw_increment(
                self.seed,
                self.n_paths,
                self.antithetic,
                p,
                i,
                self.dt,
                buf,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn draw_increment(
    seed: u64,
    n_paths: usize,
    antithetic: bool,
    p: usize,
    step: usize,
    dt: f64,
    out: &mut [f64],
) {
    let sqrt_dt = dt.sqrt();
    let (base, sign) = if antithetic && p >= n_paths / 2 {
        (p - n_paths / 2, -1.0)
    } else {
        (p, 1.0)
    };
    for (j, slot) in out.iter_mut().enumerate() {
        *slot = sign * sqrt_dt * rng::standard_normal(seed, base as u64, step as u64, j as u64);
    }
}

/// Output of one backward regression sweep.
pub struct SweepOutput {
    pub predictors: NodePredictors,
    pub fit_rms: Vec<f64>,
    pub y0_samples: Vec<f64>,
    pub z0_samples: Vec<f64>,
}

/// Iterative solver state for one (γ_t, x) datum.
pub struct PicardSolver<'a> {
    coeffs: &'a CoefficientSet,
    x0: Vec<f64>,
    cfg: SolverConfig,
    layout: FeatureLayout,
    n_nodes: usize,
    t_idx: usize,
    dt: f64,
    w: Vec<f64>,
    avg: Vec<f64>,
    max: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl<'a> PicardSolver<'a> {
    pub fn new(
        coeffs: &'a CoefficientSet,
        gamma: &GridPath,
        x0: &[f64],
        cfg: &SolverConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if gamma.dim() != coeffs.d {
            return Err(Error::DimensionMismatch {
                expected: coeffs.d,
                got: gamma.dim(),
                context: "driving path dimension".into(),
            });
        }
        if x0.len() != coeffs.n {
            return Err(Error::DimensionMismatch {
                expected: coeffs.n,
                got: x0.len(),
                context: "initial state dimension".into(),
            });
        }
        let dt = coeffs.horizon / cfg.n_steps as f64;
        if (gamma.dt() - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::invalid(format!(
                "path grid spacing {} does not match horizon/n_steps = {dt}",
                gamma.dt()
            )));
        }
        let n_nodes = cfg.n_steps + 1;
        let t_idx = gamma.n_nodes() - 1;
        if t_idx >= cfg.n_steps {
            return Err(Error::invalid(
                "initial time must lie strictly before the horizon",
            ));
        }
        let layout = FeatureLayout::new(&cfg.basis, coeffs.n, coeffs.d, cfg.n_steps);
        let np = cfg.n_paths;
        let d = coeffs.d;
        let n = coeffs.n;

        // The driving paths and their running summaries never change across
        // Picard iterations, so build them once.
        let mut w = vec![0.0; np * n_nodes * d];
        w.par_chunks_mut(n_nodes * d)
            .enumerate()
            .for_each(|(p, row)| {
                for i in 0..=t_idx {
                    row[i * d..(i + 1) * d].copy_from_slice(gamma.node(i));
                }
                let mut buf = vec![0.0; d];
                for i in t_idx..(n_nodes - 1) {
                    draw_increment(cfg.seed, np, cfg.antithetic, p, i, dt, &mut buf);
                    for j in 0..d {
                        row[(i + 1) * d + j] = row[i * d + j] + buf[j];
                    }
                }
            });
        let mut avg = Vec::new();
        if layout.needs_avg {
            avg = vec![0.0; np * n_nodes * d];
            avg.par_chunks_mut(n_nodes * d)
                .zip(w.par_chunks(n_nodes * d))
                .for_each(|(arow, wrow)| {
                    let mut sum = vec![0.0; d];
                    for i in 0..n_nodes {
                        for j in 0..d {
                            sum[j] += wrow[i * d + j];
                            arow[i * d + j] = sum[j] / (i as f64 + 1.0);
                        }
                    }
                });
        }
        let mut maxa = Vec::new();
        if layout.needs_max {
            maxa = vec![0.0; np * n_nodes * d];
            maxa.par_chunks_mut(n_nodes * d)
                .zip(w.par_chunks(n_nodes * d))
                .for_each(|(mrow, wrow)| {
                    let mut run = vec![f64::NEG_INFINITY; d];
                    for i in 0..n_nodes {
                        for j in 0..d {
                            run[j] = run[j].max(wrow[i * d + j]);
                            mrow[i * d + j] = run[j];
                        }
                    }
                });
        }

        Ok(PicardSolver {
            coeffs,
            x0: x0.to_vec(),
            cfg: cfg.clone(),
            layout,
            n_nodes,
            t_idx,
            dt,
            w,
            avg,
            max: maxa,
            x: vec![0.0; np * n_nodes * n],
            y: vec![0.0; np * n_nodes * n],
            z: vec![0.0; np * n_nodes * n * d],
        })
    }

    pub fn basis(&self) -> &PolynomialBasis {
        &self.layout.basis
    }

    /// Euler–Maruyama forward pass with (Y, Z) read off the predictors.
    pub fn simulate_forward(&mut self, preds: &NodePredictors) -> Result<()> {
        let (n, d) = (self.coeffs.n, self.coeffs.d);
        let (n_nodes, t_idx, dt) = (self.n_nodes, self.t_idx, self.dt);
        let layout = &self.layout;
        let m = layout.basis.len();
        let coeffs = self.coeffs;
        let x0 = &self.x0;
        let avg_arr = &self.avg;
        let max_arr = &self.max;
        let empty: &[f64] = &[];
        self.x
            .par_chunks_mut(n_nodes * n)
            .zip(self.w.par_chunks(n_nodes * d))
            .enumerate()
            .try_for_each(|(p, (xrow, wrow))| -> Result<()> {
                let arow = if layout.needs_avg {
                    &avg_arr[p * n_nodes * d..(p + 1) * n_nodes * d]
                } else {
                    empty
                };
                let mrow = if layout.needs_max {
                    &max_arr[p * n_nodes * d..(p + 1) * n_nodes * d]
                } else {
                    empty
                };
                let mut raw = vec![0.0; layout.raw_len];
                let mut phi = vec![0.0; m];
                let mut yv = vec![0.0; n];
                let mut zv = vec![0.0; n * d];
                let mut bv = vec![0.0; n];
                let mut sv = vec![0.0; n * d];
                xrow[t_idx * n..(t_idx + 1) * n].copy_from_slice(x0);
                for i in t_idx..(n_nodes - 1) {
                    let xi = xrow[i * n..(i + 1) * n].to_vec();
                    layout.raw(i, &xi, wrow, arow, mrow, d, &mut raw);
                    layout.basis.expand(&raw, &mut phi);
                    eval_predictor_clamped(&preds.y[i], &preds.y_bounds[i], &phi, &mut yv);
                    eval_predictor_clamped(&preds.z[i], &preds.z_bounds[i], &phi, &mut zv);
                    let view = PathView {
                        dt,
                        d,
                        values: &wrow[..(i + 1) * d],
                    };
                    (coeffs.b)(&view, &xi, &yv, &zv, &mut bv);
                    (coeffs.sigma)(&view, &xi, &yv, &zv, &mut sv);
                    for c in 0..n {
                        let mut next = xi[c] + bv[c] * dt;
                        for j in 0..d {
                            next += sv[c * d + j] * (wrow[(i + 1) * d + j] - wrow[i * d + j]);
                        }
                        if !next.is_finite() {
                            return Err(Error::Diverged { node: i + 1, path: p });
                        }
                        xrow[(i + 1) * n + c] = next;
                    }
                }
                Ok(())
            })
    }

    /// One backward regression sweep over the grid given the forward states
    /// currently stored in the solver.
    pub fn backward_sweep(&mut self) -> Result<SweepOutput> {
        let (n, d) = (self.coeffs.n, self.coeffs.d);
        let (n_nodes, t_idx, dt) = (self.n_nodes, self.t_idx, self.dt);
        let np = self.cfg.n_paths;
        let layout = &self.layout;
        let m = layout.basis.len();
        let coeffs = self.coeffs;
        let empty: &[f64] = &[];
        let avg_arr = &self.avg;
        let max_arr = &self.max;

        // Terminal condition, exact per path.
        {
            let n_last = n_nodes - 1;
            self.y
                .par_chunks_mut(n_nodes * n)
                .zip(self.x.par_chunks(n_nodes * n))
                .zip(self.w.par_chunks(n_nodes * d))
                .for_each(|((yrow, xrow), wrow)| {
                    let view = PathView {
                        dt,
                        d,
                        values: wrow,
                    };
                    (coeffs.g)(
                        &view,
                        &xrow[n_last * n..(n_last + 1) * n],
                        &mut yrow[n_last * n..(n_last + 1) * n],
                    );
                });
        }

        let mut predictors = NodePredictors::zeros(n_nodes);
        let mut fit_rms = vec![0.0; n_nodes];
        let mut design = Array2::<f64>::zeros((np, m));
        let mut y0_samples = vec![0.0; np * n];
        let mut z0_samples = vec![0.0; np * n * d];
        let mut y_next = vec![0.0; np * n];
        let mut target = vec![0.0; np];

        for i in (t_idx..(n_nodes - 1)).rev() {
            for p in 0..np {
                y_next[p * n..(p + 1) * n]
                    .copy_from_slice(&self.y[(p * n_nodes + i + 1) * n..(p * n_nodes + i + 2) * n]);
            }

            if i > t_idx {
                // Assemble the design matrix at this node.
                {
                    let w_arr = &self.w;
                    let x_arr = &self.x;
                    let slice = design.as_slice_mut().expect("row-major design");
                    slice.par_chunks_mut(m).enumerate().for_each(|(p, row)| {
                        let wrow = &w_arr[p * n_nodes * d..(p + 1) * n_nodes * d];
                        let arow = if layout.needs_avg {
                            &avg_arr[p * n_nodes * d..(p + 1) * n_nodes * d]
                        } else {
                            empty
                        };
                        let mrow = if layout.needs_max {
                            &max_arr[p * n_nodes * d..(p + 1) * n_nodes * d]
                        } else {
                            empty
                        };
                        let xi = &x_arr[(p * n_nodes + i) * n..(p * n_nodes + i + 1) * n];
                        let mut raw = vec![0.0; layout.raw_len];
                        layout.raw(i, xi, wrow, arow, mrow, d, &mut raw);
                        layout.basis.expand(&raw, row);
                    });
                }
                let factor = factor_normal_equations(design.view(), self.cfg.ridge)?;
                let dslice = design.as_slice().unwrap();

                // Z predictors: regress Y(t_{i+1})·ΔW_i/Δt.
                let mut z_coeffs = vec![0.0; m * n * d];
                for c in 0..n {
                    for j in 0..d {
                        for (p, t) in target.iter_mut().enumerate() {
                            let wrow = &self.w[p * n_nodes * d..(p + 1) * n_nodes * d];
                            let dwj = wrow[(i + 1) * d + j] - wrow[i * d + j];
                            *t = y_next[p * n + c] * dwj / dt;
                        }
                        let sol = solve_coefficients(&factor, design.view(), &target);
                        z_coeffs[(c * d + j) * m..(c * d + j + 1) * m].copy_from_slice(&sol);
                    }
                }

                // Projection of Y(t_{i+1}) onto the node's information,
                // used as the Y argument of the driver.
                let mut y_proj_coeffs = vec![0.0; m * n];
                for c in 0..n {
                    for (p, t) in target.iter_mut().enumerate() {
                        *t = y_next[p * n + c];
                    }
                    let sol = solve_coefficients(&factor, design.view(), &target);
                    y_proj_coeffs[c * m..(c + 1) * m].copy_from_slice(&sol);
                }
                self.z
                    .par_chunks_mut(n_nodes * n * d)
                    .enumerate()
                    .for_each(|(p, zrow)| {
                        let phi = &dslice[p * m..(p + 1) * m];
                        eval_predictor(&z_coeffs, phi, &mut zrow[i * n * d..(i + 1) * n * d]);
                    });
                let nd = n * d;
                let mut z_bounds = vec![0.0; 2 * nd];
                z_bounds[..nd].fill(f64::INFINITY);
                z_bounds[nd..].fill(f64::NEG_INFINITY);
                for p in 0..np {
                    let zi = &self.z[(p * n_nodes + i) * nd..(p * n_nodes + i + 1) * nd];
                    for (c, &v) in zi.iter().enumerate() {
                        z_bounds[c] = z_bounds[c].min(v);
                        z_bounds[nd + c] = z_bounds[nd + c].max(v);
                    }
                }

                // Driver targets: Y(t_{i+1}) − h(...)Δt with the projected Y
                // and the regressed Z as arguments.
                let mut driver_targets = vec![0.0; np * n];
                {
                    let w_arr = &self.w;
                    let x_arr = &self.x;
                    let z_arr = &self.z;
                    driver_targets
                        .par_chunks_mut(n)
                        .enumerate()
                        .try_for_each(|(p, tgt)| -> Result<()> {
                            let wrow = &w_arr[p * n_nodes * d..(p + 1) * n_nodes * d];
                            let phi = &dslice[p * m..(p + 1) * m];
                            let mut yv = vec![0.0; n];
                            eval_predictor(&y_proj_coeffs, phi, &mut yv);
                            let zi =
                                &z_arr[(p * n_nodes + i) * n * d..(p * n_nodes + i + 1) * n * d];
                            let xi = &x_arr[(p * n_nodes + i) * n..(p * n_nodes + i + 1) * n];
                            let view = PathView {
                                dt,
                                d,
                                values: &wrow[..(i + 1) * d],
                            };
                            let mut hv = vec![0.0; n];
                            (coeffs.h)(&view, xi, &yv, zi, &mut hv);
                            for c in 0..n {
                                let v = y_next[p * n + c] - hv[c] * dt;
                                if !v.is_finite() {
                                    return Err(Error::Diverged { node: i, path: p });
                                }
                                tgt[c] = v;
                            }
                            Ok(())
                        })?;
                }

                let mut y_coeffs = vec![0.0; m * n];
                for c in 0..n {
                    for (p, t) in target.iter_mut().enumerate() {
                        *t = driver_targets[p * n + c];
                    }
                    let sol = solve_coefficients(&factor, design.view(), &target);
                    y_coeffs[c * m..(c + 1) * m].copy_from_slice(&sol);
                }
                let mut rss = 0.0;
                let mut y_bounds = vec![0.0; 2 * n];
                y_bounds[..n].fill(f64::INFINITY);
                y_bounds[n..].fill(f64::NEG_INFINITY);
                {
                    let mut yv = vec![0.0; n];
                    for p in 0..np {
                        let phi = &dslice[p * m..(p + 1) * m];
                        eval_predictor(&y_coeffs, phi, &mut yv);
                        for c in 0..n {
                            let r = driver_targets[p * n + c] - yv[c];
                            rss += r * r;
                            self.y[(p * n_nodes + i) * n + c] = yv[c];
                            y_bounds[c] = y_bounds[c].min(yv[c]);
                            y_bounds[n + c] = y_bounds[n + c].max(yv[c]);
                        }
                    }
                }
                fit_rms[i] = (rss / (np * n) as f64).sqrt();
                predictors.y[i] = y_coeffs;
                predictors.z[i] = z_coeffs;
                predictors.y_bounds[i] = y_bounds;
                predictors.z_bounds[i] = z_bounds;
            } else {
                // Initial node: the conditioning information is trivial, so
                // conditional expectations are plain ensemble means.
                let nd = n * d;
                let mut z0 = vec![0.0; nd];
                let mut y_bar = vec![0.0; n];
                for p in 0..np {
                    let wrow = &self.w[p * n_nodes * d..(p + 1) * n_nodes * d];
                    for c in 0..n {
                        y_bar[c] += y_next[p * n + c];
                        for j in 0..d {
                            let dwj = wrow[(i + 1) * d + j] - wrow[i * d + j];
                            let s = y_next[p * n + c] * dwj / dt;
                            z0_samples[p * nd + c * d + j] = s;
                            z0[c * d + j] += s;
                        }
                    }
                }
                for v in z0.iter_mut() {
                    *v /= np as f64;
                }
                for v in y_bar.iter_mut() {
                    *v /= np as f64;
                }
                let view = PathView {
                    dt,
                    d,
                    values: &self.w[..(i + 1) * d],
                };
                let mut hv = vec![0.0; n];
                (coeffs.h)(&view, &self.x0, &y_bar, &z0, &mut hv);
                let mut y0 = vec![0.0; n];
                for p in 0..np {
                    for c in 0..n {
                        let s = y_next[p * n + c] - hv[c] * dt;
                        y0_samples[p * n + c] = s;
                        y0[c] += s;
                    }
                }
                for v in y0.iter_mut() {
                    *v /= np as f64;
                }
                for p in 0..np {
                    self.y[(p * n_nodes + i) * n..(p * n_nodes + i) * n + n]
                        .copy_from_slice(&y0);
                    self.z[(p * n_nodes + i) * nd..(p * n_nodes + i) * nd + nd]
                        .copy_from_slice(&z0);
                }
                // Constant predictors so a later forward pass reads off the
                // same values at the initial node.
                let mut yc = vec![0.0; m * n];
                let mut zc = vec![0.0; m * nd];
                for c in 0..n {
                    yc[c * m] = y0[c];
                }
                for c in 0..nd {
                    zc[c * m] = z0[c];
                }
                predictors.y[i] = yc;
                predictors.z[i] = zc;
                let mut yb = y0.clone();
                yb.extend_from_slice(&y0);
                let mut zb = z0.clone();
                zb.extend_from_slice(&z0);
                predictors.y_bounds[i] = yb;
                predictors.z_bounds[i] = zb;
            }
        }

        Ok(SweepOutput {
            predictors,
            fit_rms,
            y0_samples,
            z0_samples,
        })
    }

    /// Run the outer Picard iteration to its fixed point.
    pub fn solve(mut self, warm: Option<&NodePredictors>) -> Result<EnsembleSolution> {
        let cfg = self.cfg.clone();
        let mut preds = match warm {
            Some(w) if w.y.len() == self.n_nodes => w.clone(),
            _ => NodePredictors::zeros(self.n_nodes),
        };
        let m = self.layout.basis.len();
        let (n, d) = (self.coeffs.n, self.coeffs.d);
        for i in self.t_idx..(self.n_nodes - 1) {
            if preds.y[i].len() != m * n {
                preds.y[i] = vec![0.0; m * n];
            }
            if preds.z[i].len() != m * n * d {
                preds.z[i] = vec![0.0; m * n * d];
            }
        }

        let n_samples = cfg.n_paths * (self.n_nodes - self.t_idx);
        let mut history = Vec::new();
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut last_sweep: Option<SweepOutput> = None;
        let mut converged = false;
        let mut iters = 0;
        // Regression noise at small ensembles can drive the damped map
        // into a limit cycle instead of a fixed point. Whenever the sweep
        // distance fails to shrink, permanently reduce the mixing weight:
        // the cycle's amplitude scales with it, while true contraction
        // survives a smaller step. Deterministic, so reproducibility is
        // unaffected.
        let mut theta = cfg.damping;
        for _ in 0..cfg.picard_max {
            iters += 1;
            self.simulate_forward(&preds)?;
            let sweep = self.backward_sweep()?;
            if let Some((py, pz)) = &prev {
                let dist = ensemble_distance(&self.y, py, &self.z, pz, n_samples);
                if history.last().is_some_and(|&p| dist > 0.9 * p) {
                    theta = (0.7 * theta).max(0.1);
                }
                history.push(dist);
                if dist < cfg.picard_tol {
                    converged = true;
                    last_sweep = Some(sweep);
                    break;
                }
            }
            prev = Some((self.y.clone(), self.z.clone()));
            preds.mix_into(&sweep.predictors, theta);
            last_sweep = Some(sweep);
        }
        if !converged {
            return Err(Error::NoConvergence {
                iters,
                last: history.last().copied().unwrap_or(f64::INFINITY),
                history,
            });
        }
        let sweep = last_sweep.expect("converged implies a sweep");

        let dw = if cfg.keep_increments {
            let np = cfg.n_paths;
            let steps = self.n_nodes - 1;
            let mut dw = vec![0.0; np * steps * d];
            // Regenerated from the counter stream (not differenced from w)
            // so the kept values match a later on-demand regeneration bit
            // for bit.
            for p in 0..np {
                for i in self.t_idx..steps {
                    draw_increment(
                        cfg.seed,
                        np,
                        cfg.antithetic,
                        p,
                        i,
                        self.dt,
                        &mut dw[(p * steps + i) * d..(p * steps + i + 1) * d],
                    );
                }
            }
            Some(dw)
        } else {
            None
        };

        Ok(EnsembleSolution {
            n,
            d,
            n_paths: cfg.n_paths,
            n_nodes: self.n_nodes,
            t_idx: self.t_idx,
            dt: self.dt,
            x: self.x,
            y: self.y,
            z: self.z,
            w: self.w,
            dw,
            y0_samples: sweep.y0_samples,
            z0_samples: sweep.z0_samples,
            picard_iters: iters,
            picard_history: history,
            predictors: sweep.predictors,
            fit_rms: sweep.fit_rms,
            seed: cfg.seed,
            antithetic: cfg.antithetic,
        })
    }
}

/// Evaluate and clamp to the per-component `[lo…, hi…]` bounds when given.
fn eval_predictor_clamped(coeffs: &[f64], bounds: &[f64], phi: &[f64], out: &mut [f64]) {
    eval_predictor(coeffs, phi, out);
    if bounds.len() == 2 * out.len() {
        let half = out.len();
        for (c, v) in out.iter_mut().enumerate() {
            *v = v.clamp(bounds[c], bounds[half + c]);
        }
    }
}

fn eval_predictor(coeffs: &[f64], phi: &[f64], out: &mut [f64]) {
    let m = phi.len();
    for (c, slot) in out.iter_mut().enumerate() {
        let block = &coeffs[c * m..(c + 1) * m];
        let mut s = 0.0;
        for (a, b) in block.iter().zip(phi) {
            s += a * b;
        }
        *slot = s;
    }
}

/// Root-mean-square ensemble distance between successive sweeps.
fn ensemble_distance(y: &[f64], py: &[f64], z: &[f64], pz: &[f64], n_samples: usize) -> f64 {
    let mut s = 0.0;
    for (a, b) in y.iter().zip(py) {
        let r = a - b;
        s += r * r;
    }
    for (a, b) in z.iter().zip(pz) {
        let r = a - b;
        s += r * r;
    }
    (s / n_samples as f64).sqrt()
}

/// Solve the FBSDE at the datum (γ_t, x) and return the converged ensemble.
pub fn picard_solve(
    coeffs: &CoefficientSet,
    gamma: &GridPath,
    x0: &[f64],
    cfg: &SolverConfig,
) -> Result<EnsembleSolution> {
    PicardSolver::new(coeffs, gamma, x0, cfg)?.solve(None)
}

/// Same as [`picard_solve`] but starting from previously fitted predictors,
/// which typically cuts the iteration count for nearby data.
pub fn picard_solve_warm(
    coeffs: &CoefficientSet,
    gamma: &GridPath,
    x0: &[f64],
    cfg: &SolverConfig,
    warm: &NodePredictors,
) -> Result<EnsembleSolution> {
    PicardSolver::new(coeffs, gamma, x0, cfg)?.solve(Some(warm))
}

/// Grid node of time `t` under `n_steps` steps on the horizon of `coeffs`.
pub fn node_of(coeffs: &CoefficientSet, n_steps: usize, t: f64) -> Result<usize> {
    let dt = coeffs.horizon / n_steps as f64;
    node_index(t, dt)
}
