//! Least-squares Monte Carlo machinery: polynomial feature expansion and
//! ridge-regularized normal-equation fits.
//!
//! The Gram matrix is assembled with a single deterministic matrix product,
//! so fitted coefficients are bitwise-reproducible regardless of the worker
//! count used elsewhere in the solver.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Summary statistics of the driving path usable as regression features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    /// Current forward state X(t_i).
    CurrentX,
    /// Current value of the driving path W(t_i).
    CurrentW,
    /// Running average of W over [0, t_i], current node included.
    RunningAverageW,
    /// Componentwise running maximum of W over [0, t_i].
    RunningMaxW,
    /// W at `count` equally spaced checkpoints of [0, T], clamped to the
    /// current node so the feature stays adapted.
    CheckpointsW { count: usize },
}

/// Which path summaries enter the regression and up to which total degree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionBasisSpec {
    pub poly_degree: usize,
    pub features: Vec<Feature>,
}

impl Default for RegressionBasisSpec {
    fn default() -> Self {
        RegressionBasisSpec {
            poly_degree: 2,
            features: vec![
                Feature::CurrentX,
                Feature::CurrentW,
                Feature::RunningAverageW,
                Feature::CheckpointsW { count: 4 },
            ],
        }
    }
}

impl RegressionBasisSpec {
    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::invalid("basis needs at least one feature"));
        }
        if self.poly_degree == 0 {
            return Err(Error::invalid("polynomial degree must be at least 1"));
        }
        Ok(())
    }

    /// Number of raw feature scalars for given state/path dimensions.
    pub fn raw_len(&self, n: usize, d: usize) -> usize {
        self.features
            .iter()
            .map(|f| match f {
                Feature::CurrentX => n,
                Feature::CurrentW | Feature::RunningAverageW | Feature::RunningMaxW => d,
                Feature::CheckpointsW { count } => count * d,
            })
            .sum()
    }
}

/// All monomials of total degree ≤ `degree` over `n_raw` scalars, ordered
/// by total degree then lexicographically. Index 0 is the intercept.
#[derive(Debug, Clone)]
pub struct PolynomialBasis {
    exponents: Vec<Vec<u8>>,
    n_raw: usize,
}

impl PolynomialBasis {
    pub fn new(n_raw: usize, degree: usize) -> Self {
        let mut exponents = Vec::new();
        for total in 0..=degree {
            let mut current = vec![0u8; n_raw];
            gen_exponents(&mut exponents, &mut current, 0, total as u8);
        }
        PolynomialBasis { exponents, n_raw }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn n_raw(&self) -> usize {
        self.n_raw
    }

    pub fn exponents(&self) -> &[Vec<u8>] {
        &self.exponents
    }

    /// Expand raw features into the monomial row `out` (length `len()`).
    pub fn expand(&self, raw: &[f64], out: &mut [f64]) {
        debug_assert_eq!(raw.len(), self.n_raw);
        for (slot, exps) in out.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for (x, &e) in raw.iter().zip(exps) {
                for _ in 0..e {
                    v *= x;
                }
            }
            *slot = v;
        }
    }

    /// Index of the degree-1 monomial in raw feature `j`, used by tests to
    /// build hand-written predictors.
    pub fn linear_index(&self, j: usize) -> Option<usize> {
        self.exponents.iter().position(|e| {
            e.iter().map(|&x| x as usize).sum::<usize>() == 1 && e[j] == 1
        })
    }
}

fn gen_exponents(out: &mut Vec<Vec<u8>>, current: &mut Vec<u8>, pos: usize, remaining: u8) {
    if pos == current.len() {
        if remaining == 0 {
            out.push(current.clone());
        }
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        gen_exponents(out, current, pos + 1, remaining - e);
        current[pos] = 0;
    }
}

/// A fitted linear predictor over the expanded basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub coeffs: Vec<f64>,
}

impl Predictor {
    pub fn zero(m: usize) -> Self {
        Predictor {
            coeffs: vec![0.0; m],
        }
    }

    pub fn eval(&self, expanded: &[f64]) -> f64 {
        self.coeffs
            .iter()
            .zip(expanded)
            .map(|(c, x)| c * x)
            .sum()
    }
}

/// Lower-triangular Cholesky factor of an SPD matrix, reusable for several
/// right-hand sides at the same grid node.
pub struct CholeskyFactor {
    l: Vec<f64>,
    m: usize,
}

impl CholeskyFactor {
    pub fn new(a: &[f64], m: usize) -> Option<Self> {
        let mut l = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..=i {
                let mut s = a[i * m + j];
                for k in 0..j {
                    s -= l[i * m + k] * l[j * m + k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return None;
                    }
                    l[i * m + i] = s.sqrt();
                } else {
                    l[i * m + j] = s / l[j * m + j];
                }
            }
        }
        Some(CholeskyFactor { l, m })
    }

    /// Solve A x = rhs in place.
    pub fn solve(&self, rhs: &mut [f64]) {
        let m = self.m;
        debug_assert_eq!(rhs.len(), m);
        for i in 0..m {
            let mut s = rhs[i];
            for k in 0..i {
                s -= self.l[i * m + k] * rhs[k];
            }
            rhs[i] = s / self.l[i * m + i];
        }
        for i in (0..m).rev() {
            let mut s = rhs[i];
            for k in (i + 1)..m {
                s -= self.l[k * m + i] * rhs[k];
            }
            rhs[i] = s / self.l[i * m + i];
        }
    }
}

/// Factor the ridge-augmented normal equations of a design matrix.
///
/// Minimizes mean squared residual plus `ridge·‖coeffs‖²` with the
/// intercept (column 0) unpenalized.
pub fn factor_normal_equations(
    design: ArrayView2<'_, f64>,
    ridge: f64,
) -> Result<CholeskyFactor> {
    let n = design.nrows() as f64;
    let m = design.ncols();
    let gram = design.t().dot(&design) / n;
    let mut a = gram.into_raw_vec_and_offset().0;
    for j in 1..m {
        a[j * m + j] += ridge;
    }
    CholeskyFactor::new(&a, m).ok_or(Error::SingularRegression)
}

/// Solve the fitted coefficients for one target column given the factor.
pub fn solve_coefficients(
    factor: &CholeskyFactor,
    design: ArrayView2<'_, f64>,
    target: &[f64],
) -> Vec<f64> {
    let n = design.nrows() as f64;
    let m = design.ncols();
    let mut rhs = vec![0.0; m];
    // Dᵀ t / n, accumulated column-wise in a fixed order.
    for (row, &t) in design.rows().into_iter().zip(target) {
        for (slot, &v) in rhs.iter_mut().zip(row) {
            *slot += v * t;
        }
    }
    for v in rhs.iter_mut() {
        *v /= n;
    }
    factor.solve(&mut rhs);
    rhs
}

/// Ridge-regularized least-squares fit of targets on the polynomial
/// expansion of raw features. `raw` is row-major `n_samples × raw_len`,
/// `targets` is `n_samples × q`; one predictor per target column.
pub fn regress_conditional(
    raw: &[f64],
    n_samples: usize,
    targets: &[f64],
    basis: &PolynomialBasis,
    ridge: f64,
) -> Result<Vec<Predictor>> {
    if n_samples == 0 || raw.len() != n_samples * basis.n_raw() {
        return Err(Error::invalid("raw feature block has the wrong shape"));
    }
    if targets.len() % n_samples != 0 {
        return Err(Error::invalid("target block has the wrong shape"));
    }
    let m = basis.len();
    if n_samples < m {
        return Err(Error::invalid(format!(
            "need at least {m} samples for a basis of size {m}, got {n_samples}"
        )));
    }
    let q = targets.len() / n_samples;
    let mut design = Array2::<f64>::zeros((n_samples, m));
    {
        let slice = design.as_slice_mut().expect("row-major design");
        for (p, row) in slice.chunks_exact_mut(m).enumerate() {
            basis.expand(&raw[p * basis.n_raw()..(p + 1) * basis.n_raw()], row);
        }
    }
    let factor = factor_normal_equations(design.view(), ridge)?;
    let mut out = Vec::with_capacity(q);
    for c in 0..q {
        let col: Vec<f64> = (0..n_samples).map(|p| targets[p * q + c]).collect();
        out.push(Predictor {
            coeffs: solve_coefficients(&factor, design.view(), &col),
        });
    }
    Ok(out)
}
