//! Discrete realization of the path space Λ: càdlàg step paths on a uniform
//! time grid, together with the operators used by the functional calculus
//! (vertical bump, horizontal extension, sup norm, the d_∞ metric, and
//! concatenation with a Brownian tail).
//!
//! A path is the step function γ(s) = values[floor(s/dt)] for s < t with
//! γ(t) equal to the last node. Times are handled as node indices internally;
//! public entry points accept real times and validate grid membership within
//! a 1e-9 relative tolerance.

use crate::error::{Error, Result};

/// Relative tolerance when snapping a real time onto the grid.
const GRID_TOL: f64 = 1e-9;

/// A càdlàg path on a uniform grid starting at time 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    dt: f64,
    d: usize,
    /// One `d`-vector per grid node, flattened row-major.
    values: Vec<f64>,
}

/// Borrowed view of a grid path (or a prefix of one). Coefficient callables
/// receive views so simulation loops never clone path storage.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    pub dt: f64,
    pub d: usize,
    pub values: &'a [f64],
}

impl<'a> PathView<'a> {
    pub fn n_nodes(&self) -> usize {
        self.values.len() / self.d
    }

    pub fn t(&self) -> f64 {
        (self.n_nodes() - 1) as f64 * self.dt
    }

    pub fn node(&self, i: usize) -> &'a [f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn last(&self) -> &'a [f64] {
        self.node(self.n_nodes() - 1)
    }

    /// Left-endpoint quadrature of the path over [0, t], componentwise.
    pub fn integral_left(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.d];
        for i in 0..self.n_nodes() - 1 {
            for (a, v) in acc.iter_mut().zip(self.node(i)) {
                *a += v * self.dt;
            }
        }
        acc
    }

    pub fn to_owned_path(&self) -> GridPath {
        GridPath {
            dt: self.dt,
            d: self.d,
            values: self.values.to_vec(),
        }
    }
}

/// Snap a real time onto the grid, failing when it is off-grid.
pub fn node_index(time: f64, dt: f64) -> Result<usize> {
    if dt <= 0.0 {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let ratio = time / dt;
    let idx = ratio.round();
    if idx < 0.0 {
        return Err(Error::invalid(format!("negative time {time}")));
    }
    let scale = ratio.abs().max(1.0);
    if (ratio - idx).abs() > GRID_TOL * scale {
        return Err(Error::invalid(format!(
            "time {time} is not a multiple of dt = {dt}"
        )));
    }
    Ok(idx as usize)
}

impl GridPath {
    /// Build a path from per-node values. `values.len()` must be a multiple
    /// of `d` and every entry must be finite.
    pub fn new(dt: f64, d: usize, values: Vec<f64>) -> Result<Self> {
        if dt <= 0.0 {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        if d == 0 {
            return Err(Error::invalid("path dimension must be at least 1"));
        }
        if values.is_empty() || values.len() % d != 0 {
            return Err(Error::invalid(format!(
                "value count {} is not a positive multiple of d = {d}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("path values must be finite"));
        }
        Ok(GridPath { dt, d, values })
    }

    /// A single-node path at time 0.
    pub fn at_origin(dt: f64, start: Vec<f64>) -> Result<Self> {
        let d = start.len();
        GridPath::new(dt, d, start)
    }

    /// Constant path on [0, t].
    pub fn constant(dt: f64, t: f64, value: &[f64]) -> Result<Self> {
        let n = node_index(t, dt)? + 1;
        let mut values = Vec::with_capacity(n * value.len());
        for _ in 0..n {
            values.extend_from_slice(value);
        }
        GridPath::new(dt, value.len(), values)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_nodes(&self) -> usize {
        self.values.len() / self.d
    }

    /// End time of the path.
    pub fn t(&self) -> f64 {
        (self.n_nodes() - 1) as f64 * self.dt
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn last(&self) -> &[f64] {
        self.node(self.n_nodes() - 1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn view(&self) -> PathView<'_> {
        PathView {
            dt: self.dt,
            d: self.d,
            values: &self.values,
        }
    }

    /// View of the first `i + 1` nodes.
    pub fn prefix_view(&self, i: usize) -> PathView<'_> {
        PathView {
            dt: self.dt,
            d: self.d,
            values: &self.values[..(i + 1) * self.d],
        }
    }

    /// Prefix of the path up to node `i` as an owned path.
    pub fn prefix(&self, i: usize) -> GridPath {
        GridPath {
            dt: self.dt,
            d: self.d,
            values: self.values[..(i + 1) * self.d].to_vec(),
        }
    }

    /// γ_t^x: bump the final node by `x`, leaving history untouched.
    pub fn vertical_bump(&self, x: &[f64]) -> Result<GridPath> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.len(),
                context: "vertical bump",
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("bump must be finite"));
        }
        let mut out = self.clone();
        let n = out.n_nodes();
        for (v, b) in out.values[(n - 1) * self.d..].iter_mut().zip(x) {
            *v += b;
        }
        Ok(out)
    }

    /// γ_{t,s}: extend flatly to the grid time `s ≥ t`.
    pub fn horizontal_extension(&self, s: f64) -> Result<GridPath> {
        let target = node_index(s, self.dt)?;
        let cur = self.n_nodes() - 1;
        if target < cur {
            return Err(Error::invalid(format!(
                "extension time {s} is before path end {}",
                self.t()
            )));
        }
        let mut out = self.clone();
        let tail = self.last().to_vec();
        for _ in cur..target {
            out.values.extend_from_slice(&tail);
        }
        Ok(out)
    }

    /// sup over [0, t] of the Euclidean norm of the path value. Exact for
    /// step paths: the sup is attained at a grid node.
    pub fn sup_norm(&self) -> f64 {
        (0..self.n_nodes())
            .map(|i| norm(self.node(i)))
            .fold(0.0, f64::max)
    }

    /// W^{γ_t}: keep the path on [0, t), then follow γ(t) plus the cumulative
    /// sum of the given increments up to horizon `big_t`.
    pub fn concat_brownian(&self, increments: &[f64], big_t: f64) -> Result<GridPath> {
        let target = node_index(big_t, self.dt)?;
        let cur = self.n_nodes() - 1;
        if target < cur {
            return Err(Error::invalid(format!(
                "horizon {big_t} is before path end {}",
                self.t()
            )));
        }
        let steps = target - cur;
        if increments.len() != steps * self.d {
            return Err(Error::invalid(format!(
                "expected {} increment values, got {}",
                steps * self.d,
                increments.len()
            )));
        }
        let mut out = self.clone();
        let mut level = self.last().to_vec();
        for k in 0..steps {
            for (j, l) in level.iter_mut().enumerate() {
                *l += increments[k * self.d + j];
            }
            out.values.extend_from_slice(&level);
        }
        Ok(out)
    }

    /// Serialize to the plain-text tabular format: header `d dt n_nodes`,
    /// then one whitespace-separated row per node. Values print in shortest
    /// round-trip form, so parsing recovers the exact bits.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.d, self.dt, self.n_nodes());
        for i in 0..self.n_nodes() {
            let row: Vec<String> = self.node(i).iter().map(|v| format!("{v}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<GridPath> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid("empty path file"))?;
        let mut parts = header.split_whitespace();
        let d: usize = parse(parts.next(), "d")?;
        let dt: f64 = parse(parts.next(), "dt")?;
        let n_nodes: usize = parse(parts.next(), "n_nodes")?;
        let mut values = Vec::with_capacity(n_nodes * d);
        for line in lines {
            for tok in line.split_whitespace() {
                values.push(
                    tok.parse::<f64>()
                        .map_err(|e| Error::invalid(format!("bad value {tok:?}: {e}")))?,
                );
            }
        }
        if values.len() != n_nodes * d {
            return Err(Error::invalid(format!(
                "expected {} values, got {}",
                n_nodes * d,
                values.len()
            )));
        }
        GridPath::new(dt, d, values)
    }
}

fn parse<T: std::str::FromStr>(tok: Option<&str>, name: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    tok.ok_or_else(|| Error::invalid(format!("missing header field {name}")))?
        .parse::<T>()
        .map_err(|e| Error::invalid(format!("bad header field {name}: {e}")))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A pair of paths sharing grid step and dimension, the domain of d_∞.
#[derive(Debug, Clone)]
pub struct PathPair {
    pub a: GridPath,
    pub b: GridPath,
}

impl PathPair {
    pub fn new(a: GridPath, b: GridPath) -> Result<Self> {
        if (a.dt - b.dt).abs() > GRID_TOL * a.dt.max(b.dt) {
            return Err(Error::invalid(format!(
                "paths have different dt: {} vs {}",
                a.dt, b.dt
            )));
        }
        if a.d != b.d {
            return Err(Error::DimensionMismatch {
                expected: a.d,
                got: b.d,
                context: "path pair",
            });
        }
        Ok(PathPair { a, b })
    }

    /// d_∞(γ_t, γ̄_t̄) = sup_{s ≤ t∨t̄} |γ(s∧t) − γ̄(s∧t̄)| + |t − t̄|.
    /// Computed node-exactly after extending the shorter path flatly.
    pub fn d_infinity(&self) -> f64 {
        self.path_distance() + (self.a.t() - self.b.t()).abs()
    }

    /// The sup part of d_∞ without the time term, ‖γ − γ̄‖.
    pub fn path_distance(&self) -> f64 {
        let n = self.a.n_nodes().max(self.b.n_nodes());
        let mut sup: f64 = 0.0;
        for i in 0..n {
            let va = self.a.node(i.min(self.a.n_nodes() - 1));
            let vb = self.b.node(i.min(self.b.n_nodes() - 1));
            let diff: f64 = va
                .iter()
                .zip(vb)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            sup = sup.max(diff);
        }
        sup
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p1(values: &[f64]) -> GridPath {
        GridPath::new(0.1, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn vertical_bump_final_node_only() {
        let p = p1(&[0.0, 0.5, 1.0]);
        let q = p.vertical_bump(&[0.5]).unwrap();
        assert_eq!(q.values(), &[0.0, 0.5, 1.5]);
        assert_eq!(q.t(), p.t());
    }

    #[test]
    fn vertical_bump_zero_is_identity() {
        let p = p1(&[1.0, -2.0]);
        assert_eq!(p.vertical_bump(&[0.0]).unwrap(), p);
    }

    #[test]
    fn vertical_bump_componentwise() {
        let p = GridPath::new(0.1, 2, vec![0.0, 0.0, 1.0, 2.0]).unwrap();
        let q = p.vertical_bump(&[-1.0, 3.0]).unwrap();
        assert_eq!(q.last(), &[0.0, 5.0]);
        assert_eq!(q.node(0), &[0.0, 0.0]);
    }

    #[test]
    fn vertical_bump_dimension_mismatch() {
        let p = p1(&[1.0]);
        assert!(p.vertical_bump(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn horizontal_extension_appends_last_value() {
        let p = GridPath::constant(0.1, 0.5, &[2.0]).unwrap();
        let q = p.horizontal_extension(0.7).unwrap();
        assert_eq!(q.n_nodes(), 8);
        assert_eq!(q.node(6), &[2.0]);
        assert_eq!(q.node(7), &[2.0]);
    }

    #[test]
    fn horizontal_extension_identity_and_idempotent() {
        let p = p1(&[1.0, 3.0]);
        let q = p.horizontal_extension(p.t()).unwrap();
        assert_eq!(q, p);
        let r = p.horizontal_extension(0.4).unwrap();
        assert_eq!(r.horizontal_extension(0.4).unwrap(), r);
    }

    #[test]
    fn horizontal_extension_from_origin() {
        let p = GridPath::at_origin(0.1, vec![1.0]).unwrap();
        let q = p.horizontal_extension(0.2).unwrap();
        assert_eq!(q.values(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn horizontal_extension_rejects_backward_and_off_grid() {
        let p = GridPath::constant(0.1, 0.5, &[0.0]).unwrap();
        assert!(p.horizontal_extension(0.4).is_err());
        assert!(p.horizontal_extension(0.55).is_err());
    }

    #[test]
    fn sup_norm_examples() {
        assert_eq!(p1(&[1.0, -3.0, 2.0]).sup_norm(), 3.0);
        assert_eq!(GridPath::constant(0.1, 0.3, &[-2.5]).unwrap().sup_norm(), 2.5);
        let p = GridPath::new(0.1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(p.sup_norm(), 5.0);
    }

    #[test]
    fn d_infinity_examples() {
        let p = p1(&[1.0, 2.0]);
        assert_eq!(PathPair::new(p.clone(), p.clone()).unwrap().d_infinity(), 0.0);

        let a = GridPath::constant(0.1, 0.4, &[1.0]).unwrap();
        let b = GridPath::constant(0.1, 0.6, &[1.0]).unwrap();
        let d = PathPair::new(a, b).unwrap().d_infinity();
        assert!((d - 0.2).abs() < 1e-12);

        let a = p1(&[0.0, 1.0]);
        let b = p1(&[0.5, 1.5]);
        assert!((PathPair::new(a, b).unwrap().d_infinity() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn concat_brownian_matches_examples() {
        let p = GridPath::constant(0.1, 0.3, &[1.0]).unwrap();
        // Zero increments reduce to the horizontal extension.
        let q = p.concat_brownian(&[0.0, 0.0], 0.5).unwrap();
        assert_eq!(q, p.horizontal_extension(0.5).unwrap());

        let q = p.concat_brownian(&[0.3, -0.1], 0.5).unwrap();
        assert_eq!(q.node(3), &[1.0]);
        assert_eq!(q.node(4), &[1.3]);
        assert!((q.node(5)[0] - 1.2).abs() < 1e-15);

        // t = T with empty increments is the identity.
        assert_eq!(p.concat_brownian(&[], 0.3).unwrap(), p);
        assert!(p.concat_brownian(&[0.1], 0.3).is_err());
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let p = GridPath::new(
            0.125,
            2,
            vec![0.1, -0.2, std::f64::consts::PI, 1.0 / 3.0, 1e-17, -2.5e8],
        )
        .unwrap();
        let q = GridPath::from_text(&p.to_text()).unwrap();
        assert_eq!(p, q);
        for (a, b) in p.values().iter().zip(q.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_non_finite_values() {
        assert!(GridPath::new(0.1, 1, vec![f64::NAN]).is_err());
        assert!(GridPath::new(0.1, 1, vec![f64::INFINITY]).is_err());
    }

    fn arb_path(max_nodes: usize) -> impl Strategy<Value = GridPath> {
        prop::collection::vec(-10.0f64..10.0, 1..max_nodes)
            .prop_map(|v| GridPath::new(0.25, 1, v).unwrap())
    }

    proptest! {
        #[test]
        fn bump_roundtrip_exact(p in arb_path(12), x in -5.0f64..5.0) {
            let q = p.vertical_bump(&[x]).unwrap().vertical_bump(&[-x]).unwrap();
            // Near-inverse: one rounding each way at a single node.
            for (a, b) in q.values().iter().zip(p.values()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            prop_assert_eq!(q.n_nodes(), p.n_nodes());
        }

        #[test]
        fn sup_norm_bump_triangle(p in arb_path(12), x in -5.0f64..5.0) {
            let bumped = p.vertical_bump(&[x]).unwrap();
            prop_assert!(bumped.sup_norm() <= p.sup_norm() + x.abs() + 1e-12);
        }

        #[test]
        fn d_infinity_symmetry_triangle(a in arb_path(8), b in arb_path(8), c in arb_path(8)) {
            let dab = PathPair::new(a.clone(), b.clone()).unwrap().d_infinity();
            let dba = PathPair::new(b.clone(), a.clone()).unwrap().d_infinity();
            prop_assert!((dab - dba).abs() < 1e-12);
            let dac = PathPair::new(a.clone(), c.clone()).unwrap().d_infinity();
            let dcb = PathPair::new(c, b).unwrap().d_infinity();
            prop_assert!(dab <= dac + dcb + 1e-12);
        }

        #[test]
        fn text_round_trip(p in arb_path(10)) {
            prop_assert_eq!(GridPath::from_text(&p.to_text()).unwrap(), p);
        }
    }
}
