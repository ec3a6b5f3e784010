//! Empirical measures on `R^d` and exact Wasserstein-type distances.
//!
//! Atoms are stored in a canonical (lexicographically sorted) order so that
//! every reduction over a measure is independent of the order in which the
//! atoms were produced; this is what makes particle exchangeability and
//! thread-count invariance bit-exact downstream.
//!
//! Distances are exact: sorted quantile coupling in dimension one, and a
//! minimum-cost assignment (shortest augmenting path with potentials) for
//! uniform equal-size clouds in higher dimension. No entropic or sliced
//! approximations.

use crate::error::{Error, Result};
use crate::path_space::Path;
use std::io::Write;

const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Assignment-based W2 is capped at this cloud size; larger clouds must be
/// subsampled by the caller.
pub const ASSIGNMENT_CAP: usize = 2048;
/// Product clouds beyond this size are refused.
const PRODUCT_CAP: usize = 1 << 22;

/// A weighted particle cloud representing a law in `P_2(R^d)`.
#[derive(Clone, Debug)]
pub struct EmpiricalMeasure {
    dim: usize,
    /// `n x dim` row-major, sorted lexicographically (then by weight).
    atoms: Vec<f64>,
    weights: Vec<f64>,
    mean: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if atoms.len() != weights.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} atom coordinates vs {} weights in dim {}",
                atoms.len(),
                weights.len(),
                dim
            )));
        }
        if weights.is_empty() {
            return Err(Error::invalid("measure needs at least one atom"));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("atoms must be finite"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        // compensated sum so the invariant measures the true total rather
        // than accumulation rounding on large clouds
        let sum = neumaier_sum(&weights);
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("weights sum to {sum}, not 1")));
        }
        let n = weights.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_unstable_by(|&a, &b| {
            let xa = &atoms[a * dim..(a + 1) * dim];
            let xb = &atoms[b * dim..(b + 1) * dim];
            xa.partial_cmp(xb)
                .unwrap()
                .then(weights[a].partial_cmp(&weights[b]).unwrap())
        });
        let mut sorted_atoms = Vec::with_capacity(atoms.len());
        let mut sorted_weights = Vec::with_capacity(n);
        for &i in &order {
            sorted_atoms.extend_from_slice(&atoms[i * dim..(i + 1) * dim]);
            sorted_weights.push(weights[i]);
        }
        let mut mean = vec![0.0f64; dim];
        for i in 0..n {
            for c in 0..dim {
                mean[c] += sorted_weights[i] * sorted_atoms[i * dim + c];
            }
        }
        Ok(EmpiricalMeasure {
            dim,
            atoms: sorted_atoms,
            weights: sorted_weights,
            mean,
        })
    }

    /// Uniform weights over the given atoms.
    pub fn uniform(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if dim == 0 || atoms.len() % dim != 0 || atoms.is_empty() {
            return Err(Error::invalid("atom buffer incompatible with dimension"));
        }
        let n = atoms.len() / dim;
        EmpiricalMeasure::new(dim, atoms, vec![1.0 / n as f64; n])
    }

    /// The Dirac measure at a point.
    pub fn dirac(point: &[f64]) -> Self {
        EmpiricalMeasure {
            dim: point.len(),
            atoms: point.to_vec(),
            weights: vec![1.0],
            mean: point.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Cached weighted mean.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn second_moment(&self) -> f64 {
        let d = self.dim;
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                w * self.atoms[i * d..(i + 1) * d]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
            })
            .sum()
    }

    fn uniform_weights(&self) -> bool {
        let n = self.len() as f64;
        self.weights.iter().all(|w| (w * n - 1.0).abs() <= 1e-9)
    }

    /// CSV rows `weight, x_1..x_d`.
    pub fn write_csv(&self, precision: usize, w: &mut impl Write) -> Result<()> {
        let mut header = String::from("weight");
        for c in 1..=self.dim {
            header.push_str(&format!(",x_{c}"));
        }
        writeln!(w, "{header}")?;
        for i in 0..self.len() {
            let mut line = format!("{:.*e}", precision, self.weights[i]);
            for c in 0..self.dim {
                line.push_str(&format!(",{:.*e}", precision, self.atoms[i * self.dim + c]));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

fn neumaier_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_dims(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch(format!(
            "measures live in R^{} and R^{}",
            a.dim, b.dim
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Cost {
    Squared,
    TruncatedAbs,
}

impl Cost {
    #[inline]
    fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            Cost::Squared => d2,
            Cost::TruncatedAbs => d2.sqrt().min(1.0),
        }
    }
}

/// Optimal coupling cost between sorted 1-d weighted measures.
fn coupling_cost_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure, cost: Cost) -> f64 {
    let (mut i, mut j) = (0usize, 0usize);
    let mut wi = a.weights[0];
    let mut wj = b.weights[0];
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let m = wi.min(wj);
        total += m * cost.eval(a.atom(i), b.atom(j));
        wi -= m;
        wj -= m;
        if wi <= 1e-15 {
            i += 1;
            if i < a.len() {
                wi = a.weights[i];
            }
        }
        if wj <= 1e-15 {
            j += 1;
            if j < b.len() {
                wj = b.weights[j];
            }
        }
    }
    total
}

/// Exact minimum-cost assignment by shortest augmenting paths with dual
/// potentials. `cost` is row-major `n x n`. Returns (total, col_of_row).
pub(crate) fn min_cost_assignment(cost: &[f64], n: usize) -> (f64, Vec<usize>) {
    debug_assert_eq!(cost.len(), n * n);
    let none = usize::MAX;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    // row matched to each column; column n is the virtual start
    let mut matched = vec![none; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 0..n {
        matched[n] = row;
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if !used[j] {
                    let cur = cost[i0 * n + j] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    if matched[j] != none {
                        u[matched[j]] += delta;
                    }
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == none {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    let mut total = 0.0;
    for j in 0..n {
        let r = matched[j];
        col_of_row[r] = j;
        total += cost[r * n + j];
    }
    (total, col_of_row)
}

fn assignment_cost(a: &EmpiricalMeasure, b: &EmpiricalMeasure, cost: Cost) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::UnsupportedConfiguration(format!(
            "assignment coupling needs equal atom counts, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !a.uniform_weights() || !b.uniform_weights() {
        return Err(Error::UnsupportedConfiguration(
            "assignment coupling needs uniform weights".into(),
        ));
    }
    let n = a.len();
    if n > ASSIGNMENT_CAP {
        return Err(Error::UnsupportedConfiguration(format!(
            "cloud size {n} above the assignment cap {ASSIGNMENT_CAP}; subsample first"
        )));
    }
    let mut c = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = cost.eval(a.atom(i), b.atom(j));
        }
    }
    let (total, _) = min_cost_assignment(&c, n);
    Ok(total / n as f64)
}

/// Wasserstein-2 distance.
///
/// Dimension one: exact via sorted quantile coupling, arbitrary weights.
/// Higher dimension: exact via minimum-cost matching on squared Euclidean
/// costs, restricted to uniform equal-size clouds.
pub fn wasserstein2(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    check_dims(a, b)?;
    // transport to a single atom is coupling-independent
    if b.len() == 1 {
        return wasserstein2_to_dirac(a, b.atom(0));
    }
    if a.len() == 1 {
        return wasserstein2_to_dirac(b, a.atom(0));
    }
    let sq = if a.dim == 1 {
        coupling_cost_1d(a, b, Cost::Squared)
    } else {
        assignment_cost(a, b, Cost::Squared)?
    };
    Ok(sq.max(0.0).sqrt())
}

/// Closed form `W2(mu, delta_point) = sqrt(sum_i w_i |x_i - point|^2)`.
pub fn wasserstein2_to_dirac(mu: &EmpiricalMeasure, point: &[f64]) -> Result<f64> {
    if point.len() != mu.dim {
        return Err(Error::DimensionMismatch(format!(
            "point in R^{}, measure in R^{}",
            point.len(),
            mu.dim
        )));
    }
    let d = mu.dim;
    let s: f64 = mu
        .weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            w * mu.atoms[i * d..(i + 1) * d]
                .iter()
                .zip(point)
                .map(|(x, p)| (x - p) * (x - p))
                .sum::<f64>()
        })
        .sum();
    Ok(s.sqrt())
}

/// Modified Wasserstein distance with cost `1 ∧ d(x, y)`, in `[0, 1]`.
///
/// Uses the same coupling machinery as [`wasserstein2`] with the truncated
/// cost: assignment when the clouds are uniform with equal counts (the
/// exact optimum over matchings), sorted coupling otherwise.
pub fn modified_wasserstein(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    check_dims(a, b)?;
    let v = if a.dim == 1 {
        if a.len() == b.len() && a.uniform_weights() && b.uniform_weights() && a.len() <= ASSIGNMENT_CAP
        {
            assignment_cost(a, b, Cost::TruncatedAbs)?
        } else {
            coupling_cost_1d(a, b, Cost::TruncatedAbs)
        }
    } else {
        assignment_cost(a, b, Cost::TruncatedAbs)?
    };
    Ok(v.clamp(0.0, 1.0))
}

/// Law of the sum of independent draws: the product cloud
/// `{x_i + y_j}` with weights `w_i v_j`.
pub fn measure_add(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<EmpiricalMeasure> {
    check_dims(a, b)?;
    let (n, m, d) = (a.len(), b.len(), a.dim);
    if n.saturating_mul(m) > PRODUCT_CAP {
        return Err(Error::UnsupportedConfiguration(format!(
            "product cloud {n} x {m} exceeds {PRODUCT_CAP} atoms"
        )));
    }
    let mut atoms = Vec::with_capacity(n * m * d);
    let mut weights = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            for c in 0..d {
                atoms.push(a.atoms[i * d + c] + b.atoms[j * d + c]);
            }
            weights.push(a.weights[i] * b.weights[j]);
        }
    }
    // renormalize away accumulated rounding in the weight products
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }
    EmpiricalMeasure::new(d, atoms, weights)
}

/// Scalar multiplication of the law: atoms scaled by `c`, weights kept.
/// `c = 0` is rejected (use an explicit Dirac at the origin instead).
pub fn measure_scale(c: f64, mu: &EmpiricalMeasure) -> Result<EmpiricalMeasure> {
    if c == 0.0 || !c.is_finite() {
        return Err(Error::invalid("scale factor must be finite and nonzero"));
    }
    let atoms = mu.atoms.iter().map(|x| c * x).collect();
    EmpiricalMeasure::new(mu.dim, atoms, mu.weights.clone())
}

/// Time-`t` marginal of a cloud of paths sharing a grid: the uniform
/// measure on `{path_i(t)}` with `t` snapped to the grid.
pub fn path_marginal(cloud: &[Path], t: f64) -> Result<EmpiricalMeasure> {
    let first = cloud
        .first()
        .ok_or_else(|| Error::invalid("empty path cloud"))?;
    let k = first.snap(t)?;
    let d = first.dim();
    let mut atoms = Vec::with_capacity(cloud.len() * d);
    for p in cloud {
        if p.grid_size() != first.grid_size() || (p.horizon() - first.horizon()).abs() > 1e-12 {
            return Err(Error::GridIncompatible("paths do not share a grid".into()));
        }
        atoms.extend_from_slice(p.value(k));
    }
    EmpiricalMeasure::uniform(d, atoms)
}
