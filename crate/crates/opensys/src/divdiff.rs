//! Divided differences of the scalar functions that appear in the series
//! solutions, and the label-path sums built from them.
//!
//! A divided difference of `f` over nodes `x_0..x_l` is the `(0, l)` entry of
//! `f(J)`, where `J` is the upper bidiagonal matrix with the nodes on its
//! diagonal and ones above it. Evaluating `f(J)` by scaling and squaring
//! gives one code path that is accurate for distinct, nearly equal, and
//! repeated nodes alike, so no symbolic confluent limits are needed.

use nalgebra::DMatrix;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::linalg::{c, DenseOperator, C64};

/// Matrix entries below this magnitude are treated as structural zeros when
/// enumerating label paths.
pub const STRUCTURAL_ZERO: f64 = 1e-14;

/// Relative merge threshold for nearly confluent nodes.
pub const DEFAULT_CONFLUENCE_TOL: f64 = 1e-8;

/// Longest path (in nodes) the packed memo key supports.
const MAX_KEY_NODES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    /// `x -> exp(-i x t)`
    Exp { t: f64 },
    /// `x -> x^k`
    Power { k: u32 },
    /// `x -> x^k exp(-i x t - theta x^2 t / 2)`
    PowerDephasing { k: u32, t: f64, theta: f64 },
}

impl Kernel {
    pub fn value(&self, x: f64) -> C64 {
        match *self {
            Kernel::Exp { t } => C64::from_polar(1.0, -x * t),
            Kernel::Power { k } => c(x.powi(k as i32), 0.0),
            Kernel::PowerDephasing { k, t, theta } => {
                C64::from_polar((-0.5 * theta * x * x * t).exp(), -x * t) * x.powi(k as i32)
            }
        }
    }
}

/// Divided difference of `exp(-i x t)` over `nodes`; nodes closer than
/// `1e-8 * max|x|` are merged first.
pub fn divided_difference_exp(nodes: &[f64], t: f64) -> C64 {
    divided_difference(Kernel::Exp { t }, nodes, DEFAULT_CONFLUENCE_TOL)
}

/// Divided difference of `kernel` over `nodes`. The result is symmetric in
/// the nodes; they are sorted before evaluation so it is also bit-identical
/// under permutation.
pub fn divided_difference(kernel: Kernel, nodes: &[f64], confluence_tol: f64) -> C64 {
    assert!(!nodes.is_empty(), "divided difference needs at least one node");
    let mut x = nodes.to_vec();
    x.sort_by(f64::total_cmp);
    merge_confluent(&mut x, confluence_tol);
    divided_difference_sorted(kernel, &x)
}

/// Snap runs of nodes closer than `rel_tol * max|x|` to their mean.
fn merge_confluent(x: &mut [f64], rel_tol: f64) {
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = rel_tol * scale;
    let mut start = 0;
    while start < x.len() {
        let mut end = start + 1;
        while end < x.len() && x[end] - x[end - 1] <= tol {
            end += 1;
        }
        if end - start > 1 {
            let mean = x[start..end].iter().sum::<f64>() / (end - start) as f64;
            x[start..end].iter_mut().for_each(|v| *v = mean);
        }
        start = end;
    }
}

fn divided_difference_sorted(kernel: Kernel, x: &[f64]) -> C64 {
    let n = x.len();
    if n == 1 {
        return kernel.value(x[0]);
    }
    let order = n - 1;
    match kernel {
        Kernel::Power { k } => {
            let k = k as usize;
            if k < order {
                C64::default()
            } else {
                c(complete_homogeneous(x, k - order), 0.0)
            }
        }
        Kernel::Exp { t } => {
            let center = 0.5 * (x[0] + x[n - 1]);
            let y = shifted_bidiagonal(x, center);
            let e = expm_upper(&(&y * c(0.0, -t)));
            e[(0, n - 1)] * C64::from_polar(1.0, -center * t)
        }
        Kernel::PowerDephasing { k, t, theta } => {
            // exponent -i t x - theta t x^2 / 2 expanded about the center
            let center = 0.5 * (x[0] + x[n - 1]);
            let y = shifted_bidiagonal(x, center);
            let alpha = c(-theta * t * center, -t);
            let beta = c(-0.5 * theta * t, 0.0);
            let exponent = &y * alpha + (&y * &y) * beta;
            let e = expm_upper(&exponent);
            let scalar = C64::from_polar((-0.5 * theta * t * center * center).exp(), -t * center);
            let mut j = y.clone();
            for i in 0..n {
                j[(i, i)] += c(center, 0.0);
            }
            let mut f = e;
            for _ in 0..k {
                f = &j * f;
            }
            f[(0, n - 1)] * scalar
        }
    }
}

fn shifted_bidiagonal(x: &[f64], center: f64) -> DMatrix<C64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            c(x[i] - center, 0.0)
        } else if j == i + 1 {
            c(1.0, 0.0)
        } else {
            C64::default()
        }
    })
}

/// Complete homogeneous symmetric polynomial `h_m(x_0, ..., x_l)`.
fn complete_homogeneous(x: &[f64], m: usize) -> f64 {
    // h_j over a growing prefix of the variables
    let mut h = vec![0.0; m + 1];
    h[0] = 1.0;
    for &xi in x {
        for j in 1..=m {
            h[j] += xi * h[j - 1];
        }
    }
    h[m]
}

/// Exponential of a small upper-triangular matrix by scaling and squaring
/// with a truncated Taylor series.
fn expm_upper(a: &DMatrix<C64>) -> DMatrix<C64> {
    let n = a.nrows();
    let norm1 = (0..n)
        .map(|j| (0..n).map(|i| a[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    if norm1 > 0.5 {
        squarings = (norm1 / 0.5).log2().ceil() as u32;
    }
    let scaled = a * c(0.5f64.powi(squarings as i32), 0.0);
    let mut result = DMatrix::<C64>::identity(n, n);
    let mut term = DMatrix::<C64>::identity(n, n);
    for k in 1..40 {
        term = &term * &scaled * c(1.0 / k as f64, 0.0);
        result += &term;
        let tn = term.iter().fold(0.0f64, |m, z| m.max(z.norm()));
        if tn < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Path sums `A^{ab} = sum over label paths a = p_0 -> ... -> p_l = b of
/// f[E_{p_0}, ..., E_{p_l}] * H_{p_0 p_1} ... H_{p_{l-1} p_l}`.
///
/// Levels whose energies are confluent share a cluster id, and divided
/// differences are memoized on the sorted multiset of cluster ids along the
/// path: only the multiset matters, and spin-bath spectra repeat it endlessly.
pub struct PathSum {
    dim: usize,
    energies: Vec<f64>,
    cluster_of: Vec<u16>,
    cluster_values: Vec<f64>,
    adjacency: Vec<Vec<(usize, C64)>>,
}

impl PathSum {
    /// `energies` are the diagonal levels; `coupling` is the matrix whose
    /// elements are multiplied along the path (diagonal included).
    pub fn new(energies: &[f64], coupling: &DenseOperator, confluence_tol: f64) -> Result<Self> {
        let dim = energies.len();
        if coupling.nrows() != dim || coupling.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "coupling matrix {:?} for {dim} levels",
                coupling.shape()
            )));
        }
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| energies[a].total_cmp(&energies[b]).then(a.cmp(&b)));
        let scale = energies.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = confluence_tol * scale;
        let mut cluster_of = vec![0u16; dim];
        let mut cluster_values = Vec::new();
        let mut start = 0;
        while start < dim {
            let mut end = start + 1;
            while end < dim && energies[order[end]] - energies[order[end - 1]] <= tol {
                end += 1;
            }
            let id = cluster_values.len();
            if id > u16::MAX as usize {
                return Err(Error::Unsupported("more than 65536 distinct energy levels".into()));
            }
            let mean = order[start..end].iter().map(|&k| energies[k]).sum::<f64>() / (end - start) as f64;
            for &k in &order[start..end] {
                cluster_of[k] = id as u16;
            }
            cluster_values.push(mean);
            start = end;
        }
        let adjacency = (0..dim)
            .map(|i| {
                (0..dim)
                    .filter_map(|j| {
                        let h = coupling[(i, j)];
                        (h.norm() >= STRUCTURAL_ZERO).then_some((j, h))
                    })
                    .collect()
            })
            .collect();
        Ok(PathSum { dim, energies: energies.to_vec(), cluster_of, cluster_values, adjacency })
    }

    /// Number of label paths with `order` steps along nonzero couplings.
    pub fn path_count(&self, order: usize) -> u128 {
        let mut counts = vec![1u128; self.dim];
        for _ in 0..order {
            let mut next = vec![0u128; self.dim];
            for (i, row) in self.adjacency.iter().enumerate() {
                for &(j, _) in row {
                    next[j] = next[j].saturating_add(counts[i]);
                }
            }
            counts = next;
        }
        counts.iter().fold(0u128, |a, b| a.saturating_add(*b))
    }

    pub fn term(&self, order: usize, kernel: Kernel, path_budget: u64) -> Result<DenseOperator> {
        if order + 1 > MAX_KEY_NODES {
            return Err(Error::Unsupported(format!(
                "path order {order} exceeds the supported maximum {}",
                MAX_KEY_NODES - 1
            )));
        }
        let paths = self.path_count(order);
        if paths > path_budget as u128 {
            return Err(Error::PathBudget { paths, order, budget: path_budget });
        }
        let mut out = DenseOperator::zeros(self.dim, self.dim);
        if order == 0 {
            for a in 0..self.dim {
                out[(a, a)] = kernel.value(self.energies[a]);
            }
            return Ok(out);
        }
        let mut memo: FxHashMap<u128, C64> = FxHashMap::default();
        let mut walk = Walk { sum: self, kernel, memo: &mut memo, order };
        for a in 0..self.dim {
            let mut keys = [0u16; MAX_KEY_NODES];
            keys[0] = self.cluster_of[a];
            let mut row = vec![C64::default(); self.dim];
            walk.descend(a, c(1.0, 0.0), &keys, 1, &mut row);
            for (b, v) in row.into_iter().enumerate() {
                out[(a, b)] = v;
            }
        }
        Ok(out)
    }
}

struct Walk<'a> {
    sum: &'a PathSum,
    kernel: Kernel,
    memo: &'a mut FxHashMap<u128, C64>,
    order: usize,
}

impl Walk<'_> {
    fn descend(&mut self, node: usize, weight: C64, keys: &[u16; MAX_KEY_NODES], len: usize, row: &mut [C64]) {
        for &(next, h) in &self.sum.adjacency[node] {
            let w = weight * h;
            let mut k = *keys;
            insert_sorted(&mut k, len, self.sum.cluster_of[next]);
            if len == self.order {
                let dd = self.lookup(&k, len + 1);
                row[next] += w * dd;
            } else {
                self.descend(next, w, &k, len + 1, row);
            }
        }
    }

    fn lookup(&mut self, keys: &[u16; MAX_KEY_NODES], len: usize) -> C64 {
        let mut packed: u128 = len as u128;
        for &k in &keys[..len] {
            packed = (packed << 16) | k as u128;
        }
        if let Some(v) = self.memo.get(&packed) {
            return *v;
        }
        let nodes: Vec<f64> = keys[..len].iter().map(|&k| self.sum.cluster_values[k as usize]).collect();
        let v = divided_difference_sorted(self.kernel, &nodes);
        self.memo.insert(packed, v);
        v
    }
}

fn insert_sorted(keys: &mut [u16; MAX_KEY_NODES], len: usize, value: u16) {
    let mut i = len;
    while i > 0 && keys[i - 1] > value {
        keys[i] = keys[i - 1];
        i -= 1;
    }
    keys[i] = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Textbook Newton recursion, only valid for well separated nodes.
    fn newton(f: &dyn Fn(f64) -> C64, x: &[f64]) -> C64 {
        let n = x.len();
        let mut table: Vec<C64> = x.iter().map(|&v| f(v)).collect();
        for level in 1..n {
            for i in 0..n - level {
                table[i] = (table[i + 1] - table[i]) / c(x[i + level] - x[i], 0.0);
            }
        }
        table[0]
    }

    #[test]
    fn order_zero_and_one_closed_forms() {
        let e = 0.7;
        let t = 1.3;
        assert_eq!(divided_difference_exp(&[e], t), C64::from_polar(1.0, -e * t));
        let v = divided_difference_exp(&[1.0, -1.0], PI / 2.0);
        assert_abs_diff_eq!((v - c(0.0, -1.0)).norm(), 0.0, epsilon = 1e-14);
        let (a, b) = (0.3, -1.1);
        let want = (C64::from_polar(1.0, -a * t) - C64::from_polar(1.0, -b * t)) / (a - b);
        assert_abs_diff_eq!((divided_difference_exp(&[a, b], t) - want).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn confluent_pair_is_derivative() {
        let (e, t) = (0.4, 2.5);
        let exact = c(0.0, -t) * C64::from_polar(1.0, -e * t);
        assert_abs_diff_eq!((divided_difference_exp(&[e, e], t) - exact).norm(), 0.0, epsilon = 1e-13);
        let eps = 1e-6;
        let split = (C64::from_polar(1.0, -e * t) - C64::from_polar(1.0, -(e + eps) * t)) / (-eps);
        assert!((split - exact).norm() < 1e-4 * t * t);
    }

    #[test]
    fn triple_confluent_is_second_derivative_over_two() {
        let (e, t) = (-0.9, 1.7);
        let want = c(-t * t / 2.0, 0.0) * C64::from_polar(1.0, -e * t);
        assert_abs_diff_eq!((divided_difference_exp(&[e, e, e], t) - want).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn matches_newton_on_separated_nodes() {
        let x = [-1.3, -0.2, 0.5, 1.9, 2.4];
        let t = 0.8;
        let f = |v: f64| C64::from_polar(1.0, -v * t);
        for l in 0..x.len() {
            let want = newton(&f, &x[..=l]);
            assert_abs_diff_eq!((divided_difference_exp(&x[..=l], t) - want).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn power_kernel_values() {
        let k3 = Kernel::Power { k: 3 };
        assert_abs_diff_eq!(divided_difference(k3, &[1.0, 2.0], 0.0).re, 7.0, epsilon = 1e-14);
        assert_abs_diff_eq!(divided_difference(Kernel::Power { k: 1 }, &[0.3, 5.0], 0.0).re, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(divided_difference(k3, &[1.5], 0.0).re, 3.375, epsilon = 1e-14);
        assert_eq!(divided_difference(Kernel::Power { k: 1 }, &[0.1, 0.2, 0.3], 0.0), C64::default());
    }

    #[test]
    fn dephasing_kernel_matches_newton() {
        let kern = Kernel::PowerDephasing { k: 2, t: 0.9, theta: 0.3 };
        let x = [-0.8, 0.1, 1.2, 2.0];
        let want = newton(&|v| kern.value(v), &x);
        assert_abs_diff_eq!((divided_difference(kern, &x, 0.0) - want).norm(), 0.0, epsilon = 1e-12);
        let plain = Kernel::PowerDephasing { k: 0, t: 0.9, theta: 0.0 };
        let a = divided_difference(plain, &x, 0.0);
        let b = divided_difference(Kernel::Exp { t: 0.9 }, &x, 0.0);
        assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn path_sum_matches_explicit_enumeration() {
        let energies = [0.0, 0.7, -0.4];
        let h = DenseOperator::from_fn(3, 3, |i, j| c(0.1 * (i + 2 * j) as f64 + 0.05, 0.05 * (i as f64 - j as f64)));
        let t = 0.6;
        let engine = PathSum::new(&energies, &h, DEFAULT_CONFLUENCE_TOL).unwrap();
        let a2 = engine.term(2, Kernel::Exp { t }, 1 << 20).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let mut want = C64::default();
                for m in 0..3 {
                    want += divided_difference_exp(&[energies[a], energies[m], energies[b]], t) * h[(a, m)] * h[(m, b)];
                }
                assert_abs_diff_eq!((a2[(a, b)] - want).norm(), 0.0, epsilon = 1e-14);
            }
        }
        assert_eq!(engine.path_count(2), 27);
        assert!(matches!(engine.term(2, Kernel::Exp { t }, 10), Err(Error::PathBudget { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn permutation_invariant(
            nodes in proptest::collection::vec(-3.0f64..3.0, 1..7),
            t in -4.0f64..4.0,
            seed in any::<u64>(),
        ) {
            let base = divided_difference_exp(&nodes, t);
            let mut shuffled = nodes.clone();
            let n = shuffled.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert!((divided_difference_exp(&shuffled, t) - base).norm() < 1e-10);
        }

        #[test]
        fn continuous_near_confluence(
            center in -2.0f64..2.0,
            mult in 2usize..6,
            others in proptest::collection::vec(-2.0f64..2.0, 0..2),
            t in 0.1f64..5.0,
        ) {
            let mut nodes = vec![center; mult];
            nodes.extend(others);
            let l = nodes.len() - 1;
            let base = divided_difference_exp(&nodes, t);
            let mut moved = nodes.clone();
            moved[0] += 1e-6;
            let fact: f64 = (1..=l).map(|k| k as f64).product();
            let bound = 1e-4 * t.powi(l as i32 + 1) / fact;
            prop_assert!((divided_difference_exp(&moved, t) - base).norm() < bound);
        }
    }
}
