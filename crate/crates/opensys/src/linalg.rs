//! Dense complex linear algebra for composite system–environment spaces.
//!
//! Composite indices are flattened with the system index slow:
//! `flat = gamma * dim_e + v`. Every module relies on this, and it is what
//! makes the partial trace over the environment a sum over diagonal blocks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
/// Square complex matrix. Hamiltonians, states and propagator terms all use it.
pub type DenseOperator = DMatrix<C64>;

pub const DEFAULT_DIM_BUDGET: usize = 4096;

pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// A `(gamma, v)` label pair of the composite space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CompositeIndex {
    pub gamma: usize,
    pub v: usize,
}

impl CompositeIndex {
    pub fn flat(self, dim_e: usize) -> usize {
        self.gamma * dim_e + self.v
    }

    pub fn from_flat(flat: usize, dim_e: usize) -> Self {
        CompositeIndex { gamma: flat / dim_e, v: flat % dim_e }
    }
}

pub fn identity(n: usize) -> DenseOperator {
    DenseOperator::identity(n, n)
}

pub fn zeros(n: usize) -> DenseOperator {
    DenseOperator::zeros(n, n)
}

pub fn diag(values: &[C64]) -> DenseOperator {
    DenseOperator::from_diagonal(&DVector::from_column_slice(values))
}

pub fn diag_real(values: &[f64]) -> DenseOperator {
    DenseOperator::from_fn(values.len(), values.len(), |i, j| {
        if i == j {
            c(values[i], 0.0)
        } else {
            C64::default()
        }
    })
}

pub fn ensure_square(a: &DenseOperator, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{what} is {}x{}, expected square",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

pub fn ensure_finite(a: &DenseOperator, what: &str) -> Result<()> {
    if a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn tensor_product(a: &DenseOperator, b: &DenseOperator) -> Result<DenseOperator> {
    tensor_product_within(a, b, DEFAULT_DIM_BUDGET)
}

pub fn tensor_product_within(
    a: &DenseOperator,
    b: &DenseOperator,
    budget: usize,
) -> Result<DenseOperator> {
    ensure_square(a, "left factor")?;
    ensure_square(b, "right factor")?;
    let requested = a.nrows().saturating_mul(b.nrows());
    if requested > budget {
        return Err(Error::DimensionBudget { requested, budget });
    }
    Ok(a.kronecker(b))
}

/// `rho_S(g, g') = sum_v rho((g, v), (g', v))`.
pub fn partial_trace_env(rho: &DenseOperator, dim_s: usize, dim_e: usize) -> Result<DenseOperator> {
    ensure_square(rho, "composite operator")?;
    if rho.nrows() != dim_s * dim_e {
        return Err(Error::DimensionMismatch(format!(
            "operator of dimension {} cannot be split as {dim_s} x {dim_e}",
            rho.nrows()
        )));
    }
    Ok(DenseOperator::from_fn(dim_s, dim_s, |g, h| {
        let mut acc = C64::default();
        for v in 0..dim_e {
            acc += rho[(g * dim_e + v, h * dim_e + v)];
        }
        acc
    }))
}

/// `rho_E(v, v') = sum_g rho((g, v), (g, v'))`.
pub fn partial_trace_sys(rho: &DenseOperator, dim_s: usize, dim_e: usize) -> Result<DenseOperator> {
    ensure_square(rho, "composite operator")?;
    if rho.nrows() != dim_s * dim_e {
        return Err(Error::DimensionMismatch(format!(
            "operator of dimension {} cannot be split as {dim_s} x {dim_e}",
            rho.nrows()
        )));
    }
    Ok(DenseOperator::from_fn(dim_e, dim_e, |v, w| {
        let mut acc = C64::default();
        for g in 0..dim_s {
            acc += rho[(g * dim_e + v, g * dim_e + w)];
        }
        acc
    }))
}

pub fn commutator(a: &DenseOperator, b: &DenseOperator) -> DenseOperator {
    a * b - b * a
}

pub fn anticommutator(a: &DenseOperator, b: &DenseOperator) -> DenseOperator {
    a * b + b * a
}

pub fn max_abs(a: &DenseOperator) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

/// `max |A - A^dagger|` over entries.
pub fn hermiticity_defect(a: &DenseOperator) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn hermitian_part(a: &DenseOperator) -> DenseOperator {
    (a + a.adjoint()) * c(0.5, 0.0)
}

pub fn trace(a: &DenseOperator) -> C64 {
    a.diagonal().iter().sum()
}

pub fn frobenius(a: &DenseOperator) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest singular value, computed through the eigenvalues of `A^dagger A`.
pub fn spectral_norm(a: &DenseOperator) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().singular_values().iter().fold(0.0, |m: f64, s| m.max(*s))
}

/// Eigenvalues in ascending order and the matching unitary of column eigenvectors.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: DenseOperator,
}

impl Eigen {
    /// `V f(Lambda) V^dagger` for a scalar function of the eigenvalues.
    pub fn apply(&self, f: impl Fn(f64) -> C64) -> DenseOperator {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let fj = f(self.values[j]);
            for i in 0..n {
                scaled[(i, j)] *= fj;
            }
        }
        scaled * self.vectors.adjoint()
    }
}

const DEGENERACY_RELATIVE_GAP: f64 = 1e-9;

/// Hermitian eigendecomposition with a reproducible basis.
///
/// Columns are sorted by eigenvalue. Inside a numerically degenerate cluster
/// (gap below `1e-9` of the spectral width) the eigenspace is rebuilt from the
/// computational basis vectors it contains, so the chosen vectors do not
/// depend on how the iterative solver happened to rotate the subspace. Each
/// column is phase-fixed so its first nonzero component is real and positive,
/// and columns within a cluster are ordered by decreasing magnitude of that
/// component.
pub fn hermitian_eigendecomposition(h: &DenseOperator) -> Result<Eigen> {
    ensure_square(h, "hamiltonian")?;
    ensure_finite(h, "hamiltonian")?;
    let n = h.nrows();
    if n == 0 {
        return Ok(Eigen { values: vec![], vectors: zeros(0) });
    }
    let scale = max_abs(h).max(1.0);
    let defect = hermiticity_defect(h);
    if defect > 1e-10 * scale {
        return Err(Error::NotHermitian(defect));
    }
    let se = SymmetricEigen::try_new(hermitian_part(h), f64::EPSILON, 0).ok_or(Error::EigenFailed)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]).then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&k| se.eigenvalues[k]).collect();
    let mut vectors = DenseOperator::from_fn(n, n, |i, j| se.eigenvectors[(i, order[j])]);

    let width = values[n - 1] - values[0];
    let gap = DEGENERACY_RELATIVE_GAP * width;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[end] - values[end - 1] <= gap {
            end += 1;
        }
        if end - start > 1 {
            canonicalize_cluster(&mut vectors, start, end);
        }
        start = end;
    }
    for j in 0..n {
        phase_fix(&mut vectors, j);
    }
    // order columns inside clusters by the magnitude of their leading component
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[end] - values[end - 1] <= gap {
            end += 1;
        }
        if end - start > 1 {
            let mut cols: Vec<usize> = (start..end).collect();
            cols.sort_by(|&a, &b| {
                let ka = leading_component(&vectors, a);
                let kb = leading_component(&vectors, b);
                kb.1.total_cmp(&ka.1).then(ka.0.cmp(&kb.0)).then(a.cmp(&b))
            });
            let snapshot = vectors.clone();
            for (slot, &src) in cols.iter().enumerate() {
                vectors.set_column(start + slot, &snapshot.column(src));
            }
        }
        start = end;
    }
    Ok(Eigen { values, vectors })
}

const LEADING_THRESHOLD: f64 = 1e-10;

fn leading_component(v: &DenseOperator, col: usize) -> (usize, f64) {
    for i in 0..v.nrows() {
        let m = v[(i, col)].norm();
        if m > LEADING_THRESHOLD {
            return (i, m);
        }
    }
    (v.nrows(), 0.0)
}

fn phase_fix(v: &mut DenseOperator, col: usize) {
    let (i, m) = leading_component(v, col);
    if m == 0.0 {
        return;
    }
    let phase = v[(i, col)].conj() / m;
    for r in 0..v.nrows() {
        v[(r, col)] *= phase;
    }
    v[(i, col)] = c(v[(i, col)].re, 0.0);
}

/// Replace columns `start..end` by a Gram–Schmidt basis of the projections of
/// computational basis vectors onto the same subspace.
fn canonicalize_cluster(v: &mut DenseOperator, start: usize, end: usize) {
    let n = v.nrows();
    let m = end - start;
    let block = v.columns(start, m).into_owned();
    let projector = &block * block.adjoint();
    let mut residual: Vec<DVector<C64>> = (0..n).map(|i| projector.column(i).into_owned()).collect();
    let mut used = vec![false; n];
    let mut accepted: Vec<DVector<C64>> = Vec::with_capacity(m);
    while accepted.len() < m {
        let norms: Vec<f64> = residual.iter().map(|r| r.norm()).collect();
        let best = (0..n).filter(|&i| !used[i]).map(|i| norms[i]).fold(0.0, f64::max);
        if best < 1e-8 {
            // numerical trouble; keep the solver's columns for the remainder
            break;
        }
        let pick = (0..n).find(|&i| !used[i] && norms[i] >= 0.5 * best).unwrap();
        used[pick] = true;
        let q = &residual[pick] / c(norms[pick], 0.0);
        for (i, r) in residual.iter_mut().enumerate() {
            if !used[i] {
                let overlap = q.dotc(r);
                *r -= &q * overlap;
            }
        }
        // a second orthogonalization pass keeps the accepted set orthonormal
        let mut q2 = q.clone();
        for a in &accepted {
            let overlap = a.dotc(&q2);
            q2 -= a * overlap;
        }
        let nq = q2.norm();
        accepted.push(q2 / c(nq, 0.0));
    }
    if accepted.len() == m {
        for (k, col) in accepted.iter().enumerate() {
            v.set_column(start + k, col);
        }
    }
}

pub fn trace_distance_ops(a: &DenseOperator, b: &DenseOperator) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "trace distance between {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let diff = a - b;
    if diff.is_empty() {
        return Ok(0.0);
    }
    Ok(0.5 * diff.singular_values().iter().sum::<f64>())
}

pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    trace_distance_ops(a.op(), b.op())
}

/// A density matrix together with the tolerance its defining properties were
/// checked against.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    op: DenseOperator,
    tolerance: f64,
}

impl DensityMatrix {
    pub const DEFAULT_TOLERANCE: f64 = 1e-9;

    pub fn new(op: DenseOperator) -> Result<Self> {
        Self::with_tolerance(op, Self::DEFAULT_TOLERANCE)
    }

    pub fn with_tolerance(op: DenseOperator, tolerance: f64) -> Result<Self> {
        let rho = DensityMatrix { op, tolerance };
        rho.validate()?;
        Ok(rho)
    }

    /// Wrap an operator produced by an approximate method. Truncated series and
    /// master equations need not be exactly positive or normalized, so nothing
    /// beyond squareness is checked; call [`DensityMatrix::validate`] if needed.
    pub fn new_unchecked(op: DenseOperator) -> Self {
        debug_assert_eq!(op.nrows(), op.ncols());
        DensityMatrix { op, tolerance: Self::DEFAULT_TOLERANCE }
    }

    pub fn pure(psi: &DVector<C64>) -> Result<Self> {
        let norm = psi.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidState("state vector has zero or non-finite norm".into()));
        }
        let unit = psi / c(norm, 0.0);
        Ok(DensityMatrix { op: &unit * unit.adjoint(), tolerance: Self::DEFAULT_TOLERANCE })
    }

    pub fn maximally_mixed(n: usize) -> Self {
        DensityMatrix {
            op: identity(n) / c(n as f64, 0.0),
            tolerance: Self::DEFAULT_TOLERANCE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_square(&self.op, "density matrix")?;
        ensure_finite(&self.op, "density matrix")?;
        let tol = self.tolerance;
        let herm = hermiticity_defect(&self.op);
        if herm > tol {
            return Err(Error::InvalidState(format!("not hermitian (defect {herm:.3e})")));
        }
        let tr = trace(&self.op);
        if (tr - c(1.0, 0.0)).norm() > tol {
            return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
        }
        let lowest = self.min_eigenvalue()?;
        if lowest < -tol {
            return Err(Error::InvalidState(format!("negative eigenvalue {lowest:.3e}")));
        }
        Ok(())
    }

    pub fn op(&self) -> &DenseOperator {
        &self.op
    }

    pub fn into_op(self) -> DenseOperator {
        self.op
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn dim(&self) -> usize {
        self.op.nrows()
    }

    pub fn trace(&self) -> C64 {
        trace(&self.op)
    }

    pub fn purity(&self) -> f64 {
        // Tr(rho^2) = sum |rho_ij|^2 for hermitian rho
        (&self.op * &self.op).diagonal().iter().map(|z| z.re).sum()
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        if self.op.is_empty() {
            return Ok(0.0);
        }
        let se = SymmetricEigen::try_new(hermitian_part(&self.op), f64::EPSILON, 0)
            .ok_or(Error::EigenFailed)?;
        Ok(se.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
    }

    pub fn partial_trace_env(&self, dim_s: usize, dim_e: usize) -> Result<DensityMatrix> {
        Ok(DensityMatrix { op: partial_trace_env(&self.op, dim_s, dim_e)?, tolerance: self.tolerance })
    }

    pub fn tensor(&self, other: &DensityMatrix) -> Result<DensityMatrix> {
        Ok(DensityMatrix {
            op: tensor_product(&self.op, &other.op)?,
            tolerance: self.tolerance.max(other.tolerance),
        })
    }
}
