//! System–environment separated representation (SESR).
//!
//! The total Hamiltonian is split into a solvable part
//! `H_tot0 = h_S0 (x) I + I (x) h_E0 + sum_m S_m0 (x) B_m0` and a perturbation
//! `H_tot1`. When `h_S0` commutes with every `S_m0` (and `h_E0` with every
//! `B_m0`), `H_tot0` is diagonal in a product basis `phi^g (x) chi^v`, with
//! energies `E_gv = E_g + eps_v + sum_m s_mg r_mv`. Everything downstream
//! works with matrix elements in that basis.

use crate::divdiff::STRUCTURAL_ZERO;
use crate::error::{Error, Result};
use crate::linalg::{
    c, commutator, diag_real, ensure_square, frobenius, hermitian_eigendecomposition, hermiticity_defect,
    identity, max_abs, tensor_product, DenseOperator, C64,
};

const COMMUTE_TOL: f64 = 1e-10;
const DIAGONAL_TOL: f64 = 1e-9;

/// `H_SE = sum_m S_m (x) B_m`.
#[derive(Clone, Debug, Default)]
pub struct CouplingDecomposition {
    pub terms: Vec<(DenseOperator, DenseOperator)>,
}

impl CouplingDecomposition {
    pub fn new(terms: Vec<(DenseOperator, DenseOperator)>) -> Self {
        CouplingDecomposition { terms }
    }

    pub fn assemble(&self, dim_s: usize, dim_e: usize) -> Result<DenseOperator> {
        let mut total = DenseOperator::zeros(dim_s * dim_e, dim_s * dim_e);
        for (s, b) in &self.terms {
            if s.nrows() != dim_s || b.nrows() != dim_e {
                return Err(Error::DimensionMismatch(format!(
                    "coupling term {}x{} (x) {}x{} on a {dim_s} x {dim_e} space",
                    s.nrows(),
                    s.ncols(),
                    b.nrows(),
                    b.ncols()
                )));
            }
            total += tensor_product(s, b)?;
        }
        let defect = hermiticity_defect(&total);
        if defect > COMMUTE_TOL * max_abs(&total).max(1.0) {
            return Err(Error::NotHermitian(defect));
        }
        Ok(total)
    }
}

#[derive(Clone, Debug)]
pub struct HamiltonianSplit {
    pub h_s0: DenseOperator,
    pub h_e0: DenseOperator,
    pub coupling0: CouplingDecomposition,
    /// Composite-space part moved into `H_tot0` by a redivision. It is
    /// diagonal in the basis that produced it and zero for a fresh split.
    pub h_tot0_shift: DenseOperator,
    pub h_tot1: DenseOperator,
}

impl HamiltonianSplit {
    pub fn new(
        h_s0: DenseOperator,
        h_e0: DenseOperator,
        coupling0: CouplingDecomposition,
        h_tot1: DenseOperator,
    ) -> Result<Self> {
        ensure_square(&h_s0, "h_S0")?;
        ensure_square(&h_e0, "h_E0")?;
        ensure_square(&h_tot1, "H_tot1")?;
        let dim = h_s0.nrows() * h_e0.nrows();
        if h_tot1.nrows() != dim {
            return Err(Error::DimensionMismatch(format!(
                "H_tot1 has dimension {} but the product space has {dim}",
                h_tot1.nrows()
            )));
        }
        for (name, op) in [("h_S0", &h_s0), ("h_E0", &h_e0), ("H_tot1", &h_tot1)] {
            let defect = hermiticity_defect(op);
            if defect > COMMUTE_TOL * max_abs(op).max(1.0) {
                return Err(Error::Invalid(format!("{name} is not hermitian (defect {defect:.3e})")));
            }
        }
        coupling0.assemble(h_s0.nrows(), h_e0.nrows())?;
        Ok(HamiltonianSplit { h_s0, h_e0, coupling0, h_tot0_shift: DenseOperator::zeros(dim, dim), h_tot1 })
    }

    pub fn dim_s(&self) -> usize {
        self.h_s0.nrows()
    }

    pub fn dim_e(&self) -> usize {
        self.h_e0.nrows()
    }

    pub fn h_tot0(&self) -> Result<DenseOperator> {
        let (ds, de) = (self.dim_s(), self.dim_e());
        Ok(tensor_product(&self.h_s0, &identity(de))?
            + tensor_product(&identity(ds), &self.h_e0)?
            + self.coupling0.assemble(ds, de)?
            + &self.h_tot0_shift)
    }

    pub fn h_tot(&self) -> Result<DenseOperator> {
        Ok(self.h_tot0()? + &self.h_tot1)
    }

    /// `[h_S0, S_m0] = 0` and `[h_E0, B_m0] = 0` for every term, and the
    /// factors on each side commute among themselves so they share an
    /// eigenbasis.
    pub fn check_commuting(&self) -> Result<()> {
        let side = |name: &str, h: &DenseOperator, ops: Vec<&DenseOperator>| -> Result<()> {
            let mut all = vec![h];
            all.extend(ops);
            for (i, a) in all.iter().enumerate() {
                let defect = hermiticity_defect(a);
                if defect > COMMUTE_TOL * max_abs(a).max(1.0) {
                    return Err(Error::Unsolvable(format!(
                        "{name} factor {i} of H_tot0 is not hermitian"
                    )));
                }
                for b in &all[i + 1..] {
                    let scale = (max_abs(a) * max_abs(b)).max(1.0);
                    let defect = max_abs(&commutator(a, b));
                    if defect > COMMUTE_TOL * scale {
                        return Err(Error::Unsolvable(format!(
                            "{name} operators do not commute (|[A, B]| = {defect:.3e})"
                        )));
                    }
                }
            }
            Ok(())
        };
        side("system", &self.h_s0, self.coupling0.terms.iter().map(|(s, _)| s).collect())?;
        side("environment", &self.h_e0, self.coupling0.terms.iter().map(|(_, b)| b).collect())
    }
}

/// The unitary `U_S` and `U_E` whose product is the SESR basis change.
#[derive(Clone, Debug)]
pub struct ProductFactors {
    pub system_vectors: DenseOperator,
    pub env_vectors: DenseOperator,
}

#[derive(Clone, Debug)]
pub struct SesrBasis {
    pub dim_s: usize,
    pub dim_e: usize,
    /// `E_{gv}` at flat index `g * dim_e + v`.
    pub energies: Vec<f64>,
    /// Columns are the SESR basis vectors in the computational product basis.
    pub basis_change: DenseOperator,
    /// Present while the basis is still of product form. A degenerate-subspace
    /// rotation that mixes system and environment labels removes it.
    pub factors: Option<ProductFactors>,
}

impl SesrBasis {
    pub fn from_factors(
        system_vectors: DenseOperator,
        env_vectors: DenseOperator,
        energies: Vec<f64>,
    ) -> Result<Self> {
        let (ds, de) = (system_vectors.nrows(), env_vectors.nrows());
        if energies.len() != ds * de {
            return Err(Error::DimensionMismatch(format!(
                "{} energies for a {ds} x {de} basis",
                energies.len()
            )));
        }
        let basis_change = tensor_product(&system_vectors, &env_vectors)?;
        Ok(SesrBasis {
            dim_s: ds,
            dim_e: de,
            energies,
            basis_change,
            factors: Some(ProductFactors { system_vectors, env_vectors }),
        })
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    /// `U^dagger A U`
    pub fn to_sesr(&self, op: &DenseOperator) -> DenseOperator {
        self.basis_change.adjoint() * op * &self.basis_change
    }

    /// `U A U^dagger`
    pub fn from_sesr(&self, op: &DenseOperator) -> DenseOperator {
        &self.basis_change * op * self.basis_change.adjoint()
    }

    pub fn default_gap_tol(&self) -> f64 {
        default_gap_tol(&self.energies)
    }
}

pub fn default_gap_tol(energies: &[f64]) -> f64 {
    let lo = energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if energies.is_empty() {
        0.0
    } else {
        1e-9 * (hi - lo)
    }
}

/// Matrix of `H_tot1` in the SESR, split into its diagonal and off-diagonal
/// parts, with the current improved energies.
#[derive(Clone, Debug)]
pub struct PerturbationData {
    pub h1_diag: Vec<f64>,
    pub g1: DenseOperator,
    pub improved_energies: Vec<f64>,
    pub improved_order: u8,
}

impl PerturbationData {
    /// `h1_diag + g1`, the full perturbation matrix in the SESR.
    pub fn h1_full(&self) -> DenseOperator {
        &self.g1 + diag_real(&self.h1_diag)
    }
}

/// Weights for combining commuting operators into one with a generic
/// spectrum. Irrational-looking and distinct so accidental degeneracies of
/// the combination are unlikely.
fn mixing_weight(m: usize) -> f64 {
    1.0 / (std::f64::consts::SQRT_2 + std::f64::consts::PI * (m as f64 + 1.0))
}

fn common_eigenbasis(h: &DenseOperator, ops: &[&DenseOperator]) -> Result<DenseOperator> {
    let mut combo = h.clone();
    for (m, op) in ops.iter().enumerate() {
        combo += *op * c(mixing_weight(m), 0.0);
    }
    let eig = hermitian_eigendecomposition(&combo)?;
    // Label columns by where their weight sits, so a basis that is a
    // permutation of the computational one comes out as the identity.
    let n = combo.nrows();
    let anchor = |j: usize| {
        let col = eig.vectors.column(j);
        let top = col.iter().fold(0.0f64, |m, z| m.max(z.norm()));
        (0..n).find(|&i| col[i].norm() >= top - 1e-9).unwrap_or(0)
    };
    let mut cols: Vec<usize> = (0..n).collect();
    cols.sort_by_key(|&j| anchor(j));
    let u = DenseOperator::from_fn(n, n, |i, j| eig.vectors[(i, cols[j])]);
    for op in std::iter::once(h).chain(ops.iter().copied()) {
        let rotated = u.adjoint() * op * &u;
        let mut off = 0.0f64;
        for i in 0..rotated.nrows() {
            for j in 0..rotated.ncols() {
                if i != j {
                    off = off.max(rotated[(i, j)].norm());
                }
            }
        }
        if off > DIAGONAL_TOL * max_abs(op).max(1.0) {
            return Err(Error::NoCommonBasis(off));
        }
    }
    Ok(u)
}

fn diagonal_expectations(u: &DenseOperator, op: &DenseOperator) -> Vec<C64> {
    let rotated = u.adjoint() * op * u;
    (0..rotated.nrows()).map(|i| rotated[(i, i)]).collect()
}

pub fn build_sesr(split: &HamiltonianSplit) -> Result<SesrBasis> {
    split.check_commuting()?;
    let (ds, de) = (split.dim_s(), split.dim_e());
    let s_ops: Vec<&DenseOperator> = split.coupling0.terms.iter().map(|(s, _)| s).collect();
    let b_ops: Vec<&DenseOperator> = split.coupling0.terms.iter().map(|(_, b)| b).collect();
    let u_s = common_eigenbasis(&split.h_s0, &s_ops)?;
    let u_e = common_eigenbasis(&split.h_e0, &b_ops)?;

    let e_sys = diagonal_expectations(&u_s, &split.h_s0);
    let e_env = diagonal_expectations(&u_e, &split.h_e0);
    let s_diag: Vec<Vec<C64>> = s_ops.iter().map(|s| diagonal_expectations(&u_s, s)).collect();
    let b_diag: Vec<Vec<C64>> = b_ops.iter().map(|b| diagonal_expectations(&u_e, b)).collect();
    let mut energies = Vec::with_capacity(ds * de);
    for g in 0..ds {
        for v in 0..de {
            let mut e = e_sys[g] + e_env[v];
            for m in 0..s_ops.len() {
                e += s_diag[m][g] * b_diag[m][v];
            }
            energies.push(e.re);
        }
    }
    let mut basis = SesrBasis::from_factors(u_s, u_e, energies)?;

    // a shift left behind by an earlier redivision must stay diagonal here
    if max_abs(&split.h_tot0_shift) > 0.0 {
        let shift = basis.to_sesr(&split.h_tot0_shift);
        let scale = max_abs(&shift).max(1.0);
        for i in 0..shift.nrows() {
            for j in 0..shift.ncols() {
                if i != j && shift[(i, j)].norm() > DIAGONAL_TOL * scale {
                    return Err(Error::Unsolvable(
                        "redivision shift is not diagonal in the rebuilt product basis".into(),
                    ));
                }
            }
            basis.energies[i] += shift[(i, i)].re;
        }
    }
    Ok(basis)
}

pub fn perturbation_matrix(h_tot1: &DenseOperator, basis: &SesrBasis) -> Result<PerturbationData> {
    if h_tot1.nrows() != basis.dim() || h_tot1.ncols() != basis.dim() {
        return Err(Error::DimensionMismatch(format!(
            "H_tot1 {:?} against a basis of dimension {}",
            h_tot1.shape(),
            basis.dim()
        )));
    }
    Ok(split_perturbation(&basis.to_sesr(h_tot1), &basis.energies))
}

/// Diagonal/off-diagonal split of a perturbation already written in the SESR.
pub fn split_perturbation(h1_sesr: &DenseOperator, energies: &[f64]) -> PerturbationData {
    let n = h1_sesr.nrows();
    let h1_diag: Vec<f64> = (0..n).map(|i| h1_sesr[(i, i)].re).collect();
    let g1 = DenseOperator::from_fn(n, n, |i, j| {
        if i == j {
            C64::default()
        } else {
            0.5 * (h1_sesr[(i, j)] + h1_sesr[(j, i)].conj())
        }
    });
    let improved_energies = energies.iter().zip(&h1_diag).map(|(e, h)| e + h).collect();
    PerturbationData { h1_diag, g1, improved_energies, improved_order: 1 }
}

/// Move the SESR-diagonal part of `H_tot1` into `H_tot0`.
pub fn hamiltonian_redivision(
    split: &HamiltonianSplit,
    basis: &SesrBasis,
) -> Result<(HamiltonianSplit, SesrBasis, PerturbationData)> {
    let pert = perturbation_matrix(&split.h_tot1, basis)?;
    let moved = basis.from_sesr(&diag_real(&pert.h1_diag));
    let mut new_split = split.clone();
    new_split.h_tot0_shift += &moved;
    new_split.h_tot1 -= &moved;
    let mut new_basis = basis.clone();
    for (e, h) in new_basis.energies.iter_mut().zip(&pert.h1_diag) {
        *e += h;
    }
    let n = basis.dim();
    let new_pert = PerturbationData {
        h1_diag: vec![0.0; n],
        g1: pert.g1,
        improved_energies: new_basis.energies.clone(),
        improved_order: 1,
    };
    Ok((new_split, new_basis, new_pert))
}

/// Redivision for a perturbation already written in the SESR: fold its
/// diagonal into the energies and, if the remainder couples degenerate levels,
/// rotate those subspaces and fold again. Fails when a coupling between
/// degenerate levels survives the rotation.
pub fn redivide_in_basis(basis: &SesrBasis, h1_sesr: &DenseOperator) -> Result<(SesrBasis, PerturbationData)> {
    if h1_sesr.nrows() != basis.dim() || h1_sesr.ncols() != basis.dim() {
        return Err(Error::DimensionMismatch(format!(
            "perturbation {:?} against a basis of dimension {}",
            h1_sesr.shape(),
            basis.dim()
        )));
    }
    let fold = |basis: &SesrBasis, pert: PerturbationData| {
        let mut b = basis.clone();
        for (e, h) in b.energies.iter_mut().zip(&pert.h1_diag) {
            *e += h;
        }
        let n = b.dim();
        let p = PerturbationData {
            h1_diag: vec![0.0; n],
            g1: pert.g1,
            improved_energies: b.energies.clone(),
            improved_order: 1,
        };
        (b, p)
    };
    let (mut b, mut p) = fold(basis, split_perturbation(h1_sesr, &basis.energies));
    if !check_degenerate_offdiagonals(&b, &p, b.default_gap_tol()).ok {
        let (rotated, rotated_pert) = diagonalize_degenerate_subspaces(&b, &p, b.default_gap_tol())?;
        (b, p) = fold(&rotated, rotated_pert);
        let report = check_degenerate_offdiagonals(&b, &p, b.default_gap_tol());
        if !report.ok {
            let shown: Vec<_> = report.offending.iter().take(4).collect();
            return Err(Error::Unsupported(format!(
                "perturbation still couples degenerate levels {shown:?} after diagonalizing the degenerate subspaces"
            )));
        }
    }
    Ok((b, p))
}

/// Runs of levels whose consecutive gaps are within `gap_tol`, as lists of
/// flat indices.
pub fn degenerate_clusters(energies: &[f64], gap_tol: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..energies.len()).collect();
    order.sort_by(|&a, &b| energies[a].total_cmp(&energies[b]).then(a.cmp(&b)));
    let mut clusters = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && energies[order[end]] - energies[order[end - 1]] <= gap_tol {
            end += 1;
        }
        let mut members = order[start..end].to_vec();
        members.sort_unstable();
        clusters.push(members);
        start = end;
    }
    clusters
}

/// Diagonalize the perturbation inside each degenerate cluster.
pub fn diagonalize_degenerate_subspaces(
    basis: &SesrBasis,
    pert: &PerturbationData,
    gap_tol: f64,
) -> Result<(SesrBasis, PerturbationData)> {
    let n = basis.dim();
    let h1 = pert.h1_full();
    let mut rotation = identity(n);
    let mut rotated_any = false;
    for cluster in degenerate_clusters(&basis.energies, gap_tol) {
        if cluster.len() < 2 {
            continue;
        }
        let coupled = cluster
            .iter()
            .any(|&a| cluster.iter().any(|&b| a != b && h1[(a, b)].norm() >= STRUCTURAL_ZERO));
        if !coupled {
            continue;
        }
        let k = cluster.len();
        let block = DenseOperator::from_fn(k, k, |i, j| h1[(cluster[i], cluster[j])]);
        let eig = hermitian_eigendecomposition(&block)?;
        for i in 0..k {
            for j in 0..k {
                rotation[(cluster[i], cluster[j])] = eig.vectors[(i, j)];
            }
        }
        rotated_any = true;
    }
    if !rotated_any {
        return Ok((basis.clone(), pert.clone()));
    }
    let h1_new = rotation.adjoint() * &h1 * &rotation;
    let mut new_basis = basis.clone();
    new_basis.basis_change = &basis.basis_change * &rotation;
    new_basis.factors = None;
    Ok((new_basis, split_perturbation(&h1_new, &basis.energies)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegeneracyReport {
    pub ok: bool,
    pub max_coupling: f64,
    pub offending: Vec<(usize, usize)>,
}

pub fn check_degenerate_offdiagonals(basis: &SesrBasis, pert: &PerturbationData, gap_tol: f64) -> DegeneracyReport {
    let threshold = 1e-10 * frobenius(&pert.h1_full());
    let mut offending = Vec::new();
    let mut max_coupling = 0.0f64;
    for cluster in degenerate_clusters(&basis.energies, gap_tol) {
        for &a in &cluster {
            for &b in &cluster {
                if a < b {
                    let g = pert.g1[(a, b)].norm();
                    max_coupling = max_coupling.max(g);
                    if g > threshold && g >= STRUCTURAL_ZERO {
                        offending.push((a, b));
                    }
                }
            }
        }
    }
    DegeneracyReport { ok: offending.is_empty(), max_coupling, offending }
}

/// `E + h1 + G2 + ... + G_order`, with every `G` evaluated as its nested sum
/// over composite labels.
pub fn improved_energies(pert: &PerturbationData, energies: &[f64], order: u8) -> Result<Vec<f64>> {
    if !(1..=5).contains(&order) {
        return Err(Error::Invalid(format!("improved energy order {order} outside 1..=5")));
    }
    let n = energies.len();
    if pert.g1.nrows() != n || pert.h1_diag.len() != n {
        return Err(Error::DimensionMismatch("perturbation data and energies differ in size".into()));
    }
    let sums = EnergySums::new(&pert.g1, energies);
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut e = energies[a] + pert.h1_diag[a];
        if order >= 2 {
            e += sums.g2(a)?;
        }
        if order >= 3 {
            e += sums.g3(a)?;
        }
        if order >= 4 {
            e += sums.g4(a)?;
        }
        if order >= 5 {
            e += sums.g5(a)?;
        }
        out.push(e);
    }
    Ok(out)
}

struct EnergySums<'a> {
    g: &'a DenseOperator,
    energies: &'a [f64],
    adjacency: Vec<Vec<usize>>,
    gap_tol: f64,
}

impl<'a> EnergySums<'a> {
    fn new(g: &'a DenseOperator, energies: &'a [f64]) -> Self {
        let n = energies.len();
        let adjacency = (0..n)
            .map(|i| (0..n).filter(|&j| i != j && g[(i, j)].norm() >= STRUCTURAL_ZERO).collect())
            .collect();
        EnergySums { g, energies, adjacency, gap_tol: default_gap_tol(energies) }
    }

    fn gg(&self, i: usize, j: usize) -> C64 {
        self.g[(i, j)]
    }

    fn nonzero(&self, z: C64) -> bool {
        z.norm() >= STRUCTURAL_ZERO * STRUCTURAL_ZERO
    }

    /// `E_a - E_b`, refusing a vanishing denominator.
    fn gap(&self, a: usize, b: usize) -> Result<f64> {
        let d = self.energies[a] - self.energies[b];
        if d.abs() <= self.gap_tol {
            return Err(Error::DegenerateDenominator { a, b });
        }
        Ok(d)
    }

    fn g2(&self, a: usize) -> Result<f64> {
        let mut acc = C64::default();
        for &p in &self.adjacency[a] {
            let num = self.gg(a, p) * self.gg(p, a);
            if self.nonzero(num) {
                acc += num / self.gap(a, p)?;
            }
        }
        Ok(acc.re)
    }

    fn g3(&self, a: usize) -> Result<f64> {
        let mut acc = C64::default();
        for &p in &self.adjacency[a] {
            for &q in &self.adjacency[p] {
                let num = self.gg(a, p) * self.gg(p, q) * self.gg(q, a);
                if self.nonzero(num) {
                    acc += num / (self.gap(a, p)? * self.gap(a, q)?);
                }
            }
        }
        Ok(acc.re)
    }

    fn g4(&self, a: usize) -> Result<f64> {
        let mut chain = C64::default();
        for &p in &self.adjacency[a] {
            for &q in self.adjacency[p].iter().filter(|&&q| q != a) {
                for &r in &self.adjacency[q] {
                    let num = self.gg(a, p) * self.gg(p, q) * self.gg(q, r) * self.gg(r, a);
                    if self.nonzero(num) {
                        chain += num / (self.gap(a, p)? * self.gap(a, q)? * self.gap(a, r)?);
                    }
                }
            }
        }
        let mut back = C64::default();
        for &p in &self.adjacency[a] {
            for &q in &self.adjacency[a] {
                let num = self.gg(a, p) * self.gg(p, a) * self.gg(a, q) * self.gg(q, a);
                if self.nonzero(num) {
                    let dp = self.gap(a, p)?;
                    back += num / (dp * dp * self.gap(a, q)?);
                }
            }
        }
        Ok((chain - back).re)
    }

    fn g5(&self, a: usize) -> Result<f64> {
        let mut chain = C64::default();
        for &p in &self.adjacency[a] {
            for &q in self.adjacency[p].iter().filter(|&&q| q != a) {
                for &r in self.adjacency[q].iter().filter(|&&r| r != a) {
                    for &s in &self.adjacency[r] {
                        let num = self.gg(a, p) * self.gg(p, q) * self.gg(q, r) * self.gg(r, s) * self.gg(s, a);
                        if self.nonzero(num) {
                            chain += num
                                / (self.gap(a, p)? * self.gap(a, q)? * self.gap(a, r)? * self.gap(a, s)?);
                        }
                    }
                }
            }
        }
        let mut back = C64::default();
        for &p in &self.adjacency[a] {
            for &q in &self.adjacency[a] {
                for &r in &self.adjacency[q] {
                    let num = self.gg(a, p) * self.gg(p, a) * self.gg(a, q) * self.gg(q, r) * self.gg(r, a);
                    if self.nonzero(num) {
                        let (d1, d2, d3) = (self.gap(a, p)?, self.gap(a, q)?, self.gap(a, r)?);
                        let prod = d1 * d2 * d3;
                        back += num * (1.0 / (prod * d1) + 1.0 / (prod * d2) + 1.0 / (prod * d3));
                    }
                }
            }
        }
        Ok((chain - back).re)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{diag_real, hermitian_part, zeros};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sz() -> DenseOperator {
        diag_real(&[1.0, -1.0])
    }

    fn sx() -> DenseOperator {
        DenseOperator::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)])
    }

    fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> DenseOperator {
        hermitian_part(&DenseOperator::from_fn(n, n, |_, _| {
            c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        }))
    }

    fn random_unitary(n: usize, rng: &mut ChaCha8Rng) -> DenseOperator {
        hermitian_eigendecomposition(&random_hermitian(n, rng)).unwrap().vectors
    }

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn additive_spectrum() {
        let split = HamiltonianSplit::new(sz(), sz(), CouplingDecomposition::default(), zeros(4)).unwrap();
        let basis = build_sesr(&split).unwrap();
        assert_eq!(sorted(basis.energies.clone()), vec![-2.0, 0.0, 0.0, 2.0]);
        // each energy is E_g + eps_v for the factor it labels
        let h0 = basis.to_sesr(&split.h_tot0().unwrap());
        for i in 0..4 {
            assert_abs_diff_eq!(h0[(i, i)].re, basis.energies[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn zurek_split_in_natural_basis() {
        // sigma_z (x) (Z1 sz (x) I + Z2 I (x) sz) as the solvable coupling
        let (z1, z2) = (1.0, 0.5);
        let bz = tensor_product(&sz(), &identity(2)).unwrap() * c(z1, 0.)
            + tensor_product(&identity(2), &sz()).unwrap() * c(z2, 0.);
        let split = HamiltonianSplit::new(
            zeros(2),
            zeros(4),
            CouplingDecomposition::new(vec![(sz(), bz)]),
            zeros(8),
        )
        .unwrap();
        let basis = build_sesr(&split).unwrap();
        for ns in 0..2 {
            for ne in 0..4 {
                let (n1, n2) = (ne >> 1, ne & 1);
                let sign = |k: usize| if k == 0 { 1.0 } else { -1.0 };
                let want = sign(ns) * (sign(n1) * z1 + sign(n2) * z2);
                let got = basis.energies[ns * 4 + ne];
                assert_abs_diff_eq!(got, want, epsilon = 1e-14);
            }
        }
        assert_abs_diff_eq!(basis.energies[0], 1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(basis.energies[4], -1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(basis.energies[1], 0.5, epsilon = 1e-14);
        assert!(frobenius(&(&basis.basis_change - identity(8))) < 1e-14);
    }

    #[test]
    fn commuting_random_pair_matches_full_diagonalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (ds, de) = (3, 4);
        let us = random_unitary(ds, &mut rng);
        let ue = random_unitary(de, &mut rng);
        let on = |u: &DenseOperator, d: Vec<f64>| u * diag_real(&d) * u.adjoint();
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let hs = on(&us, r(ds));
        let he = on(&ue, r(de));
        let s0 = on(&us, r(ds));
        let b0 = on(&ue, r(de));
        let split = HamiltonianSplit::new(hs, he, CouplingDecomposition::new(vec![(s0, b0)]), zeros(ds * de)).unwrap();
        let basis = build_sesr(&split).unwrap();
        let full = hermitian_eigendecomposition(&split.h_tot0().unwrap()).unwrap();
        let got = sorted(basis.energies.clone());
        for (a, b) in got.iter().zip(&full.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let h0 = basis.to_sesr(&split.h_tot0().unwrap());
        let off = (0..12).flat_map(|i| (0..12).map(move |j| (i, j))).filter(|(i, j)| i != j);
        let worst = off.map(|(i, j)| h0[(i, j)].norm()).fold(0.0, f64::max);
        assert!(worst < 1e-9 * frobenius(&h0));
    }

    #[test]
    fn non_commuting_structure_is_rejected() {
        let split = HamiltonianSplit::new(
            sz(),
            zeros(2),
            CouplingDecomposition::new(vec![(sx(), sz())]),
            zeros(4),
        )
        .unwrap();
        assert!(matches!(build_sesr(&split), Err(Error::Unsolvable(_))));
    }

    #[test]
    fn zero_perturbation() {
        let split = HamiltonianSplit::new(sz(), sx(), CouplingDecomposition::default(), zeros(4)).unwrap();
        let basis = build_sesr(&split).unwrap();
        let pert = perturbation_matrix(&split.h_tot1, &basis).unwrap();
        assert!(pert.h1_diag.iter().all(|&h| h == 0.0));
        assert_eq!(max_abs(&pert.g1), 0.0);
        assert_eq!(pert.improved_energies, basis.energies);
    }

    #[test]
    fn redivision_of_zurek_coupling_empties_perturbation() {
        let h_se = tensor_product(&sz(), &sz()).unwrap() * c(0.7, 0.);
        let split = HamiltonianSplit::new(zeros(2), zeros(2), CouplingDecomposition::default(), h_se.clone()).unwrap();
        let basis = build_sesr(&split).unwrap();
        let pert = perturbation_matrix(&split.h_tot1, &basis).unwrap();
        assert_eq!(max_abs(&pert.g1), 0.0);
        assert_eq!(pert.h1_diag, vec![0.7, -0.7, -0.7, 0.7]);
        let (split2, basis2, pert2) = hamiltonian_redivision(&split, &basis).unwrap();
        assert!(max_abs(&split2.h_tot1) < 1e-15);
        assert!(frobenius(&(split2.h_tot0().unwrap() - &h_se)) < 1e-14);
        assert_eq!(basis2.energies, vec![0.7, -0.7, -0.7, 0.7]);
        assert!(pert2.h1_diag.iter().all(|&h| h == 0.0));
        // redivision of a split without diagonal perturbation changes nothing
        let (split3, basis3, _) = hamiltonian_redivision(&split2, &basis2).unwrap();
        assert_eq!(basis3.energies, basis2.energies);
        assert!(frobenius(&(split3.h_tot().unwrap() - &h_se)) < 1e-14);
    }

    #[test]
    fn redivision_reconstructs_total_hamiltonian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let split = HamiltonianSplit::new(
            diag_real(&[0.0, 1.3]),
            diag_real(&[-0.4, 0.2, 0.9]),
            CouplingDecomposition::default(),
            random_hermitian(6, &mut rng) * c(0.1, 0.),
        )
        .unwrap();
        let basis = build_sesr(&split).unwrap();
        let (split2, basis2, pert2) = hamiltonian_redivision(&split, &basis).unwrap();
        let total = split.h_tot().unwrap();
        assert!(frobenius(&(split2.h_tot().unwrap() - &total)) < 1e-12);
        let h0 = basis2.to_sesr(&split2.h_tot0().unwrap());
        for i in 0..6 {
            assert_abs_diff_eq!(h0[(i, i)].re, basis2.energies[i], epsilon = 1e-12);
            for j in 0..6 {
                if i != j {
                    assert!(h0[(i, j)].norm() < 1e-9);
                }
            }
        }
        assert!(hermiticity_defect(&pert2.g1) < 1e-15);
    }

    fn degenerate_toy(lambda: f64) -> (SesrBasis, PerturbationData, DenseOperator, DenseOperator) {
        // levels 0, 0, 1 with a coupling inside the degenerate pair
        let h0 = diag_real(&[0.0, 0.0, 1.0]);
        let h1 = DenseOperator::from_row_slice(
            3,
            3,
            &[c(0.2, 0.), c(0.3, 0.1), c(0.1, 0.), c(0.3, -0.1), c(-0.1, 0.), c(0.05, 0.), c(0.1, 0.), c(0.05, 0.), c(0.4, 0.)],
        ) * c(lambda, 0.);
        let split = HamiltonianSplit::new(h0.clone(), identity(1) * c(0., 0.), CouplingDecomposition::default(), h1.clone())
            .unwrap();
        let basis = build_sesr(&split).unwrap();
        let pert = perturbation_matrix(&h1, &basis).unwrap();
        (basis, pert, h0, h1)
    }

    #[test]
    fn degenerate_block_rotation_gives_first_order_splitting() {
        let (basis, pert, h0, h1) = degenerate_toy(1.0);
        let gap = basis.default_gap_tol();
        let before = check_degenerate_offdiagonals(&basis, &pert, gap);
        assert!(!before.ok);
        assert_eq!(before.offending.len(), 1);
        let (rot_basis, rot_pert) = diagonalize_degenerate_subspaces(&basis, &pert, gap).unwrap();
        assert!(check_degenerate_offdiagonals(&rot_basis, &rot_pert, gap).ok);
        assert!(rot_basis.factors.is_none());
        // exact eigenvalues of H0 + lambda H1 approach E + lambda * h1' linearly
        let mut errs = Vec::new();
        for lambda in [1e-2, 1e-3] {
            let exact = hermitian_eigendecomposition(&(&h0 + &h1 * c(lambda, 0.))).unwrap().values;
            let approx: Vec<f64> = sorted(
                rot_basis.energies.iter().zip(&rot_pert.h1_diag).map(|(e, h)| e + lambda * h).collect(),
            );
            let err = exact.iter().zip(&approx).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            errs.push(err);
        }
        // second-order remainder: a decade in lambda buys two decades
        assert!(errs[0] / errs[1] > 50.0, "{errs:?}");
    }

    #[test]
    fn nondegenerate_spectrum_is_left_alone() {
        let split = HamiltonianSplit::new(
            diag_real(&[0.0, 1.0]),
            diag_real(&[0.0, 0.3]),
            CouplingDecomposition::default(),
            tensor_product(&sx(), &sx()).unwrap() * c(0.1, 0.),
        )
        .unwrap();
        let basis = build_sesr(&split).unwrap();
        let pert = perturbation_matrix(&split.h_tot1, &basis).unwrap();
        let (b2, p2) = diagonalize_degenerate_subspaces(&basis, &pert, basis.default_gap_tol()).unwrap();
        assert!(b2.factors.is_some());
        assert_eq!(p2.g1, pert.g1);
    }

    #[test]
    fn improved_energy_single_spin_reference() {
        // mu sigma_x on the system, coupling f sigma_z: two levels per flip
        let (mu, f) = (2.0, 0.5);
        let energies = vec![mu, -mu];
        let g1 = DenseOperator::from_row_slice(2, 2, &[c(0., 0.), c(f, 0.), c(f, 0.), c(0., 0.)]);
        let pert = PerturbationData { h1_diag: vec![0.0; 2], g1, improved_energies: energies.clone(), improved_order: 1 };
        let e4 = improved_energies(&pert, &energies, 4).unwrap();
        assert_abs_diff_eq!(e4[0], 2.0 + 0.0625 - 0.0009765625, epsilon = 1e-15);
        assert!((e4[0] - (mu * mu + f * f).sqrt()).abs() < 5e-5);
        // G3 and G5 vanish on a two-level chain
        assert_eq!(improved_energies(&pert, &energies, 5).unwrap(), e4);
        assert_abs_diff_eq!(improved_energies(&pert, &energies, 3).unwrap()[0], 2.0625, epsilon = 1e-15);
    }

    #[test]
    fn zero_coupling_leaves_first_order() {
        let energies = vec![0.0, 1.0, 2.5];
        let pert = PerturbationData {
            h1_diag: vec![0.1, -0.2, 0.3],
            g1: zeros(3),
            improved_energies: vec![],
            improved_order: 1,
        };
        for order in 1..=5 {
            let e = improved_energies(&pert, &energies, order).unwrap();
            assert_eq!(e, vec![0.1, 0.8, 2.8]);
        }
    }

    #[test]
    fn second_order_matches_rayleigh_schroedinger_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let energies: Vec<f64> = vec![-1.7, -0.6, 0.2, 0.9, 1.8, 3.1];
        let g = {
            let mut m = random_hermitian(6, &mut rng);
            for i in 0..6 {
                m[(i, i)] = C64::default();
            }
            m
        };
        let pert = PerturbationData { h1_diag: vec![0.0; 6], g1: g.clone(), improved_energies: vec![], improved_order: 1 };
        let e2 = improved_energies(&pert, &energies, 2).unwrap();
        for a in 0..6 {
            let mut rs = 0.0;
            for b in 0..6 {
                if b != a {
                    rs += g[(a, b)].norm_sqr() / (energies[a] - energies[b]);
                }
            }
            assert_abs_diff_eq!(e2[a] - energies[a], rs, epsilon = 1e-13);
        }
    }

    #[test]
    fn order_n_error_scales_as_lambda_to_n_plus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let energies: Vec<f64> = vec![0.0, 1.1, 2.3, 3.2, 4.6, 5.9];
        // the G sums assume a redivided split: no diagonal perturbation
        let mut h1 = random_hermitian(6, &mut rng) * c(0.5, 0.);
        for i in 0..6 {
            h1[(i, i)] = C64::default();
        }
        for order in 2..=5u8 {
            let mut errs = Vec::new();
            for lambda in [1e-1, 1e-2] {
                let scaled = &h1 * c(lambda, 0.);
                let pert = split_perturbation(&scaled, &energies);
                let approx = sorted(improved_energies(&pert, &energies, order).unwrap());
                let exact = hermitian_eigendecomposition(&(diag_real(&energies) + scaled)).unwrap().values;
                errs.push(exact.iter().zip(&approx).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            }
            let ratio = errs[0] / errs[1].max(1e-16);
            assert!(ratio >= 10f64.powi(order as i32), "order {order}: {errs:?}");
        }
    }

    #[test]
    fn degenerate_denominator_is_reported() {
        let energies = vec![1.0, 1.0];
        let g1 = DenseOperator::from_row_slice(2, 2, &[c(0., 0.), c(0.2, 0.), c(0.2, 0.), c(0., 0.)]);
        let pert = PerturbationData { h1_diag: vec![0.0; 2], g1, improved_energies: vec![], improved_order: 1 };
        assert!(matches!(
            improved_energies(&pert, &energies, 2),
            Err(Error::DegenerateDenominator { a: 0, b: 1 })
        ));
    }
}
