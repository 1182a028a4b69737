//! Series terms of the time-evolution operator in the SESR and the density
//! matrices assembled from them.
//!
//! The exact terms are `A_l(t)`, the order-`l` part of `exp(-i (H_0 + H_1) t)`
//! written in the basis that diagonalizes `H_0`. Each element is a sum over
//! label paths of a divided difference of `exp(-i x t)` times a product of
//! perturbation elements. The improved terms `A_I0..A_I3` keep only the
//! non-secular part of those coefficients and move the secular growth into
//! the phases, which use the improved energies instead of the bare ones.

use serde::{Deserialize, Serialize};

use crate::divdiff::{Kernel, PathSum, DEFAULT_CONFLUENCE_TOL, STRUCTURAL_ZERO};
use crate::error::{Error, Result};
use crate::linalg::{
    ensure_square, hermitian_part, hermiticity_defect, partial_trace_env, DenseOperator, DensityMatrix, C64,
};
use crate::sesr::{default_gap_tol, improved_energies, redivide_in_basis, PerturbationData, SesrBasis};

pub use crate::divdiff::divided_difference_exp;

/// Highest exact order the path enumeration supports.
pub const MAX_EXACT_ORDER: usize = 6;

/// Highest improved order with a closed form.
pub const MAX_IMPROVED_ORDER: usize = 3;

/// Which third-order improved term to use.
///
/// The printed third-order term leaves out the phase of the final label, so
/// it does not vanish at `t = 0`. `Completed` adds those contributions back
/// (the non-secular coefficient of `exp(-i E_b t)`); `Printed` keeps the
/// formula as written.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThirdOrderForm {
    #[default]
    Completed,
    Printed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeriesConfig {
    /// Highest exact order `L`; every `A_k`, `k <= L`, enters both sides.
    pub max_order_exact: usize,
    /// Use `A_I0..A_I3` with `k + l <= 3` instead of the exact terms.
    pub improved: bool,
    /// Highest `G` correction in the improved energies, `1..=5`.
    pub improved_energy_order: u8,
    /// Cut the phases of `A_I1`, `A_I2`, `A_I3` at `G4`, `G3`, `G2`.
    pub per_term_energy_cutoff: bool,
    pub third_order_form: ThirdOrderForm,
    /// Largest number of label paths one exact term may enumerate.
    pub path_budget: u64,
    pub confluence_tol: f64,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        SeriesConfig {
            max_order_exact: 4,
            improved: false,
            improved_energy_order: 5,
            per_term_energy_cutoff: false,
            third_order_form: ThirdOrderForm::Completed,
            path_budget: 1 << 25,
            confluence_tol: DEFAULT_CONFLUENCE_TOL,
        }
    }
}

impl SeriesConfig {
    pub fn exact(order: usize) -> Self {
        SeriesConfig { max_order_exact: order, ..Default::default() }
    }

    pub fn improved(energy_order: u8) -> Self {
        SeriesConfig { improved: true, improved_energy_order: energy_order, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_order_exact > MAX_EXACT_ORDER {
            return Err(Error::Invalid(format!(
                "exact order {} exceeds the maximum {MAX_EXACT_ORDER}",
                self.max_order_exact
            )));
        }
        if !(1..=5).contains(&self.improved_energy_order) {
            return Err(Error::Invalid(format!(
                "improved energy order {} outside 1..=5",
                self.improved_energy_order
            )));
        }
        if !(self.confluence_tol >= 0.0 && self.confluence_tol.is_finite()) {
            return Err(Error::Invalid(format!("confluence tolerance {}", self.confluence_tol)));
        }
        Ok(())
    }
}

/// One series term at one time, as a matrix in the SESR.
#[derive(Clone, Debug)]
pub struct PropagatorTerm {
    pub order: usize,
    pub matrix: DenseOperator,
    pub time: f64,
}

/// Exact terms for a fixed set of energies and perturbation. Construction
/// sets up the path enumeration once so many times can be evaluated cheaply.
pub struct ExactSeries {
    paths: PathSum,
    max_order: usize,
    path_budget: u64,
}

impl ExactSeries {
    /// `h1_full` is the whole perturbation matrix in the SESR, diagonal included.
    pub fn new(energies: &[f64], h1_full: &DenseOperator, cfg: &SeriesConfig) -> Result<Self> {
        cfg.validate()?;
        ensure_square(h1_full, "H_tot1")?;
        Ok(ExactSeries {
            paths: PathSum::new(energies, h1_full, cfg.confluence_tol)?,
            max_order: cfg.max_order_exact,
            path_budget: cfg.path_budget,
        })
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn term(&self, order: usize, t: f64) -> Result<PropagatorTerm> {
        if order > self.max_order {
            return Err(Error::Invalid(format!(
                "term of order {order} requested from a series truncated at {}",
                self.max_order
            )));
        }
        let matrix = self.paths.term(order, Kernel::Exp { t }, self.path_budget)?;
        Ok(PropagatorTerm { order, matrix, time: t })
    }

    /// `A_0(t), ..., A_L(t)`
    pub fn terms(&self, t: f64) -> Result<Vec<PropagatorTerm>> {
        (0..=self.max_order).map(|l| self.term(l, t)).collect()
    }
}

pub fn exact_term(
    order: usize,
    basis: &SesrBasis,
    h1_full: &DenseOperator,
    t: f64,
    cfg: &SeriesConfig,
) -> Result<PropagatorTerm> {
    ExactSeries::new(&basis.energies, h1_full, cfg)?.term(order, t)
}

pub fn exact_terms(
    basis: &SesrBasis,
    h1_full: &DenseOperator,
    t: f64,
    cfg: &SeriesConfig,
) -> Result<Vec<PropagatorTerm>> {
    ExactSeries::new(&basis.energies, h1_full, cfg)?.terms(t)
}

/// Improved terms `A_I0..A_I3` for a redivided perturbation.
pub struct ImprovedSeries {
    energies: Vec<f64>,
    g1: DenseOperator,
    adjacency: Vec<Vec<usize>>,
    /// Phase energies used by the term of each order.
    phase_energies: [Vec<f64>; 4],
    gap_tol: f64,
    form: ThirdOrderForm,
}

impl ImprovedSeries {
    /// `energies` are the post-redivision `E`; `pert` must have a vanishing
    /// diagonal.
    pub fn new(energies: &[f64], pert: &PerturbationData, cfg: &SeriesConfig) -> Result<Self> {
        cfg.validate()?;
        let n = energies.len();
        if pert.g1.nrows() != n || pert.h1_diag.len() != n {
            return Err(Error::DimensionMismatch("perturbation data and energies differ in size".into()));
        }
        let scale = energies.iter().fold(1.0f64, |m, e| m.max(e.abs()));
        if pert.h1_diag.iter().any(|h| h.abs() > 1e-12 * scale) {
            return Err(Error::Invalid(
                "improved terms need a redivided perturbation (its diagonal must vanish)".into(),
            ));
        }
        let order = cfg.improved_energy_order;
        let full = improved_energies(pert, energies, order)?;
        let phase_energies = if cfg.per_term_energy_cutoff {
            [
                full.clone(),
                improved_energies(pert, energies, order.min(4))?,
                improved_energies(pert, energies, order.min(3))?,
                improved_energies(pert, energies, order.min(2))?,
            ]
        } else {
            [full.clone(), full.clone(), full.clone(), full]
        };
        let adjacency = (0..n)
            .map(|i| (0..n).filter(|&j| i != j && pert.g1[(i, j)].norm() >= STRUCTURAL_ZERO).collect())
            .collect();
        Ok(ImprovedSeries {
            energies: energies.to_vec(),
            g1: pert.g1.clone(),
            adjacency,
            phase_energies,
            gap_tol: default_gap_tol(energies),
            form: cfg.third_order_form,
        })
    }

    /// The energies in the phases of the order-`order` term.
    pub fn phase_energies(&self, order: usize) -> &[f64] {
        &self.phase_energies[order.min(MAX_IMPROVED_ORDER)]
    }

    fn gap(&self, a: usize, b: usize) -> Result<f64> {
        let d = self.energies[a] - self.energies[b];
        if d.abs() <= self.gap_tol {
            return Err(Error::DegenerateDenominator { a, b });
        }
        Ok(d)
    }

    fn g(&self, a: usize, b: usize) -> C64 {
        self.g1[(a, b)]
    }

    pub fn term(&self, order: usize, t: f64) -> Result<PropagatorTerm> {
        if order > MAX_IMPROVED_ORDER {
            return Err(Error::Unsupported(format!(
                "improved term of order {order}; only orders 0..=3 have closed forms"
            )));
        }
        let n = self.energies.len();
        let ph: Vec<C64> = self.phase_energies[order].iter().map(|e| C64::from_polar(1.0, -e * t)).collect();
        let mut out = DenseOperator::zeros(n, n);
        match order {
            0 => {
                for a in 0..n {
                    out[(a, a)] = ph[a];
                }
            }
            1 => {
                for a in 0..n {
                    for &b in &self.adjacency[a] {
                        out[(a, b)] += (ph[a] - ph[b]) / self.gap(a, b)? * self.g(a, b);
                    }
                }
            }
            2 => self.second_order(&ph, &mut out)?,
            _ => self.third_order(&ph, &mut out)?,
        }
        Ok(PropagatorTerm { order, matrix: out, time: t })
    }

    fn second_order(&self, ph: &[C64], out: &mut DenseOperator) -> Result<()> {
        for a in 0..ph.len() {
            for &p in &self.adjacency[a] {
                let dap = self.gap(a, p)?;
                out[(a, a)] -= (ph[a] - ph[p]) / (dap * dap) * self.g(a, p) * self.g(p, a);
                for &b in self.adjacency[p].iter().filter(|&&b| b != a) {
                    let (dab, dpb) = (self.gap(a, b)?, self.gap(p, b)?);
                    let coef = ph[a] / (dap * dab) - ph[p] / (dap * dpb) + ph[b] / (dab * dpb);
                    out[(a, b)] += coef * self.g(a, p) * self.g(p, b);
                }
            }
        }
        Ok(())
    }

    fn third_order(&self, ph: &[C64], out: &mut DenseOperator) -> Result<()> {
        let completed = self.form == ThirdOrderForm::Completed;
        for a in 0..ph.len() {
            for &p in &self.adjacency[a] {
                let dap = self.gap(a, p)?;
                for &q in &self.adjacency[p] {
                    let dpq = self.gap(p, q)?;
                    // closed loops a -> p -> q -> a
                    if self.g(q, a).norm() >= STRUCTURAL_ZERO {
                        let daq = self.gap(a, q)?;
                        let coef = -ph[a] / (dap * daq * daq) - ph[a] / (dap * dap * daq)
                            + ph[p] / (dap * dap * dpq)
                            - ph[q] / (daq * daq * dpq);
                        out[(a, a)] += coef * self.g(a, p) * self.g(p, q) * self.g(q, a);
                    }
                    // open paths a -> p -> q -> b
                    for &b in self.adjacency[q].iter().filter(|&&b| b != a) {
                        let (dab, dqb) = (self.gap(a, b)?, self.gap(q, b)?);
                        let mut coef = C64::default();
                        if q != a {
                            let daq = self.gap(a, q)?;
                            coef += ph[a] / (dap * daq * dab) + ph[q] / (daq * dpq * dqb);
                        }
                        if p != b {
                            let dpb = self.gap(p, b)?;
                            coef -= ph[p] / (dap * dpq * dpb);
                            if completed {
                                coef -= ph[b] / (dab * dpb * dqb);
                            }
                        } else if completed {
                            // b occurs twice on the path; its phase carries the
                            // derivative of 1 / ((x - E_a)(x - E_q)) at E_b
                            let (dba, dbq) = (-dab, -dqb);
                            coef -= ph[b] * (1.0 / (dba * dba * dbq) + 1.0 / (dba * dbq * dbq));
                        }
                        out[(a, b)] += coef * self.g(a, p) * self.g(p, q) * self.g(q, b);
                    }
                }
                // a -> p -> a -> b
                for &b in &self.adjacency[a] {
                    let dab = self.gap(a, b)?;
                    let coef = ph[a] * (1.0 / (dap * dab * dab) + 1.0 / (dap * dap * dab));
                    out[(a, b)] -= coef * self.g(a, p) * self.g(p, a) * self.g(a, b);
                }
            }
        }
        Ok(())
    }

    /// `A_I0(t), ..., A_I3(t)`
    pub fn terms(&self, t: f64) -> Result<Vec<PropagatorTerm>> {
        (0..=MAX_IMPROVED_ORDER).map(|l| self.term(l, t)).collect()
    }
}

/// `pert` must come from a redivision in `basis`; `basis.energies` are the
/// shifted energies.
pub fn improved_term(
    order: usize,
    basis: &SesrBasis,
    pert: &PerturbationData,
    t: f64,
    cfg: &SeriesConfig,
) -> Result<PropagatorTerm> {
    ImprovedSeries::new(&basis.energies, pert, cfg)?.term(order, t)
}

pub fn improved_terms(
    basis: &SesrBasis,
    pert: &PerturbationData,
    t: f64,
    cfg: &SeriesConfig,
) -> Result<Vec<PropagatorTerm>> {
    ImprovedSeries::new(&basis.energies, pert, cfg)?.terms(t)
}

/// An evolved state and how far the raw assembly was from hermitian before
/// symmetrization.
#[derive(Clone, Debug)]
pub struct Evolved {
    pub rho: DensityMatrix,
    pub asymmetry: f64,
}

enum Engine {
    Exact(ExactSeries),
    Improved(ImprovedSeries),
}

/// Series evolution of composite states for one Hamiltonian. In improved mode
/// the perturbation is redivided on construction, so [`SeriesEvolution::basis`]
/// may differ from the basis passed in.
pub struct SeriesEvolution {
    basis: SesrBasis,
    engine: Engine,
}

impl SeriesEvolution {
    pub fn new(basis: &SesrBasis, h1_full: &DenseOperator, cfg: &SeriesConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.improved {
            let (basis, pert) = redivide_in_basis(basis, h1_full)?;
            let series = ImprovedSeries::new(&basis.energies, &pert, cfg)?;
            Ok(SeriesEvolution { basis, engine: Engine::Improved(series) })
        } else {
            let series = ExactSeries::new(&basis.energies, h1_full, cfg)?;
            Ok(SeriesEvolution { basis: basis.clone(), engine: Engine::Exact(series) })
        }
    }

    pub fn basis(&self) -> &SesrBasis {
        &self.basis
    }

    /// Raw (unsymmetrized) `rho(t)` in the SESR from `rho(0)` in the SESR.
    pub fn evolve_sesr(&self, rho_sesr: &DenseOperator, t: f64) -> Result<DenseOperator> {
        if rho_sesr.nrows() != self.basis.dim() || rho_sesr.ncols() != self.basis.dim() {
            return Err(Error::DimensionMismatch(format!(
                "state {:?} for a composite space of dimension {}",
                rho_sesr.shape(),
                self.basis.dim()
            )));
        }
        match &self.engine {
            Engine::Exact(series) => {
                // all k, l <= L: the double sum factorizes
                let mut u = DenseOperator::zeros(self.basis.dim(), self.basis.dim());
                for term in series.terms(t)? {
                    u += term.matrix;
                }
                Ok(&u * rho_sesr * u.adjoint())
            }
            Engine::Improved(series) => {
                let terms = series.terms(t)?;
                let mut out = DenseOperator::zeros(self.basis.dim(), self.basis.dim());
                for k in 0..=MAX_IMPROVED_ORDER {
                    let left = &terms[k].matrix * rho_sesr;
                    for l in 0..=(MAX_IMPROVED_ORDER - k) {
                        out += &left * terms[l].matrix.adjoint();
                    }
                }
                Ok(out)
            }
        }
    }

    fn evolve_symmetrized(&self, rho0: &DensityMatrix, t: f64) -> Result<(DenseOperator, f64)> {
        let raw = self.evolve_sesr(&self.basis.to_sesr(rho0.op()), t)?;
        let asymmetry = hermiticity_defect(&raw);
        Ok((hermitian_part(&raw), asymmetry))
    }

    /// `rho_tot(t)` in the computational basis.
    pub fn total(&self, rho0: &DensityMatrix, t: f64) -> Result<Evolved> {
        let (sesr, asymmetry) = self.evolve_symmetrized(rho0, t)?;
        let op = hermitian_part(&self.basis.from_sesr(&sesr));
        Ok(Evolved { rho: DensityMatrix::new_unchecked(op), asymmetry })
    }

    /// `rho_S(t)` in the computational system basis. With a product basis the
    /// environment trace is taken directly on SESR labels and only the system
    /// factor is rotated back.
    pub fn reduced(&self, rho0: &DensityMatrix, t: f64) -> Result<Evolved> {
        let (sesr, asymmetry) = self.evolve_symmetrized(rho0, t)?;
        let (ds, de) = (self.basis.dim_s, self.basis.dim_e);
        let op = match &self.basis.factors {
            Some(f) => {
                let traced = partial_trace_env(&sesr, ds, de)?;
                &f.system_vectors * traced * f.system_vectors.adjoint()
            }
            None => partial_trace_env(&self.basis.from_sesr(&sesr), ds, de)?,
        };
        Ok(Evolved { rho: DensityMatrix::new_unchecked(hermitian_part(&op)), asymmetry })
    }
}

pub fn evolve_total(
    rho0: &DensityMatrix,
    t: f64,
    basis: &SesrBasis,
    h1_full: &DenseOperator,
    cfg: &SeriesConfig,
) -> Result<Evolved> {
    SeriesEvolution::new(basis, h1_full, cfg)?.total(rho0, t)
}

pub fn evolve_reduced(
    rho0: &DensityMatrix,
    t: f64,
    basis: &SesrBasis,
    h1_full: &DenseOperator,
    cfg: &SeriesConfig,
) -> Result<Evolved> {
    SeriesEvolution::new(basis, h1_full, cfg)?.reduced(rho0, t)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::linalg::{c, diag_real, frobenius, hermitian_eigendecomposition, trace_distance_ops};
    use crate::sesr::{build_sesr, perturbation_matrix, split_perturbation, CouplingDecomposition, HamiltonianSplit};
    use crate::testutil::{random_density, random_hermitian, rng, sx, sz};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn expm_hermitian(h: &DenseOperator, t: f64) -> DenseOperator {
        hermitian_eigendecomposition(h).unwrap().apply(|x| C64::from_polar(1.0, -x * t))
    }

    /// Split with random `h_S0`, `h_E0` and a random perturbation of
    /// Frobenius norm `strength`.
    pub(crate) fn random_model(ds: usize, de: usize, strength: f64, seed: u64) -> (HamiltonianSplit, SesrBasis, DenseOperator) {
        let mut r = rng(seed);
        let hs = random_hermitian(ds, &mut r);
        let he = random_hermitian(de, &mut r);
        let h1 = random_hermitian(ds * de, &mut r);
        let h1 = &h1 * c(strength / frobenius(&h1), 0.0);
        let split = HamiltonianSplit::new(hs, he, CouplingDecomposition::default(), h1).unwrap();
        let basis = build_sesr(&split).unwrap();
        let h1_sesr = perturbation_matrix(&split.h_tot1, &basis).unwrap().h1_full();
        (split, basis, h1_sesr)
    }

    /// Order-`l` coefficient of `exp(-i (H0 + lambda H1) t)` from the
    /// exponential of a block bidiagonal matrix: the blocks above the
    /// diagonal behave like powers of `lambda` truncated after `max_order`.
    fn dyson_block(h0: &DenseOperator, h1: &DenseOperator, t: f64, max_order: usize) -> Vec<DenseOperator> {
        let n = h0.nrows();
        let blocks = max_order + 1;
        let mut m = DenseOperator::zeros(n * blocks, n * blocks);
        for k in 0..blocks {
            m.view_mut((k * n, k * n), (n, n)).copy_from(h0);
            if k + 1 < blocks {
                m.view_mut((k * n, (k + 1) * n), (n, n)).copy_from(h1);
            }
        }
        let e = (m * c(0.0, -t)).exp();
        (0..blocks).map(|l| e.view((0, l * n), (n, n)).into_owned()).collect()
    }

    #[test]
    fn order_zero_is_the_free_phase() {
        let (_, basis, h1) = random_model(2, 3, 0.4, 1);
        let a0 = exact_term(0, &basis, &h1, 1.7, &SeriesConfig::default()).unwrap();
        for i in 0..basis.dim() {
            for j in 0..basis.dim() {
                let expected = if i == j { C64::from_polar(1.0, -basis.energies[i] * 1.7) } else { C64::default() };
                assert_abs_diff_eq!((a0.matrix[(i, j)] - expected).norm(), 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn zero_perturbation_has_no_higher_terms() {
        let (_, basis, _) = random_model(2, 2, 0.4, 2);
        let zero = DenseOperator::zeros(4, 4);
        for term in exact_terms(&basis, &zero, 2.0, &SeriesConfig::exact(5)).unwrap().iter().skip(1) {
            assert_eq!(frobenius(&term.matrix), 0.0);
        }
    }

    #[test]
    fn terms_match_block_exponential() {
        let (_, basis, h1) = random_model(2, 3, 0.8, 3);
        let h0 = diag_real(&basis.energies);
        let t = 1.3;
        let reference = dyson_block(&h0, &h1, t, 5);
        let terms = exact_terms(&basis, &h1, t, &SeriesConfig::exact(5)).unwrap();
        for (term, expected) in terms.iter().zip(&reference) {
            assert!(frobenius(&(&term.matrix - expected)) < 1e-11, "order {}", term.order);
        }
    }

    #[test]
    fn truncated_series_approaches_exponential() {
        let (_, basis, h1) = random_model(2, 2, 0.5, 4);
        let t = 1.0;
        let h = diag_real(&basis.energies) + &h1;
        let exact = expm_hermitian(&h, t);
        let mut partial = DenseOperator::zeros(4, 4);
        let mut errors = Vec::new();
        for term in exact_terms(&basis, &h1, t, &SeriesConfig::exact(6)).unwrap() {
            partial += term.matrix;
            errors.push(frobenius(&(&partial - &exact)));
        }
        assert!(errors[6] < 1e-6, "{errors:?}");
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
    }

    #[test]
    fn path_budget_is_enforced() {
        let (_, basis, h1) = random_model(2, 4, 0.3, 5);
        let cfg = SeriesConfig { max_order_exact: 3, path_budget: 100, ..Default::default() };
        assert!(matches!(exact_term(3, &basis, &h1, 1.0, &cfg), Err(Error::PathBudget { .. })));
    }

    fn two_level(mu: f64, f: f64) -> (SesrBasis, PerturbationData, DenseOperator) {
        // H = mu sz + f sx: diagonal part unperturbed, f sx the perturbation
        let split = HamiltonianSplit::new(
            &sz() * c(mu, 0.0),
            DenseOperator::identity(1, 1) * c(0.0, 0.0),
            CouplingDecomposition::default(),
            &sx() * c(f, 0.0),
        )
        .unwrap();
        let basis = build_sesr(&split).unwrap();
        let h1 = perturbation_matrix(&split.h_tot1, &basis).unwrap().h1_full();
        let (basis, pert) = redivide_in_basis(&basis, &h1).unwrap();
        let h = split.h_tot().unwrap();
        (basis, pert, h)
    }

    #[test]
    fn improved_order_zero_uses_improved_energies() {
        let (basis, pert, _) = two_level(2.0, 0.5);
        let cfg = SeriesConfig::improved(4);
        let a0 = improved_term(0, &basis, &pert, 3.0, &cfg).unwrap();
        let e = improved_energies(&pert, &basis.energies, 4).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!((a0.matrix[(i, i)] - C64::from_polar(1.0, -e[i] * 3.0)).norm(), 0.0, epsilon = 1e-15);
        }
        assert_eq!(a0.matrix[(0, 1)], C64::default());
    }

    #[test]
    fn improved_terms_vanish_without_off_diagonal_perturbation() {
        // Zurek-type coupling is diagonal in the natural basis
        let h1 = DenseOperator::from_diagonal(&nalgebra::DVector::from_vec(vec![
            c(0.7, 0.),
            c(-0.7, 0.),
            c(-0.7, 0.),
            c(0.7, 0.),
        ]));
        let split = HamiltonianSplit::new(
            DenseOperator::zeros(2, 2),
            DenseOperator::zeros(2, 2),
            CouplingDecomposition::default(),
            h1,
        )
        .unwrap();
        let basis = build_sesr(&split).unwrap();
        let (basis, pert) = redivide_in_basis(&basis, &perturbation_matrix(&split.h_tot1, &basis).unwrap().h1_full()).unwrap();
        for term in improved_terms(&basis, &pert, 4.0, &SeriesConfig::improved(5)).unwrap().iter().skip(1) {
            assert_eq!(frobenius(&term.matrix), 0.0);
        }
    }

    #[test]
    fn improved_terms_without_energy_shift_differ_from_exact_only_by_secular_parts() {
        let (_, basis, h1) = random_model(2, 2, 0.3, 6);
        // no diagonal, so no redivision happens
        let g1 = split_perturbation(&h1, &basis.energies).g1;
        let pert = split_perturbation(&g1, &basis.energies);
        let t = 1.1;
        let cfg = SeriesConfig { improved_energy_order: 1, ..SeriesConfig::exact(3) };
        let exact = exact_terms(&basis, &g1, t, &cfg).unwrap();
        let improved = improved_terms(&basis, &pert, t, &cfg).unwrap();
        let e = &basis.energies;
        let n = e.len();
        let phase: Vec<C64> = e.iter().map(|x| C64::from_polar(1.0, -x * t)).collect();
        let g2 = |a: usize| -> f64 { (0..n).filter(|&p| p != a).map(|p| (g1[(a, p)] * g1[(p, a)]).re / (e[a] - e[p])).sum() };
        let g3 = |a: usize| -> f64 {
            let mut s = C64::default();
            for p in (0..n).filter(|&p| p != a) {
                for q in (0..n).filter(|&q| q != a) {
                    s += g1[(a, p)] * g1[(p, q)] * g1[(q, a)] / ((e[a] - e[p]) * (e[a] - e[q]));
                }
            }
            s.re
        };
        let it = c(0.0, t);
        for a in 0..n {
            for b in 0..n {
                assert_abs_diff_eq!((exact[0].matrix[(a, b)] - improved[0].matrix[(a, b)]).norm(), 0.0, epsilon = 1e-14);
                assert_abs_diff_eq!((exact[1].matrix[(a, b)] - improved[1].matrix[(a, b)]).norm(), 0.0, epsilon = 1e-13);
                // expanding exp(-i (E + G2 + G3) t) supplies the remaining parts
                let mut second = improved[2].matrix[(a, b)];
                let mut third = improved[3].matrix[(a, b)];
                if a == b {
                    second -= it * phase[a] * g2(a);
                    third -= it * phase[a] * g3(a);
                } else {
                    third -= it * (phase[a] * g2(a) - phase[b] * g2(b)) / (e[a] - e[b]) * g1[(a, b)];
                }
                assert_abs_diff_eq!((exact[2].matrix[(a, b)] - second).norm(), 0.0, epsilon = 1e-12);
                assert_abs_diff_eq!((exact[3].matrix[(a, b)] - third).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn completed_third_order_vanishes_at_time_zero_and_printed_does_not() {
        let (_, basis, h1) = random_model(2, 2, 0.3, 7);
        let pert = split_perturbation(&split_perturbation(&h1, &basis.energies).g1, &basis.energies);
        let completed = improved_term(3, &basis, &pert, 0.0, &SeriesConfig::improved(5)).unwrap();
        assert!(frobenius(&completed.matrix) < 1e-12);
        let cfg = SeriesConfig { third_order_form: ThirdOrderForm::Printed, ..SeriesConfig::improved(5) };
        let printed = improved_term(3, &basis, &pert, 0.0, &cfg).unwrap();
        assert!(frobenius(&printed.matrix) > 1e-4);
    }

    /// Frobenius error of the improved propagator `sum_l A_Il` at coupling `lambda`.
    fn improved_propagator_error(lambda: f64, form: ThirdOrderForm) -> f64 {
        let (_, basis, h1) = random_model(2, 2, 1.0, 8);
        let h1 = &h1 * c(lambda, 0.0);
        let h = diag_real(&basis.energies) + &h1;
        let t = 0.7;
        let exact = expm_hermitian(&h, t);
        let (rb, pert) = redivide_in_basis(&basis, &h1).unwrap();
        let cfg = SeriesConfig { third_order_form: form, ..SeriesConfig::improved(5) };
        let mut u = DenseOperator::zeros(4, 4);
        for term in improved_terms(&rb, &pert, t, &cfg).unwrap() {
            u += term.matrix;
        }
        frobenius(&(rb.from_sesr(&u) - basis.from_sesr(&exact)))
    }

    #[test]
    fn completed_improved_propagator_is_fourth_order_accurate() {
        let ratio = improved_propagator_error(0.02, ThirdOrderForm::Completed)
            / improved_propagator_error(0.01, ThirdOrderForm::Completed);
        assert!(ratio > 13.0 && ratio < 19.0, "ratio {ratio}");
        let printed = improved_propagator_error(0.02, ThirdOrderForm::Printed)
            / improved_propagator_error(0.01, ThirdOrderForm::Printed);
        assert!(printed < 9.0, "printed ratio {printed}");
    }

    #[test]
    fn improved_beats_plain_truncation_on_two_level_toy() {
        let (basis, pert, h) = two_level(2.0, 0.5);
        let h1 = pert.h1_full();
        let rho0 = DensityMatrix::new(DenseOperator::from_row_slice(2, 2, &[c(0.5, 0.), c(0.5, 0.), c(0.5, 0.), c(0.5, 0.)])).unwrap();
        let t = 5.0;
        let u = expm_hermitian(&h, t);
        let oracle = &u * rho0.op() * u.adjoint();
        let improved = evolve_total(&rho0, t, &basis, &h1, &SeriesConfig::improved(5)).unwrap();
        // plain series with the same k + l <= 3 truncation
        let series = ExactSeries::new(&basis.energies, &h1, &SeriesConfig::exact(3)).unwrap();
        let terms = series.terms(t).unwrap();
        let r = basis.to_sesr(rho0.op());
        let mut plain = DenseOperator::zeros(2, 2);
        for k in 0..=3 {
            for l in 0..=(3 - k) {
                plain += &terms[k].matrix * &r * terms[l].matrix.adjoint();
            }
        }
        let plain = basis.from_sesr(&plain);
        let d_improved = trace_distance_ops(improved.rho.op(), &oracle).unwrap();
        let d_plain = trace_distance_ops(&hermitian_part(&plain), &oracle).unwrap();
        assert!(d_improved < d_plain, "improved {d_improved:.3e} plain {d_plain:.3e}");
    }

    #[test]
    fn evolution_at_time_zero_returns_initial_state() {
        let (split, basis, h1) = random_model(2, 2, 0.3, 9);
        let rho0 = DensityMatrix::new(random_density(4, &mut rng(10))).unwrap();
        for cfg in [SeriesConfig::exact(4), SeriesConfig::improved(5)] {
            let out = evolve_total(&rho0, 0.0, &basis, &h1, &cfg).unwrap();
            assert!(frobenius(&(out.rho.op() - rho0.op())) < 1e-13);
        }
        let _ = split;
    }

    #[test]
    fn free_evolution_without_perturbation() {
        let (split, basis, _) = random_model(2, 2, 0.3, 11);
        let rho0 = DensityMatrix::new(random_density(4, &mut rng(12))).unwrap();
        let out = evolve_total(&rho0, 2.5, &basis, &DenseOperator::zeros(4, 4), &SeriesConfig::exact(3)).unwrap();
        let u = expm_hermitian(&split.h_tot0().unwrap(), 2.5);
        assert!(frobenius(&(out.rho.op() - &u * rho0.op() * u.adjoint())) < 1e-12);
    }

    #[test]
    fn two_qubit_fourth_order_against_exponential() {
        let t = 1.5;
        let (split, basis, h1) = random_model(2, 2, 0.3 / t, 13);
        let rho0 = DensityMatrix::new(random_density(4, &mut rng(14))).unwrap();
        let out = evolve_total(&rho0, t, &basis, &h1, &SeriesConfig::exact(4)).unwrap();
        let u = expm_hermitian(&split.h_tot().unwrap(), t);
        let d = trace_distance_ops(out.rho.op(), &(&u * rho0.op() * u.adjoint())).unwrap();
        assert!(d < 1e-5, "trace distance {d:.3e}");
        assert_eq!(hermiticity_defect(out.rho.op()), 0.0);
    }

    #[test]
    fn reduced_state_matches_partial_trace_of_total() {
        let (_, basis, h1) = random_model(2, 3, 0.4, 15);
        let rho0 = DensityMatrix::new(random_density(6, &mut rng(16))).unwrap();
        for cfg in [SeriesConfig::exact(3), SeriesConfig::improved(5)] {
            let evo = SeriesEvolution::new(&basis, &h1, &cfg).unwrap();
            let total = evo.total(&rho0, 1.2).unwrap();
            let reduced = evo.reduced(&rho0, 1.2).unwrap();
            let traced = partial_trace_env(total.rho.op(), 2, 3).unwrap();
            assert!(frobenius(&(reduced.rho.op() - traced)) < 1e-12);
        }
    }

    #[test]
    fn single_spin_dephasing_coherence() {
        // H = Z sz (x) sz with both qubits in |+>
        let z = 0.8;
        let split = HamiltonianSplit::new(
            DenseOperator::zeros(2, 2),
            DenseOperator::zeros(2, 2),
            CouplingDecomposition::new(vec![(sz(), &sz() * c(z, 0.0))]),
            DenseOperator::zeros(4, 4),
        )
        .unwrap();
        let basis = build_sesr(&split).unwrap();
        let plus = DenseOperator::from_element(2, 2, c(0.5, 0.0));
        let rho0 = DensityMatrix::new(crate::linalg::tensor_product(&plus, &plus).unwrap()).unwrap();
        for t in [0.3, 1.0, 4.0] {
            let rs = evolve_reduced(&rho0, t, &basis, &DenseOperator::zeros(4, 4), &SeriesConfig::improved(5)).unwrap();
            assert_abs_diff_eq!(rs.rho.op()[(0, 1)].re, 0.5 * (2.0 * z * t).cos(), epsilon = 1e-14);
            assert_abs_diff_eq!(rs.rho.op()[(0, 1)].im, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn improved_order_above_three_is_unsupported() {
        let (basis, pert, _) = two_level(2.0, 0.5);
        assert!(matches!(
            improved_term(4, &basis, &pert, 1.0, &SeriesConfig::improved(5)),
            Err(Error::Unsupported(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn series_error_shrinks_with_order(seed in 0u64..1000) {
            let t = 1.0;
            let (split, basis, h1) = random_model(2, 2, 0.5 / t, seed);
            let exact = basis.to_sesr(&expm_hermitian(&split.h_tot().unwrap(), t));
            let mut partial = DenseOperator::zeros(4, 4);
            let mut last = f64::INFINITY;
            for term in exact_terms(&basis, &h1, t, &SeriesConfig::exact(5)).unwrap() {
                partial += term.matrix;
                let err = frobenius(&(&partial - &exact));
                prop_assert!(err < last);
                last = err;
            }
            // Dyson tail beyond order 5 in operator norm, times sqrt(dim) for Frobenius
            let x = 0.5f64;
            let head: f64 = (0..=5).map(|l| x.powi(l) / (1..=l).map(f64::from).product::<f64>()).sum();
            prop_assert!(last <= 2.0 * (x.exp() - head), "{last}");
        }
    }
}
