//! Milburn intrinsic decoherence,
//! `d rho/dt = -i[H, rho] - (theta0/2)[H, [H, rho]]`.
//!
//! The exact routes work in the eigenbasis of the full `H`, where the
//! evolution is a stamp on each matrix element. The perturbative route
//! expands the Kraus operators in the SESR with divided differences of
//! `x -> x^k g(x; t)`, `g(x; t) = exp(-i x t - theta0 x^2 t / 2)`.

use serde::{Deserialize, Serialize};

use crate::divdiff::{divided_difference, Kernel, PathSum, DEFAULT_CONFLUENCE_TOL};
use crate::error::{Error, Result};
use crate::linalg::{
    c, commutator, ensure_square, hermitian_eigendecomposition, hermitian_part, hermiticity_defect, identity,
    max_abs, partial_trace_env, DenseOperator, DensityMatrix, Eigen, C64, I,
};
use crate::sesr::SesrBasis;

/// Largest Kraus index the automatic cutoff will pick.
pub const MAX_KRAUS_INDEX: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilburnParams {
    pub theta0: f64,
    /// Target for the completeness defect of a truncated Kraus sum.
    pub kraus_cutoff_tol: f64,
}

impl Default for MilburnParams {
    fn default() -> Self {
        MilburnParams { theta0: 0.0, kraus_cutoff_tol: 1e-12 }
    }
}

impl MilburnParams {
    pub fn new(theta0: f64) -> Self {
        MilburnParams { theta0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta0.is_finite() && self.theta0 >= 0.0) {
            return Err(Error::Invalid(format!("theta0 = {} must be finite and >= 0", self.theta0)));
        }
        if !(self.kraus_cutoff_tol.is_finite() && self.kraus_cutoff_tol > 0.0) {
            return Err(Error::Invalid(format!("Kraus cutoff tolerance {} must be positive", self.kraus_cutoff_tol)));
        }
        Ok(())
    }
}

/// `g(x; t)`
pub fn dephasing_factor(x: f64, t: f64, theta0: f64) -> C64 {
    C64::from_polar((-0.5 * theta0 * x * x * t).exp(), -x * t)
}

pub fn milburn_rhs(rho: &DenseOperator, h: &DenseOperator, p: &MilburnParams) -> Result<DenseOperator> {
    p.validate()?;
    ensure_square(h, "H")?;
    if rho.shape() != h.shape() {
        return Err(Error::DimensionMismatch(format!("state {:?} for H {:?}", rho.shape(), h.shape())));
    }
    let inner = commutator(h, rho);
    Ok(&inner * (-I) - commutator(h, &inner) * c(0.5 * p.theta0, 0.0))
}

/// How a Kraus sum was truncated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KrausReport {
    pub k_max: usize,
    /// `max |sum_{k <= k_max} M_k^dagger M_k - I|`
    pub defect: f64,
}

/// Exact Milburn evolution for one Hamiltonian.
#[derive(Clone, Debug)]
pub struct MilburnEvolution {
    eigen: Eigen,
    params: MilburnParams,
}

impl MilburnEvolution {
    pub fn new(h: &DenseOperator, params: MilburnParams) -> Result<Self> {
        params.validate()?;
        Ok(MilburnEvolution { eigen: hermitian_eigendecomposition(h)?, params })
    }

    pub fn params(&self) -> &MilburnParams {
        &self.params
    }

    fn dim(&self) -> usize {
        self.eigen.values.len()
    }

    fn stamp(&self, rho: &DenseOperator, f: impl Fn(f64, f64) -> C64) -> Result<DenseOperator> {
        if rho.nrows() != self.dim() || rho.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "state {:?} for H of dimension {}",
                rho.shape(),
                self.dim()
            )));
        }
        let v = &self.eigen.vectors;
        let mut r = v.adjoint() * rho * v;
        let e = &self.eigen.values;
        for a in 0..self.dim() {
            for b in 0..self.dim() {
                r[(a, b)] *= f(e[a], e[b]);
            }
        }
        Ok(hermitian_part(&(v * r * v.adjoint())))
    }

    /// `rho_ab(t) = rho_ab(0) g(E_a - E_b; t)` in the eigenbasis of `H`.
    pub fn closed_form(&self, rho0: &DenseOperator, t: f64) -> Result<DenseOperator> {
        let theta = self.params.theta0;
        self.stamp(rho0, |ea, eb| dephasing_factor(ea - eb, t, theta))
    }

    /// `M_k(t) = sqrt((theta0 t)^k / k!) H^k exp(-i H t - theta0 H^2 t / 2)`.
    pub fn kraus_operator(&self, k: usize, t: f64) -> DenseOperator {
        let theta = self.params.theta0;
        self.eigen.apply(|e| kraus_weight(k, theta * t, e) * dephasing_factor(e, t, theta))
    }

    /// Smallest `K` whose Poisson tail bound `x^{K+1}/(K+1)!` is below the
    /// tolerance, with `x = theta0 t max E^2`.
    pub fn auto_k_max(&self, t: f64) -> Result<usize> {
        let emax = self.eigen.values.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        let x = self.params.theta0 * t.abs() * emax * emax;
        if x == 0.0 {
            return Ok(0);
        }
        let ln_tol = self.params.kraus_cutoff_tol.ln();
        let mut ln_term = x.ln(); // ln(x^1 / 1!)
        for k in 0..MAX_KRAUS_INDEX {
            if ln_term < ln_tol {
                return Ok(k);
            }
            ln_term += x.ln() - ((k + 2) as f64).ln();
        }
        Err(Error::Unsupported(format!(
            "theta0 t |H|^2 = {x:.3e} needs more than {MAX_KRAUS_INDEX} Kraus operators"
        )))
    }

    /// `max_E (1 - e^{-x} sum_{k <= K} x^k / k!)`, `x = theta0 t E^2`.
    pub fn completeness_defect(&self, t: f64, k_max: usize) -> f64 {
        let theta = self.params.theta0;
        self.eigen
            .values
            .iter()
            .map(|&e| {
                let x = theta * t * e * e;
                let mut term = (-x).exp();
                let mut sum = term;
                for k in 1..=k_max {
                    term *= x / k as f64;
                    sum += term;
                }
                (1.0 - sum).max(0.0)
            })
            .fold(0.0, f64::max)
    }

    /// `sum_{k <= K} M_k rho M_k^dagger`, with `K` picked automatically when
    /// not given. Fails when the completeness defect exceeds the tolerance.
    pub fn kraus_sum(&self, rho0: &DenseOperator, t: f64, k_max: Option<usize>) -> Result<(DenseOperator, KrausReport)> {
        if rho0.nrows() != self.dim() || rho0.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!("state {:?} for H of dimension {}", rho0.shape(), self.dim())));
        }
        let k_max = match k_max {
            Some(k) => k,
            None => self.auto_k_max(t)?,
        };
        let defect = self.completeness_defect(t, k_max);
        if defect > self.params.kraus_cutoff_tol {
            return Err(Error::KrausDefect { defect, tol: self.params.kraus_cutoff_tol, k_max });
        }
        let mut out = DenseOperator::zeros(self.dim(), self.dim());
        for k in 0..=k_max {
            let m = self.kraus_operator(k, t);
            out += &m * rho0 * m.adjoint();
        }
        Ok((hermitian_part(&out), KrausReport { k_max, defect }))
    }

    /// Explicit `sum_k M_k^dagger M_k - I` measured on the operators
    /// themselves.
    pub fn measured_completeness(&self, t: f64, k_max: usize) -> f64 {
        let mut acc = DenseOperator::zeros(self.dim(), self.dim());
        for k in 0..=k_max {
            let m = self.kraus_operator(k, t);
            acc += m.adjoint() * m;
        }
        max_abs(&(acc - identity(self.dim())))
    }
}

/// `sqrt(s^k / k!) x^k`, evaluated in logs so large `k` does not overflow.
fn kraus_weight(k: usize, s: f64, x: f64) -> C64 {
    if k == 0 {
        return c(1.0, 0.0);
    }
    if s == 0.0 || x == 0.0 {
        return C64::default();
    }
    let ln_fact: f64 = (1..=k).map(|i| (i as f64).ln()).sum();
    let ln_mag = 0.5 * (k as f64 * s.ln() - ln_fact) + k as f64 * x.abs().ln();
    let sign = if x < 0.0 && k % 2 == 1 { -1.0 } else { 1.0 };
    c(sign * ln_mag.exp(), 0.0)
}

pub fn milburn_evolve_closed_form(rho0: &DensityMatrix, t: f64, h: &DenseOperator, p: MilburnParams) -> Result<DensityMatrix> {
    Ok(DensityMatrix::new_unchecked(MilburnEvolution::new(h, p)?.closed_form(rho0.op(), t)?))
}

pub fn milburn_evolve_kraus(
    rho0: &DensityMatrix,
    t: f64,
    h: &DenseOperator,
    p: MilburnParams,
    k_max: Option<usize>,
) -> Result<(DensityMatrix, KrausReport)> {
    let (op, report) = MilburnEvolution::new(h, p)?.kraus_sum(rho0.op(), t, k_max)?;
    Ok((DensityMatrix::new_unchecked(op), report))
}

pub fn kraus_operator(k: usize, t: f64, h: &DenseOperator, p: MilburnParams) -> Result<DenseOperator> {
    Ok(MilburnEvolution::new(h, p)?.kraus_operator(k, t))
}

/// `C^K_l` over a path of energies: the `l`-th divided difference of `x -> x^K`.
pub fn binomial_coefficient_ckl(power: u32, path_energies: &[f64]) -> Result<C64> {
    if path_energies.is_empty() {
        return Err(Error::Invalid("a path has at least one energy".into()));
    }
    Ok(divided_difference(Kernel::Power { k: power }, path_energies, DEFAULT_CONFLUENCE_TOL))
}

/// Truncation of the perturbative Milburn solution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilburnOrders {
    /// Largest Kraus index.
    pub k_max: usize,
    /// Largest power of `H_tot1` in each Kraus operator.
    pub l_max: usize,
}

/// Kraus operators expanded in powers of `H_tot1` in the SESR.
pub struct MilburnSeries {
    paths: PathSum,
    basis: SesrBasis,
    params: MilburnParams,
    path_budget: u64,
}

impl MilburnSeries {
    pub fn new(basis: &SesrBasis, h1_full: &DenseOperator, params: MilburnParams, path_budget: u64) -> Result<Self> {
        params.validate()?;
        ensure_square(h1_full, "H_tot1")?;
        if hermiticity_defect(h1_full) > 1e-10 * max_abs(h1_full).max(1.0) {
            return Err(Error::NotHermitian(hermiticity_defect(h1_full)));
        }
        Ok(MilburnSeries {
            paths: PathSum::new(&basis.energies, h1_full, DEFAULT_CONFLUENCE_TOL)?,
            basis: basis.clone(),
            params,
            path_budget,
        })
    }

    /// `M_k(t)` in the SESR, summed over `H_tot1` powers `0..=l_max`.
    pub fn kraus_operator(&self, k: usize, t: f64, l_max: usize) -> Result<DenseOperator> {
        let theta = self.params.theta0;
        let n = self.basis.dim();
        let weight = kraus_weight(k, theta * t, 1.0);
        let mut out = DenseOperator::zeros(n, n);
        if weight.norm() == 0.0 {
            return Ok(out);
        }
        let kernel = Kernel::PowerDephasing { k: k as u32, t, theta };
        for l in 0..=l_max {
            out += self.paths.term(l, kernel, self.path_budget)?;
        }
        Ok(out * weight)
    }

    /// `sum_{k <= k_max} M_k rho0 M_k^dagger` in the SESR.
    pub fn evolve_sesr(&self, rho0_sesr: &DenseOperator, t: f64, orders: MilburnOrders) -> Result<DenseOperator> {
        let n = self.basis.dim();
        let mut out = DenseOperator::zeros(n, n);
        for k in 0..=orders.k_max {
            let m = self.kraus_operator(k, t, orders.l_max)?;
            out += &m * rho0_sesr * m.adjoint();
        }
        Ok(out)
    }

    /// Reduced state in the computational system basis.
    pub fn reduced(&self, rho0_tot: &DensityMatrix, t: f64, orders: MilburnOrders) -> Result<DensityMatrix> {
        if rho0_tot.dim() != self.basis.dim() {
            return Err(Error::DimensionMismatch(format!(
                "state of dimension {} for a composite space of dimension {}",
                rho0_tot.dim(),
                self.basis.dim()
            )));
        }
        let sesr = hermitian_part(&self.evolve_sesr(&self.basis.to_sesr(rho0_tot.op()), t, orders)?);
        let (ds, de) = (self.basis.dim_s, self.basis.dim_e);
        let op = match &self.basis.factors {
            Some(f) => &f.system_vectors * partial_trace_env(&sesr, ds, de)? * f.system_vectors.adjoint(),
            None => partial_trace_env(&self.basis.from_sesr(&sesr), ds, de)?,
        };
        Ok(DensityMatrix::new_unchecked(hermitian_part(&op)))
    }
}

pub fn milburn_perturbative_reduced(
    rho0_tot: &DensityMatrix,
    t: f64,
    basis: &SesrBasis,
    h1_full: &DenseOperator,
    p: MilburnParams,
    orders: MilburnOrders,
) -> Result<DensityMatrix> {
    MilburnSeries::new(basis, h1_full, p, crate::propagator::SeriesConfig::default().path_budget)?
        .reduced(rho0_tot, t, orders)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{diag_real, trace, trace_distance_ops};
    use crate::models::{pauli_x, pauli_z};
    use crate::oracle::ExactEvolution;
    use crate::propagator::tests::random_model;
    use crate::propagator::{SeriesConfig, SeriesEvolution};
    use crate::testutil::{random_density, random_hermitian, rng};
    use proptest::prelude::*;

    #[test]
    fn rhs_limits_and_commutator_oracle() {
        let mut r = rng(1);
        let h = random_hermitian(4, &mut r);
        let rho = random_density(4, &mut r);
        let free = milburn_rhs(&rho, &h, &MilburnParams::new(0.0)).unwrap();
        assert!(max_abs(&(free - (&h * &rho - &rho * &h) * (-I))) < 1e-14);
        let stationary = ExactEvolution::new(&h).unwrap().eigen().apply(|e| c((-e).exp(), 0.0));
        assert!(max_abs(&milburn_rhs(&stationary, &h, &MilburnParams::new(0.7)).unwrap()) < 1e-13);
        // written out term by term
        let theta = 0.3;
        let expect = (&h * &rho - &rho * &h) * (-I)
            - (&h * &h * &rho - &h * &rho * &h * c(2.0, 0.0) + &rho * &h * &h) * c(theta / 2.0, 0.0);
        let got = milburn_rhs(&rho, &h, &MilburnParams::new(theta)).unwrap();
        assert!(max_abs(&(got.clone() - expect)) < 1e-13);
        assert!(trace(&got).norm() < 1e-13);
    }

    #[test]
    fn kraus_operator_examples() {
        let ev = MilburnEvolution::new(&pauli_z(), MilburnParams::new(0.0)).unwrap();
        let m0 = ev.kraus_operator(0, 0.8);
        let u = ExactEvolution::new(&pauli_z()).unwrap().propagator(0.8);
        assert!(max_abs(&(m0 - u)) < 1e-15);

        let ev = MilburnEvolution::new(&pauli_z(), MilburnParams::new(0.1)).unwrap();
        let m1 = ev.kraus_operator(1, 1.0);
        let s = 0.1f64.sqrt();
        let expect = DenseOperator::from_row_slice(
            2,
            2,
            &[C64::from_polar(s * (-0.05f64).exp(), -1.0), c(0.0, 0.0), c(0.0, 0.0), C64::from_polar(-s * (-0.05f64).exp(), 1.0)],
        );
        assert!(max_abs(&(m1 - expect)) < 1e-15);
    }

    #[test]
    fn completeness_is_monitored() {
        let mut r = rng(2);
        let h = random_hermitian(4, &mut r);
        let ev = MilburnEvolution::new(&h, MilburnParams::new(0.4)).unwrap();
        let t = 1.5;
        let k = ev.auto_k_max(t).unwrap();
        assert!(ev.completeness_defect(t, k) < 1e-12);
        assert!(ev.measured_completeness(t, k) < 1e-12);
        assert!(ev.completeness_defect(t, k.saturating_sub(3)) > 1e-12);
        let rho = random_density(4, &mut r);
        assert!(matches!(ev.kraus_sum(&rho, t, Some(1)), Err(Error::KrausDefect { .. })));
    }

    #[test]
    fn closed_form_examples() {
        let rho0 = DenseOperator::from_element(2, 2, c(0.5, 0.0));
        let ev = MilburnEvolution::new(&pauli_z(), MilburnParams::new(0.1)).unwrap();
        let out = ev.closed_form(&rho0, 1.0).unwrap();
        let expect = rho0[(0, 1)] * (c(-0.2, -2.0)).exp();
        assert!((out[(0, 1)] - expect).norm() < 1e-15);
        let (kraus, report) = ev.kraus_sum(&rho0, 1.0, Some(30)).unwrap();
        assert!(report.defect < 1e-12);
        assert!(max_abs(&(kraus - &out)) < 1e-12);

        let mut r = rng(3);
        let h = random_hermitian(3, &mut r);
        let ev = MilburnEvolution::new(&h, MilburnParams::new(0.5)).unwrap();
        let late = ev.closed_form(&random_density(3, &mut r), 1e4).unwrap();
        let v = &ev.eigen.vectors;
        let in_eig = v.adjoint() * late * v;
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    assert!(in_eig[(a, b)].norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn kraus_agrees_with_closed_form_within_defect() {
        let mut r = rng(4);
        let h = random_hermitian(4, &mut r);
        let rho = random_density(4, &mut r);
        for tol in [1e-6, 1e-10] {
            let p = MilburnParams { theta0: 0.3, kraus_cutoff_tol: tol };
            let ev = MilburnEvolution::new(&h, p).unwrap();
            let (kraus, report) = ev.kraus_sum(&rho, 2.0, None).unwrap();
            let d = trace_distance_ops(&kraus, &ev.closed_form(&rho, 2.0).unwrap()).unwrap();
            assert!(d <= report.defect.max(1e-14), "{d} vs {}", report.defect);
            assert!((trace(&kraus) - c(1.0, 0.0)).norm() <= report.defect + 1e-14);
        }
    }

    #[test]
    fn finite_difference_matches_rhs() {
        let mut r = rng(5);
        let h = random_hermitian(3, &mut r);
        let rho = random_density(3, &mut r);
        let p = MilburnParams::new(0.25);
        let ev = MilburnEvolution::new(&h, p).unwrap();
        let t = 0.7;
        let err = |step: f64| {
            let fd = (ev.closed_form(&rho, t + step).unwrap() - ev.closed_form(&rho, t - step).unwrap())
                * c(0.5 / step, 0.0);
            max_abs(&(fd - milburn_rhs(&ev.closed_form(&rho, t).unwrap(), &h, &p).unwrap()))
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e1 < 1e-3);
        assert!((3.0..5.0).contains(&(e1 / e2)), "{}", e1 / e2);
    }

    #[test]
    fn binomial_coefficients() {
        assert_eq!(binomial_coefficient_ckl(3, &[1.7]).unwrap(), c(1.7f64.powi(3), 0.0));
        assert!((binomial_coefficient_ckl(1, &[0.3, 2.9]).unwrap() - c(1.0, 0.0)).norm() < 1e-15);
        assert!((binomial_coefficient_ckl(3, &[1.0, 2.0]).unwrap() - c(7.0, 0.0)).norm() < 1e-14);
        assert_eq!(binomial_coefficient_ckl(1, &[0.5, 1.0, 4.0]).unwrap(), c(0.0, 0.0));
    }

    #[test]
    fn perturbative_reduces_to_series_without_dephasing() {
        let (_, basis, h1) = random_model(2, 3, 0.3, 21);
        let mut r = rng(22);
        let rho = DensityMatrix::new(random_density(6, &mut r)).unwrap();
        for l in [1, 3] {
            let series = SeriesEvolution::new(&basis, &h1, &SeriesConfig::exact(l)).unwrap();
            let expect = series.reduced(&rho, 0.9).unwrap();
            let orders = MilburnOrders { k_max: 4, l_max: l };
            let got = milburn_perturbative_reduced(&rho, 0.9, &basis, &h1, MilburnParams::new(0.0), orders).unwrap();
            assert!(max_abs(&(got.op() - expect.rho.op())) < 1e-12);
        }
    }

    #[test]
    fn perturbative_without_coupling_is_sesr_dephasing() {
        let (_, basis, _) = random_model(2, 2, 0.3, 23);
        let zero = DenseOperator::zeros(4, 4);
        let mut r = rng(24);
        let rho = DensityMatrix::new(random_density(4, &mut r)).unwrap();
        let p = MilburnParams::new(0.2);
        let h0 = basis.from_sesr(&diag_real(&basis.energies));
        let ev = MilburnEvolution::new(&h0, p).unwrap();
        let t = 1.1;
        let k = ev.auto_k_max(t).unwrap();
        let got = milburn_perturbative_reduced(&rho, t, &basis, &zero, p, MilburnOrders { k_max: k, l_max: 2 }).unwrap();
        let expect = partial_trace_env(&ev.closed_form(rho.op(), t).unwrap(), 2, 2).unwrap();
        assert!(max_abs(&(got.op() - expect)) < 1e-11);
    }

    #[test]
    fn perturbative_error_drops_with_order() {
        // one system qubit, one environment qubit
        let h0 = pauli_z().kronecker(&identity(2)) * c(0.9, 0.0) + identity(2).kronecker(&pauli_z()) * c(0.4, 0.0);
        let h1 = (pauli_x().kronecker(&pauli_x()) + pauli_z().kronecker(&pauli_x()) * c(0.5, 0.0)) * c(0.15, 0.0);
        let basis = SesrBasis::from_factors(identity(2), identity(2), vec![1.3, 0.5, -0.5, -1.3]).unwrap();
        assert!(max_abs(&(basis.from_sesr(&diag_real(&basis.energies)) - &h0)) < 1e-15);
        let p = MilburnParams::new(0.1);
        let ev = MilburnEvolution::new(&(&h0 + &h1), p).unwrap();
        let mut r = rng(25);
        let rho = DensityMatrix::new(random_density(4, &mut r)).unwrap();
        let t = 1.5;
        let k = ev.auto_k_max(t).unwrap();
        let reference = partial_trace_env(&ev.kraus_sum(rho.op(), t, Some(k)).unwrap().0, 2, 2).unwrap();
        let errs: Vec<f64> = (1..=3)
            .map(|l| {
                let got = milburn_perturbative_reduced(&rho, t, &basis, &h1, p, MilburnOrders { k_max: k, l_max: l })
                    .unwrap();
                trace_distance_ops(got.op(), &reference).unwrap()
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn closed_form_is_trace_preserving_and_dephasing(seed in 0u64..100_000, theta in 0.01f64..1.0) {
            let mut r = rng(seed);
            let h = random_hermitian(3, &mut r);
            let rho = random_density(3, &mut r);
            let ev = MilburnEvolution::new(&h, MilburnParams::new(theta)).unwrap();
            let mut last = f64::INFINITY;
            for i in 0..=10 {
                let out = ev.closed_form(&rho, 0.3 * i as f64).unwrap();
                prop_assert!((trace(&out) - c(1.0, 0.0)).norm() < 1e-13);
                prop_assert!(hermiticity_defect(&out) == 0.0);
                let purity = DensityMatrix::new_unchecked(out).purity();
                prop_assert!(purity <= last + 1e-14);
                last = purity;
            }
        }
    }
}
