//! Master equations for the reduced state under a factorizing initial state.
//!
//! Everything is set up in the inherent representation: the product
//! eigenbasis of `h_S` and `h_E`, with the whole coupling `H_SE` as the
//! perturbation. The environment-side operators and the `C`/`K` coefficients
//! are available element by element for inspection, but the right-hand sides
//! are assembled from composite-space operators and one partial trace, using
//!
//! `sum_{bb'gg'} C^{m,kl}_{bb',gg'} P(b,b') X P(g,g') = Tr_E[(I (x) B_m) L_k (X (x) rho_E(t)) R_l]`
//!
//! with `L_k(t) = A_k(t) e^{i H_0 t}` and `R_l(t) = e^{-i H_0 t} A_l(-t) = L_l(t)^dagger`.
//! Composite operators are kept in the computational product basis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    c, commutator, ensure_finite, hermitian_eigendecomposition, hermitian_part, hermiticity_defect, identity,
    max_abs, partial_trace_env, spectral_norm, tensor_product, DenseOperator, DensityMatrix, Eigen, C64, I,
};
use crate::propagator::{ExactSeries, ImprovedSeries, SeriesConfig};
use crate::sesr::{redivide_in_basis, CouplingDecomposition, SesrBasis};

/// Below this the app1 assumption counts as satisfied.
pub const APP1_TOL: f64 = 1e-10;

/// `H_S (x) I + I (x) H_E + sum_m S_m (x) B_m`.
#[derive(Clone, Debug)]
pub struct OpenSystemModel {
    pub h_s: DenseOperator,
    pub h_e: DenseOperator,
    pub coupling: CouplingDecomposition,
}

impl OpenSystemModel {
    pub fn new(h_s: DenseOperator, h_e: DenseOperator, coupling: CouplingDecomposition) -> Result<Self> {
        for (name, op) in [("h_S", &h_s), ("h_E", &h_e)] {
            ensure_finite(op, name)?;
            let defect = hermiticity_defect(op);
            if defect > 1e-10 * max_abs(op).max(1.0) {
                return Err(Error::NotHermitian(defect));
            }
        }
        coupling.assemble(h_s.nrows(), h_e.nrows())?;
        Ok(OpenSystemModel { h_s, h_e, coupling })
    }

    pub fn dim_s(&self) -> usize {
        self.h_s.nrows()
    }

    pub fn dim_e(&self) -> usize {
        self.h_e.nrows()
    }

    pub fn h_se(&self) -> Result<DenseOperator> {
        self.coupling.assemble(self.dim_s(), self.dim_e())
    }

    pub fn h_tot0(&self) -> Result<DenseOperator> {
        Ok(tensor_product(&self.h_s, &identity(self.dim_e()))? + tensor_product(&identity(self.dim_s()), &self.h_e)?)
    }

    pub fn h_tot(&self) -> Result<DenseOperator> {
        Ok(self.h_tot0()? + self.h_se()?)
    }

    /// Same model with the coupling multiplied by `lambda`.
    pub fn scaled_coupling(&self, lambda: f64) -> Self {
        let terms = self.coupling.terms.iter().map(|(s, b)| (s.clone(), b * c(lambda, 0.0))).collect();
        OpenSystemModel { h_s: self.h_s.clone(), h_e: self.h_e.clone(), coupling: CouplingDecomposition::new(terms) }
    }
}

/// `rho_tot(0) = rho_S(0) (x) rho_E(0)`; the product is built, never inferred.
#[derive(Clone, Debug)]
pub struct FactorizedInitialState {
    pub rho_s0: DensityMatrix,
    pub rho_e0: DensityMatrix,
}

impl FactorizedInitialState {
    pub fn new(rho_s0: DensityMatrix, rho_e0: DensityMatrix) -> Result<Self> {
        rho_s0.validate()?;
        rho_e0.validate()?;
        Ok(FactorizedInitialState { rho_s0, rho_e0 })
    }

    pub fn total(&self) -> Result<DensityMatrix> {
        self.rho_s0.tensor(&self.rho_e0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalParams {
    /// Inverse temperature.
    pub beta_b: f64,
}

impl ThermalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_b.is_finite() && self.beta_b >= 0.0) {
            return Err(Error::Invalid(format!("inverse temperature {} must be finite and >= 0", self.beta_b)));
        }
        Ok(())
    }
}

/// `e^{-beta h_E} / Tr e^{-beta h_E}`, built in the eigenbasis with the
/// exponents shifted so the largest is zero.
pub fn thermal_state(h_e: &DenseOperator, params: ThermalParams) -> Result<DensityMatrix> {
    params.validate()?;
    let eig = hermitian_eigendecomposition(h_e)?;
    let lowest = eig.values.first().cloned().unwrap_or(0.0);
    let z: f64 = eig.values.iter().map(|e| (-params.beta_b * (e - lowest)).exp()).sum();
    let rho = eig.apply(|e| c((-params.beta_b * (e - lowest)).exp() / z, 0.0));
    Ok(DensityMatrix::new_unchecked(hermitian_part(&rho)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Second order in the coupling, with the first-moment terms in `J`.
    #[default]
    SecondOrder,
    /// Second order with improved propagator terms inside the coefficients.
    ImprovedSecondOrder,
    /// The iterated exact equation cut at a total coupling order and an
    /// iteration depth.
    ExactTruncated {
        /// Number of `(-K)` iterations applied to the reduced state, at most 2.
        depth: usize,
        /// Highest power of `H_SE` kept in the environment term, 1..=3.
        max_order: usize,
    },
    /// Time-local second-order equation in the interaction picture.
    Redfield,
}

/// Only the classical four-stage Runge–Kutta scheme is offered, with a fixed step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stepper {
    #[default]
    Rk4,
}

/// How the improved equation forms its `J` compensation terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImprovedForm {
    /// `L_I` also carries `L_I^{(0)} - I`, the first-order diagonal part that
    /// the improved first-order term no longer contains. Second-order
    /// accurate whenever `J` is nonzero.
    #[default]
    Completed,
    /// `L_I = L_I^{(1)}` only. Loses second-order accuracy when both `J` and
    /// the diagonal of `H_SE` are nonzero.
    Printed,
}

/// Which `S_m` enters `J(t) = sum_m S_m Tr(B_m rho_E(t))`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JPicture {
    #[default]
    Schrodinger,
    /// `e^{-i h_S t} S_m e^{i h_S t}`
    Interaction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasterConfig {
    pub truncation: Truncation,
    pub stepper: Stepper,
    /// `None` picks `min(0.01, 0.01 / ||H_tot||)`.
    pub dt: Option<f64>,
    /// With second-order truncation, drop the `J` terms (after checking that
    /// the assumption holds).
    pub assume_app1: bool,
    pub j_picture: JPicture,
    /// Order of the improved energies used by the improved equation.
    pub improved_energy_order: u8,
    pub improved_form: ImprovedForm,
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig {
            truncation: Truncation::SecondOrder,
            stepper: Stepper::Rk4,
            dt: None,
            assume_app1: false,
            j_picture: JPicture::Schrodinger,
            improved_energy_order: 5,
            improved_form: ImprovedForm::Completed,
        }
    }
}

impl MasterConfig {
    pub fn with_truncation(truncation: Truncation) -> Self {
        MasterConfig { truncation, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(dt) = self.dt {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(Error::Invalid(format!("time step {dt} must be positive")));
            }
        }
        if let Truncation::ExactTruncated { depth, max_order } = self.truncation {
            if depth > 2 {
                return Err(Error::Unsupported(format!("iteration depth {depth}; at most 2 is implemented")));
            }
            if !(1..=3).contains(&max_order) {
                return Err(Error::Unsupported(format!("coupling order {max_order}; 1..=3 is implemented")));
            }
        }
        if !(1..=5).contains(&self.improved_energy_order) {
            return Err(Error::Invalid(format!(
                "improved energy order {} outside 1..=5",
                self.improved_energy_order
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

/// `A_EL^{(k)}(t, b, b')` or `A_ER^{(k)}(-t, b, b')`, an operator on the
/// environment written in the computational environment basis. System labels
/// index the eigenbasis of `h_S`.
#[derive(Clone, Debug)]
pub struct EnvSideOperator {
    pub kind: Side,
    pub order: usize,
    pub beta: usize,
    pub beta_prime: usize,
    pub matrix: DenseOperator,
    pub time: f64,
}

/// `(e^{i w t} - 1) / (i w)`, which is `t` at `w = 0`.
pub fn phase_integral(w: f64, t: f64) -> C64 {
    let x = 0.5 * w * t;
    let sinc = if x.abs() < 1e-4 { 1.0 - x * x / 6.0 } else { x.sin() / x };
    C64::from_polar(t * sinc, x)
}

struct Improved {
    basis: SesrBasis,
    series: ImprovedSeries,
}

/// Coefficients that depend on `t` only, shared by one right-hand-side call.
struct Slice {
    /// `I (x) rho_E(t)`
    env_full: DenseOperator,
    /// `L_k(t)` for `k = 0..`
    left: Vec<DenseOperator>,
}

/// Prepared master equation for one model and one initial environment state.
pub struct MasterEquation {
    ds: usize,
    de: usize,
    h_s: DenseOperator,
    h_se: DenseOperator,
    s_ops: Vec<DenseOperator>,
    b_ops: Vec<DenseOperator>,
    /// `I (x) B_m`
    b_full: Vec<DenseOperator>,
    rho_e0: DenseOperator,
    sys: Eigen,
    env: Eigen,
    isesr: SesrBasis,
    h1: DenseOperator,
    exact: ExactSeries,
    improved: std::result::Result<Improved, String>,
    norm_h: f64,
    cfg: MasterConfig,
}

impl MasterEquation {
    pub fn new(model: &OpenSystemModel, rho_e0: &DensityMatrix, cfg: MasterConfig) -> Result<Self> {
        cfg.validate()?;
        let (ds, de) = (model.dim_s(), model.dim_e());
        if rho_e0.dim() != de {
            return Err(Error::DimensionMismatch(format!(
                "environment state of dimension {} for an environment of dimension {de}",
                rho_e0.dim()
            )));
        }
        let sys = hermitian_eigendecomposition(&model.h_s)?;
        let env = hermitian_eigendecomposition(&model.h_e)?;
        let energies =
            (0..ds * de).map(|f| sys.values[f / de] + env.values[f % de]).collect::<Vec<_>>();
        let isesr = SesrBasis::from_factors(sys.vectors.clone(), env.vectors.clone(), energies)?;
        let h_se = model.h_se()?;
        let h1 = isesr.to_sesr(&h_se);
        let exact = ExactSeries::new(&isesr.energies, &h1, &SeriesConfig::exact(2))?;
        let improved = redivide_in_basis(&isesr, &h1)
            .and_then(|(basis, pert)| {
                let series = ImprovedSeries::new(&basis.energies, &pert, &SeriesConfig::improved(cfg.improved_energy_order))?;
                Ok(Improved { basis, series })
            })
            .map_err(|e| e.to_string());
        if cfg.truncation == Truncation::ImprovedSecondOrder {
            if let Err(msg) = &improved {
                return Err(Error::Unsupported(format!("improved master equation: {msg}")));
            }
        }
        let s_ops: Vec<_> = model.coupling.terms.iter().map(|(s, _)| s.clone()).collect();
        let b_ops: Vec<_> = model.coupling.terms.iter().map(|(_, b)| b.clone()).collect();
        let b_full = b_ops.iter().map(|b| tensor_product(&identity(ds), b)).collect::<Result<Vec<_>>>()?;
        let norm_h = spectral_norm(&model.h_tot()?);
        let me = MasterEquation {
            ds,
            de,
            h_s: model.h_s.clone(),
            h_se,
            s_ops,
            b_ops,
            b_full,
            rho_e0: rho_e0.op().clone(),
            sys,
            env,
            isesr,
            h1,
            exact,
            improved,
            norm_h,
            cfg,
        };
        let needs_app1 = cfg.truncation == Truncation::Redfield
            || (cfg.truncation == Truncation::SecondOrder && cfg.assume_app1);
        if needs_app1 {
            me.check_app1()?;
        }
        Ok(me)
    }

    pub fn config(&self) -> &MasterConfig {
        &self.cfg
    }

    pub fn dim_s(&self) -> usize {
        self.ds
    }

    /// Energies of the inherent representation, `E_S[b] + eps_E[u]` at `b * dim_e + u`.
    pub fn energies(&self) -> &[f64] {
        &self.isesr.energies
    }

    /// `min(0.01, 0.01 / ||H_tot||)` unless the configuration fixes a step.
    pub fn dt(&self) -> f64 {
        self.cfg.dt.unwrap_or_else(|| default_dt(self.norm_h))
    }

    fn ptrace(&self, x: &DenseOperator) -> DenseOperator {
        partial_trace_env(x, self.ds, self.de).expect("composite dimensions are fixed at construction")
    }

    fn embed_env(&self, x: &DenseOperator) -> DenseOperator {
        identity(self.ds).kronecker(x)
    }

    fn embed(&self, x: &DenseOperator, env: &DenseOperator) -> DenseOperator {
        x.kronecker(env)
    }

    fn check_dim(&self, rho: &DenseOperator) -> Result<()> {
        if rho.nrows() != self.ds || rho.ncols() != self.ds {
            return Err(Error::DimensionMismatch(format!(
                "reduced state {:?} for a system of dimension {}",
                rho.shape(),
                self.ds
            )));
        }
        Ok(())
    }

    /// `rho_E(t) = e^{-i h_E t} rho_E(0) e^{i h_E t}`
    pub fn env_state(&self, t: f64) -> DenseOperator {
        let u = self.env.apply(|e| C64::from_polar(1.0, -e * t));
        &u * &self.rho_e0 * u.adjoint()
    }

    /// `e^{i H_0 t}` in the computational basis.
    fn free_inverse(&self, t: f64) -> DenseOperator {
        let n = self.isesr.dim();
        let d = DenseOperator::from_fn(n, n, |i, j| {
            if i == j {
                C64::from_polar(1.0, self.isesr.energies[i] * t)
            } else {
                C64::default()
            }
        });
        self.isesr.from_sesr(&d)
    }

    fn slice(&self, t: f64, max_k: usize) -> Result<Slice> {
        let env_full = self.embed_env(&self.env_state(t));
        let n = self.isesr.dim();
        let mut left = Vec::with_capacity(max_k + 1);
        for k in 0..=max_k {
            let mut a = self.exact.term(k, t)?.matrix;
            for j in 0..n {
                let ph = C64::from_polar(1.0, self.isesr.energies[j] * t);
                for i in 0..n {
                    a[(i, j)] *= ph;
                }
            }
            left.push(self.isesr.from_sesr(&a));
        }
        Ok(Slice { env_full, left })
    }

    /// `J(t) = sum_m S_m Tr(B_m rho_E(t))`, with `S_m` in the configured picture.
    pub fn j_operator(&self, t: f64) -> DenseOperator {
        let rho_e = self.env_state(t);
        let mut j = DenseOperator::zeros(self.ds, self.ds);
        for (s, b) in self.s_ops.iter().zip(&self.b_ops) {
            let mean = (b * &rho_e).trace();
            j += s * mean;
        }
        match self.cfg.j_picture {
            JPicture::Schrodinger => j,
            JPicture::Interaction => {
                let u = self.sys.apply(|e| C64::from_polar(1.0, -e * t));
                &u * j * u.adjoint()
            }
        }
    }

    /// Largest violation of `Tr_E[H_SE, rho_S (x) rho_E(0)] = 0` over all
    /// `rho_S`, which is the traceless part of `J(0)`, together with how far
    /// `rho_E(0)` is from stationary.
    pub fn app1_defect(&self) -> (f64, f64) {
        let mut j = DenseOperator::zeros(self.ds, self.ds);
        for (s, b) in self.s_ops.iter().zip(&self.b_ops) {
            j += s * (b * &self.rho_e0).trace();
        }
        let shift = j.trace() / c(self.ds as f64, 0.0);
        let traceless = j - identity(self.ds) * shift;
        let h_e = self.env.apply(|e| c(e, 0.0));
        (max_abs(&traceless), max_abs(&commutator(&h_e, &self.rho_e0)))
    }

    fn check_app1(&self) -> Result<()> {
        let (defect, drift) = self.app1_defect();
        let scale = max_abs(&self.h_se).max(1.0);
        if defect > APP1_TOL * scale {
            return Err(Error::App1Violated(defect));
        }
        if drift > APP1_TOL * scale {
            return Err(Error::Invalid(format!(
                "the environment state is not stationary under h_E (|[h_E, rho_E]| = {drift:.3e})"
            )));
        }
        Ok(())
    }

    pub fn env_side_operator(
        &self,
        kind: Side,
        order: usize,
        t: f64,
        beta: usize,
        beta_prime: usize,
    ) -> Result<EnvSideOperator> {
        if beta >= self.ds || beta_prime >= self.ds {
            return Err(Error::Invalid(format!("system labels ({beta}, {beta_prime}) out of range")));
        }
        let de = self.de;
        let e = &self.isesr.energies;
        let m = match kind {
            Side::Left => {
                let a = self.exact.term(order, t)?.matrix;
                DenseOperator::from_fn(de, de, |u, w| {
                    let col = beta_prime * de + w;
                    a[(beta * de + u, col)] * C64::from_polar(1.0, e[col] * t)
                })
            }
            Side::Right => {
                let a = self.exact.term(order, -t)?.matrix;
                DenseOperator::from_fn(de, de, |v, w| {
                    let row = beta * de + v;
                    C64::from_polar(1.0, -e[row] * t) * a[(row, beta_prime * de + w)]
                })
            }
        };
        let ue = &self.env.vectors;
        Ok(EnvSideOperator { kind, order, beta, beta_prime, matrix: ue * m * ue.adjoint(), time: t })
    }

    /// `C^{m,kl}_{bb',gg'}(t) = Tr_E[B_m A_EL^{(k)}(t,b,b') rho_E(t) A_ER^{(l)}(-t,g,g')]`
    #[allow(clippy::too_many_arguments)]
    pub fn coefficient_c(
        &self,
        m: usize,
        k: usize,
        l: usize,
        t: f64,
        (beta, beta_prime): (usize, usize),
        (gamma, gamma_prime): (usize, usize),
    ) -> Result<C64> {
        let b = self.b_ops.get(m).ok_or_else(|| Error::Invalid(format!("no coupling term {m}")))?;
        let left = self.env_side_operator(Side::Left, k, t, beta, beta_prime)?;
        let right = self.env_side_operator(Side::Right, l, t, gamma, gamma_prime)?;
        Ok((b * left.matrix * self.env_state(t) * right.matrix).trace())
    }

    /// `K^{kl}_{bb',gg'}(t) = Tr_E[A_EL^{(k)}(t,b,b') rho_E(t) A_ER^{(l)}(-t,g,g')]`
    pub fn coefficient_k(
        &self,
        k: usize,
        l: usize,
        t: f64,
        (beta, beta_prime): (usize, usize),
        (gamma, gamma_prime): (usize, usize),
    ) -> Result<C64> {
        let left = self.env_side_operator(Side::Left, k, t, beta, beta_prime)?;
        let right = self.env_side_operator(Side::Right, l, t, gamma, gamma_prime)?;
        Ok((left.matrix * self.env_state(t) * right.matrix).trace())
    }

    /// `|psi^b><psi^b'|` in the computational system basis.
    pub fn system_projector(&self, beta: usize, beta_prime: usize) -> DenseOperator {
        let u = &self.sys.vectors;
        u.column(beta) * u.column(beta_prime).adjoint()
    }

    /// `Tr_E[L_k (X (x) rho_E(t)) R_l]`, the action of `K^{kl}` on a system operator.
    fn k_map(&self, slice: &Slice, k: usize, l: usize, x: &DenseOperator) -> DenseOperator {
        let inner = self.embed(x, &DenseOperator::identity(self.de, self.de)) * &slice.env_full;
        self.ptrace(&(&slice.left[k] * inner * slice.left[l].adjoint()))
    }

    /// `-i [h_S, rho] - i Tr_E[H_SE, Y]` for a composite `Y`.
    fn assemble(&self, rho: &DenseOperator, y: &DenseOperator) -> DenseOperator {
        let unitary = commutator(&self.h_s, rho) * (-I);
        unitary + self.ptrace(&commutator(&self.h_se, y)) * (-I)
    }

    /// First-order system operators `(C_L,m, L)` at time `t`; the right-hand
    /// ones are their adjoints.
    fn first_order_ops(&self, slice: &Slice, which: usize) -> (Vec<DenseOperator>, DenseOperator) {
        let le = &slice.left[which] * &slice.env_full;
        let cl = self.b_full.iter().map(|b| self.ptrace(&(b * &le))).collect();
        (cl, self.ptrace(&le))
    }

    /// The second-order perturbed equation.
    pub fn rhs_perturbed(&self, rho: &DenseOperator, t: f64) -> Result<DenseOperator> {
        self.check_dim(rho)?;
        let slice = self.slice(t, 1)?;
        let (cl, l1) = self.first_order_ops(&slice, 1);
        let r1 = l1.adjoint();
        let j = self.j_operator(t);
        let mut out = commutator(&self.h_s, rho) * (-I) + commutator(&j, rho) * (-I);
        for (s, cl) in self.s_ops.iter().zip(&cl) {
            out += commutator(s, &(rho * cl.adjoint() + cl * rho)) * (-I);
        }
        out += commutator(&j, &(rho * &r1 + &l1 * rho)) * I;
        Ok(out)
    }

    /// The second-order equation with the `J` terms dropped.
    pub fn rhs_app1(&self, rho: &DenseOperator, t: f64) -> Result<DenseOperator> {
        self.check_dim(rho)?;
        let slice = self.slice(t, 1)?;
        let (cl, _) = self.first_order_ops(&slice, 1);
        let mut out = commutator(&self.h_s, rho) * (-I);
        for (s, cl) in self.s_ops.iter().zip(&cl) {
            out += commutator(s, &(rho * cl.adjoint() + cl * rho)) * (-I);
        }
        Ok(out)
    }

    /// The terms the app1 assumption removes,
    /// `-i[J, rho] + [J, int_0^t Tr_E[Hbar_SE(tau), rho (x) rho_E(0)] dtau]`
    /// with `Hbar_SE(tau) = e^{-i H_0 tau} H_SE e^{i H_0 tau}`; the integral is
    /// evaluated in closed form.
    pub fn dropped_terms_app1(&self, rho: &DenseOperator, t: f64) -> Result<DenseOperator> {
        self.check_dim(rho)?;
        let e = &self.isesr.energies;
        let n = e.len();
        let integral = DenseOperator::from_fn(n, n, |a, b| self.h1[(a, b)] * phase_integral(-(e[a] - e[b]), t));
        let integral = self.isesr.from_sesr(&integral);
        let state = self.embed(rho, &self.rho_e0);
        let inner = self.ptrace(&commutator(&integral, &state));
        let j = self.j_operator(t);
        Ok(commutator(&j, rho) * (-I) + commutator(&j, &inner))
    }

    /// The improved second-order equation, built from the improved terms of
    /// the redivided coupling while `e^{i H_0 t}` keeps the bare energies.
    pub fn rhs_improved(&self, rho: &DenseOperator, t: f64) -> Result<DenseOperator> {
        self.check_dim(rho)?;
        let imp = self.improved.as_ref().map_err(|m| Error::Unsupported(format!("improved master equation: {m}")))?;
        let env_full = self.embed_env(&self.env_state(t));
        let free = self.free_inverse(t);
        let left: Vec<DenseOperator> = (0..=1)
            .map(|k| Ok(imp.basis.from_sesr(&imp.series.term(k, t)?.matrix) * &free * &env_full))
            .collect::<Result<_>>()?;
        let c_left = |k: usize| -> Vec<DenseOperator> {
            self.b_full.iter().map(|b| self.ptrace(&(b * &left[k]))).collect()
        };
        let (c0, c1) = (c_left(0), c_left(1));
        let mut li = self.ptrace(&left[1]);
        if self.cfg.improved_form == ImprovedForm::Completed {
            li += self.ptrace(&left[0]) - identity(self.ds);
        }
        let ri = li.adjoint();
        let j = self.j_operator(t);

        let mut out = commutator(&self.h_s, rho) * (-I) + commutator(&j, rho) * I;
        for (m, s) in self.s_ops.iter().enumerate() {
            for cl in [&c0[m], &c1[m]] {
                out += commutator(s, &(rho * cl.adjoint() + cl * rho)) * (-I);
            }
        }
        out += commutator(&j, &(rho * &ri + &li * rho)) * (-I);
        for (m, s) in self.s_ops.iter().enumerate() {
            let cl0 = &c0[m];
            let cr0 = cl0.adjoint();
            let y = cl0 * rho * &ri + cl0 * &li * rho + rho * &ri * &cr0 + &li * rho * &cr0;
            out += commutator(s, &y) * I;
        }
        Ok(out)
    }

    /// The exact equation with the iteration for `rho_S(t)` applied `depth`
    /// times and every term above `max_order` powers of `H_SE` discarded.
    pub fn rhs_exact_truncated(&self, rho: &DenseOperator, t: f64, depth: usize, max_order: usize) -> Result<DenseOperator> {
        self.check_dim(rho)?;
        if depth > 2 || !(1..=3).contains(&max_order) {
            return Err(Error::Unsupported(format!(
                "exact truncation (depth {depth}, order {max_order}); depth <= 2 and order 1..=3 are implemented"
            )));
        }
        // k + l + sum(k_n + l_n) <= cap for the coefficient indices
        let cap = max_order - 1;
        let slice = self.slice(t, cap)?;
        let zero = DenseOperator::zeros(self.ds, self.ds);
        let mut reduced = vec![zero.clone(); cap + 1];
        reduced[0] = rho.clone();
        let mut frontier = reduced.clone();
        for _ in 0..depth {
            let mut next = vec![zero.clone(); cap + 1];
            for (o, x) in frontier.iter().enumerate() {
                if max_abs(x) == 0.0 {
                    continue;
                }
                for k in 0..=cap - o {
                    for l in 0..=cap - o - k {
                        if k + l > 0 {
                            next[o + k + l] -= self.k_map(&slice, k, l, x);
                        }
                    }
                }
            }
            for (acc, x) in reduced.iter_mut().zip(&next) {
                *acc += x;
            }
            frontier = next;
        }
        let n = self.isesr.dim();
        let mut y = DenseOperator::zeros(n, n);
        let id_e = DenseOperator::identity(self.de, self.de);
        for (o, x) in reduced.iter().enumerate() {
            if max_abs(x) == 0.0 {
                continue;
            }
            let state = self.embed(x, &id_e) * &slice.env_full;
            for k in 0..=cap - o {
                for l in 0..=cap - o - k {
                    y += &slice.left[k] * &state * slice.left[l].adjoint();
                }
            }
        }
        Ok(self.assemble(rho, &y))
    }

    /// Interaction-picture Redfield generator
    /// `-int_0^t Tr_E[H~_SE(t), [H~_SE(tau), rho~ (x) rho_E(0)]] dtau`,
    /// with the `tau` integral done in closed form.
    pub fn rhs_redfield(&self, rho_tilde: &DenseOperator, t: f64) -> Result<DenseOperator> {
        self.check_dim(rho_tilde)?;
        let e = &self.isesr.energies;
        let n = e.len();
        let at_t = DenseOperator::from_fn(n, n, |a, b| self.h1[(a, b)] * C64::from_polar(1.0, (e[a] - e[b]) * t));
        let integral = DenseOperator::from_fn(n, n, |a, b| self.h1[(a, b)] * phase_integral(e[a] - e[b], t));
        let (at_t, integral) = (self.isesr.from_sesr(&at_t), self.isesr.from_sesr(&integral));
        let state = self.embed(rho_tilde, &self.rho_e0);
        Ok(-self.ptrace(&commutator(&at_t, &commutator(&integral, &state))))
    }

    /// `e^{-i h_S t} X e^{i h_S t}`
    pub fn to_schrodinger(&self, rho_tilde: &DenseOperator, t: f64) -> DenseOperator {
        let u = self.sys.apply(|e| C64::from_polar(1.0, -e * t));
        &u * rho_tilde * u.adjoint()
    }

    /// `e^{i h_S t} X e^{-i h_S t}`
    pub fn to_interaction(&self, rho: &DenseOperator, t: f64) -> DenseOperator {
        self.to_schrodinger(rho, -t)
    }

    /// Right-hand side selected by the configuration. For Redfield the state
    /// and the result are in the interaction picture.
    pub fn rhs(&self, rho: &DenseOperator, t: f64) -> Result<DenseOperator> {
        match self.cfg.truncation {
            Truncation::SecondOrder if self.cfg.assume_app1 => self.rhs_app1(rho, t),
            Truncation::SecondOrder => self.rhs_perturbed(rho, t),
            Truncation::ImprovedSecondOrder => self.rhs_improved(rho, t),
            Truncation::ExactTruncated { depth, max_order } => self.rhs_exact_truncated(rho, t, depth, max_order),
            Truncation::Redfield => self.rhs_redfield(rho, t),
        }
    }

    /// Integrate from `t_grid[0]` and record the Schrödinger-picture reduced
    /// state at every grid time.
    pub fn evolve(&self, rho_s0: &DensityMatrix, t_grid: &[f64]) -> Result<Trajectory> {
        self.check_dim(rho_s0.op())?;
        let dt = self.dt();
        if self.cfg.truncation == Truncation::Redfield {
            let t0 = t_grid.first().cloned().unwrap_or(0.0);
            let start = self.to_interaction(rho_s0.op(), t0);
            let mut traj = integrate(|t, x| self.rhs_redfield(x, t), &start, t_grid, dt)?;
            for (x, &t) in traj.states.iter_mut().zip(&traj.times) {
                *x = hermitian_part(&self.to_schrodinger(x, t));
            }
            traj.refresh_diagnostics()?;
            Ok(traj)
        } else {
            integrate(|t, x| self.rhs(x, t), rho_s0.op(), t_grid, dt)
        }
    }
}

pub fn default_dt(norm_h: f64) -> f64 {
    if norm_h > 0.0 {
        0.01f64.min(0.01 / norm_h)
    } else {
        0.01
    }
}

/// Reduced states on a time grid with the stepper diagnostics.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DenseOperator>,
    /// `|Tr rho(t) - Tr rho(t_0)|`
    pub trace_drift: Vec<f64>,
    /// Lowest eigenvalue of each recorded state; negative values flag a
    /// positivity violation, which is reported but not an error.
    pub min_eigenvalues: Vec<f64>,
}

impl Trajectory {
    fn refresh_diagnostics(&mut self) -> Result<()> {
        let tr0 = self.states.first().map(|s| s.trace()).unwrap_or_default();
        self.trace_drift = self.states.iter().map(|s| (s.trace() - tr0).norm()).collect();
        self.min_eigenvalues = self
            .states
            .iter()
            .map(|s| DensityMatrix::new_unchecked(s.clone()).min_eigenvalue())
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn max_trace_drift(&self) -> f64 {
        self.trace_drift.iter().cloned().fold(0.0, f64::max)
    }

    /// Grid indices whose state has an eigenvalue below `-tol`.
    pub fn positivity_violations(&self, tol: f64) -> Vec<usize> {
        self.min_eigenvalues.iter().enumerate().filter(|(_, &v)| v < -tol).map(|(i, _)| i).collect()
    }
}

/// Fixed-step classical Runge–Kutta from `t_grid[0]` through every grid time.
/// Each grid interval is split into equal substeps no longer than `dt`; the
/// state is made hermitian after every step and its trace is left alone.
pub fn integrate<F>(mut rhs: F, rho0: &DenseOperator, t_grid: &[f64], dt: f64) -> Result<Trajectory>
where
    F: FnMut(f64, &DenseOperator) -> Result<DenseOperator>,
{
    if t_grid.is_empty() {
        return Err(Error::Invalid("empty time grid".into()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Invalid(format!("time step {dt} must be positive")));
    }
    if t_grid.windows(2).any(|w| !(w[1] >= w[0])) || t_grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::Invalid("time grid must be finite and nondecreasing".into()));
    }
    let mut y = hermitian_part(rho0);
    let mut states = vec![y.clone()];
    let mut step = 0usize;
    let half = c(0.5, 0.0);
    for w in t_grid.windows(2) {
        let span = w[1] - w[0];
        if span == 0.0 {
            states.push(y.clone());
            continue;
        }
        let n = ((span / dt) - 1e-9).ceil().max(1.0) as usize;
        let h = span / n as f64;
        let hc = c(h, 0.0);
        for i in 0..n {
            let t = w[0] + i as f64 * h;
            let k1 = rhs(t, &y)?;
            let k2 = rhs(t + 0.5 * h, &(&y + &k1 * (hc * half)))?;
            let k3 = rhs(t + 0.5 * h, &(&y + &k2 * (hc * half)))?;
            let k4 = rhs(t + h, &(&y + &k3 * hc))?;
            let incr = (k1 + (k2 + k3) * c(2.0, 0.0) + k4) * c(h / 6.0, 0.0);
            y = hermitian_part(&(y + incr));
            if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::NonFiniteStep(step));
            }
            step += 1;
        }
        states.push(y.clone());
    }
    let mut traj = Trajectory { times: t_grid.to_vec(), states, trace_drift: vec![], min_eigenvalues: vec![] };
    traj.refresh_diagnostics()?;
    Ok(traj)
}

/// `n + 1` equally spaced times from `t0` to `t1`.
pub fn uniform_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| if i == n { t1 } else { t0 + (t1 - t0) * i as f64 / n as f64 }).collect()
}
