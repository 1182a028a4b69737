//! Spin-bath models: a qubit coupled through `sz (x) B` to `N_E` environment
//! qubits, with optional transverse fields on both sides.
//!
//! Environment qubit 1 is the most significant bit of the environment index,
//! so the composite flat index is `n_S * 2^N_E + sum_k n_k 2^(N_E - k)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::master::OpenSystemModel;
use crate::linalg::{
    c, identity, tensor_product, tensor_product_within, DenseOperator, DensityMatrix, C64, DEFAULT_DIM_BUDGET,
};
use crate::sesr::{
    hamiltonian_redivision, improved_energies, perturbation_matrix, CouplingDecomposition, HamiltonianSplit,
    PerturbationData, SesrBasis,
};

pub fn pauli_x() -> DenseOperator {
    DenseOperator::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)])
}

pub fn pauli_y() -> DenseOperator {
    DenseOperator::from_row_slice(2, 2, &[c(0., 0.), c(0., -1.), c(0., 1.), c(0., 0.)])
}

pub fn pauli_z() -> DenseOperator {
    DenseOperator::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(-1., 0.)])
}

/// `I (x) ... (x) op (x) ... (x) I` with `op` on qubit `k` (0-based, qubit 0
/// most significant) of `n` qubits.
pub fn embed_qubit(op: &DenseOperator, k: usize, n: usize) -> Result<DenseOperator> {
    if k >= n {
        return Err(Error::Invalid(format!("qubit {k} of {n}")));
    }
    let before = identity(1 << k);
    let after = identity(1 << (n - k - 1));
    tensor_product(&tensor_product(&before, op)?, &after)
}

/// Bit `k` of an environment index (qubit 0 most significant).
pub fn env_bit(n_env_index: usize, k: usize, n_env: usize) -> usize {
    (n_env_index >> (n_env - 1 - k)) & 1
}

fn parity(bit: usize) -> f64 {
    if bit == 0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinBathSpec {
    pub n_env: usize,
    /// `sz` couplings `Z_k`.
    pub z: Vec<f64>,
    /// Transverse environment couplings `X_k`.
    #[serde(default)]
    pub x: Vec<f64>,
    /// Transverse field on the system.
    #[serde(default)]
    pub mu: f64,
}

impl SpinBathSpec {
    pub fn zurek(z: Vec<f64>) -> Self {
        SpinBathSpec { n_env: z.len(), x: vec![0.0; z.len()], z, mu: 0.0 }
    }

    pub fn extended(mu: f64, x: Vec<f64>, z: Vec<f64>) -> Self {
        SpinBathSpec { n_env: z.len(), z, x, mu }
    }

    pub fn validate(&self, budget: usize) -> Result<()> {
        if self.n_env == 0 {
            return Err(Error::Invalid("the environment needs at least one qubit".into()));
        }
        if self.z.len() != self.n_env || (!self.x.is_empty() && self.x.len() != self.n_env) {
            return Err(Error::Invalid(format!(
                "{} environment qubits with {} Z and {} X couplings",
                self.n_env,
                self.z.len(),
                self.x.len()
            )));
        }
        if self.z.iter().chain(&self.x).chain([&self.mu]).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spin-bath parameters".into()));
        }
        let dim = 1usize.checked_shl(self.n_env as u32 + 1).filter(|d| *d > 0).unwrap_or(usize::MAX);
        if self.n_env >= usize::BITS as usize - 1 || dim > budget {
            return Err(Error::DimensionBudget { requested: dim, budget });
        }
        Ok(())
    }

    pub fn dim_e(&self) -> usize {
        1 << self.n_env
    }

    pub fn x_or_zero(&self, k: usize) -> f64 {
        self.x.get(k).copied().unwrap_or(0.0)
    }

    /// `Y_k = sqrt(X_k^2 + Z_k^2)`
    pub fn y(&self) -> Vec<f64> {
        (0..self.n_env).map(|k| self.x_or_zero(k).hypot(self.z[k])).collect()
    }

    /// `f_{n_E} = sum_k (-1)^{n_k} Y_k`
    pub fn f(&self, n_e: usize) -> f64 {
        self.y().iter().enumerate().map(|(k, y)| parity(env_bit(n_e, k, self.n_env)) * y).sum()
    }
}

/// `(B_x, B_z)`: `sum_k X_k sx_k` and `sum_k Z_k sz_k` on the environment.
pub fn env_fields(spec: &SpinBathSpec) -> Result<(DenseOperator, DenseOperator)> {
    spec.validate(DEFAULT_DIM_BUDGET)?;
    let de = spec.dim_e();
    let (mut bx, mut bz) = (DenseOperator::zeros(de, de), DenseOperator::zeros(de, de));
    for k in 0..spec.n_env {
        bx += embed_qubit(&pauli_x(), k, spec.n_env)? * c(spec.x_or_zero(k), 0.0);
        bz += embed_qubit(&pauli_z(), k, spec.n_env)? * c(spec.z[k], 0.0);
    }
    Ok((bx, bz))
}

/// `E_{n_S n_E} = (-1)^{n_S} sum_k (-1)^{n_k} Z_k`
pub fn zurek_energy(spec: &SpinBathSpec, n_s: usize, n_e: usize) -> f64 {
    parity(n_s) * (0..spec.n_env).map(|k| parity(env_bit(n_e, k, spec.n_env)) * spec.z[k]).sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct ZurekModel {
    pub hamiltonian: DenseOperator,
    /// Energies of the natural basis states, by flat index.
    pub energies: Vec<f64>,
}

pub fn build_zurek(spec: &SpinBathSpec) -> Result<ZurekModel> {
    let (_, bz) = env_fields(spec)?;
    let hamiltonian = tensor_product(&pauli_z(), &bz)?;
    let de = spec.dim_e();
    let energies = (0..2 * de).map(|i| zurek_energy(spec, i / de, i % de)).collect();
    Ok(ZurekModel { hamiltonian, energies })
}

/// `exp(-i H t) rho exp(i H t)` for the Zurek Hamiltonian, stamped directly
/// in the natural basis.
pub fn zurek_exact_solution(rho0: &DensityMatrix, t: f64, spec: &SpinBathSpec) -> Result<DensityMatrix> {
    spec.validate(DEFAULT_DIM_BUDGET)?;
    let de = spec.dim_e();
    if rho0.dim() != 2 * de {
        return Err(Error::DimensionMismatch(format!("state of dimension {} for {} levels", rho0.dim(), 2 * de)));
    }
    let e: Vec<f64> = (0..2 * de).map(|i| zurek_energy(spec, i / de, i % de)).collect();
    let r = rho0.op();
    let op = DenseOperator::from_fn(2 * de, 2 * de, |i, j| r[(i, j)] * C64::from_polar(1.0, -(e[i] - e[j]) * t));
    Ok(DensityMatrix::new_unchecked(op))
}

/// `mu sx (x) I + sz (x) (B_x + B_z)`
pub fn build_extended(spec: &SpinBathSpec) -> Result<DenseOperator> {
    let (bx, bz) = env_fields(spec)?;
    let de = spec.dim_e();
    Ok(tensor_product(&(pauli_x() * c(spec.mu, 0.0)), &identity(de))? + tensor_product(&pauli_z(), &(bx + bz))?)
}

/// The spin bath in the inherent split used by the master equations:
/// `h_S = mu sx`, `h_E = sum_k W_k sx_k` for the given bath fields `W_k`, and
/// the whole `sz (x) (B_x + B_z)` as the coupling. With no bath fields the
/// total Hamiltonian is [`build_extended`]'s.
pub fn spin_bath_open_system(spec: &SpinBathSpec, bath_field: &[f64]) -> Result<OpenSystemModel> {
    let (bx, bz) = env_fields(spec)?;
    if !bath_field.is_empty() && bath_field.len() != spec.n_env {
        return Err(Error::Invalid(format!(
            "{} bath fields for {} environment qubits",
            bath_field.len(),
            spec.n_env
        )));
    }
    let de = spec.dim_e();
    let mut h_e = DenseOperator::zeros(de, de);
    for (k, w) in bath_field.iter().enumerate() {
        h_e += embed_qubit(&pauli_x(), k, spec.n_env)? * c(*w, 0.0);
    }
    OpenSystemModel::new(pauli_x() * c(spec.mu, 0.0), h_e, CouplingDecomposition::new(vec![(pauli_z(), bx + bz)]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SesrCase {
    /// Strong system field: `H_tot0 = mu sx (x) I`.
    One,
    /// Weak system field: everything but `mu sx` is redivided into `H_tot0`.
    Four,
}

/// Eigenvector of `X sx + Z sz` with eigenvalue `(-1)^n Y`, from the column
/// `(Z + (-1)^n Y, X)` normalized. Where that column vanishes (`X = 0`) the
/// limiting vector is used.
pub fn chi_vector(x: f64, z: f64, n: usize) -> [f64; 2] {
    let y = x.hypot(z);
    let col = [z + parity(n) * y, x];
    let norm = col[0].hypot(col[1]);
    if norm > 1e-12 * (1.0 + y) {
        return [col[0] / norm, col[1] / norm];
    }
    let other = [z - parity(n) * y, x];
    if other[0].hypot(other[1]) > 1e-12 * (1.0 + y) {
        // orthogonal to the non-degenerate partner, which is |0> here
        [0.0, 1.0]
    } else if n == 0 {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

/// Product environment basis `chi^{n_1} (x) chi^{n_2} (x) ...` as columns.
pub fn chi_basis(spec: &SpinBathSpec) -> Result<DenseOperator> {
    let mut out = DenseOperator::identity(1, 1);
    for k in 0..spec.n_env {
        let (x, z) = (spec.x_or_zero(k), spec.z[k]);
        let (v0, v1) = (chi_vector(x, z, 0), chi_vector(x, z, 1));
        let single = DenseOperator::from_row_slice(2, 2, &[c(v0[0], 0.), c(v1[0], 0.), c(v0[1], 0.), c(v1[1], 0.)]);
        out = tensor_product_within(&out, &single, DEFAULT_DIM_BUDGET)?;
    }
    Ok(out)
}

/// Columns `psi^0 = (|0> + |1>)/sqrt2`, `psi^1 = (|0> - |1>)/sqrt2`.
pub fn psi_basis() -> DenseOperator {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    DenseOperator::from_row_slice(2, 2, &[c(s, 0.), c(s, 0.), c(s, 0.), c(-s, 0.)])
}

/// The split, SESR and perturbation for one of the supported cases. For case
/// four the returned data are after redivision.
pub fn sesr_for_case(spec: &SpinBathSpec, case: SesrCase) -> Result<(HamiltonianSplit, SesrBasis, PerturbationData)> {
    let (bx, bz) = env_fields(spec)?;
    let de = spec.dim_e();
    let chi = chi_basis(spec)?;
    match case {
        SesrCase::One => {
            let split = HamiltonianSplit::new(
                pauli_x() * c(spec.mu, 0.0),
                DenseOperator::zeros(de, de),
                CouplingDecomposition::default(),
                tensor_product(&pauli_z(), &(bx + bz))?,
            )?;
            let energies = (0..2 * de).map(|i| spec.mu * parity(i / de)).collect();
            let basis = SesrBasis::from_factors(psi_basis(), chi, energies)?;
            let mut pert = perturbation_matrix(&split.h_tot1, &basis)?;
            pert.improved_energies = improved_energies(&pert, &basis.energies, 4)?;
            pert.improved_order = 4;
            Ok((split, basis, pert))
        }
        SesrCase::Four => {
            if let Some(k) = spec.y().iter().position(|y| *y == 0.0) {
                return Err(Error::Invalid(format!(
                    "case four needs Y_k > 0 for every environment qubit (Y_{} = 0)",
                    k + 1
                )));
            }
            let split = HamiltonianSplit::new(
                DenseOperator::zeros(2, 2),
                DenseOperator::zeros(de, de),
                CouplingDecomposition::default(),
                build_extended(spec)?,
            )?;
            let basis = SesrBasis::from_factors(identity(2), chi, vec![0.0; 2 * de])?;
            let (split, basis, mut pert) = hamiltonian_redivision(&split, &basis)?;
            pert.improved_energies = improved_energies(&pert, &basis.energies, 4)?;
            pert.improved_order = 4;
            Ok((split, basis, pert))
        }
    }
}

/// The improved energy of one level from the closed-form `G` sums, the
/// bracketed expression printed alongside them, and the exact eigenvalue of
/// the two-level block the level belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ImprovedEnergyReport {
    pub g_sum: f64,
    pub bracket: f64,
    pub exact: f64,
}

/// `(unperturbed, coupling)` of the two-level block containing the level.
fn case_block(spec: &SpinBathSpec, case: SesrCase, n_e: usize) -> (f64, f64) {
    match case {
        SesrCase::One => (spec.mu, spec.f(n_e)),
        SesrCase::Four => (spec.f(n_e), spec.mu),
    }
}

/// `s (w + v^2/(2w) - v^4/(8w^3))` with `s = (-1)^{n_S}`, where `w` is the
/// unperturbed level and `v` the block coupling of the case (`G3` vanishes).
pub fn improved_energy_case(spec: &SpinBathSpec, case: SesrCase, n_s: usize, n_e: usize) -> Result<f64> {
    Ok(improved_energy_report(spec, case, n_s, n_e)?.g_sum)
}

pub fn improved_energy_report(
    spec: &SpinBathSpec,
    case: SesrCase,
    n_s: usize,
    n_e: usize,
) -> Result<ImprovedEnergyReport> {
    spec.validate(DEFAULT_DIM_BUDGET)?;
    if n_s > 1 || n_e >= spec.dim_e() {
        return Err(Error::Invalid(format!("level ({n_s}, {n_e}) out of range")));
    }
    let (w, v) = case_block(spec, case, n_e);
    if w == 0.0 {
        return Err(Error::DegenerateDenominator { a: n_s * spec.dim_e() + n_e, b: (1 - n_s) * spec.dim_e() + n_e });
    }
    let s = parity(n_s);
    let g2 = s * v * v / (2.0 * w);
    let g4 = -s * v.powi(4) / (8.0 * w.powi(3));
    let r = v / (2.0 * w);
    Ok(ImprovedEnergyReport {
        g_sum: s * w + g2 + g4,
        bracket: s * w * (1.0 + 0.5 * r * r - 0.5 * r.powi(4)),
        exact: s * w.signum() * w.hypot(v),
    })
}

/// Order-`order` part (0, 1 or 2) of the case-one improved total density
/// matrix, in the computational basis.
pub fn case_one_density_orders(rho0: &DensityMatrix, t: f64, spec: &SpinBathSpec, order: usize) -> Result<DenseOperator> {
    spec.validate(DEFAULT_DIM_BUDGET)?;
    if order > 2 {
        return Err(Error::Unsupported(format!("case-one density order {order}; only 0, 1, 2 are available")));
    }
    if spec.mu == 0.0 {
        return Err(Error::Invalid("case one needs a nonzero system field".into()));
    }
    let de = spec.dim_e();
    let dim = 2 * de;
    if rho0.dim() != dim {
        return Err(Error::DimensionMismatch(format!("state of dimension {} for {dim} levels", rho0.dim())));
    }
    let u = tensor_product(&psi_basis(), &chi_basis(spec)?)?;
    let r = u.adjoint() * rho0.op() * &u;
    let energy: Vec<f64> = (0..dim)
        .map(|i| improved_energy_case(spec, SesrCase::One, i / de, i % de))
        .collect::<Result<_>>()?;
    let ph = |i: usize| C64::from_polar(1.0, -energy[i] * t);
    let flip = |i: usize| (i + de) % dim;
    // (-1)^{n_S} f_{n_E} / (2 mu) for level i
    let weight = |i: usize| parity(i / de) * spec.f(i % de) / (2.0 * spec.mu);
    let mut out = DenseOperator::zeros(dim, dim);
    for m in 0..dim {
        for n in 0..dim {
            let rho = r[(m, n)];
            let (mb, nb) = (flip(m), flip(n));
            match order {
                0 => out[(m, n)] += ph(m) * ph(n).conj() * rho,
                1 => {
                    out[(m, nb)] += (ph(m) * ph(n).conj() - ph(m) * ph(nb).conj()) * weight(n) * rho;
                    out[(mb, n)] += (ph(m) * ph(n).conj() - ph(mb) * ph(n).conj()) * weight(m) * rho;
                }
                _ => {
                    out[(m, n)] -= (ph(m) * ph(n).conj() - ph(m) * ph(nb).conj()) * weight(n).powi(2) * rho;
                    out[(m, n)] -= (ph(m) * ph(n).conj() - ph(mb) * ph(n).conj()) * weight(m).powi(2) * rho;
                    // the bra side carries conjugated phases
                    out[(mb, nb)] += (ph(m) - ph(mb)) * (ph(n) - ph(nb)).conj() * (weight(m) * weight(n)) * rho;
                }
            }
        }
    }
    Ok(&u * out * u.adjoint())
}
