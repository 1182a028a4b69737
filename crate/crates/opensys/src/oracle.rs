//! Brute-force references by full eigendecomposition.
//!
//! Nothing here touches the series or master-equation code, so agreement
//! between the two is an independent check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    diag_real, frobenius, hermitian_eigendecomposition, hermitian_part, max_abs, partial_trace_env,
    trace_distance_ops, DenseOperator, DensityMatrix, Eigen, DEFAULT_DIM_BUDGET,
};
use crate::master::{FactorizedInitialState, MasterConfig, MasterEquation, OpenSystemModel, Truncation};
use crate::milburn::{MilburnEvolution, MilburnOrders, MilburnParams, MilburnSeries};
use crate::propagator::{SeriesConfig, SeriesEvolution};
use crate::sesr::{build_sesr, perturbation_matrix, CouplingDecomposition, HamiltonianSplit, SesrBasis};

/// Unitary evolution under one Hamiltonian with the eigendecomposition cached.
#[derive(Clone, Debug)]
pub struct ExactEvolution {
    eigen: Eigen,
}

impl ExactEvolution {
    pub fn new(h: &DenseOperator) -> Result<Self> {
        Self::with_budget(h, DEFAULT_DIM_BUDGET)
    }

    pub fn with_budget(h: &DenseOperator, budget: usize) -> Result<Self> {
        if h.nrows() > budget {
            return Err(Error::DimensionBudget { requested: h.nrows(), budget });
        }
        Ok(ExactEvolution { eigen: hermitian_eigendecomposition(h)? })
    }

    pub fn eigen(&self) -> &Eigen {
        &self.eigen
    }

    /// `e^{-iHt}`
    pub fn propagator(&self, t: f64) -> DenseOperator {
        self.eigen.apply(|e| num_complex::Complex64::from_polar(1.0, -e * t))
    }

    pub fn evolve_op(&self, rho0: &DenseOperator, t: f64) -> Result<DenseOperator> {
        if rho0.nrows() != self.eigen.values.len() || rho0.ncols() != rho0.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "state {:?} for a Hamiltonian of dimension {}",
                rho0.shape(),
                self.eigen.values.len()
            )));
        }
        let u = self.propagator(t);
        Ok(hermitian_part(&(&u * rho0 * u.adjoint())))
    }

    pub fn evolve(&self, rho0: &DensityMatrix, t: f64) -> Result<DensityMatrix> {
        Ok(DensityMatrix::new_unchecked(self.evolve_op(rho0.op(), t)?))
    }

    /// `Tr_E rho(t)` for a composite state.
    pub fn reduced(&self, rho0: &DensityMatrix, t: f64, dim_s: usize, dim_e: usize) -> Result<DensityMatrix> {
        let total = self.evolve_op(rho0.op(), t)?;
        Ok(DensityMatrix::new_unchecked(hermitian_part(&partial_trace_env(&total, dim_s, dim_e)?)))
    }
}

/// `V e^{-i Lambda t} V^dagger rho0 V e^{i Lambda t} V^dagger`
pub fn exact_evolve(h: &DenseOperator, rho0: &DensityMatrix, t: f64) -> Result<DensityMatrix> {
    ExactEvolution::new(h)?.evolve(rho0, t)
}

/// Reduced state of the exact evolution.
pub fn exact_reduced(
    h: &DenseOperator,
    rho0: &DensityMatrix,
    t: f64,
    dim_s: usize,
    dim_e: usize,
) -> Result<DensityMatrix> {
    ExactEvolution::new(h)?.reduced(rho0, t, dim_s, dim_e)
}

/// Per-time distances of one method from the reference.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodErrors {
    pub method: String,
    pub trace_distance: Vec<f64>,
    pub frobenius_distance: Vec<f64>,
    pub max_trace_distance: f64,
    pub endpoint_trace_distance: f64,
}

impl MethodErrors {
    pub fn from_states(method: &str, states: &[DenseOperator], reference: &[DenseOperator]) -> Result<Self> {
        if states.len() != reference.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} states against {} reference states",
                states.len(),
                reference.len()
            )));
        }
        let mut trace_distance = Vec::with_capacity(states.len());
        let mut frobenius_distance = Vec::with_capacity(states.len());
        for (s, r) in states.iter().zip(reference) {
            trace_distance.push(trace_distance_ops(s, r)?);
            frobenius_distance.push(frobenius(&(s - r)));
        }
        let max_trace_distance = trace_distance.iter().cloned().fold(0.0, f64::max);
        let endpoint_trace_distance = trace_distance.last().cloned().unwrap_or(0.0);
        Ok(MethodErrors {
            method: method.to_string(),
            trace_distance,
            frobenius_distance,
            max_trace_distance,
            endpoint_trace_distance,
        })
    }
}

/// One row of a parameter or order sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub parameter: f64,
    pub max_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub times: Vec<f64>,
    pub methods: Vec<MethodErrors>,
    pub scaling: Vec<ScalingRow>,
}

impl ComparisonReport {
    pub fn method(&self, name: &str) -> Option<&MethodErrors> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// A dynamics method that [`compare_methods`] can run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    ExactSeries { order: usize },
    ImprovedSeries {
        #[serde(default = "default_energy_order")]
        energy_order: u8,
    },
    PerturbedMaster,
    ImprovedMaster,
    ExactTruncatedMaster { depth: usize, max_order: usize },
    Redfield,
    MilburnClosedForm,
    MilburnKraus,
    MilburnPerturbative { k_max: usize, l_max: usize },
}

fn default_energy_order() -> u8 {
    5
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::ExactSeries { order } => format!("exact_series({order})"),
            Method::ImprovedSeries { energy_order } => format!("improved_series({energy_order})"),
            Method::PerturbedMaster => "perturbed_master".into(),
            Method::ImprovedMaster => "improved_master".into(),
            Method::ExactTruncatedMaster { depth, max_order } => format!("exact_truncated_master({depth},{max_order})"),
            Method::Redfield => "redfield".into(),
            Method::MilburnClosedForm => "milburn_closed_form".into(),
            Method::MilburnKraus => "milburn_kraus".into(),
            Method::MilburnPerturbative { k_max, l_max } => format!("milburn_perturbative({k_max},{l_max})"),
        }
    }

    pub fn is_master(&self) -> bool {
        self.truncation().is_some()
    }

    pub fn is_milburn(&self) -> bool {
        matches!(self, Method::MilburnClosedForm | Method::MilburnKraus | Method::MilburnPerturbative { .. })
    }

    /// Master-equation truncation, for the master methods.
    pub fn truncation(&self) -> Option<Truncation> {
        match *self {
            Method::PerturbedMaster => Some(Truncation::SecondOrder),
            Method::ImprovedMaster => Some(Truncation::ImprovedSecondOrder),
            Method::ExactTruncatedMaster { depth, max_order } => Some(Truncation::ExactTruncated { depth, max_order }),
            Method::Redfield => Some(Truncation::Redfield),
            _ => None,
        }
    }
}

/// One Hamiltonian seen both ways: as system, bath and coupling for the
/// master equations, and as an SESR with its perturbation for the series.
#[derive(Clone, Debug)]
pub struct ComparisonModel {
    pub open: OpenSystemModel,
    pub basis: SesrBasis,
    /// `H_tot1` in the SESR.
    pub h1_sesr: DenseOperator,
}

impl ComparisonModel {
    /// SESR of `h_S (x) I + I (x) h_E` with the whole coupling as the perturbation.
    pub fn inherent(open: OpenSystemModel) -> Result<Self> {
        let h_se = open.h_se()?;
        let split = HamiltonianSplit::new(open.h_s.clone(), open.h_e.clone(), CouplingDecomposition::default(), h_se)?;
        let basis = build_sesr(&split)?;
        let h1_sesr = perturbation_matrix(&split.h_tot1, &basis)?.h1_full();
        Ok(ComparisonModel { open, basis, h1_sesr })
    }

    /// Use a given SESR; it has to describe the same total Hamiltonian.
    pub fn with_sesr(open: OpenSystemModel, basis: SesrBasis, h1_sesr: DenseOperator) -> Result<Self> {
        let h_tot = open.h_tot()?;
        if basis.dim() != h_tot.nrows() || h1_sesr.shape() != h_tot.shape() {
            return Err(Error::DimensionMismatch(format!(
                "SESR of dimension {} for a model of dimension {}",
                basis.dim(),
                h_tot.nrows()
            )));
        }
        let rebuilt = basis.from_sesr(&(diag_real(&basis.energies) + &h1_sesr));
        let gap = max_abs(&(rebuilt - &h_tot));
        if gap > 1e-10 * max_abs(&h_tot).max(1.0) {
            return Err(Error::Invalid(format!("SESR does not reproduce the model Hamiltonian (max deviation {gap:.3e})")));
        }
        Ok(ComparisonModel { open, basis, h1_sesr })
    }

    pub fn h_tot(&self) -> Result<DenseOperator> {
        self.open.h_tot()
    }
}

/// Settings shared by all methods of one comparison.
#[derive(Clone, Debug, Default)]
pub struct CompareOptions {
    /// Base master configuration; each master method sets its own truncation.
    pub master: MasterConfig,
    pub milburn: MilburnParams,
    /// Base series configuration; orders come from the method.
    pub series: SeriesConfig,
}

/// Reduced states of one method on a time grid.
pub fn run_method(
    model: &ComparisonModel,
    initial: &FactorizedInitialState,
    t_grid: &[f64],
    method: Method,
    opts: &CompareOptions,
) -> Result<Vec<DenseOperator>> {
    let rho_tot = initial.total()?;
    let (ds, de) = (model.open.dim_s(), model.open.dim_e());
    match method {
        Method::ExactSeries { .. } | Method::ImprovedSeries { .. } => {
            let cfg = match method {
                Method::ExactSeries { order } => SeriesConfig { max_order_exact: order, improved: false, ..opts.series.clone() },
                Method::ImprovedSeries { energy_order } => {
                    SeriesConfig { improved: true, improved_energy_order: energy_order, ..opts.series.clone() }
                }
                _ => unreachable!(),
            };
            let series = SeriesEvolution::new(&model.basis, &model.h1_sesr, &cfg)?;
            t_grid.iter().map(|&t| Ok(series.reduced(&rho_tot, t)?.rho.into_op())).collect()
        }
        Method::MilburnClosedForm | Method::MilburnKraus => {
            let ev = MilburnEvolution::new(&model.h_tot()?, opts.milburn)?;
            t_grid
                .iter()
                .map(|&t| {
                    let total = if method == Method::MilburnKraus {
                        ev.kraus_sum(rho_tot.op(), t, None)?.0
                    } else {
                        ev.closed_form(rho_tot.op(), t)?
                    };
                    Ok(hermitian_part(&partial_trace_env(&total, ds, de)?))
                })
                .collect()
        }
        Method::MilburnPerturbative { k_max, l_max } => {
            let series = MilburnSeries::new(&model.basis, &model.h1_sesr, opts.milburn, opts.series.path_budget)?;
            let orders = MilburnOrders { k_max, l_max };
            t_grid.iter().map(|&t| Ok(series.reduced(&rho_tot, t, orders)?.into_op())).collect()
        }
        _ => {
            let truncation = method.truncation().expect("master method");
            let cfg = MasterConfig { truncation, ..opts.master };
            let me = MasterEquation::new(&model.open, &initial.rho_e0, cfg)?;
            Ok(me.evolve(&initial.rho_s0, t_grid)?.states)
        }
    }
}

/// Reference reduced states: unitary evolution, or the closed-form Milburn
/// solution when `milburn` is given.
pub fn reference_states(
    model: &ComparisonModel,
    initial: &FactorizedInitialState,
    t_grid: &[f64],
    milburn: Option<MilburnParams>,
) -> Result<Vec<DenseOperator>> {
    let h = model.h_tot()?;
    let rho_tot = initial.total()?;
    let (ds, de) = (model.open.dim_s(), model.open.dim_e());
    match milburn {
        Some(p) => {
            let ev = MilburnEvolution::new(&h, p)?;
            t_grid
                .iter()
                .map(|&t| Ok(hermitian_part(&partial_trace_env(&ev.closed_form(rho_tot.op(), t)?, ds, de)?)))
                .collect()
        }
        None => {
            let ev = ExactEvolution::new(&h)?;
            t_grid.iter().map(|&t| Ok(ev.reduced(&rho_tot, t, ds, de)?.into_op())).collect()
        }
    }
}

/// Runs each method and its reference on the same grid. Unitary methods are
/// measured against full eigendecomposition, Milburn methods against the
/// closed-form dephasing solution.
pub fn compare_methods(
    model: &ComparisonModel,
    initial: &FactorizedInitialState,
    t_grid: &[f64],
    methods: &[Method],
    opts: &CompareOptions,
) -> Result<ComparisonReport> {
    let mut report = ComparisonReport { times: t_grid.to_vec(), ..Default::default() };
    if methods.is_empty() {
        return Ok(report);
    }
    let mut unitary = None;
    let mut dephased = None;
    for &method in methods {
        let reference = if method.is_milburn() {
            if dephased.is_none() {
                dephased = Some(reference_states(model, initial, t_grid, Some(opts.milburn))?);
            }
            dephased.as_ref().unwrap()
        } else {
            if unitary.is_none() {
                unitary = Some(reference_states(model, initial, t_grid, None)?);
            }
            unitary.as_ref().unwrap()
        };
        let states = run_method(model, initial, t_grid, method, opts)?;
        report.methods.push(MethodErrors::from_states(&method.label(), &states, reference)?);
    }
    Ok(report)
}
