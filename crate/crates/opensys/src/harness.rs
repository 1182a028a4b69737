//! Scenario files and the batch runner behind the `opensys` binary.
//!
//! A scenario is one JSON document. Matrix files it references are JSON too,
//! `{"re": [[...]], "im": [[...]]}` with `im` optional, and are resolved
//! relative to the scenario's directory.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::linalg::{c, hermitian_part, trace_distance_ops, DenseOperator, DensityMatrix, C64, DEFAULT_DIM_BUDGET};
use crate::master::{
    thermal_state, uniform_grid, FactorizedInitialState, ImprovedForm, JPicture, MasterConfig, OpenSystemModel,
    ThermalParams,
};
use crate::milburn::MilburnParams;
use crate::models::{sesr_for_case, spin_bath_open_system, SesrCase, SpinBathSpec};
use crate::oracle::{reference_states, run_method, CompareOptions, ComparisonModel, Method};
use crate::propagator::{SeriesConfig, ThirdOrderForm};
use crate::sesr::CouplingDecomposition;

/// Case one is meant for a strong system field, `mu >= CASE_ONE_RATIO max Y`.
pub const CASE_ONE_RATIO: f64 = 10.0;
/// Case four is meant for a weak one, `mu <= min Y / CASE_FOUR_RATIO`.
pub const CASE_FOUR_RATIO: f64 = 10.0;

#[derive(Debug)]
pub enum HarnessError {
    /// Malformed or inconsistent scenario.
    Validation(String),
    /// Dimension or path budget exceeded.
    Budget(String),
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 2,
            HarnessError::Runtime(_) => 3,
            HarnessError::Budget(_) => 4,
        }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Validation(m) => write!(f, "validation error: {m}"),
            HarnessError::Budget(m) => write!(f, "budget exceeded: {m}"),
            HarnessError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<Error> for HarnessError {
    fn from(e: Error) -> Self {
        match e {
            Error::DimensionBudget { .. } | Error::PathBudget { .. } => HarnessError::Budget(e.to_string()),
            _ => HarnessError::Runtime(e.to_string()),
        }
    }
}

/// Errors while the scenario is being checked are all validation errors,
/// except for a budget overrun.
fn invalid(e: Error) -> HarnessError {
    match HarnessError::from(e) {
        HarnessError::Runtime(m) => HarnessError::Validation(m),
        other => other,
    }
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `sz (x) sum_k Z_k sz_k`
    Zurek { z: Vec<f64> },
    /// `mu sx (x) I + sz (x) sum_k (X_k sx_k + Z_k sz_k)`, plus an optional
    /// bath self-Hamiltonian `sum_k W_k sx_k`.
    Extended {
        mu: f64,
        x: Vec<f64>,
        z: Vec<f64>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        bath_field: Vec<f64>,
    },
    /// `h_S (x) I + I (x) h_E + sum_m S_m (x) B_m` from matrix files.
    Custom { h_s: PathBuf, h_e: PathBuf, coupling: Vec<CouplingFiles> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingFiles {
    pub system: PathBuf,
    pub environment: PathBuf,
}

/// Which SESR the series methods use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseChoice {
    One,
    Four,
    /// Eigenbases of `h_S` and `h_E`, the whole coupling as perturbation.
    #[default]
    Inherent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpec {
    Zero,
    One,
    Plus,
    Minus,
    PlusI,
    MinusI,
    /// Random mixed state drawn from the scenario seed.
    Random,
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvStateSpec {
    /// One single-qubit state per environment qubit.
    Product(Vec<StateSpec>),
    /// Needs `beta_b`.
    Thermal,
    MaximallyMixed,
    Random,
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialStateSpec {
    pub system: StateSpec,
    pub environment: EnvStateSpec,
}

/// Master-equation settings other than the truncation, which comes from the
/// method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasterOptions {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub assume_app1: bool,
    pub j_picture: JPicture,
    pub improved_energy_order: u8,
    pub improved_form: ImprovedForm,
}

impl Default for MasterOptions {
    fn default() -> Self {
        let d = MasterConfig::default();
        MasterOptions {
            dt: d.dt,
            assume_app1: d.assume_app1,
            j_picture: d.j_picture,
            improved_energy_order: d.improved_energy_order,
            improved_form: d.improved_form,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeriesOptions {
    pub third_order_form: ThirdOrderForm,
    pub per_term_energy_cutoff: bool,
    pub path_budget: u64,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        let d = SeriesConfig::default();
        SeriesOptions {
            third_order_form: d.third_order_form,
            per_term_energy_cutoff: d.per_term_energy_cutoff,
            path_budget: d.path_budget,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub trajectory: PathBuf,
    pub summary: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths { trajectory: "trajectory.csv".into(), summary: "summary.json".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub model: ModelSpec,
    #[serde(default)]
    pub case: CaseChoice,
    pub initial_state: InitialStateSpec,
    pub method: Method,
    #[serde(default)]
    pub master: MasterOptions,
    #[serde(default)]
    pub series: SeriesOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kraus_cutoff_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_b: Option<f64>,
    pub t_start: f64,
    pub t_end: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub output: OutputPaths,
    #[serde(default)]
    pub seed: u64,
    /// Add the trace distance to the reference solution.
    #[serde(default)]
    pub oracle: bool,
}

/// A scenario together with the directory its file paths are relative to.
#[derive(Clone, Debug)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub base_dir: PathBuf,
}

pub fn parse_scenario_str(text: &str) -> HarnessResult<Scenario> {
    serde_json::from_str(text).map_err(|e| HarnessError::Validation(format!("line {}, column {}: {e}", e.line(), e.column())))
}

/// Reads and validates a scenario file.
pub fn parse_scenario(path: &Path) -> HarnessResult<LoadedScenario> {
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let scenario = parse_scenario_str(&text).map_err(|e| match e {
        HarnessError::Validation(m) => HarnessError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded = LoadedScenario { scenario, base_dir };
    loaded.validate()?;
    Ok(loaded)
}

impl Scenario {
    pub fn time_grid(&self) -> Vec<f64> {
        uniform_grid(self.t_start, self.t_end, self.n_steps)
    }

    pub fn milburn_params(&self) -> MilburnParams {
        let mut p = MilburnParams::new(self.theta0.unwrap_or(0.0));
        if let Some(tol) = self.kraus_cutoff_tol {
            p.kraus_cutoff_tol = tol;
        }
        p
    }

    pub fn master_config(&self) -> MasterConfig {
        let m = self.master;
        MasterConfig {
            truncation: self.method.truncation().unwrap_or_default(),
            dt: m.dt,
            assume_app1: m.assume_app1,
            j_picture: m.j_picture,
            improved_energy_order: m.improved_energy_order,
            improved_form: m.improved_form,
            ..MasterConfig::default()
        }
    }

    pub fn compare_options(&self) -> CompareOptions {
        CompareOptions {
            master: self.master_config(),
            milburn: self.milburn_params(),
            series: SeriesConfig {
                third_order_form: self.series.third_order_form,
                per_term_energy_cutoff: self.series.per_term_energy_cutoff,
                path_budget: self.series.path_budget,
                ..SeriesConfig::default()
            },
        }
    }

    fn spin_bath(&self) -> Option<SpinBathSpec> {
        match &self.model {
            ModelSpec::Zurek { z } => Some(SpinBathSpec::zurek(z.clone())),
            ModelSpec::Extended { mu, x, z, .. } => Some(SpinBathSpec::extended(*mu, x.clone(), z.clone())),
            ModelSpec::Custom { .. } => None,
        }
    }

    /// Checks that do not need any file.
    pub fn validate_fields(&self) -> HarnessResult<()> {
        let v = |m: String| Err(HarnessError::Validation(m));
        if !(self.t_start.is_finite() && self.t_end.is_finite()) {
            return v("t_start and t_end must be finite".into());
        }
        if self.t_end < self.t_start {
            return v(format!("t_end = {} is before t_start = {}", self.t_end, self.t_start));
        }
        if self.n_steps < 1 {
            return v("n_steps must be at least 1".into());
        }
        if let Some(spec) = self.spin_bath() {
            spec.validate(DEFAULT_DIM_BUDGET).map_err(invalid)?;
        }
        if let ModelSpec::Extended { bath_field, z, .. } = &self.model {
            if !bath_field.is_empty() && bath_field.len() != z.len() {
                return v(format!("{} bath fields for {} environment qubits", bath_field.len(), z.len()));
            }
        }
        match (self.case, &self.model) {
            (CaseChoice::Inherent, _) => {}
            (_, ModelSpec::Extended { bath_field, .. }) => {
                if !bath_field.is_empty() {
                    return v("cases one and four describe the model without bath fields".into());
                }
                if self.method.is_master() {
                    return v("master-equation methods run in the inherent case".into());
                }
            }
            _ => return v("cases one and four apply to the extended model only".into()),
        }
        if let Some(b) = self.beta_b {
            ThermalParams { beta_b: b }.validate().map_err(invalid)?;
        }
        if self.initial_state.environment == EnvStateSpec::Thermal && self.beta_b.is_none() {
            return v("a thermal environment needs beta_b".into());
        }
        if self.method.is_milburn() {
            self.milburn_params().validate().map_err(invalid)?;
        } else if self.theta0.is_some() {
            return v(format!("theta0 is only used by Milburn methods, not {}", self.method.label()));
        }
        if self.method.is_master() {
            self.master_config().validate().map_err(invalid)?;
        }
        match self.method {
            Method::ExactSeries { .. } | Method::ImprovedSeries { .. } => {
                let cfg = self.compare_options().series;
                let cfg = match self.method {
                    Method::ExactSeries { order } => SeriesConfig { max_order_exact: order, ..cfg },
                    Method::ImprovedSeries { energy_order } => {
                        SeriesConfig { improved: true, improved_energy_order: energy_order, ..cfg }
                    }
                    _ => cfg,
                };
                cfg.validate().map_err(invalid)?;
            }
            Method::MilburnPerturbative { l_max, .. } if l_max > crate::propagator::MAX_EXACT_ORDER => {
                return v(format!("l_max {l_max} exceeds {}", crate::propagator::MAX_EXACT_ORDER));
            }
            _ => {}
        }
        Ok(())
    }

    /// Warnings about preconditions that are advised but not enforced.
    pub fn advisories(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let (Some(spec), ModelSpec::Extended { mu, .. }) = (self.spin_bath(), &self.model) {
            let y = spec.y();
            let (min_y, max_y) = y.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
            match self.case {
                CaseChoice::One if *mu < CASE_ONE_RATIO * max_y => out.push(format!(
                    "case one assumes a strong system field; mu = {mu} is below {CASE_ONE_RATIO} x max Y = {}",
                    CASE_ONE_RATIO * max_y
                )),
                CaseChoice::Four if *mu * CASE_FOUR_RATIO > min_y => out.push(format!(
                    "case four assumes a weak system field; mu = {mu} is above min Y / {CASE_FOUR_RATIO} = {}",
                    min_y / CASE_FOUR_RATIO
                )),
                _ => {}
            }
        }
        out
    }

    fn referenced_files(&self) -> Vec<&Path> {
        let mut files: Vec<&Path> = Vec::new();
        if let ModelSpec::Custom { h_s, h_e, coupling } = &self.model {
            files.push(h_s);
            files.push(h_e);
            for cf in coupling {
                files.push(&cf.system);
                files.push(&cf.environment);
            }
        }
        if let StateSpec::File(p) = &self.initial_state.system {
            files.push(p);
        }
        match &self.initial_state.environment {
            EnvStateSpec::File(p) => files.push(p),
            EnvStateSpec::Product(states) => {
                for s in states {
                    if let StateSpec::File(p) = s {
                        files.push(p);
                    }
                }
            }
            _ => {}
        }
        files
    }
}

impl LoadedScenario {
    pub fn new(scenario: Scenario, base_dir: impl Into<PathBuf>) -> Self {
        LoadedScenario { scenario, base_dir: base_dir.into() }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Field checks plus the existence of every referenced file.
    pub fn validate(&self) -> HarnessResult<()> {
        self.scenario.validate_fields()?;
        for p in self.scenario.referenced_files() {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(HarnessError::Validation(format!("referenced file {} does not exist", full.display())));
            }
        }
        Ok(())
    }

    fn read_matrix(&self, p: &Path) -> HarnessResult<DenseOperator> {
        let full = self.resolve(p);
        let text = fs::read_to_string(&full)
            .map_err(|e| HarnessError::Validation(format!("cannot read {}: {e}", full.display())))?;
        parse_matrix(&text).map_err(|m| HarnessError::Validation(format!("{}: {m}", full.display())))
    }

    /// The model in the representation the method needs.
    pub fn build_model(&self) -> HarnessResult<ComparisonModel> {
        let s = &self.scenario;
        let open = match &s.model {
            ModelSpec::Custom { h_s, h_e, coupling } => {
                let terms = coupling
                    .iter()
                    .map(|cf| Ok((self.read_matrix(&cf.system)?, self.read_matrix(&cf.environment)?)))
                    .collect::<HarnessResult<Vec<_>>>()?;
                let (h_s, h_e) = (self.read_matrix(h_s)?, self.read_matrix(h_e)?);
                OpenSystemModel::new(h_s, h_e, CouplingDecomposition::new(terms)).map_err(invalid)?
            }
            ModelSpec::Extended { bath_field, .. } => {
                spin_bath_open_system(&s.spin_bath().expect("spin bath"), bath_field).map_err(invalid)?
            }
            ModelSpec::Zurek { .. } => spin_bath_open_system(&s.spin_bath().expect("spin bath"), &[]).map_err(invalid)?,
        };
        let dim = open.dim_s() * open.dim_e();
        if dim > DEFAULT_DIM_BUDGET {
            return Err(HarnessError::Budget(format!("dimension {dim} > {DEFAULT_DIM_BUDGET}")));
        }
        let case = match s.case {
            CaseChoice::Inherent => return Ok(ComparisonModel::inherent(open)?),
            CaseChoice::One => SesrCase::One,
            CaseChoice::Four => SesrCase::Four,
        };
        let (_, basis, pert) = sesr_for_case(&s.spin_bath().expect("spin bath"), case).map_err(invalid)?;
        Ok(ComparisonModel::with_sesr(open, basis, pert.h1_full())?)
    }

    pub fn build_initial_state(&self, model: &ComparisonModel) -> HarnessResult<FactorizedInitialState> {
        let s = &self.scenario;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let (ds, de) = (model.open.dim_s(), model.open.dim_e());
        let rho_s = self.single_state(&s.initial_state.system, ds, &mut rng)?;
        let rho_e = match &s.initial_state.environment {
            EnvStateSpec::Product(states) => {
                let mut acc = DensityMatrix::new_unchecked(DenseOperator::identity(1, 1));
                for st in states {
                    acc = acc.tensor(&self.single_state(st, 2, &mut rng)?)?;
                }
                acc
            }
            EnvStateSpec::Thermal => {
                thermal_state(&model.open.h_e, ThermalParams { beta_b: s.beta_b.unwrap_or(0.0) }).map_err(invalid)?
            }
            EnvStateSpec::MaximallyMixed => DensityMatrix::maximally_mixed(de),
            EnvStateSpec::Random => random_state(de, &mut rng),
            EnvStateSpec::File(p) => DensityMatrix::new(self.read_matrix(p)?).map_err(invalid)?,
        };
        if rho_s.dim() != ds || rho_e.dim() != de {
            return Err(HarnessError::Validation(format!(
                "initial state dimensions ({}, {}) do not match the model ({ds}, {de})",
                rho_s.dim(),
                rho_e.dim()
            )));
        }
        FactorizedInitialState::new(rho_s, rho_e).map_err(invalid)
    }

    fn single_state(&self, spec: &StateSpec, dim: usize, rng: &mut ChaCha8Rng) -> HarnessResult<DensityMatrix> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let ket = match spec {
            StateSpec::Zero => [c(1.0, 0.0), c(0.0, 0.0)],
            StateSpec::One => [c(0.0, 0.0), c(1.0, 0.0)],
            StateSpec::Plus => [c(h, 0.0), c(h, 0.0)],
            StateSpec::Minus => [c(h, 0.0), c(-h, 0.0)],
            StateSpec::PlusI => [c(h, 0.0), c(0.0, h)],
            StateSpec::MinusI => [c(h, 0.0), c(0.0, -h)],
            StateSpec::Random => return Ok(random_state(dim, rng)),
            StateSpec::File(p) => return DensityMatrix::new(self.read_matrix(p)?).map_err(invalid),
        };
        if dim != 2 {
            return Err(HarnessError::Validation(format!("named qubit states need a qubit, not dimension {dim}")));
        }
        Ok(DensityMatrix::new_unchecked(DenseOperator::from_fn(2, 2, |i, j| ket[i] * ket[j].conj())))
    }
}

/// `A A^dagger / Tr(A A^dagger)` with uniform complex entries.
pub fn random_state(dim: usize, rng: &mut ChaCha8Rng) -> DensityMatrix {
    let a = DenseOperator::from_fn(dim, dim, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let p = &a * a.adjoint();
    let tr = p.trace();
    DensityMatrix::new_unchecked(hermitian_part(&(p / tr)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    re: Vec<Vec<f64>>,
    #[serde(default)]
    im: Option<Vec<Vec<f64>>>,
}

/// Reads `{"re": [[...]], "im": [[...]]}` into a square matrix.
pub fn parse_matrix(text: &str) -> std::result::Result<DenseOperator, String> {
    let m: MatrixFile = serde_json::from_str(text).map_err(|e| format!("line {}, column {}: {e}", e.line(), e.column()))?;
    let n = m.re.len();
    let im = m.im.unwrap_or_else(|| vec![vec![0.0; n]; n]);
    if im.len() != n || m.re.iter().chain(&im).any(|row| row.len() != n) {
        return Err(format!("matrix must be square with matching re and im parts ({n} rows)"));
    }
    Ok(DenseOperator::from_fn(n, n, |i, j| c(m.re[i][j], im[i][j])))
}

/// One trajectory with its optional reference distances.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub times: Vec<f64>,
    pub states: Vec<DenseOperator>,
    pub oracle_distance: Option<Vec<f64>>,
    pub advisories: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary<'a> {
    pub scenario: &'a Scenario,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncation: Option<crate::master::Truncation>,
    pub rows: usize,
    pub dim_s: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint_error: Option<f64>,
    pub max_trace_drift: f64,
    pub min_eigenvalue: f64,
    pub advisories: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// Runs the scenario's method on its time grid.
pub fn compute(loaded: &LoadedScenario, force_oracle: bool) -> HarnessResult<RunOutput> {
    let s = &loaded.scenario;
    let model = loaded.build_model()?;
    let initial = loaded.build_initial_state(&model)?;
    let times = s.time_grid();
    let opts = s.compare_options();
    let states = run_method(&model, &initial, &times, s.method, &opts)?;
    let oracle_distance = if s.oracle || force_oracle {
        let milburn = s.method.is_milburn().then_some(opts.milburn);
        let reference = reference_states(&model, &initial, &times, milburn)?;
        Some(states.iter().zip(&reference).map(|(a, b)| trace_distance_ops(a, b)).collect::<crate::error::Result<_>>()?)
    } else {
        None
    };
    Ok(RunOutput { times, states, oracle_distance, advisories: s.advisories() })
}

/// Column names of the trajectory CSV.
pub fn csv_header(dim: usize, with_oracle: bool) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    for i in 0..dim {
        for j in 0..dim {
            cols.push(format!("re_rho_{i}_{j}"));
            cols.push(format!("im_rho_{i}_{j}"));
        }
    }
    cols.push("trace".into());
    cols.push("purity".into());
    if with_oracle {
        cols.push("oracle_trace_distance".into());
    }
    cols
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn render_csv(out: &RunOutput) -> String {
    let dim = out.states.first().map(|s| s.nrows()).unwrap_or(0);
    let mut text = csv_header(dim, out.oracle_distance.is_some()).join(",");
    text.push('\n');
    for (k, (t, rho)) in out.times.iter().zip(&out.states).enumerate() {
        let mut row = vec![num(*t)];
        for i in 0..dim {
            for j in 0..dim {
                row.push(num(rho[(i, j)].re));
                row.push(num(rho[(i, j)].im));
            }
        }
        let tr: C64 = rho.trace();
        row.push(num(tr.re));
        row.push(num(DensityMatrix::new_unchecked(rho.clone()).purity()));
        if let Some(d) = &out.oracle_distance {
            row.push(num(d[k]));
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    text
}

pub fn render_summary(s: &Scenario, out: &RunOutput, wall_time_s: Option<f64>) -> HarnessResult<String> {
    let tr0 = out.states.first().map(|r| r.trace()).unwrap_or_default();
    let max_trace_drift = out.states.iter().map(|r| (r.trace() - tr0).norm()).fold(0.0, f64::max);
    let min_eigenvalue = out
        .states
        .iter()
        .map(|r| DensityMatrix::new_unchecked(r.clone()).min_eigenvalue())
        .collect::<crate::error::Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let summary = Summary {
        scenario: s,
        method: s.method.label(),
        truncation: s.method.truncation(),
        rows: out.times.len(),
        dim_s: out.states.first().map(|r| r.nrows()).unwrap_or(0),
        max_error: out.oracle_distance.as_ref().map(|d| d.iter().cloned().fold(0.0, f64::max)),
        endpoint_error: out.oracle_distance.as_ref().and_then(|d| d.last().cloned()),
        max_trace_drift,
        min_eigenvalue,
        advisories: &out.advisories,
        wall_time_s,
    };
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub output_dir: PathBuf,
    /// Compute the reference solution even if the scenario does not ask.
    pub force_oracle: bool,
    /// Put the wall time into the summary, which makes it run-dependent.
    pub timing: bool,
}

/// Paths that were written.
#[derive(Clone, Debug)]
pub struct Written {
    pub trajectory: PathBuf,
    pub summary: PathBuf,
    pub advisories: Vec<String>,
}

/// Computes and writes both output files. On any failure nothing is left
/// behind.
pub fn run_scenario(loaded: &LoadedScenario, opts: &RunOptions) -> HarnessResult<Written> {
    let start = Instant::now();
    let out = compute(loaded, opts.force_oracle)?;
    let csv = render_csv(&out);
    let wall = opts.timing.then(|| start.elapsed().as_secs_f64());
    let summary = render_summary(&loaded.scenario, &out, wall)?;
    let trajectory = opts.output_dir.join(&loaded.scenario.output.trajectory);
    let summary_path = opts.output_dir.join(&loaded.scenario.output.summary);
    let written = write_file(&trajectory, &csv).and_then(|_| write_file(&summary_path, &summary));
    if let Err(e) = written {
        let _ = fs::remove_file(&trajectory);
        let _ = fs::remove_file(&summary_path);
        return Err(HarnessError::Runtime(e));
    }
    Ok(Written { trajectory, summary: summary_path, advisories: out.advisories })
}

fn write_file(path: &Path, text: &str) -> std::result::Result<(), String> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    }
    let mut f = fs::File::create(path).map_err(|e| format!("cannot create {}: {e}", path.display()))?;
    f.write_all(text.as_bytes()).map_err(|e| format!("cannot write {}: {e}", path.display()))
}
