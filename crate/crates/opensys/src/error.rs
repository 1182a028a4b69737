use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension budget exceeded: {requested} > {budget}")]
    DimensionBudget { requested: usize, budget: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("operator is not hermitian (max |A - A^dagger| = {0:.3e})")]
    NotHermitian(f64),

    #[error("non-finite entries in {0}")]
    NonFinite(String),

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("H_SE0 violates SESR solvability: {0}")]
    Unsolvable(String),

    #[error("simultaneous diagonalization failed (off-diagonal residual {0:.3e})")]
    NoCommonBasis(f64),

    #[error("eigendecomposition did not converge")]
    EigenFailed,

    #[error("degenerate denominator E[{a}] - E[{b}] with nonzero numerator")]
    DegenerateDenominator { a: usize, b: usize },

    #[error("path budget exceeded: {paths} paths at order {order} (budget {budget}); use a smaller system or a lower order")]
    PathBudget { paths: u128, order: usize, budget: u64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("assumption app1 violated (|Tr_E[H_SE, rho(0)]| = {0:.3e}); use the full perturbed master equation instead")]
    App1Violated(f64),

    #[error("Kraus completeness defect {defect:.3e} exceeds tolerance {tol:.3e} at K_max = {k_max}; increase K_max")]
    KrausDefect { defect: f64, tol: f64, k_max: usize },

    #[error("integration produced non-finite entries at step {0}")]
    NonFiniteStep(usize),

    #[error("invalid input: {0}")]
    Invalid(String),
}
