pub mod divdiff;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod master;
pub mod milburn;
pub mod models;
pub mod oracle;
pub mod propagator;
pub mod sesr;

#[cfg(test)]
mod testutil;
