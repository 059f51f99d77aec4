//! Negative binomial generalized additive models for count panels.

pub mod basis;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod family;
pub mod fitter;
pub mod model_dsl;
pub mod optim;
pub mod simulate;
pub mod stats;

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Formula(#[from] model_dsl::ParseError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Family(#[from] family::FamilyError),
    #[error(transparent)]
    Basis(#[from] basis::BasisError),
    #[error(transparent)]
    Fit(#[from] fitter::FitError),
    #[error(transparent)]
    Diagnostics(#[from] diagnostics::DiagnosticsError),
    #[error(transparent)]
    Simulate(#[from] simulate::SimulateError),
}
