//! Grey-box plug-flow model of diazo acetonitrile synthesis and
//! decomposition, with calibration against flow-reactor measurements.
//!
//! Modules build on each other from the bottom up: [`species`] and
//! [`kinetics`] define the reaction network, [`pfr`] integrates it along the
//! reactor, [`calibration`] fits the parameters and [`validation`] scores
//! the fit.

pub mod calibration;
pub mod dataio;
pub mod kinetics;
pub mod ode;
pub mod pfr;
pub mod species;
pub mod validation;

pub use calibration::{
    bundled_experiments, experiments_from_records, fit, CalibrationError, CostBreakdown,
    Experiment, FitReport, Observable, OptimizerSettings, ParameterLayout,
};
pub use dataio::{DataError, ExperimentRecord, ReactorConfig, Setup, SimulationInputs};
pub use kinetics::{
    ArrheniusParams, DecompositionMode, DecompositionModel, InputScaling, KineticParameters,
    KineticsError, NeuralDecomposition, ParamFileError,
};
pub use pfr::{AxialProfile, MixtureState, Observables, SolveError, SolverOptions};
pub use species::Species;
pub use validation::{
    CrossValReport, CrossValSettings, FoldScheme, MetricSet, Prediction, ValidationError,
};

/// Any failure surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Parameters(#[from] ParamFileError),
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}
