//! Stochastic model predictive control under a discounted chance constraint,
//! with online selection of the feedback gain from an offline-synthesised
//! library.

pub mod controller;
pub mod error;
pub mod linalg;
pub mod model;
pub mod prediction;
pub mod properties;
pub mod qcqp;
pub mod selection;
pub mod sim;
pub mod synthesis;

pub use controller::{ControlMode, Controller, StepRecord};
pub use error::{Result, SmpcError};
pub use model::{PlantModel, ValidationReport};
pub use prediction::PredictionOperators;
pub use qcqp::{solve_mpc, QcqpSolution};
pub use selection::{GainSchedule, InitialPolicy, SelectionOutcome};
pub use sim::{ClosedLoopConfig, Distribution, Metrics, Trajectory};
pub use synthesis::{dp_fixed_point, DpOptions, GainLibrary, GainRecord, GridSpacing, GridSpec};
