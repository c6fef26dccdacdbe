//! Adaptive MIMO radar sensing library.
//!
//! Models a co-located MIMO radar estimating target angles and complex
//! reflection coefficients over a short sequence of sensing stages. Each
//! stage transmits through a beamforming matrix, receives through a combining
//! matrix, and conditions a grid posterior on the measurement. Beamformers
//! are designed by maximizing a concave dual of the Bayesian Cramer-Rao
//! bound, alternating between the transmit and receive sides.
//!
//! The crate is organized bottom up:
//!
//! * [`array`]: uniform linear array responses, derivatives, measurements.
//! * [`posterior`]: grid posterior over angles with per-point Gaussian
//!   conditionals for the reflection coefficients.
//! * [`bfim`]: Bayesian Fisher information assembly and bound evaluation.
//! * [`dual`]: eigenvalue-based dual solver for one beamformer side.
//! * [`strategy`]: full sensing strategies (proposed and baselines).
//! * [`harness`]: seeded Monte Carlo comparison harness and file outputs.

pub mod array;
pub mod bfim;
pub mod dual;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod posterior;
pub mod random;
pub mod strategy;

pub use array::{ArrayGeometry, ArraySide, BeamformerPair, SceneParams};
pub use error::{Result, SenseError};
pub use harness::{ExperimentOutcome, ExperimentSpec, WmseRow, run_experiment, write_artifacts};
pub use linalg::{C64, CMat, CVec, RMat, RVec};
pub use strategy::{RunOutput, SensingConfig, StageRecord, StrategyKind, run_strategy};
