//! Online Volt/VAr control for unbalanced radial distribution feeders.
//!
//! The crate is organised bottom-up:
//!
//! * [`netmodel`] holds the phase-aware feeder description and builds the
//!   constant matrices of the linearized multiphase branch-flow model
//!   (incidence blocks, `M`, the Hessian `H = MᵀM`).
//! * [`linflow`] evaluates that linear model.
//! * [`plant`] is a nonlinear backward/forward sweep power flow used as the
//!   "real" network that produces voltage measurements.
//! * [`pnm`] is the box-constrained solver: projected Newton, plus gradient
//!   projection (GP) and diagonally scaled GP (DSGP) baselines and a KKT checker.
//! * [`online`] closes the loop: one controller iteration per control period,
//!   driven by plant measurements and time-varying VAr limits.
//! * [`upperlayer`] schedules OLTC taps and capacitor banks over a short
//!   horizon by exhaustive enumeration.
//! * [`generate`], [`benchmark`] and [`io`] are the supporting plumbing for
//!   synthetic feeders, solver comparisons and on-disk formats.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod error;
pub mod generate;
pub mod io;
pub mod linflow;
pub mod netmodel;
pub mod online;
pub mod plant;
pub mod pnm;
pub mod upperlayer;

pub use error::{Error, Result};
pub use netmodel::{LinearSensitivityModel, NetworkModel, Phase, PhaseSet};
pub use pnm::{ControllerConfig, VarLimits};

