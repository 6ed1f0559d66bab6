//! Deformable atlas registration for brains with space-occupying lesions,
//! plus the cohort-level spatial statistics built on top of it.
//!
//! The crate is organised bottom-up:
//!
//! * [`volumes`]: grids, images, label maps, affines, displacement fields and
//!   lazy transform chains with single-interpolation resampling.
//! * [`nifti`] / [`io`]: NIfTI-1 volumes, plain-text affines, case manifests.
//! * [`edt`] / [`distmaps`]: exact Euclidean distance transforms and the
//!   label-offset distance maps the similarity loss runs on.
//! * [`field`]: stationary velocity field integration, composition and
//!   Jacobian analysis.
//! * [`diff`]: a small reverse-mode tape over `ndarray` used for training.
//! * [`losses`], [`network`], [`training`]: the registration objective, the
//!   displacement-predicting network and its optimisation loops.
//! * [`metrics`], [`cohort`], [`report`]: evaluation and cohort statistics.
//! * [`phantom`]: synthetic anatomies used by the test-suite and demos.

pub mod cohort;
pub mod diff;
pub mod distmaps;
pub mod edt;
pub mod error;
pub mod field;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nifti;
pub mod par;
pub mod phantom;
pub mod report;
pub mod training;
pub mod volumes;

pub use error::{Error, Result};
