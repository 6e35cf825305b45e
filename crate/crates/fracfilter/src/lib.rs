//! Joint state-parameter estimation for flow in fractured porous media.
//!
//! The crate couples a mixed finite-element forward solver for reduced
//! fracture models (the fracture is a line with its own 1-D flow problem,
//! exchanging mass with the surrounding matrix) with three data-assimilation
//! methods:
//!
//! * a score-based ensemble filter for the high-dimensional state,
//! * a particle-style direct filter for the physical parameters,
//! * an alternating combination of the two that estimates both jointly,
//!
//! plus an augmented-state ensemble Kalman filter used as a baseline. The
//! `fracfilter` binary drives complete twin experiments: generate synthetic
//! observations from a reference run, assimilate, and write CSV/SVG reports.

pub mod assemble;
pub mod augenkf;
pub mod bc;
pub mod config;
pub mod darcy;
pub mod direct_filter;
pub mod error;
pub mod experiment;
pub mod plot;
pub mod forward;
pub mod mesh;
pub mod ensf;
pub mod model;
pub mod observe;
pub mod rng;
pub mod stats;
pub mod united;
pub mod verify;

pub use error::{FfError, Result};
