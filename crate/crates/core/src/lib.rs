//! Front metallization design for solar cells by topology optimization.
//!
//! The physics is a thin conductive sheet with a distributed diode source,
//! discretized on a structured bilinear-quad grid and solved by damped
//! Newton. Gradients of busbar power come from an adjoint solve and feed
//! either a direct per-pixel optimizer or a convolutional generator whose
//! weights are trained through the physics.

pub mod adam;
pub mod adjoint;
pub mod checkpoint;
pub mod cnn;
pub mod config;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod gradcheck;
pub mod io;
pub mod mesh;
pub mod optimize;
pub mod params;
pub mod physics;
pub mod sparse;

pub use checkpoint::Checkpoint;
pub use cnn::{CnnArch, CnnParams};
pub use config::{ExperimentConfig, ShapeConfig};
pub use error::{Error, Result};
pub use filter::{DensityField, FilterOperator};
pub use mesh::{BusbarSegment, BusbarSpec, Edge, GridSpec, Mesh, ShapeMask};
pub use optimize::{
    run_direct, run_solarnet, IterationLog, Pipeline, Problem, RunConfig, RunOutcome, Runner,
};
pub use params::{ParamBlock, ParamSet};
pub use physics::{CellModel, CellParams, Damping, SolveOptions, SolveResult};
