//! Parameters, layers, velocity networks and the optimizer.

mod adam;
pub mod layers;
mod model;
mod params;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use model::{
    arch_path, input_gradient, Architecture, DiagonalSpec, FnField, MlpSpec, UNetSpec, VelocityField,
    VelocityModel,
};
pub use params::{BoundParams, ModelParams};
pub use train::{optimize, LossRow, LossTrace, OptimSettings};
