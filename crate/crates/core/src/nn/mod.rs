//! Parameters, initialization, the Adam optimizer and checkpoints.

mod adam;
pub mod checkpoint;
mod params;

pub use adam::{adam_step, AdamConfig};
pub use params::{init_params, Bound, LayerSpec, Param, ParamSet, INIT_STD};
