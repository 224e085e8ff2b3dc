//! The FaCTR network, its parameters and their on-disk form.

mod checkpoint;
mod config;
mod lowrank;
mod network;
mod params;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{ModelConfig, Variant};
pub use lowrank::{low_rank_residual, numerical_rank, singular_values};
pub use network::{Batch, Factr, ForwardVars, InterpretabilityDump, RevinState, REVIN_EPS};
pub use params::{analytic_param_count, is_head, ParamBreakdown, Params};
