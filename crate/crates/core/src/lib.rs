//! Training engine for diverse neural-network ensembles.

pub mod cli;
pub mod data;
pub mod dist;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod netspec;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result, SpecError};
pub use graph::{CompiledGraph, InitPolicy};
pub use losses::{LossConfig, LossMode};
pub use netspec::{LayerSpec, NetworkSpec};
pub use tensor::{LayerPrimitive, Tensor};
