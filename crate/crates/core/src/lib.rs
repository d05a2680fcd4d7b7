//! Slimmable tensorial radiance fields: VM-decomposed density and appearance
//! grids whose rank can be cut after training, trained with a loss-gated
//! rank schedule.

pub mod decoder;
pub mod error;
pub mod grad;
pub mod grid;
pub mod imageio;
pub mod math;
pub mod model;
pub mod render;
pub mod scene;
pub mod slim;
pub mod theory;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use grid::{Aabb, Masks, RankState, TensorField};
pub use model::{Model, ModelConfig};
