//! NanoNet: lightweight encoder-decoder segmentation networks built, trained,
//! evaluated and benchmarked on the CPU.

pub mod augment;
pub mod bench;
pub mod blocks;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Element, Shape, Tensor};
