pub mod archive;
pub mod color;
pub mod data;
pub mod decoder;
pub mod error;
pub mod heads;
pub mod loss;
pub mod mask;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod patches;
pub mod pixel;
pub mod render;
pub mod skeleton;
pub mod train;

pub use color::ColorImage;
pub use error::{Error, Result};
pub use mask::BinaryMask;
