pub mod cam;
pub mod classify;
pub mod dataset;
pub mod error;
pub mod gan;
pub mod gen_metrics;
pub mod imaging;
pub mod mask;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod rle;
pub mod seed;
pub mod seg;

pub use error::{Error, Result};
