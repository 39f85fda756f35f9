//! Minimal differentiable tensor machinery used by the GAN, classifier and
//! explainer modules.

mod graph;
mod layers;
mod optim;
mod tensor;

pub use graph::{softmax_rows, Gradients, Graph, ParamId, ParamStore, Var};
pub use layers::{param, Conv2d, Init, Linear};
pub use optim::Adam;
pub use tensor::Tensor;
