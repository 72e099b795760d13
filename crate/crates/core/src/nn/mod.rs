//! A small reverse-mode autodiff engine with the layers the detectors and
//! classifiers need.

pub mod conv;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{cross_entropy, BatchNorm, Conv2d, Embedding, Fwd, Linear};
pub use optim::{Adam, Sgd};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{BatchStats, Grads, Tape, Var};
pub use tensor::{Float, Tensor};
