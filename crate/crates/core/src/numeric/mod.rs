//! Dense `f64` arrays, a reverse-mode tape, and the layers, optimizer and
//! checkpoint format the forecaster is built from.

mod array;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
mod params;
mod tape;

pub use array::Array;
pub use checkpoint::Checkpoint;
pub use layers::{BatchNorm, Conv2d, LayerNorm, Linear, LstmCell, Session};
pub use optim::{cosine_warm_restarts, Adam, CosineWarmRestarts};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{gaussian2_nll_value, sigmoid, Activation, Gradients, NormStats, Tape, Var};
