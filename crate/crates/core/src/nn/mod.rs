//! Neural network primitives with hand-written backward passes.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use layers::{
    BatchNorm, Conv2d, Dense, Dropout, GlobalAvgPool, Layer, LayerNorm, LayerSpec, Mode, Relu,
    ResidualBlock, ResidualBlockSpec, Rng,
};
pub use loss::{softmax_xent, softmax_xent_scaled};
pub use optim::{Adam, LrSchedule};
pub use tensor::{Param, Real, Tensor};
