//! Small reverse-mode autodiff core and the shared convolutional embedding.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod checkpoint;
pub mod loss;
mod network;
mod optim;
mod tape;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use network::{Architecture, EmbeddingNetwork, Forward, Mode, Param, ParamStore};
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(x: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
}
