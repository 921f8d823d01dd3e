//! CycleGAN style transfer: a small reverse-mode tensor engine, U-Net
//! generators, PatchGAN discriminators, the cycle-consistent adversarial
//! objective and the training loop that ties them together.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod models;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use kernels::Padding;
pub use models::{Discriminator, Generator, NetConfig};
pub use nn::Module;
pub use optim::{AdamConfig, AdamState};
pub use rng::Rng;
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::{DType, Element, Tensor};
pub use training::{CycleGanModel, LossBundle, Optimizers, TrainConfig, TrainingSession};
