//! A small CPU engine for plain convolutional networks.
//!
//! Forward passes can be recorded on a [`Tape`]; backward passes return
//! parameter gradients, input gradients, or both. Input gradients are what
//! gradient-based attacks need, so they are first class here.

mod layers;
pub mod loss;
mod network;
pub mod optim;
mod tensor;

pub use layers::{Conv2d, Layer, Linear};
pub use network::{checksum_f32, BackwardMode, ConvNetSpec, Gradients, Network, Readout, Tape};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
}
