//! Convolutional classifier, autoencoders and filter-redundancy analysis for
//! MNIST, written against a small dense tensor type with hand-derived
//! backward passes.

pub mod analysis;
pub mod autoencoders;
pub mod checkpoint;
pub mod error;
pub mod image;
pub mod layers;
pub mod loss;
pub mod mnist;
pub mod optim;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
