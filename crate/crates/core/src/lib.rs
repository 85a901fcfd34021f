//! CT nodule invasiveness classification from slice sequences.
//!
//! A convolutional auto-encoder compresses each preprocessed CT slice into a
//! 256-dim feature vector; the nodule slices of a case are stacked into a
//! zero-padded `(25, 256)` sequence and classified by a small transformer
//! encoder with masked global max pooling. Everything, including the
//! reverse-mode autodiff underneath, lives in this crate.

pub mod autodiff;
pub mod cae;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{DataError, Error, Result};
pub use params::{Bound, GradMap, Param, ParamStore};
pub use tensor::{Element, Tensor};
