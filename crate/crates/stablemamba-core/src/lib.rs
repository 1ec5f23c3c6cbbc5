//! Interleaved Mamba-attention vision stack: selective-scan SSM kernels,
//! bidirectional Mamba layers, Transformer blocks, an interleaving scheduler,
//! a corruption-robustness protocol (Gaussian blur and JPEG), and desk-scale
//! training and evaluation — self-contained on CPU.

pub mod blocks;
pub mod check;
pub mod checkpoint;
pub mod corruption;
pub mod data;
pub mod footprint;
pub mod gradsuite;
pub mod image_io;
pub mod jpeg;
pub mod parallel;
pub mod model;
pub mod scalar;
pub mod ssm;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
