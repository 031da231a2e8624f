//! Dense matrices, seeded randomness, and reverse-mode differentiation.

pub mod kernels;
pub mod linalg;
mod matrix;
mod rng;
mod tape;

pub use matrix::Matrix;
pub use rng::{substream_seed, Rng};
pub use tape::{Gradients, Tape, Var};
