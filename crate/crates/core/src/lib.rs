//! Attention-driven body pose encoding for activity recognition.
//!
//! The crate is layered bottom-up:
//!
//! * [`tape`], [`tensor`], [`gradcheck`]: dense `f64` tensors with
//!   define-by-run reverse-mode differentiation.
//! * [`streams`]: the spatial and temporal encoding units, their
//!   convolutional streams and the early (time-axis) fusion.
//! * [`attention`], [`recurrent`]: multi-head self-attention and
//!   (bi)LSTMs shared by the pose and RGB branches.
//! * [`model`]: the hybrid-fusion network, ablation variants and
//!   checkpoints.
//! * [`data`], [`training`], [`ablation`]: ingestion and preprocessing,
//!   optimizers and loops, and the ablation harness.

pub mod error;
pub mod tensor;
pub mod tape;
pub mod gradcheck;
pub mod params;
pub mod config;
pub mod streams;
pub mod attention;
pub mod recurrent;
pub mod model;
pub mod checkpoint;
pub mod data;
pub mod training;
pub mod verify;
pub mod ablation;

mod bytes;
mod linalg;

pub use error::{Error, Result};
pub use tape::{Padding, Tape, Var};
pub use tensor::Tensor;
