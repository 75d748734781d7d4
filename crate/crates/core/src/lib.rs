//! Two-stage multiscale CenterNet for object counting.
//!
//! The crate provides a small reverse-mode autodiff engine over ndarrays, the
//! network (LR + HR hourglass stages joined by a deformable-convolution /
//! multiscale-attention skip), target rendering, losses, keypoint decoding,
//! metrics, a deterministic synthetic scene generator, and a training loop.
//!
//! The math stack is generic over the scalar type: training runs in `f32`,
//! gradient checking in `f64`. See the aliases at the crate root.

pub mod autodiff;
pub mod backbone;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod madalink;
pub mod network;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod synthdata;
pub mod targets;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{Adam, ParamId, ParamStore, Scope};
pub use scalar::Scalar;

/// Training-precision scalar.
pub type Real = f32;
/// Graph in training precision.
pub type Graph32 = Graph<f32>;
/// Graph in gradient-checking precision.
pub type Graph64 = Graph<f64>;
/// Parameter store in training precision.
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
