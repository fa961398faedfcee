//! Fixed-architecture tensor engine with reverse-mode autodiff.
//!
//! The engine targets exactly the shapes the model needs: row-major 1-D and
//! 2-D tensors, no implicit broadcasting beyond row-wise bias addition. A
//! [`graph::Graph`] owns every tensor it creates; operations evaluate
//! eagerly and record themselves on a tape, and [`graph::Graph::backward`]
//! replays the tape in reverse to accumulate gradients.
//!
//! All compute is single-threaded with fixed accumulation order, so results
//! are bit-reproducible for a given input. Element types are generic over
//! [`Real`]: `f64` for gradient checking and analysis passes, `f32` for
//! training throughput and on-disk storage.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;

pub use graph::{Graph, TensorId};
pub use params::ParamSet;

/// Scalar element type for kernels and graphs.
pub trait Real:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Copy
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
