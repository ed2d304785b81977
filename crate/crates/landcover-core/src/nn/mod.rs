//! A small, deterministic CPU neural-network framework: a static graph of
//! convolutional ops over `ndarray` tensors with reverse-mode gradients and
//! an Adam optimizer.
//!
//! Everything is single-threaded f32 math, so identical weights and inputs
//! give bit-identical outputs, and identical seeds give bit-identical
//! training runs.

mod graph;
mod optim;
mod weights;

pub use graph::{Feat, Graph, GraphBuilder, Mode, NodeId, ParamId, Trace};
pub use optim::Adam;
pub use weights::{load_weights, save_weights, WeightsError};
