//! A compact reverse-mode automatic differentiation engine over 2-D arrays.
//!
//! Every value in a [`Graph`] is an `Array2`; sequences are laid out
//! time-major (`rows = time`, `cols = channels`). Batching is done by the
//! caller by accumulating gradients over several graphs.

mod checkpoint;
mod conv;
mod error;
mod float;
mod graph;
mod optim;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{conv1d, conv_transpose1d, conv_transpose1d_len, embedding, sinusoidal_positions};
pub use error::{Error, Result};
pub use float::Float;
pub use graph::{Gradients, Graph, Var, PAD_INDEX};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{Binding, ParamSet};
