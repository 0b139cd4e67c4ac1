//! Minimal dense-tensor library with reverse-mode differentiation.
//!
//! The primitives cover what the depression-detection network needs:
//! grouped 1-D convolution, max pooling, batched matrix products,
//! broadcasting elementwise arithmetic, reductions, softmax, a fused
//! pairwise-L1 attention score and gradient reversal. Composite layers live
//! in [`nn`] and [`gradcheck`] verifies any graph against central
//! differences.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use error::{EngineError, Result};
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use graph::{conv1d_output_len, Conv1dSpec, Gradients, Graph, Padding, Var};
pub use params::{ParamStore, Tape};
pub use tensor::{Real, Tensor};
