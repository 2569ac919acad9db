//! Few-shot meta-learning engine: probabilistic class prototypes backed by a
//! long-term semantic memory, trained episodically on a minimal tape-based
//! autodiff stack.

pub mod data;
pub mod gaussian;
pub mod networks;
pub mod memory;
pub mod proto;
pub mod init;
pub mod rng;
pub mod trainer;
pub mod scalar;
pub mod tensor;

pub use scalar::{Dtype, Scalar};
pub use tensor::{Padding, ShapeError, Tape, TapeError, Tensor, Var};
