//! Miniature tensor engine for small feed-forward networks.

pub mod arch;
pub mod checkpoint;
pub mod dual;
pub mod engine;

pub use arch::{Activation, ArchDescriptor, Layer};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dual::{Dual, Scalar};
pub use engine::{backward, forward, forward_trace, grad_row, jacobian, jvp, vjp, DualBatch, FlatParams};
