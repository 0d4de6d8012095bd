//! Sub-block temporal contrastive representation learning for time series.
//!
//! A window of length `T` is cut into `k` overlapping sub-blocks of even
//! length, each sub-block is encoded by a 1-D convolutional network, and
//! the embeddings of one window are contrasted against each other with the
//! temporally preceding sub-block as the positive. The loss therefore costs
//! `O(B·k²·F)` regardless of `T`.

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod objective;
pub mod partition;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
