//! Cross-architecture model merging by entropic optimal transport.

pub mod error;
pub mod fusion;
pub mod hierarchy;
pub mod pipeline;
pub mod sinkhorn;
pub mod stats;
pub mod tensor_store;
pub mod toy;
pub mod verify;

pub use error::{Error, Result};
