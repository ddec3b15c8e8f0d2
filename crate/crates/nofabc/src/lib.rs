//! Class-incremental learning at desk scale: task-specific bottleneck
//! adapters over a frozen backbone, a recursive least-squares allocator
//! whose sequential updates match a joint fit exactly, bi-level competition
//! over adapter coefficients, and a stability fusion of the two score
//! routes.

pub mod allocator;
pub mod competition;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod prototype;
pub mod trainer;

pub use error::{NofaError, Result};
