//! Multi-granularity canonical appearance pooling: transformation-invariant
//! second-order image features with spectral normalization, trained from
//! scratch, plus a finite-difference gradient-verification harness.

pub mod canonical;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod net;
pub mod pipeline;
pub mod rng;
pub mod sop;
pub mod spectral;
