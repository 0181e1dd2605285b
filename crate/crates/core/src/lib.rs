//! Easy-to-hard adaptive masking for self-distilled masked acoustic
//! modeling: an EMA teacher predicts which frames will be hard to
//! reconstruct, a curriculum mixes those frames into the random mask, and
//! the student learns both to reconstruct and to rank its own errors.

pub mod cli;
pub mod corpus;
pub mod ema;
pub mod error;
pub mod evalharness;
pub mod losses;
pub mod masking;
pub mod network;
pub mod par;
pub mod scalar;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};
