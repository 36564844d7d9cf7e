//! Person search: joint detection and identification with global scene and
//! local group context.

pub mod context;
pub mod data;
pub mod detector;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod nn;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
