//! Mixed-effects mixture-of-experts (MEMoE) regression for longitudinal data.

extern crate self as memoe;

pub mod em;
pub mod error;
pub mod inference;
pub mod io;
pub mod laplace;
pub mod linalg;
pub mod model;
pub mod par;
pub mod predict;
pub mod select;
pub mod sim;

pub use error::{MemoeError, Result};

#[cfg(test)]
#[path = "../tests/common/mod.rs"]
pub(crate) mod test_util;
