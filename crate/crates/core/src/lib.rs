//! Selective state-space (Mamba) building blocks and numerical checks of what
//! they can represent: exact copying, gadget emulation, dynamic programs with
//! chain-of-thought, and the associated cost accounting.

pub mod circuit;
pub mod copy_analysis;
pub mod cost;
pub mod dp;
pub mod error;
pub mod gadgets;
pub mod harness;
pub mod linalg;
pub mod ssm;

pub use error::{Error, Result};
pub use linalg::Matrix;
