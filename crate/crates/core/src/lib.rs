//! Automated model merging: weight-store I/O, merge kernels, layer-wise fusion
//! and depth-wise integration search spaces, and a multi-fidelity
//! (multi-objective) Bayesian optimizer that searches them.

pub mod dis_space;
pub mod error;
pub mod evaluator;
pub mod lfs_space;
pub mod merge_kernels;
pub mod mf_optimizer;
pub mod objectives;
pub mod run_config;
pub mod sfs_space;
pub mod space;
pub mod tensor_store;

pub use error::{Error, Result};
