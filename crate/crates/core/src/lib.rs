//! HyperFast: a meta-trained hypernetwork that turns a labeled support set
//! into the weights of a small tabular classifier in a single forward pass.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hypernet;
pub mod inference;
pub mod linalg;
pub mod mainnet;
pub mod meta;
pub mod optim;
pub mod persist;
pub mod synthetic;
pub mod transform;

pub use error::{Error, Result};
pub use linalg::{Matrix, Real};
