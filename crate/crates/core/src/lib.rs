pub mod attribution;
pub mod bench;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod kn;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod patcher;
pub mod repair;
pub mod seeds;
pub mod semantics;

pub use error::{Error, ErrorClass, Result};
