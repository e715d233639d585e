pub mod attacks;
pub mod augspace;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod objectives;
pub mod pg_estimator;
pub mod policy;
pub mod report;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
