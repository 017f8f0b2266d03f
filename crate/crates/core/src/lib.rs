pub mod backends;
pub mod cli;
pub mod editing;
pub mod error;
pub mod exemplar;
pub mod image;
pub mod instruction;
pub mod metrics;
pub mod refinery;
pub mod service;

pub use error::{Error, Result};
