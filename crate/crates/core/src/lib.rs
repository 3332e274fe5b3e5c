pub mod corpus;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod sad;
pub mod search;
pub mod trend;

pub use error::{Error, Result};
