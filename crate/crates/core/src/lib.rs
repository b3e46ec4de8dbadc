pub mod checkpoint;
pub mod cqr;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod linearize;
pub mod losses;
pub mod model;
pub mod schema;
pub mod selftrain;
pub mod sql;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
