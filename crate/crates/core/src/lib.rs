pub mod codec;
pub mod corpus;
pub mod error;
pub mod io;
pub mod batcher;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod checkpoint;
pub mod trainer;
pub mod sampler;
pub mod eval;

pub use error::{Error, Result};
