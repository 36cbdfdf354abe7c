pub mod annotation;
pub mod corpus;
pub mod eval;
pub mod heads;
pub mod mlm;
pub mod model;
pub mod rng;
pub mod tokenizer;

mod error;

pub use error::{Error, Result};
