pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod optim;
pub mod phantom;
pub mod policy;
pub mod segmenter;
pub mod session;
pub mod trainers;
pub mod volume;

pub use error::{Error, Result};
