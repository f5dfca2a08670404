pub mod error;
pub mod linalg;
pub mod certify;
pub mod cli;
pub mod model;
pub mod sde;
pub mod spectral;
pub mod synthesis;

pub use error::{Error, Result};
