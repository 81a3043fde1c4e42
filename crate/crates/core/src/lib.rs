pub mod error;
pub mod field;
pub mod harness;
pub mod kl;
pub mod latent;
pub mod solver;
pub mod transfer;

pub use error::{Error, Result};
