pub mod align;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod oracle;
pub mod rewards;
pub mod rng;

pub use error::{Error, Result};
