pub mod error;
pub mod geometry;
pub mod model;
pub mod oracle;
pub mod sh;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
