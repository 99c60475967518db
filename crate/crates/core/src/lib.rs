pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod hierarchy;
pub mod inference;
pub mod objectives;
pub mod params;
pub mod relations;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
