pub mod attack;
pub mod data;
pub mod defenses;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod image;
pub mod registration;

pub use error::{Error, Result};
