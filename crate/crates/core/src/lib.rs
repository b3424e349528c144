pub mod analytics;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod moe;
pub mod params;
pub mod teacher;
pub mod train;

pub use error::{Error, Result};
