pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod gradcheck;
mod error;
pub mod losses;
pub mod model;
pub mod params;
pub mod ppm;
pub mod tcmoa;
pub mod training;

pub use error::{Error, Result};
