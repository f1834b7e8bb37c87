pub mod attention;
pub mod autodiff;
pub mod catalog;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod recurrent;
pub mod series;
pub mod train;

pub use error::{Error, Result};
