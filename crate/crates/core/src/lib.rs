pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod mining;
pub mod model;
pub mod plot;
pub mod run;
pub mod target;
pub mod trainer;

pub use error::{Error, Result};
