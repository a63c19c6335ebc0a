pub mod accounting;
pub mod data_models;
pub mod dpsgd;
pub mod error;
pub mod fedsim;
pub mod joint;
pub mod mechanisms;
pub mod oracles;
pub mod report;
pub mod repro;

pub use error::{Error, Result};
