pub mod bilevel;
pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod params;
pub mod run;
pub mod source;
pub mod transfer;
pub mod verify;

pub use error::{Error, Result};
pub use params::ParamSet;
