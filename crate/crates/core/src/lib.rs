pub mod config;
pub mod costnet;
pub mod diffmpc;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod solver;
pub mod track;
pub mod zipmpc;

pub use error::{Error, Result};
