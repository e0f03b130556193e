pub mod adm;
pub mod backbone;
pub mod bench;
pub mod cli;
pub mod config;
pub mod container;
pub mod dif;
pub mod error;
pub mod eval;
pub mod grid;
pub mod rng;
pub mod run;
pub mod tas;
pub mod text;
pub mod training;

pub use error::{Error, Result};
