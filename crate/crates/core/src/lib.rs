pub mod cli;
pub mod conceptlab;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod hybridspace;
pub mod index;
pub mod model;
pub mod numcore;
pub mod trainer;

pub use error::{Error, Result};
