pub mod assignment;
pub mod cli;
pub mod detector;
pub mod embed_transfer;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod synthdata;
pub mod tracker;
pub mod trainer;
pub mod unknown_refine;

pub use error::{Error, Result};
