//! Fisher-weighted safety subspace regularization on a toy guard classifier.

mod binfmt;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod regularizer;
pub mod seeds;
pub mod synthdata;
pub mod toymodel;
pub mod trainer;

pub use error::{Error, Result};
