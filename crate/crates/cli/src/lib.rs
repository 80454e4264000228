//! Library side of the `nalab` executable.

pub mod compare;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod train;
