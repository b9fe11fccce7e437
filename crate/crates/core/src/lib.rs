pub mod agg;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
mod kernels;
pub mod metrics;
pub mod nn;
pub mod proto;
pub mod seed;
pub mod selftest;

pub use error::{Error, Result};
