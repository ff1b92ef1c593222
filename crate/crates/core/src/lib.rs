//! Semantic labelling of indoor spaces from streams of audio recordings.

pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod gmm;
pub mod nmfd;
pub mod persistence;
pub mod pipeline;
pub mod svm;
pub mod synthgen;

pub use error::{Error, Result};
