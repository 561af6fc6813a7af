//! RGB-thermal single-object tracker built on a one-stream vision transformer
//! with spatio-temporal multimodal token modules.
//!
//! The crate carries its own small reverse-mode autodiff core ([`tensor`]),
//! the network ([`embedding`], [`encoder`], [`stmt`], [`head`], [`model`]),
//! the dynamic-token memory ([`memory`]) and frame-by-frame inference
//! ([`tracker`]), training ([`training`]), one-pass evaluation
//! ([`evaluation`]), sequence I/O and a synthetic sequence generator ([`io`]),
//! and the command-line surface ([`cli`]).

pub mod cli;
pub mod config;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod head;
pub mod image;
pub mod io;
pub mod memory;
pub mod model;
pub mod selftest;
pub mod stmt;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
