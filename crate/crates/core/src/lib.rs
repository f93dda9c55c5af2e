//! Temporal-context maritime obstacle segmentation.
//!
//! The crate covers the whole desk-scale pipeline: corpus types and I/O
//! ([`datamodel`]), the segmentation network with its temporal context
//! module ([`network`]), training ([`training`]), streaming inference with an
//! embedding buffer ([`inference`]), obstacle-detection evaluation
//! ([`evaluation`]) and a synthetic reflection-scene generator
//! ([`synthcorpus`]).

pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod network;
pub mod synthcorpus;
pub mod training;

pub use error::{Error, Result};
