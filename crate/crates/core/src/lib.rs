//! Entity-aware attention network for reading fixed sets of text entities
//! out of document images, with a synthetic document generator, a training
//! recipe and entity-level metrics.

pub mod attention;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod domain;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
