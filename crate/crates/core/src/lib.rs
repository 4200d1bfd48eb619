//! Air-quality inference at unmonitored locations from sparse stations.
//!
//! The model embeds masked station readings, mixes them with dartboard-local
//! attention and a spectral global mixer, routes the result through a
//! context-gated mixture of experts, and decodes readings for every node.

pub mod baselines;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod geo;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
