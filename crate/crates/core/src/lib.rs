//! Multi-label sequence classification toolkit.
//!
//! Mixture-of-experts heads (plain and vocabulary-partitioned), GRU/LSTM
//! encoders in stacked, context-injected, hierarchical and multi-scale
//! arrangements, attention and VLAD pooling, a 1D residual network,
//! AP/mAP/GAP metrics, AP-weighted ensemble fusion, and the dataset tooling
//! that drives them. Everything is `f64` and differentiated by a small tape
//! in [`numcore`].

pub mod agg;
pub mod cli;
pub mod conv1d;
pub mod dataio;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numcore;
pub mod recur;
pub mod train;

pub use error::{Error, Result};
