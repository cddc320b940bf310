//! Experiment driver for `normlab-core`: MNIST loading and training of the
//! 784-1000-1000-10 classifier, the long-sequence RNN stability sweep, and
//! CSV reports for the invariance table and the GLM geometry.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod mlp;
pub mod plot;
pub mod seq;
pub mod train;

pub use config::{Experiment, RunConfig};
pub use error::{NormlabError, Result};
pub use plot::{emit_plotdata, MetricRow};
