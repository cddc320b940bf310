use std::path::PathBuf;

use normlab_core::{NormKind, VarianceEstimator};

use crate::error::{NormlabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Mnist,
    SeqStability,
    Invariance,
    Geometry,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Mnist => "mnist",
            Experiment::SeqStability => "seq-stability",
            Experiment::Invariance => "invariance",
            Experiment::Geometry => "geometry",
        }
    }
}

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_BATCH_SIZE: usize = 128;

/// 20 epochs at batch 128 and 5 at batch 4 keep the two batch sizes within
/// a small factor of each other in updates.
pub fn default_epochs(batch_size: usize) -> usize {
    if batch_size <= 4 {
        5
    } else {
        20
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub norm: NormKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub data: Option<PathBuf>,
    /// A file for `mnist`, a directory for the experiments that write several.
    pub out: PathBuf,
    pub estimator: VarianceEstimator,
    /// When false the wall-time column is written as 0 so reruns are
    /// byte-identical.
    pub record_wall_time: bool,
    /// Use only the first N training records.
    pub train_limit: Option<usize>,
    /// Use only the first N test records.
    pub test_limit: Option<usize>,
}

impl RunConfig {
    pub fn mnist(norm: NormKind, batch_size: usize, seed: u64) -> Self {
        Self {
            experiment: Experiment::Mnist,
            norm,
            batch_size,
            epochs: default_epochs(batch_size),
            lr: DEFAULT_LR,
            seed,
            data: None,
            out: PathBuf::from("mnist.csv"),
            estimator: VarianceEstimator::Biased,
            record_wall_time: true,
            train_limit: None,
            test_limit: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NormlabError::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.norm == NormKind::Batch && self.batch_size == 1 {
            return bad("batch normalization needs a batch of at least 2".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.experiment == Experiment::Mnist && self.data.is_none() {
            return bad("mnist needs --data DIR".into());
        }
        if matches!(self.train_limit, Some(n) if n < self.batch_size) {
            return bad("training limit is smaller than one batch".into());
        }
        if self.test_limit == Some(0) {
            return bad("test limit must be positive".into());
        }
        Ok(())
    }
}
