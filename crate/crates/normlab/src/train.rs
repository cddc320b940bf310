//! Minibatch Adam training of the MNIST classifier.

use std::path::Path;
use std::time::Instant;

use normlab_core::autodiff::Graph;
use normlab_core::tensor::Tensor;
use normlab_core::{Adam, AdamConfig, NormKind, Scalar, VarianceEstimator};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{load_mnist, MnistDataset, Split};
use crate::error::{NormlabError, Result};
use crate::mlp::{build_mlp, Mlp, Mode};
use crate::plot::{MetricRow, RowWriter};

const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub rows: Vec<MetricRow>,
    pub updates: u64,
}

impl TrainSummary {
    pub fn last(&self) -> &MetricRow {
        self.rows.last().expect("a run records at least the epoch-0 row")
    }
}

fn images_as<T: Scalar>(split: &Split, rows: std::ops::Range<usize>) -> Tensor<T> {
    let data = split.images.data()[rows.start * split.images.shape()[1]..rows.end * split.images.shape()[1]]
        .iter()
        .map(|&p| T::lit(f64::from(p)))
        .collect();
    Tensor::new(vec![rows.len(), split.images.shape()[1]], data).expect("row range inside split")
}

/// Mean NLL and error rate over `split` in evaluation mode.
pub fn evaluate<T: Scalar>(model: &Mlp<T>, split: &Split) -> Result<(f64, f64)> {
    let (mut nll, mut errors) = (0.0, 0);
    let mut start = 0;
    while start < split.len() {
        let end = (start + EVAL_CHUNK).min(split.len());
        let (chunk_nll, chunk_errors) = model.evaluate(&images_as(split, start..end), &split.labels[start..end])?;
        nll += chunk_nll * (end - start) as f64;
        errors += chunk_errors;
        start = end;
    }
    let n = split.len() as f64;
    Ok((nll / n, errors as f64 / n))
}

/// Trains in `f32`.
pub fn train_mnist(config: &RunConfig, data: &MnistDataset, sink: Option<&mut RowWriter<MetricRow>>) -> Result<TrainSummary> {
    train_mnist_as::<f32>(config, data, sink)
}

/// Epoch 0 evaluates the untrained model on the training and test sets.
/// Later rows report the mean minibatch loss of the epoch as training NLL
/// and a full evaluation-mode pass over the test set. A trailing partial
/// batch is dropped each epoch so batch statistics always see
/// `batch_size` cases.
pub fn train_mnist_as<T: Scalar>(config: &RunConfig, data: &MnistDataset, mut sink: Option<&mut RowWriter<MetricRow>>) -> Result<TrainSummary> {
    config.validate()?;
    let train = config.train_limit.map_or_else(|| data.train.clone(), |n| data.train.truncated(n));
    let test = config.test_limit.map_or_else(|| data.test.clone(), |n| data.test.truncated(n));
    if train.len() < config.batch_size {
        return Err(NormlabError::Config(format!(
            "{} training records cannot fill a batch of {}",
            train.len(),
            config.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model: Mlp<T> = build_mlp(config.norm, config.estimator, &mut rng)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &model.store,
    )?;
    let started = Instant::now();
    let clock = |started: &Instant| if config.record_wall_time { started.elapsed().as_secs_f64() } else { 0.0 };
    let mut rows = Vec::with_capacity(config.epochs + 1);
    let record = |row: MetricRow, rows: &mut Vec<MetricRow>, sink: &mut Option<&mut RowWriter<MetricRow>>| -> Result<()> {
        if let Some(w) = sink.as_deref_mut() {
            w.write(&row)?;
        }
        rows.push(row);
        Ok(())
    };

    let (train_nll, _) = evaluate(&model, &train)?;
    let (test_nll, test_error) = evaluate(&model, &test)?;
    record(
        MetricRow {
            epoch: 0,
            train_nll,
            test_nll,
            test_error_rate: test_error,
            wall_time_seconds: clock(&started),
        },
        &mut rows,
        &mut sink,
    )?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut updates = 0u64;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let batches = train.len() / config.batch_size;
        for batch in order.chunks_exact(config.batch_size) {
            let minibatch = train.gather(batch);
            let loss = {
                let g = Graph::new();
                let x = g.leaf(images_as(&minibatch, 0..batch.len()));
                let (logits, stats) = model.forward(&g, x, Mode::Train)?;
                let loss = logits.softmax_cross_entropy(&minibatch.labels)?;
                let value = loss.item().as_f64();
                if !value.is_finite() {
                    return Err(NormlabError::Divergence {
                        epoch,
                        update: updates,
                        reason: format!("training loss is {value}"),
                    });
                }
                let grads = g.backward(loss)?;
                model.store.zero_grads();
                grads.accumulate_into(&mut model.store);
                model.update_running(&stats);
                value
            };
            adam.step(&mut model.store).map_err(|e| NormlabError::Divergence {
                epoch,
                update: updates,
                reason: e.to_string(),
            })?;
            updates += 1;
            loss_sum += loss;
        }
        let (test_nll, test_error) = evaluate(&model, &test)?;
        if !test_nll.is_finite() {
            return Err(NormlabError::Divergence {
                epoch,
                update: updates,
                reason: format!("test loss is {test_nll}"),
            });
        }
        record(
            MetricRow {
                epoch,
                train_nll: loss_sum / batches as f64,
                test_nll,
                test_error_rate: test_error,
                wall_time_seconds: clock(&started),
            },
            &mut rows,
            &mut sink,
        )?;
    }
    Ok(TrainSummary { rows, updates })
}

/// Trains every config on its own thread, each writing its own CSV to
/// `config.out`.
pub fn train_concurrently(configs: &[RunConfig], data: &MnistDataset) -> Vec<Result<TrainSummary>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| {
                scope.spawn(move || {
                    let mut writer = RowWriter::create(&c.out)?;
                    train_mnist(c, data, Some(&mut writer))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    })
}

/// One seed of the paired comparisons: layer normalization against no
/// normalization at batch 128, and against batch normalization at batch 4.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedOutcome {
    pub seed: u64,
    pub ln_128: f64,
    pub none_128: f64,
    pub ln_4: f64,
    pub bn_4: f64,
}

impl PairedOutcome {
    pub fn ln_beats_baseline(&self) -> bool {
        self.ln_128 < self.none_128
    }

    pub fn ln_matches_bn_small_batch(&self) -> bool {
        self.ln_4 <= self.bn_4
    }
}

/// Final test NLL of the four paired runs for one seed. The batch-4 batch
/// normalization run uses the unbiased variance estimator.
pub fn paired_runs(dir: &Path, seed: u64, out_dir: &Path, template: &RunConfig) -> Result<PairedOutcome> {
    let data = load_mnist(dir, seed)?;
    let mk = |norm: NormKind, batch: usize| RunConfig {
        norm,
        batch_size: batch,
        epochs: crate::config::default_epochs(batch),
        seed,
        data: Some(dir.to_path_buf()),
        out: out_dir.join(format!("mnist-{}-b{batch}-seed{seed}.csv", norm.name())),
        estimator: if norm == NormKind::Batch && batch <= 4 {
            VarianceEstimator::Unbiased
        } else {
            VarianceEstimator::Biased
        },
        ..template.clone()
    };
    let configs = [
        mk(NormKind::Layer, 128),
        mk(NormKind::None, 128),
        mk(NormKind::Layer, 4),
        mk(NormKind::Batch, 4),
    ];
    let results = train_concurrently(&configs, &data);
    let mut finals = Vec::with_capacity(4);
    for r in results {
        finals.push(r?.last().test_nll);
    }
    Ok(PairedOutcome {
        seed,
        ln_128: finals[0],
        none_128: finals[1],
        ln_4: finals[2],
        bn_4: finals[3],
    })
}
