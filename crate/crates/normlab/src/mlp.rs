//! Fully connected ReLU classifier with an optional normalizer on every
//! hidden layer. The output layer is never normalized: the scale of the
//! logits sets the prediction confidence.

use normlab_core::autodiff::{Graph, Var};
use normlab_core::init::uniform_scaled;
use normlab_core::normalizers::{batch_norm, batch_norm_with_stats, layer_norm, weight_norm, BatchNormRunning, NormStats, DEFAULT_EPSILON};
use normlab_core::params::{ParamId, ParamStore};
use normlab_core::tensor::Tensor;
use normlab_core::{NormKind, Result, Scalar, VarianceEstimator};
use rand::Rng;

pub const MNIST_LAYERS: [usize; 4] = [784, 1000, 1000, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch normalization uses, and returns, the statistics of the batch.
    Train,
    /// Batch normalization uses the running averages.
    Eval,
}

#[derive(Clone, Debug)]
struct Layer {
    w: ParamId,
    /// Absent on weight-normalized layers.
    b: Option<ParamId>,
    /// Gain and bias after normalization; `None` on the output layer and
    /// everywhere in the unnormalized model.
    affine: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub store: ParamStore<T>,
    pub norm: NormKind,
    pub estimator: VarianceEstimator,
    pub epsilon: T,
    /// One per hidden layer when `norm` is batch, otherwise empty.
    pub running: Vec<BatchNormRunning<T>>,
    layers: Vec<Layer>,
}

/// The 784-1000-1000-10 classifier.
pub fn build_mlp<T: Scalar, R: Rng + ?Sized>(norm: NormKind, estimator: VarianceEstimator, rng: &mut R) -> Result<Mlp<T>> {
    Mlp::new(&MNIST_LAYERS, norm, estimator, rng)
}

impl<T: Scalar> Mlp<T> {
    /// Weights uniform in `+-1/sqrt(fan_in)`, biases 0, gains 1.
    ///
    /// Layers normalized by layer or batch statistics keep a bias before the
    /// normalizer as well as the one after it. Under batch statistics that
    /// first bias is cancelled by the mean and never receives gradient.
    /// Weight normalization has no pre-normalization bias: it would not be
    /// rescaled with the weights.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], norm: NormKind, estimator: VarianceEstimator, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(normlab_core::Error::InvalidConfig("an MLP needs at least an input and an output size".into()));
        }
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut running = Vec::new();
        let last = sizes.len() - 2;
        for (l, pair) in sizes.windows(2).enumerate() {
            let (fan_in, units) = (pair[0], pair[1]);
            let normalized = l < last && norm != NormKind::None;
            let w = store.add(format!("layer{l}.w"), uniform_scaled(&[units, fan_in], fan_in, rng))?;
            let b = if normalized && norm == NormKind::Weight {
                None
            } else {
                Some(store.add(format!("layer{l}.b"), Tensor::zeros(&[units]))?)
            };
            let affine = if normalized {
                let gain = store.add(format!("layer{l}.gain"), Tensor::ones(&[units]))?;
                let bias = store.add(format!("layer{l}.bias"), Tensor::zeros(&[units]))?;
                Some((gain, bias))
            } else {
                None
            };
            if normalized && norm == NormKind::Batch {
                running.push(BatchNormRunning::new(units));
            }
            layers.push(Layer { w, b, affine });
        }
        Ok(Self {
            store,
            norm,
            estimator,
            epsilon: T::lit(DEFAULT_EPSILON),
            running,
            layers,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn input_size(&self) -> usize {
        self.store.value(self.layers[0].w).shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.store.value(self.layers[self.layers.len() - 1].w).shape()[0]
    }

    /// Logits `[N, C]` for inputs `[N, D]`, plus the batch statistics of each
    /// hidden layer in training mode with batch normalization.
    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, mode: Mode) -> Result<(Var<'g, T>, Vec<NormStats<T>>)> {
        let mut h = x;
        let mut stats = Vec::new();
        let mut bn = 0;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = g.param(&self.store, layer.w);
            let linear = |h: Var<'g, T>| -> Result<Var<'g, T>> {
                let a = h.linear(w)?;
                match layer.b {
                    Some(b) => add_bias(a, g.param(&self.store, b)),
                    None => Ok(a),
                }
            };
            let Some((gain, bias)) = layer.affine else {
                h = if l == last { linear(h)? } else { linear(h)?.relu() };
                continue;
            };
            let (gain, bias) = (g.param(&self.store, gain), g.param(&self.store, bias));
            let pre = match self.norm {
                NormKind::Layer => layer_norm(linear(h)?, gain, bias, self.epsilon)?,
                NormKind::Weight => weight_norm(h, w, gain, bias)?,
                NormKind::Batch => {
                    let a = linear(h)?;
                    match mode {
                        Mode::Train => {
                            let (out, s) = batch_norm(a, gain, bias, self.epsilon, self.estimator)?;
                            stats.push(s);
                            out
                        }
                        Mode::Eval => {
                            let s = self.running[bn].stats();
                            batch_norm_with_stats(a, g.leaf(s.mu), g.leaf(s.sigma), gain, bias, self.epsilon)?
                        }
                    }
                }
                NormKind::None => unreachable!("unnormalized layers carry no affine parameters"),
            };
            if self.norm == NormKind::Batch {
                bn += 1;
            }
            h = pre.relu();
        }
        Ok((h, stats))
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_running(&mut self, stats: &[NormStats<T>]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    /// Mean negative log-likelihood and error count of `labels` under the
    /// evaluation-mode model.
    pub fn evaluate(&self, images: &Tensor<T>, labels: &[usize]) -> Result<(f64, usize)> {
        let g = Graph::new();
        let (logits, _) = self.forward(&g, g.leaf(images.clone()), Mode::Eval)?;
        let nll = logits.softmax_cross_entropy(labels)?.item().as_f64();
        let values = logits.value();
        let errors = values
            .rows()
            .zip(labels)
            .filter(|(row, &y)| argmax(row) != y)
            .count();
        Ok((nll, errors))
    }
}

fn add_bias<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = a.shape();
    match shape.len() {
        1 => a.add(b),
        _ => a.add(b.reshape(&[1, shape[1]])?.broadcast_to(&shape)?),
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
