//! Layer, batch and weight normalization as one family: each scheme supplies
//! its own `(mu, sigma)` and every unit then computes
//! `f(gain / sigma * (a - mu) + bias)`.
//!
//! `epsilon` is added to `sigma`, never to the variance. Passing `0` gives
//! exact normalization and is only safe for inputs with non-zero spread.
//!
//! Layer statistics are taken over the last axis of a `[H]` or `[N, H]`
//! tensor, so each case (row) gets its own scalar pair shared by all of its
//! units. Batch statistics are taken down the batch axis of an `[N, H]`
//! tensor, one pair per unit.

use crate::autodiff::{reduce_forward, Activation, Graph, ReduceKind, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOVING_AVERAGE_DECAY: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    None,
    Layer,
    Batch,
    Weight,
}

impl NormKind {
    pub const ALL: [NormKind; 4] = [NormKind::None, NormKind::Layer, NormKind::Batch, NormKind::Weight];

    pub fn name(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Layer => "layer",
            NormKind::Batch => "batch",
            NormKind::Weight => "weight",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VarianceEstimator {
    #[default]
    Biased,
    Unbiased,
}

impl VarianceEstimator {
    fn reduce_kind(self) -> ReduceKind {
        match self {
            VarianceEstimator::Biased => ReduceKind::VarianceBiased,
            VarianceEstimator::Unbiased => ReduceKind::VarianceUnbiased,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormScheme {
    pub kind: NormKind,
    pub epsilon: f64,
    /// Only consulted by batch normalization.
    pub estimator: VarianceEstimator,
}

impl NormScheme {
    pub fn new(kind: NormKind, epsilon: f64, estimator: VarianceEstimator) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            kind,
            epsilon,
            estimator,
        })
    }

    pub fn with_defaults(kind: NormKind) -> Self {
        Self {
            kind,
            epsilon: DEFAULT_EPSILON,
            estimator: VarianceEstimator::Biased,
        }
    }
}

/// `(mu, sigma)` of one normalization. `sigma` excludes epsilon.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

/// Per-unit gain and bias applied after normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> AffineParams<T> {
    pub fn new(gain: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        gain.expect_same_shape(&bias, "affine params")?;
        if gain.rank() != 1 {
            return Err(Error::InvalidAxis {
                op: "affine params",
                axis: 0,
                rank: gain.rank(),
            });
        }
        Ok(Self { gain, bias })
    }

    /// Gain 1, bias 0.
    pub fn identity(units: usize) -> Self {
        Self {
            gain: Tensor::ones(&[units]),
            bias: Tensor::zeros(&[units]),
        }
    }

    pub fn units(&self) -> usize {
        self.gain.numel()
    }
}

/// Broadcasts a per-case statistic (`[]` for a single case, `[N]` for a
/// batch) across the unit axis of `shape`.
fn expand_per_case<'g, T: Scalar>(stat: Var<'g, T>, shape: &[usize]) -> Result<Var<'g, T>> {
    match shape.len() {
        1 => stat.broadcast_to(shape),
        2 => stat.reshape(&[shape[0], 1])?.broadcast_to(shape),
        r => Err(Error::InvalidAxis {
            op: "layer norm",
            axis: 1,
            rank: r,
        }),
    }
}

/// Broadcasts a per-unit vector `[H]` to `[H]` or `[N, H]`.
fn expand_per_unit<'g, T: Scalar>(v: Var<'g, T>, shape: &[usize]) -> Result<Var<'g, T>> {
    match shape.len() {
        1 => {
            if v.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "per-unit broadcast",
                    lhs: v.shape(),
                    rhs: shape.to_vec(),
                });
            }
            Ok(v)
        }
        2 => v.reshape(&[1, shape[1]])?.broadcast_to(shape),
        r => Err(Error::InvalidAxis {
            op: "per-unit broadcast",
            axis: 1,
            rank: r,
        }),
    }
}

/// `(a - mu) / (sigma + epsilon) * gain + bias`, all operands already
/// broadcast to the shape of `a`.
pub fn normalize<'g, T: Scalar>(
    a: Var<'g, T>,
    mu: Var<'g, T>,
    sigma: Var<'g, T>,
    gain: Var<'g, T>,
    bias: Var<'g, T>,
    epsilon: T,
) -> Result<Var<'g, T>> {
    let centered = a.sub(mu)?;
    let scale = if epsilon == T::zero() {
        sigma
    } else {
        sigma.add_scalar(epsilon)
    };
    centered.div(scale)?.mul(gain)?.add(bias)
}

/// Layer statistics over the last axis: mean and biased standard deviation.
pub fn layer_stats_var<'g, T: Scalar>(z: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let axis = z.shape().len().checked_sub(1).ok_or(Error::InvalidAxis {
        op: "layer norm",
        axis: 0,
        rank: 0,
    })?;
    let mu = z.reduce(axis, ReduceKind::Mean)?;
    let sigma = z.reduce(axis, ReduceKind::VarianceBiased)?.sqrt();
    Ok((mu, sigma))
}

/// Differentiable layer normalization of `z` (`[H]` or `[N, H]`); gradients
/// flow through both statistics.
pub fn layer_norm<'g, T: Scalar>(
    z: Var<'g, T>,
    gain: Var<'g, T>,
    bias: Var<'g, T>,
    epsilon: T,
) -> Result<Var<'g, T>> {
    let (mu, sigma) = layer_stats_var(z)?;
    layer_norm_with_stats(z, mu, sigma, gain, bias, epsilon)
}

/// Layer normalization with caller-supplied per-case statistics.
pub fn layer_norm_with_stats<'g, T: Scalar>(
    z: Var<'g, T>,
    mu: Var<'g, T>,
    sigma: Var<'g, T>,
    gain: Var<'g, T>,
    bias: Var<'g, T>,
    epsilon: T,
) -> Result<Var<'g, T>> {
    let shape = z.shape();
    normalize(
        z,
        expand_per_case(mu, &shape)?,
        expand_per_case(sigma, &shape)?,
        expand_per_unit(gain, &shape)?,
        expand_per_unit(bias, &shape)?,
        epsilon,
    )
}

/// Batch statistics of `[N, H]` down the batch axis.
pub fn batch_stats_var<'g, T: Scalar>(
    a: Var<'g, T>,
    estimator: VarianceEstimator,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let shape = a.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidAxis {
            op: "batch norm",
            axis: 0,
            rank: shape.len(),
        });
    }
    let mu = a.reduce(0, ReduceKind::Mean)?;
    let sigma = a.reduce(0, estimator.reduce_kind())?.sqrt();
    Ok((mu, sigma))
}

/// Training-mode batch normalization of `[N, H]`, differentiable through the
/// batch statistics. Also returns the statistics that were used.
pub fn batch_norm<'g, T: Scalar>(
    a: Var<'g, T>,
    gain: Var<'g, T>,
    bias: Var<'g, T>,
    epsilon: T,
    estimator: VarianceEstimator,
) -> Result<(Var<'g, T>, NormStats<T>)> {
    let (mu, sigma) = batch_stats_var(a, estimator)?;
    let stats = NormStats {
        mu: mu.value(),
        sigma: sigma.value(),
    };
    let out = batch_norm_with_stats(a, mu, sigma, gain, bias, epsilon)?;
    Ok((out, stats))
}

/// Batch normalization with per-unit statistics supplied as nodes (frozen
/// statistics enter as leaves).
pub fn batch_norm_with_stats<'g, T: Scalar>(
    a: Var<'g, T>,
    mu: Var<'g, T>,
    sigma: Var<'g, T>,
    gain: Var<'g, T>,
    bias: Var<'g, T>,
    epsilon: T,
) -> Result<Var<'g, T>> {
    let shape = a.shape();
    normalize(
        a,
        expand_per_unit(mu, &shape)?,
        expand_per_unit(sigma, &shape)?,
        expand_per_unit(gain, &shape)?,
        expand_per_unit(bias, &shape)?,
        epsilon,
    )
}

/// Row norms `||w_i||_2` of a weight matrix, rejecting zero rows.
pub fn weight_row_norms<T: Scalar>(w: &Tensor<T>) -> Result<Vec<T>> {
    w.rows()
        .enumerate()
        .map(|(row, r)| {
            let n = r.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                Err(Error::ZeroWeightRow { row })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Weight-normalized pre-activation `gain_i * (w_i . x) / ||w_i|| + bias_i`
/// for `x` of shape `[D]` or `[N, D]`.
pub fn weight_norm<'g, T: Scalar>(
    x: Var<'g, T>,
    w: Var<'g, T>,
    gain: Var<'g, T>,
    bias: Var<'g, T>,
) -> Result<Var<'g, T>> {
    weight_row_norms(&w.value())?;
    let a = x.linear(w)?;
    let shape = a.shape();
    let norms = w.square().reduce(1, ReduceKind::Sum)?.sqrt();
    let zero = x.graph().leaf(Tensor::zeros(&[norms.shape()[0]]));
    normalize(
        a,
        expand_per_unit(zero, &shape)?,
        expand_per_unit(norms, &shape)?,
        expand_per_unit(gain, &shape)?,
        expand_per_unit(bias, &shape)?,
        T::zero(),
    )
}

/// Mean and biased standard deviation over the last axis.
pub fn layer_norm_stats<T: Scalar>(a: &Tensor<T>) -> Result<NormStats<T>> {
    let axis = a.rank().checked_sub(1).ok_or(Error::InvalidAxis {
        op: "layer_norm_stats",
        axis: 0,
        rank: 0,
    })?;
    let mu = reduce_forward(a, axis, ReduceKind::Mean)?;
    let sigma = reduce_forward(a, axis, ReduceKind::VarianceBiased)?.map(|v| v.sqrt());
    Ok(NormStats { mu, sigma })
}

pub fn layer_norm_apply<T: Scalar>(z: &Tensor<T>, p: &AffineParams<T>, epsilon: T) -> Result<Tensor<T>> {
    let g = Graph::new();
    let out = layer_norm(
        g.leaf(z.clone()),
        g.leaf(p.gain.clone()),
        g.leaf(p.bias.clone()),
        epsilon,
    )?;
    Ok(out.value())
}

/// Per-unit statistics of `[N, H]` down the batch axis.
pub fn batch_norm_stats<T: Scalar>(a: &Tensor<T>, estimator: VarianceEstimator) -> Result<NormStats<T>> {
    if a.rank() != 2 {
        return Err(Error::InvalidAxis {
            op: "batch_norm_stats",
            axis: 0,
            rank: a.rank(),
        });
    }
    let mu = reduce_forward(a, 0, ReduceKind::Mean)?;
    let sigma = reduce_forward(a, 0, estimator.reduce_kind())?.map(|v| v.sqrt());
    Ok(NormStats { mu, sigma })
}

pub fn batch_norm_apply<T: Scalar>(
    a: &Tensor<T>,
    p: &AffineParams<T>,
    stats: &NormStats<T>,
    epsilon: T,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let out = batch_norm_with_stats(
        g.leaf(a.clone()),
        g.leaf(stats.mu.clone()),
        g.leaf(stats.sigma.clone()),
        g.leaf(p.gain.clone()),
        g.leaf(p.bias.clone()),
        epsilon,
    )?;
    Ok(out.value())
}

pub fn weight_norm_apply<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>, p: &AffineParams<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let out = weight_norm(
        g.leaf(x.clone()),
        g.leaf(w.clone()),
        g.leaf(p.gain.clone()),
        g.leaf(p.bias.clone()),
    )?;
    Ok(out.value())
}

/// One unit in the shared form `f(gain / (sigma + epsilon) * (a - mu) + bias)`.
pub fn normalized_unit<T: Scalar>(
    a: T,
    mu: T,
    sigma: T,
    gain: T,
    bias: T,
    epsilon: T,
    f: Activation,
) -> T {
    f.eval((a - mu) / (sigma + epsilon) * gain + bias)
}

/// Exponential moving averages of batch mean and variance for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormRunning<T> {
    pub mean: Tensor<T>,
    pub variance: Tensor<T>,
    pub decay: f64,
}

impl<T: Scalar> BatchNormRunning<T> {
    pub fn new(units: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[units]),
            variance: Tensor::ones(&[units]),
            decay: DEFAULT_MOVING_AVERAGE_DECAY,
        }
    }

    pub fn update(&mut self, batch: &NormStats<T>) {
        let d = T::lit(self.decay);
        let keep = T::one() - d;
        for (m, &b) in self.mean.data_mut().iter_mut().zip(batch.mu.data()) {
            *m = d * *m + keep * b;
        }
        for (v, &s) in self.variance.data_mut().iter_mut().zip(batch.sigma.data()) {
            *v = d * *v + keep * s * s;
        }
    }

    pub fn stats(&self) -> NormStats<T> {
        NormStats {
            mu: self.mean.clone(),
            sigma: self.variance.map(|v| v.sqrt()),
        }
    }
}
