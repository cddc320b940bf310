//! Independent estimators for the analytic geometry: Jacobians and chi
//! vectors through the autodiff engine, and the Fisher matrix as a Monte
//! Carlo average of score outer products.

use rand::Rng;

use super::{FisherMatrix, Forward, GlmModel};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::normalizers::{batch_norm, layer_norm, weight_norm, NormKind, VarianceEstimator};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

struct Bound {
    store: ParamStore<f64>,
    w: ParamId,
    b: ParamId,
    g: ParamId,
}

fn bind(model: &GlmModel) -> Result<Bound> {
    let mut store = ParamStore::new();
    let w = store.add("w", model.w.clone())?;
    let b = store.add("b", Tensor::vector(model.b.clone()))?;
    let g = store.add("g", Tensor::vector(model.g.clone()))?;
    Ok(Bound { store, w, b, g })
}

/// `eta` for every row of `x`, `[N, H]`, built from the engine's own
/// normalization ops.
fn eta_graph<'g>(model: &GlmModel, x: Var<'g, f64>, w: Var<'g, f64>, b: Var<'g, f64>, g: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let a = x.linear(w)?;
    let shape = a.shape();
    match model.norm {
        NormKind::None => a.add(b.reshape(&[1, shape[1]])?.broadcast_to(&shape)?),
        NormKind::Layer => layer_norm(a, g, b, 0.0),
        NormKind::Batch => Ok(batch_norm(a, g, b, 0.0, VarianceEstimator::Biased)?.0),
        NormKind::Weight => weight_norm(x, w, g, b),
    }
}

fn element<'g>(v: Var<'g, f64>, row: usize, col: usize) -> Result<Var<'g, f64>> {
    Ok(v.slice(0, row, 1)?.slice(1, col, 1)?.sum())
}

/// `d eta_{n,k} / d theta` by reverse mode, indexed `[n * H + k]`, each in
/// `theta` layout. Batch-normalized models are differentiated through the
/// statistics of the full sample set; the others case by case.
pub fn jacobians(model: &GlmModel, samples: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
    let bound = bind(model)?;
    let (n, h) = (samples.shape()[0], model.units());
    let layout = model.layout();
    let mut out = Vec::with_capacity(n * h);
    let mut collect = |graph: &Graph<f64>, eta: Var<'_, f64>, row: usize| -> Result<()> {
        for k in 0..h {
            let grads = graph.backward(element(eta, row, k)?)?;
            let mut store = bound.store.clone();
            store.zero_grads();
            grads.accumulate_into(&mut store);
            let (gw, gb, gg) = (store.grad(bound.w), store.grad(bound.b), store.grad(bound.g));
            let mut j = vec![0.0; layout.dim()];
            for i in 0..h {
                for (d, &v) in gw.row(i).iter().enumerate() {
                    j[layout.weight(i, d)] = v;
                }
                j[layout.bias(i)] = gb.data()[i];
                if layout.with_gain {
                    j[layout.gain(i)] = gg.data()[i];
                }
            }
            out.push(j);
        }
        Ok(())
    };
    fn vars<'g>(graph: &'g Graph<f64>, bound: &Bound) -> (Var<'g, f64>, Var<'g, f64>, Var<'g, f64>) {
        (
            graph.param(&bound.store, bound.w),
            graph.param(&bound.store, bound.b),
            graph.param(&bound.store, bound.g),
        )
    }
    if model.norm == NormKind::Batch {
        let graph = Graph::new();
        let (w, b, g) = vars(&graph, &bound);
        let eta = eta_graph(model, graph.leaf(samples.clone()), w, b, g)?;
        for row in 0..n {
            collect(&graph, eta, row)?;
        }
    } else {
        for row in 0..n {
            let graph = Graph::new();
            let (w, b, g) = vars(&graph, &bound);
            let x = graph.leaf(Tensor::matrix(1, samples.shape()[1], samples.row(row).to_vec())?);
            let eta = eta_graph(model, x, w, b, g)?;
            collect(&graph, eta, 0)?;
        }
    }
    Ok(out)
}

/// `sigma_i * d((a_i - mu_i) / sigma_i) / d w_i` by reverse mode.
pub fn chi_autodiff(model: &GlmModel, samples: &Tensor<f64>, case: usize, unit: usize) -> Result<Vec<f64>> {
    if !model.is_normalized() {
        return Err(Error::InvalidConfig("chi is defined for normalized models only".into()));
    }
    let standardized = GlmModel {
        b: vec![0.0; model.units()],
        g: vec![1.0; model.units()],
        ..model.clone()
    };
    let fwd = Forward::compute(model, samples)?;
    let sigma = fwd.sigma[case * model.units() + unit];
    let jac = if model.norm == NormKind::Batch {
        jacobians(&standardized, samples)?.swap_remove(case * model.units() + unit)
    } else {
        let single = Tensor::matrix(1, samples.shape()[1], samples.row(case).to_vec())?;
        jacobians(&standardized, &single)?.swap_remove(unit)
    };
    let layout = model.layout();
    Ok((0..model.inputs()).map(|d| sigma * jac[layout.weight(unit, d)]).collect())
}

/// Score outer-product estimate of the Fisher matrix with per-entry standard
/// errors.
///
/// Draws are stratified: every sample `x_n` gets the same number of `y`
/// draws, so the only noise is from `y | x` and the estimate targets exactly
/// the empirical expectation the analytic matrices use.
#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloFisher {
    pub dim: usize,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub draws: usize,
}

pub fn score_monte_carlo<R: Rng + ?Sized>(model: &GlmModel, samples: &Tensor<f64>, draws: usize, rng: &mut R) -> Result<MonteCarloFisher> {
    let fwd = Forward::compute(model, samples)?;
    let n = fwd.cases;
    let h = model.units();
    let per_case = draws.div_ceil(n).max(2);
    let jac = jacobians(model, samples)?;
    let dim = model.layout().dim();
    let phi = model.family.phi();
    let mut mean = vec![0.0; dim * dim];
    let mut var = vec![0.0; dim * dim];
    let mut sum = vec![0.0; dim * dim];
    let mut sum_sq = vec![0.0; dim * dim];
    let mut score = vec![0.0; dim];
    for c in 0..n {
        sum.fill(0.0);
        sum_sq.fill(0.0);
        for _ in 0..per_case {
            score.fill(0.0);
            for k in 0..h {
                let eta = fwd.eta(c, k);
                let y = model.family.sample(eta, rng);
                let r = (y - model.family.mean(eta)) / phi;
                for (s, j) in score.iter_mut().zip(&jac[c * h + k]) {
                    *s += r * j;
                }
            }
            for p in 0..dim {
                for q in 0..dim {
                    let v = score[p] * score[q];
                    sum[p * dim + q] += v;
                    sum_sq[p * dim + q] += v * v;
                }
            }
        }
        let m = per_case as f64;
        for e in 0..dim * dim {
            let mu = sum[e] / m;
            let s2 = ((sum_sq[e] - m * mu * mu) / (m - 1.0)).max(0.0);
            mean[e] += mu / n as f64;
            var[e] += s2 / m / (n * n) as f64;
        }
    }
    Ok(MonteCarloFisher {
        dim,
        mean,
        std_error: var.into_iter().map(f64::sqrt).collect(),
        draws: per_case * n,
    })
}

/// Entrywise comparison of an analytic matrix against the estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct Agreement {
    /// Distinct entries (upper triangle with diagonal).
    pub entries: usize,
    /// Entries with `|analytic - mc| > threshold * se`.
    pub exceedances: usize,
    pub max_z: f64,
    pub worst: (usize, usize),
    pub threshold: f64,
}

impl MonteCarloFisher {
    pub fn compare(&self, analytic: &FisherMatrix, threshold: f64) -> Result<Agreement> {
        if analytic.dim != self.dim {
            return Err(Error::ShapeMismatch {
                op: "fisher comparison",
                lhs: vec![analytic.dim],
                rhs: vec![self.dim],
            });
        }
        let mut agreement = Agreement {
            entries: 0,
            exceedances: 0,
            max_z: 0.0,
            worst: (0, 0),
            threshold,
        };
        for p in 0..self.dim {
            for q in p..self.dim {
                let e = p * self.dim + q;
                let diff = (analytic.get(p, q) - self.mean[e]).abs();
                let se = self.std_error[e];
                let z = if se > 0.0 {
                    diff / se
                } else if diff <= 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                };
                agreement.entries += 1;
                if z > threshold {
                    agreement.exceedances += 1;
                }
                if z > agreement.max_z {
                    agreement.max_z = z;
                    agreement.worst = (p, q);
                }
            }
        }
        Ok(agreement)
    }
}
