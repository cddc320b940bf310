//! Fisher information geometry of standard and normalized multi-output
//! generalized linear models.
//!
//! A model has `H` independent outputs, each an exponential-family GLM on a
//! shared input `x` of dimension `D`:
//!
//! * standard: `eta_i = w_i . x + b_i`, parameters `theta = vec([W, b]^T)`
//! * normalized: `eta_i = g_i (a_i - mu_i) / sigma_i + b_i` with
//!   `a_i = w_i . x`, parameters `theta = vec([W, b, g]^T)`
//!
//! so `theta` is unit-major: all of unit 0's weights, then its bias (and
//! gain), then unit 1, and so on.
//!
//! Expectations over `x` are empirical means over a sample set. Batch
//! statistics are computed over that same set, and the Fisher matrix treats
//! them as functions of the weights. Normalization runs with epsilon = 0.
//!
//! Analytic quantities are checked against the independent estimators in
//! [`oracle`].

pub mod oracle;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::normalizers::{weight_row_norms, NormKind};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLES: usize = 2048;
pub const DEFAULT_INPUTS: usize = 8;
pub const DEFAULT_UNITS: usize = 4;
/// Normalization scales below this make the metric singular.
pub const MIN_SIGMA: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Family {
    /// `y` in {0, 1}, mean `sigmoid(eta)`, dispersion 1.
    BernoulliLogistic,
    /// `y` real, mean `eta`, variance `phi`.
    GaussianIdentity { phi: f64 },
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::BernoulliLogistic => "bernoulli-logistic",
            Family::GaussianIdentity { .. } => "gaussian-identity",
        }
    }

    pub fn phi(self) -> f64 {
        match self {
            Family::BernoulliLogistic => 1.0,
            Family::GaussianIdentity { phi } => phi,
        }
    }

    pub fn validate(self) -> Result<()> {
        let phi = self.phi();
        if phi > 0.0 && phi.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("dispersion must be positive, got {phi}")))
        }
    }

    /// Transfer function `f`.
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::BernoulliLogistic => sigmoid(eta),
            Family::GaussianIdentity { .. } => eta,
        }
    }

    /// `f'`.
    pub fn mean_derivative(self, eta: f64) -> f64 {
        match self {
            Family::BernoulliLogistic => {
                let p = sigmoid(eta);
                p * (1.0 - p)
            }
            Family::GaussianIdentity { .. } => 1.0,
        }
    }

    /// `Var[y | x] = phi f'(eta)`.
    pub fn variance(self, eta: f64) -> f64 {
        self.phi() * self.mean_derivative(eta)
    }

    /// Log-partition term `eta(t)` of the density.
    pub fn log_partition(self, eta: f64) -> f64 {
        match self {
            Family::BernoulliLogistic => softplus(eta),
            Family::GaussianIdentity { .. } => 0.5 * eta * eta,
        }
    }

    /// Base-measure term `c(y, phi)`.
    pub fn base_measure(self, y: f64) -> Result<f64> {
        match self {
            Family::BernoulliLogistic => {
                if y == 0.0 || y == 1.0 {
                    Ok(0.0)
                } else {
                    Err(Error::OutsideSupport { family: self.name(), y })
                }
            }
            Family::GaussianIdentity { phi } => {
                if y.is_finite() {
                    Ok(-y * y / (2.0 * phi) - 0.5 * (2.0 * std::f64::consts::PI * phi).ln())
                } else {
                    Err(Error::OutsideSupport { family: self.name(), y })
                }
            }
        }
    }

    /// `(eta y - log_partition(eta)) / phi + c(y, phi)`.
    pub fn log_density(self, eta: f64, y: f64) -> Result<f64> {
        let c = self.base_measure(y)?;
        Ok((eta * y - self.log_partition(eta)) / self.phi() + c)
    }

    /// `KL(P(y; eta_p) || P(y; eta_q))` in closed form.
    pub fn kl(self, eta_p: f64, eta_q: f64) -> Result<f64> {
        match self {
            Family::BernoulliLogistic => {
                let (p, q) = (sigmoid(eta_p), sigmoid(eta_q));
                if p <= 0.0 || p >= 1.0 || q <= 0.0 || q >= 1.0 {
                    return Err(Error::InfiniteKl);
                }
                // log sigmoid(t) = -softplus(-t), log(1 - sigmoid(t)) = -softplus(t)
                let log_ratio_one = softplus(-eta_q) - softplus(-eta_p);
                let log_ratio_zero = softplus(eta_q) - softplus(eta_p);
                Ok(p * log_ratio_one + (1.0 - p) * log_ratio_zero)
            }
            Family::GaussianIdentity { phi } => {
                let d = eta_p - eta_q;
                Ok(d * d / (2.0 * phi))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, eta: f64, rng: &mut R) -> f64 {
        match self {
            Family::BernoulliLogistic => {
                if rng.random::<f64>() < sigmoid(eta) {
                    1.0
                } else {
                    0.0
                }
            }
            Family::GaussianIdentity { phi } => {
                let z: f64 = StandardNormal.sample(rng);
                eta + phi.sqrt() * z
            }
        }
    }
}

/// Position of each parameter inside `theta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub units: usize,
    pub inputs: usize,
    pub with_gain: bool,
}

impl Layout {
    pub fn stride(&self) -> usize {
        self.inputs + 1 + usize::from(self.with_gain)
    }

    pub fn dim(&self) -> usize {
        self.units * self.stride()
    }

    pub fn weight(&self, unit: usize, input: usize) -> usize {
        unit * self.stride() + input
    }

    pub fn bias(&self, unit: usize) -> usize {
        unit * self.stride() + self.inputs
    }

    /// Panics for a standard layout.
    pub fn gain(&self, unit: usize) -> usize {
        assert!(self.with_gain, "standard models have no gain");
        unit * self.stride() + self.inputs + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlmModel {
    /// `[H, D]`
    pub w: Tensor<f64>,
    pub b: Vec<f64>,
    /// Ignored by standard models.
    pub g: Vec<f64>,
    pub family: Family,
    pub norm: NormKind,
}

impl GlmModel {
    pub fn new(w: Tensor<f64>, b: Vec<f64>, g: Vec<f64>, family: Family, norm: NormKind) -> Result<Self> {
        family.validate()?;
        if w.rank() != 2 || w.shape()[0] != b.len() || b.len() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "glm model",
                lhs: w.shape().to_vec(),
                rhs: vec![b.len(), g.len()],
            });
        }
        Ok(Self { w, b, g, family, norm })
    }

    /// Weights from N(0, 1/D), biases from N(0, 0.25), gains in [0.5, 1.5].
    pub fn random<R: Rng + ?Sized>(units: usize, inputs: usize, family: Family, norm: NormKind, rng: &mut R) -> Result<Self> {
        let w = Tensor::standard_normal(&[units, inputs], rng).scale(1.0 / (inputs as f64).sqrt());
        let b = (0..units)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                0.5 * z
            })
            .collect();
        let g = (0..units).map(|_| rng.random_range(0.5..1.5)).collect();
        Self::new(w, b, g, family, norm)
    }

    pub fn units(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn is_normalized(&self) -> bool {
        self.norm != NormKind::None
    }

    pub fn layout(&self) -> Layout {
        Layout {
            units: self.units(),
            inputs: self.inputs(),
            with_gain: self.is_normalized(),
        }
    }

    pub fn theta(&self) -> Vec<f64> {
        let l = self.layout();
        let mut theta = vec![0.0; l.dim()];
        for i in 0..l.units {
            for (j, &w) in self.w.row(i).iter().enumerate() {
                theta[l.weight(i, j)] = w;
            }
            theta[l.bias(i)] = self.b[i];
            if l.with_gain {
                theta[l.gain(i)] = self.g[i];
            }
        }
        theta
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        let l = self.layout();
        if theta.len() != l.dim() {
            return Err(Error::ShapeMismatch {
                op: "with_theta",
                lhs: vec![l.dim()],
                rhs: vec![theta.len()],
            });
        }
        let mut m = self.clone();
        for i in 0..l.units {
            for j in 0..l.inputs {
                m.w.row_mut(i)[j] = theta[l.weight(i, j)];
            }
            m.b[i] = theta[l.bias(i)];
            if l.with_gain {
                m.g[i] = theta[l.gain(i)];
            }
        }
        Ok(m)
    }

    /// Model at `theta + delta`.
    pub fn perturbed(&self, delta: &[f64]) -> Result<Self> {
        let theta = self.theta();
        if delta.len() != theta.len() {
            return Err(Error::ShapeMismatch {
                op: "perturbed",
                lhs: vec![theta.len()],
                rhs: vec![delta.len()],
            });
        }
        let moved: Vec<f64> = theta.iter().zip(delta).map(|(t, d)| t + d).collect();
        self.with_theta(&moved)
    }
}

fn check_samples(model: &GlmModel, samples: &Tensor<f64>) -> Result<usize> {
    if samples.rank() != 2 || samples.shape()[1] != model.inputs() {
        return Err(Error::ShapeMismatch {
            op: "glm samples",
            lhs: samples.shape().to_vec(),
            rhs: vec![model.inputs()],
        });
    }
    let n = samples.shape()[0];
    if n == 0 {
        return Err(Error::DegenerateData("the sample set is empty".into()));
    }
    Ok(n)
}

/// Everything the analytic formulas need about one sample set.
#[derive(Clone, Debug)]
pub struct Forward {
    pub cases: usize,
    pub units: usize,
    /// `[N * H]` raw summed inputs `w_i . x`.
    pub a: Vec<f64>,
    /// `[N * H]` per-case, per-unit statistics (0 and 1 for standard models).
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `[N * H]` natural parameters.
    pub eta: Vec<f64>,
    /// Batch norm only: `d sigma_i / d w_i`, `[H * D]`, and the sample mean
    /// of `x`, `[D]`.
    sigma_grad: Vec<f64>,
    mean_x: Vec<f64>,
}

impl Forward {
    pub fn compute(model: &GlmModel, samples: &Tensor<f64>) -> Result<Self> {
        let n = check_samples(model, samples)?;
        let (h, d) = (model.units(), model.inputs());
        let a = samples.matmul(&model.w.transpose()?)?.into_data();
        let mut mu = vec![0.0; n * h];
        let mut sigma = vec![1.0; n * h];
        let mut sigma_grad = Vec::new();
        let mut mean_x = Vec::new();
        match model.norm {
            NormKind::None => {}
            NormKind::Layer => {
                for c in 0..n {
                    let row = &a[c * h..(c + 1) * h];
                    let m = row.iter().sum::<f64>() / h as f64;
                    let s = (row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / h as f64).sqrt();
                    mu[c * h..(c + 1) * h].fill(m);
                    sigma[c * h..(c + 1) * h].fill(s);
                }
            }
            NormKind::Batch => {
                mean_x = (0..d).map(|j| (0..n).map(|c| samples.row(c)[j]).sum::<f64>() / n as f64).collect();
                sigma_grad = vec![0.0; h * d];
                for i in 0..h {
                    let m = (0..n).map(|c| a[c * h + i]).sum::<f64>() / n as f64;
                    let s = ((0..n).map(|c| (a[c * h + i] - m).powi(2)).sum::<f64>() / n as f64).sqrt();
                    for c in 0..n {
                        mu[c * h + i] = m;
                        sigma[c * h + i] = s;
                    }
                    // d sigma / d w = E[(a - mu)(x - mean_x)] / sigma
                    for c in 0..n {
                        let centered = (a[c * h + i] - m) / (n as f64 * s);
                        for (j, &x) in samples.row(c).iter().enumerate() {
                            sigma_grad[i * d + j] += centered * (x - mean_x[j]);
                        }
                    }
                }
            }
            NormKind::Weight => {
                let norms = weight_row_norms(&model.w)?;
                for c in 0..n {
                    sigma[c * h..(c + 1) * h].copy_from_slice(&norms);
                }
            }
        }
        if model.is_normalized() {
            if let Some(k) = sigma.iter().position(|&s| !(s >= MIN_SIGMA)) {
                return Err(Error::SingularMetric {
                    unit: k % h,
                    sigma: sigma[k],
                });
            }
        }
        let eta = (0..n * h)
            .map(|k| {
                let i = k % h;
                if model.is_normalized() {
                    model.g[i] * (a[k] - mu[k]) / sigma[k] + model.b[i]
                } else {
                    a[k] + model.b[i]
                }
            })
            .collect();
        Ok(Self {
            cases: n,
            units: h,
            a,
            mu,
            sigma,
            eta,
            sigma_grad,
            mean_x,
        })
    }

    fn at(&self, case: usize, unit: usize) -> usize {
        case * self.units + unit
    }

    /// `(a - mu) / sigma`.
    pub fn standardized(&self, case: usize, unit: usize) -> f64 {
        let k = self.at(case, unit);
        (self.a[k] - self.mu[k]) / self.sigma[k]
    }

    pub fn eta(&self, case: usize, unit: usize) -> f64 {
        self.eta[self.at(case, unit)]
    }

    /// `Cov[y | x] / phi^2` for one case. Outputs are independent, so this is
    /// diagonal.
    pub fn output_covariance(&self, family: Family, case: usize) -> Vec<f64> {
        let h = self.units;
        let phi2 = family.phi() * family.phi();
        let mut cov = vec![0.0; h * h];
        for i in 0..h {
            cov[i * h + i] = family.variance(self.eta(case, i)) / phi2;
        }
        cov
    }
}

/// Sum of the `H` per-output log densities, one value per case.
pub fn glm_log_likelihood(model: &GlmModel, samples: &Tensor<f64>, y: &Tensor<f64>) -> Result<Vec<f64>> {
    let fwd = Forward::compute(model, samples)?;
    if y.shape() != [fwd.cases, fwd.units] {
        return Err(Error::ShapeMismatch {
            op: "glm_log_likelihood",
            lhs: vec![fwd.cases, fwd.units],
            rhs: y.shape().to_vec(),
        });
    }
    (0..fwd.cases)
        .map(|c| (0..fwd.units).map(|i| model.family.log_density(fwd.eta(c, i), y.row(c)[i])).sum())
        .collect()
}

/// `chi_i = x - d mu_i / d w_i - ((a_i - mu_i) / sigma_i) d sigma_i / d w_i`
/// for case `case` of `samples`. Batch statistics use the whole sample set.
pub fn chi_vector(model: &GlmModel, samples: &Tensor<f64>, case: usize, unit: usize) -> Result<Vec<f64>> {
    let n = check_samples(model, samples)?;
    if case >= n {
        return Err(Error::IndexOutOfRange { what: "case", index: case, len: n });
    }
    if unit >= model.units() {
        return Err(Error::IndexOutOfRange {
            what: "unit",
            index: unit,
            len: model.units(),
        });
    }
    if model.norm == NormKind::Layer && model.units() == 1 {
        // The only unit is its own mean.
        return Ok(vec![0.0; model.inputs()]);
    }
    let fwd = Forward::compute(model, samples)?;
    chi_from_forward(model, &fwd, samples, case, unit)
}

fn chi_from_forward(model: &GlmModel, fwd: &Forward, samples: &Tensor<f64>, case: usize, unit: usize) -> Result<Vec<f64>> {
    let x = samples.row(case);
    let z = fwd.standardized(case, unit);
    let k = fwd.at(case, unit);
    Ok(match model.norm {
        NormKind::None => {
            return Err(Error::InvalidConfig("chi is defined for normalized models only".into()));
        }
        NormKind::Weight => {
            let w = model.w.row(unit);
            let s = fwd.sigma[k];
            x.iter().zip(w).map(|(&x, &w)| x - z * w / s).collect()
        }
        NormKind::Batch => {
            let d = model.inputs();
            let grad = &fwd.sigma_grad[unit * d..(unit + 1) * d];
            x.iter().zip(&fwd.mean_x).zip(grad).map(|((&x, &m), &s)| x - m - z * s).collect()
        }
        NormKind::Layer => {
            let h = model.units() as f64;
            let factor = 1.0 - 1.0 / h - z * z / h;
            x.iter().map(|&x| factor * x).collect()
        }
    })
}

/// How cross-unit terms of the normalized Jacobian are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coupling {
    /// Exact derivatives. Under layer norm every output depends on every
    /// weight row through the shared statistics.
    Full,
    /// Keeps only `d eta_i / d w_i`, i.e. the per-unit chi blocks.
    PerUnit,
}

/// `d eta_k / d theta` for one case, written into `row` (length `dim`).
fn jacobian_row(
    model: &GlmModel,
    fwd: &Forward,
    samples: &Tensor<f64>,
    case: usize,
    k: usize,
    coupling: Coupling,
    row: &mut [f64],
) -> Result<()> {
    row.fill(0.0);
    let l = model.layout();
    let x = samples.row(case);
    row[l.bias(k)] = 1.0;
    if !l.with_gain {
        for (j, &x) in x.iter().enumerate() {
            row[l.weight(k, j)] = x;
        }
        return Ok(());
    }
    let z = fwd.standardized(case, k);
    let sigma = fwd.sigma[fwd.at(case, k)];
    row[l.gain(k)] = z;
    let scale = model.g[k] / sigma;
    let chi = chi_from_forward(model, fwd, samples, case, k)?;
    for (j, c) in chi.iter().enumerate() {
        row[l.weight(k, j)] = scale * c;
    }
    if model.norm == NormKind::Layer && coupling == Coupling::Full {
        let h = model.units() as f64;
        for other in (0..model.units()).filter(|&u| u != k) {
            let zo = fwd.standardized(case, other);
            let factor = scale * (-1.0 / h - z * zo / h);
            for (j, &x) in x.iter().enumerate() {
                row[l.weight(other, j)] = factor * x;
            }
        }
    }
    Ok(())
}

/// Dense symmetric Fisher matrix in `theta` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherMatrix {
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub entries: Vec<f64>,
    /// Number of `x` samples averaged over.
    pub samples: usize,
    /// Frobenius norm of `F - F^T` before symmetrization.
    pub asymmetry: f64,
}

impl FisherMatrix {
    fn from_accumulated(dim: usize, mut entries: Vec<f64>, samples: usize) -> Self {
        let mut asym = 0.0;
        for p in 0..dim {
            for q in (p + 1)..dim {
                let (u, v) = (entries[p * dim + q], entries[q * dim + p]);
                asym += 2.0 * (u - v) * (u - v);
                let m = 0.5 * (u + v);
                entries[p * dim + q] = m;
                entries[q * dim + p] = m;
            }
        }
        Self {
            dim,
            entries,
            samples,
            asymmetry: asym.sqrt(),
        }
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.entries[p * self.dim + q]
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for p in 0..self.dim {
            for q in 0..self.dim {
                worst = worst.max((self.get(p, q) - self.get(q, p)).abs());
            }
        }
        worst
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.max_asymmetry() <= tol
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = DMatrix::from_row_slice(self.dim, self.dim, &self.entries);
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Smallest eigenvalue at least `-1e-8` times the largest.
    pub fn is_psd(&self) -> bool {
        let ev = self.eigenvalues();
        match (ev.first(), ev.last()) {
            (Some(&lo), Some(&hi)) => lo >= -1e-8 * hi.max(0.0),
            _ => true,
        }
    }

    /// Principal submatrix on `indices`.
    pub fn block(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().flat_map(|&p| indices.iter().map(move |&q| self.get(p, q))).collect()
    }
}

fn assemble(model: &GlmModel, samples: &Tensor<f64>, coupling: Coupling) -> Result<FisherMatrix> {
    let fwd = Forward::compute(model, samples)?;
    let dim = model.layout().dim();
    let h = model.units();
    let mut entries = vec![0.0; dim * dim];
    let mut jac = vec![0.0; h * dim];
    for case in 0..fwd.cases {
        for k in 0..h {
            jacobian_row(model, &fwd, samples, case, k, coupling, &mut jac[k * dim..(k + 1) * dim])?;
        }
        let cov = fwd.output_covariance(model.family, case);
        for k in 0..h {
            for l in 0..h {
                let c = cov[k * h + l];
                if c == 0.0 {
                    continue;
                }
                let (jk, jl) = (&jac[k * dim..(k + 1) * dim], &jac[l * dim..(l + 1) * dim]);
                for (p, &u) in jk.iter().enumerate() {
                    if u == 0.0 {
                        continue;
                    }
                    let cu = c * u;
                    let out = &mut entries[p * dim..(p + 1) * dim];
                    for (o, &v) in out.iter_mut().zip(jl) {
                        *o += cu * v;
                    }
                }
            }
        }
    }
    let inv = 1.0 / fwd.cases as f64;
    entries.iter_mut().for_each(|v| *v *= inv);
    Ok(FisherMatrix::from_accumulated(dim, entries, fwd.cases))
}

/// `F = E[Cov[y|x]/phi^2 (x) [[x x^T, x], [x^T, 1]]]` for a standard model.
pub fn fisher_standard(model: &GlmModel, samples: &Tensor<f64>) -> Result<FisherMatrix> {
    if model.is_normalized() {
        return Err(Error::InvalidConfig("fisher_standard needs an unnormalized model".into()));
    }
    assemble(model, samples, Coupling::Full)
}

/// Fisher matrix of a normalized model with every cross-unit term included.
///
/// Each pair of units contributes
/// `Cov[y_i, y_j | x] / phi^2 * u_i u_j^T` with
/// `u_i = [g_i chi_i / sigma_i, 1, (a_i - mu_i) / sigma_i]`. Under layer
/// norm the weight part of `u_i` also has entries on the other units' weight
/// rows, because they share `mu` and `sigma`.
pub fn fisher_normalized(model: &GlmModel, samples: &Tensor<f64>) -> Result<FisherMatrix> {
    fisher_normalized_with(model, samples, Coupling::Full)
}

pub fn fisher_normalized_with(model: &GlmModel, samples: &Tensor<f64>, coupling: Coupling) -> Result<FisherMatrix> {
    if !model.is_normalized() {
        return Err(Error::InvalidConfig("fisher_normalized needs a normalized model".into()));
    }
    assemble(model, samples, coupling)
}

/// Fisher matrix appropriate to the model's normalization.
pub fn fisher(model: &GlmModel, samples: &Tensor<f64>) -> Result<FisherMatrix> {
    if model.is_normalized() {
        fisher_normalized(model, samples)
    } else {
        fisher_standard(model, samples)
    }
}

/// `0.5 delta^T F delta`.
pub fn kl_quadratic_form(f: &FisherMatrix, delta: &[f64]) -> Result<f64> {
    if delta.len() != f.dim {
        return Err(Error::ShapeMismatch {
            op: "kl_quadratic_form",
            lhs: vec![f.dim],
            rhs: vec![delta.len()],
        });
    }
    let mut total = 0.0;
    for (p, &dp) in delta.iter().enumerate() {
        if dp == 0.0 {
            continue;
        }
        let row = &f.entries[p * f.dim..(p + 1) * f.dim];
        total += dp * row.iter().zip(delta).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(0.5 * total)
}

/// Mean over samples of `KL(P(y|x; theta) || P(y|x; theta + delta))`. Batch
/// statistics are recomputed at `theta + delta`.
pub fn kl_exact(model: &GlmModel, delta: &[f64], samples: &Tensor<f64>) -> Result<f64> {
    let other = model.perturbed(delta)?;
    let p = Forward::compute(model, samples)?;
    let q = Forward::compute(&other, samples)?;
    let mut total = 0.0;
    for (&ep, &eq) in p.eta.iter().zip(&q.eta) {
        total += model.family.kl(ep, eq)?;
    }
    Ok(total / p.cases as f64)
}

/// An empirical mean with its standard error over the `x` samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricEstimate {
    pub value: f64,
    pub std_error: f64,
}

impl MetricEstimate {
    fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            value: mean,
            std_error: (var / n).sqrt(),
        }
    }

    /// `|self - other|` in units of the combined standard error.
    pub fn separation(&self, other: &MetricEstimate) -> f64 {
        let se = self.std_error.hypot(other.std_error);
        let diff = (self.value - other.value).abs();
        if se == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / se
        }
    }
}

fn check_gain_delta(model: &GlmModel, delta_g: &[f64]) -> Result<()> {
    if delta_g.len() != model.units() {
        return Err(Error::ShapeMismatch {
            op: "gain direction",
            lhs: vec![model.units()],
            rhs: vec![delta_g.len()],
        });
    }
    Ok(())
}

/// `0.5 delta_g^T M delta_g` with
/// `M_ij = E[Cov(y_i, y_j | x) (a_i - mu_i)(a_j - mu_j) / (sigma_i sigma_j)] / phi^2`,
/// the gain-gain block of the normalized Fisher matrix. Under weight norm
/// the weighting is `a_i a_j / (||w_i|| ||w_j||)`.
pub fn gain_direction_metric(model: &GlmModel, delta_g: &[f64], samples: &Tensor<f64>) -> Result<MetricEstimate> {
    if !model.is_normalized() {
        return Err(Error::InvalidConfig("the gain metric needs a normalized model".into()));
    }
    check_gain_delta(model, delta_g)?;
    let fwd = Forward::compute(model, samples)?;
    let h = model.units();
    let per_case: Vec<f64> = (0..fwd.cases)
        .map(|c| {
            let cov = fwd.output_covariance(model.family, c);
            let z: Vec<f64> = (0..h).map(|i| fwd.standardized(c, i) * delta_g[i]).collect();
            0.5 * (0..h).flat_map(|i| (0..h).map(move |j| (i, j))).map(|(i, j)| cov[i * h + j] * z[i] * z[j]).sum::<f64>()
        })
        .collect();
    Ok(MetricEstimate::from_values(&per_case))
}

/// Simplified batch-norm gain metric `0.5 delta_g^T E[Cov[y|x]] delta_g / phi^2`,
/// which omits the standardized-activation weighting.
pub fn gain_metric_unweighted(model: &GlmModel, delta_g: &[f64], samples: &Tensor<f64>) -> Result<MetricEstimate> {
    check_gain_delta(model, delta_g)?;
    let fwd = Forward::compute(model, samples)?;
    let h = model.units();
    let per_case: Vec<f64> = (0..fwd.cases)
        .map(|c| {
            let cov = fwd.output_covariance(model.family, c);
            0.5 * (0..h).flat_map(|i| (0..h).map(move |j| (i, j))).map(|(i, j)| cov[i * h + j] * delta_g[i] * delta_g[j]).sum::<f64>()
        })
        .collect();
    Ok(MetricEstimate::from_values(&per_case))
}

/// `theta` direction that puts `delta_g` on the gain coordinates and zero
/// elsewhere.
pub fn gain_direction(model: &GlmModel, delta_g: &[f64]) -> Result<Vec<f64>> {
    check_gain_delta(model, delta_g)?;
    let l = model.layout();
    if !l.with_gain {
        return Err(Error::InvalidConfig("standard models have no gain".into()));
    }
    let mut d = vec![0.0; l.dim()];
    for (i, &g) in delta_g.iter().enumerate() {
        d[l.gain(i)] = g;
    }
    Ok(d)
}

/// Standard-model direction `Delta_i = delta_gi w_i / ||w_i||` on the weights,
/// zero on the biases.
pub fn projected_weight_direction(model: &GlmModel, delta_g: &[f64]) -> Result<Vec<f64>> {
    check_gain_delta(model, delta_g)?;
    let norms = weight_row_norms(&model.w)?;
    let l = model.layout();
    if l.with_gain {
        return Err(Error::InvalidConfig("the projected metric needs an unnormalized model".into()));
    }
    let mut d = vec![0.0; l.dim()];
    for i in 0..l.units {
        for (j, &w) in model.w.row(i).iter().enumerate() {
            d[l.weight(i, j)] = delta_g[i] * w / norms[i];
        }
    }
    Ok(d)
}

/// `0.5 Delta^T F Delta` for the projected gain direction, evaluated as
/// `E[Cov(y_i, y_j | x) a_i a_j / (||w_i|| ||w_j||)] delta_gi delta_gj / (2 phi^2)`.
pub fn projected_weight_metric(model: &GlmModel, delta_g: &[f64], samples: &Tensor<f64>) -> Result<MetricEstimate> {
    if model.is_normalized() {
        return Err(Error::InvalidConfig("the projected metric needs an unnormalized model".into()));
    }
    check_gain_delta(model, delta_g)?;
    let norms = weight_row_norms(&model.w)?;
    let fwd = Forward::compute(model, samples)?;
    let h = model.units();
    let per_case: Vec<f64> = (0..fwd.cases)
        .map(|c| {
            let cov = fwd.output_covariance(model.family, c);
            let z: Vec<f64> = (0..h).map(|i| fwd.a[fwd.at(c, i)] / norms[i] * delta_g[i]).collect();
            0.5 * (0..h).flat_map(|i| (0..h).map(move |j| (i, j))).map(|(i, j)| cov[i * h + j] * z[i] * z[j]).sum::<f64>()
        })
        .collect();
    Ok(MetricEstimate::from_values(&per_case))
}

/// Standard-normal sample set `[n, d]`.
pub fn gaussian_samples<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Tensor<f64> {
    Tensor::standard_normal(&[n, d], rng)
}

/// Random unit vector of length `dim`.
pub fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// One row of a KL sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlPoint {
    pub delta_norm: f64,
    pub kl_exact: f64,
    pub kl_quadratic: f64,
}

impl KlPoint {
    pub fn ratio(&self) -> f64 {
        self.kl_exact / self.kl_quadratic
    }
}

/// Exact and quadratic KL along `direction` (unit length) at each norm.
pub fn kl_sweep(model: &GlmModel, samples: &Tensor<f64>, direction: &[f64], norms: &[f64]) -> Result<Vec<KlPoint>> {
    let f = fisher(model, samples)?;
    norms
        .iter()
        .map(|&s| {
            let delta: Vec<f64> = direction.iter().map(|d| d * s).collect();
            Ok(KlPoint {
                delta_norm: s,
                kl_exact: kl_exact(model, &delta, samples)?,
                kl_quadratic: kl_quadratic_form(&f, &delta)?,
            })
        })
        .collect()
}
