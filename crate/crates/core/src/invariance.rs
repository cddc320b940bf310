//! Executable invariance table: how each normalizer responds to rescaling
//! and recentering of the weights and of the data.
//!
//! The probe is one normalized layer followed by tanh, run with epsilon = 0 so
//! the invariances hold up to rounding. Batch statistics are taken over the
//! whole dataset as a single batch.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::normalizers::{
    batch_norm_apply, batch_norm_stats, layer_norm_apply, layer_norm_stats, weight_norm_apply, weight_row_norms,
    AffineParams, NormKind, VarianceEstimator,
};
use crate::tensor::Tensor;

/// Largest output deviation still counted as invariant.
pub const TOL_INVARIANT: f64 = 1e-9;
/// Smallest deviation that demonstrates non-invariance.
pub const TOL_SEPARATION: f64 = 1e-3;
pub const DEFAULT_TRIALS: usize = 5;
/// Pre-activation spread below which a dataset is rejected.
pub const MIN_SPREAD: f64 = 1e-3;
pub const DELTA_RANGE: (f64, f64) = (0.25, 4.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    WeightMatrixRescale,
    WeightMatrixRecenter,
    WeightVectorRescale,
    DatasetRescale,
    DatasetRecenter,
    SingleCaseRescale,
}

impl TransformKind {
    pub const ALL: [TransformKind; 6] = [
        TransformKind::WeightMatrixRescale,
        TransformKind::WeightMatrixRecenter,
        TransformKind::WeightVectorRescale,
        TransformKind::DatasetRescale,
        TransformKind::DatasetRecenter,
        TransformKind::SingleCaseRescale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::WeightMatrixRescale => "weight-matrix-rescale",
            TransformKind::WeightMatrixRecenter => "weight-matrix-recenter",
            TransformKind::WeightVectorRescale => "weight-vector-rescale",
            TransformKind::DatasetRescale => "dataset-rescale",
            TransformKind::DatasetRecenter => "dataset-recenter",
            TransformKind::SingleCaseRescale => "single-case-rescale",
        }
    }

    pub fn acts_on_weights(self) -> bool {
        matches!(
            self,
            TransformKind::WeightMatrixRescale | TransformKind::WeightMatrixRecenter | TransformKind::WeightVectorRescale
        )
    }
}

/// The schemes that appear in the table, in row order.
pub const SCHEMES: [NormKind; 3] = [NormKind::Batch, NormKind::Weight, NormKind::Layer];

/// Whether `scheme` is expected to be invariant under `transform`.
pub fn expected_invariant(scheme: NormKind, transform: TransformKind) -> bool {
    use TransformKind::*;
    match scheme {
        NormKind::Batch => !matches!(transform, WeightMatrixRecenter | SingleCaseRescale),
        NormKind::Weight => matches!(transform, WeightMatrixRescale | WeightVectorRescale),
        NormKind::Layer => matches!(transform, WeightMatrixRescale | WeightMatrixRecenter | DatasetRescale | SingleCaseRescale),
        NormKind::None => false,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub delta: f64,
    /// `gamma` (length D) for weight recentering, `c` (length D) for dataset
    /// recentering; ignored otherwise.
    pub shift: Vec<f64>,
    /// Weight row for `WeightVectorRescale`, case index for
    /// `SingleCaseRescale`.
    pub target: usize,
}

impl TransformSpec {
    pub fn identity(kind: TransformKind, dim: usize) -> Self {
        Self {
            kind,
            delta: 1.0,
            shift: vec![0.0; dim],
            target: 0,
        }
    }

    /// Draws `delta` log-uniformly from `DELTA_RANGE`, shifts from N(0, 1), and
    /// a uniform target index.
    pub fn sample<R: Rng + ?Sized>(kind: TransformKind, layer: &ProbeLayer, data: &Tensor<f64>, rng: &mut R) -> Self {
        let (lo, hi) = DELTA_RANGE;
        let delta = rng.random_range(lo.ln()..hi.ln()).exp();
        let dim = layer.w.shape()[1];
        let shift = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let target = match kind {
            TransformKind::WeightVectorRescale => rng.random_range(0..layer.units()),
            TransformKind::SingleCaseRescale => rng.random_range(0..data.shape()[0]),
            _ => 0,
        };
        Self {
            kind,
            delta,
            shift,
            target,
        }
    }
}

/// One normalized layer `tanh(N(W x; gain, bias))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeLayer {
    /// `[H, D]`
    pub w: Tensor<f64>,
    pub affine: AffineParams<f64>,
}

impl ProbeLayer {
    pub fn units(&self) -> usize {
        self.w.shape()[0]
    }

    /// Weights from N(0, 1/D), gains in [0.5, 1.5], biases in [-0.5, 0.5].
    pub fn random<R: Rng + ?Sized>(units: usize, dim: usize, rng: &mut R) -> Self {
        let w = Tensor::standard_normal(&[units, dim], rng).scale(1.0 / (dim as f64).sqrt());
        let gain = Tensor::uniform(&[units], 0.5, 1.5, rng);
        let bias = Tensor::uniform(&[units], -0.5, 0.5, rng);
        Self {
            w,
            affine: AffineParams { gain, bias },
        }
    }

    /// Layer output for every case of `x: [N, D]`, shape `[N, H]`.
    pub fn forward(&self, scheme: NormKind, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let pre = match scheme {
            NormKind::Layer => layer_norm_apply(&x.matmul(&self.w.transpose()?)?, &self.affine, 0.0)?,
            NormKind::Batch => {
                let a = x.matmul(&self.w.transpose()?)?;
                let stats = batch_norm_stats(&a, VarianceEstimator::Biased)?;
                batch_norm_apply(&a, &self.affine, &stats, 0.0)?
            }
            NormKind::Weight => weight_norm_apply(&self.w, x, &self.affine)?,
            NormKind::None => {
                return Err(Error::InvalidConfig("the invariance probe needs a normalizer".into()));
            }
        };
        Ok(pre.map(f64::tanh))
    }
}

/// `W' = delta W + 1 gamma^T`: every row scaled by `delta` and shifted by
/// `gamma`.
pub fn weight_affine(w: &Tensor<f64>, delta: f64, gamma: &[f64]) -> Result<Tensor<f64>> {
    let cols = w.shape()[1];
    if gamma.len() != cols {
        return Err(Error::ShapeMismatch {
            op: "weight recentering",
            lhs: w.shape().to_vec(),
            rhs: vec![gamma.len()],
        });
    }
    let mut out = w.scale(delta);
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        *v += gamma[k % cols];
    }
    Ok(out)
}

fn check_index(what: &'static str, index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(Error::IndexOutOfRange { what, index, len });
    }
    Ok(())
}

/// Returns the transformed `(layer, data)`; the inputs are not modified.
pub fn apply_transform(layer: &ProbeLayer, data: &Tensor<f64>, t: &TransformSpec) -> Result<(ProbeLayer, Tensor<f64>)> {
    if !(t.delta > 0.0) {
        return Err(Error::InvalidConfig(format!("transform delta must be positive, got {}", t.delta)));
    }
    let mut layer = layer.clone();
    let mut data = data.clone();
    let dim = layer.w.shape()[1];
    match t.kind {
        TransformKind::WeightMatrixRescale => layer.w = layer.w.scale(t.delta),
        TransformKind::WeightMatrixRecenter => layer.w = weight_affine(&layer.w, 1.0, &t.shift)?,
        TransformKind::WeightVectorRescale => {
            check_index("weight row", t.target, layer.units())?;
            layer.w.row_mut(t.target).iter_mut().for_each(|v| *v *= t.delta);
        }
        TransformKind::DatasetRescale => data = data.scale(t.delta),
        TransformKind::DatasetRecenter => {
            if t.shift.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "dataset recentering",
                    lhs: data.shape().to_vec(),
                    rhs: vec![t.shift.len()],
                });
            }
            for (k, v) in data.data_mut().iter_mut().enumerate() {
                *v += t.shift[k % dim];
            }
        }
        TransformKind::SingleCaseRescale => {
            check_index("case", t.target, data.shape()[0])?;
            data.row_mut(t.target).iter_mut().for_each(|v| *v *= t.delta);
        }
    }
    Ok((layer, data))
}

/// Rejects data on which a broken invariance could go unnoticed.
pub fn check_non_degenerate(layer: &ProbeLayer, data: &Tensor<f64>) -> Result<()> {
    weight_row_norms(&layer.w)?;
    let a = data.matmul(&layer.w.transpose()?)?;
    let per_case = layer_norm_stats(&a)?;
    if let Some((n, s)) = per_case.sigma.data().iter().enumerate().find(|(_, &s)| s <= MIN_SPREAD) {
        return Err(Error::DegenerateData(format!("case {n} has pre-activation std {s:e}")));
    }
    let per_unit = batch_norm_stats(&a, VarianceEstimator::Biased)?;
    if let Some((i, s)) = per_unit.sigma.data().iter().enumerate().find(|(_, &s)| s <= MIN_SPREAD) {
        return Err(Error::DegenerateData(format!("unit {i} has batch std {s:e}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceVerdict {
    pub scheme: NormKind,
    pub transform: TransformKind,
    /// Max over trials, cases and units of `|h - h'|`.
    pub deviation: f64,
    pub invariant: bool,
    pub expected: bool,
}

impl InvarianceVerdict {
    /// Invariant cells must stay within `TOL_INVARIANT`; non-invariant cells
    /// must reach `TOL_SEPARATION` on at least one trial.
    pub fn pass(&self) -> bool {
        if self.expected {
            self.invariant
        } else {
            self.deviation >= TOL_SEPARATION
        }
    }
}

/// Largest `|h - h'|` for one concrete transform.
pub fn output_deviation(scheme: NormKind, layer: &ProbeLayer, data: &Tensor<f64>, t: &TransformSpec) -> Result<f64> {
    let before = layer.forward(scheme, data)?;
    let (layer2, data2) = apply_transform(layer, data, t)?;
    let after = layer2.forward(scheme, &data2)?;
    Ok(before.max_abs_diff(&after))
}

pub fn measure_invariance<R: Rng + ?Sized>(
    scheme: NormKind,
    layer: &ProbeLayer,
    data: &Tensor<f64>,
    transform: TransformKind,
    trials: usize,
    rng: &mut R,
) -> Result<InvarianceVerdict> {
    check_non_degenerate(layer, data)?;
    if trials == 0 {
        return Err(Error::InvalidConfig("at least one trial is required".into()));
    }
    let mut deviation: f64 = 0.0;
    for _ in 0..trials {
        let t = TransformSpec::sample(transform, layer, data, rng);
        deviation = deviation.max(output_deviation(scheme, layer, data, &t)?);
    }
    Ok(InvarianceVerdict {
        scheme,
        transform,
        deviation,
        invariant: deviation <= TOL_INVARIANT,
        expected: expected_invariant(scheme, transform),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerdictTable {
    /// Row-major: `SCHEMES` by `TransformKind::ALL`.
    pub verdicts: Vec<InvarianceVerdict>,
}

impl VerdictTable {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(InvarianceVerdict::pass)
    }

    pub fn failures(&self) -> Vec<String> {
        self.verdicts
            .iter()
            .filter(|v| !v.pass())
            .map(|v| {
                format!(
                    "{} / {}: deviation {:e}, expected {}",
                    v.scheme.name(),
                    v.transform.name(),
                    v.deviation,
                    if v.expected { "invariant" } else { "not invariant" }
                )
            })
            .collect()
    }

    /// Observed invariance pattern, one row per scheme.
    pub fn matrix(&self) -> Vec<Vec<bool>> {
        self.verdicts.chunks(TransformKind::ALL.len()).map(|row| row.iter().map(|v| v.invariant).collect()).collect()
    }

    pub fn get(&self, scheme: NormKind, transform: TransformKind) -> Option<&InvarianceVerdict> {
        self.verdicts.iter().find(|v| v.scheme == scheme && v.transform == transform)
    }
}

/// Evaluates all 18 cells.
pub fn full_table<R: Rng + ?Sized>(layer: &ProbeLayer, data: &Tensor<f64>, trials: usize, rng: &mut R) -> Result<VerdictTable> {
    let mut verdicts = Vec::with_capacity(SCHEMES.len() * TransformKind::ALL.len());
    for scheme in SCHEMES {
        for transform in TransformKind::ALL {
            verdicts.push(measure_invariance(scheme, layer, data, transform, trials, rng)?);
        }
    }
    Ok(VerdictTable { verdicts })
}

/// Default probe: 32 cases, 8 features, 6 units, everything drawn from `rng`.
pub fn default_probe<R: Rng + ?Sized>(rng: &mut R) -> (ProbeLayer, Tensor<f64>) {
    let layer = ProbeLayer::random(6, 8, rng);
    let data = Tensor::standard_normal(&[32, 8], rng);
    (layer, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer_from(w: Tensor<f64>) -> ProbeLayer {
        let h = w.shape()[0];
        ProbeLayer {
            w,
            affine: AffineParams::identity(h),
        }
    }

    #[test]
    fn weight_rescale_example() {
        let layer = layer_from(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let t = TransformSpec {
            delta: 2.0,
            ..TransformSpec::identity(TransformKind::WeightMatrixRescale, 2)
        };
        let (l, _) = apply_transform(&layer, &Tensor::zeros(&[1, 2]), &t).unwrap();
        assert_eq!(l.w, Tensor::from_rows(&[&[2.0, 4.0], &[6.0, 8.0]]));
    }

    #[test]
    fn weight_recenter_example() {
        let layer = layer_from(Tensor::zeros(&[2, 2]));
        let t = TransformSpec {
            shift: vec![1.0, 1.0],
            ..TransformSpec::identity(TransformKind::WeightMatrixRecenter, 2)
        };
        let (l, _) = apply_transform(&layer, &Tensor::zeros(&[1, 2]), &t).unwrap();
        assert_eq!(l.w, Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]));
    }

    #[test]
    fn single_case_example() {
        let layer = layer_from(Tensor::eye(2));
        let data = Tensor::from_rows(&[&[1.0, 2.0], &[5.0, 6.0]]);
        let t = TransformSpec {
            delta: 3.0,
            target: 0,
            ..TransformSpec::identity(TransformKind::SingleCaseRescale, 2)
        };
        let (_, d) = apply_transform(&layer, &data, &t).unwrap();
        assert_eq!(d, Tensor::from_rows(&[&[3.0, 6.0], &[5.0, 6.0]]));
        assert_eq!(data, Tensor::from_rows(&[&[1.0, 2.0], &[5.0, 6.0]]));
    }

    #[test]
    fn out_of_range_target_rejected() {
        let layer = layer_from(Tensor::eye(2));
        let data = Tensor::from_rows(&[&[1.0, 2.0]]);
        for (kind, target) in [(TransformKind::SingleCaseRescale, 1), (TransformKind::WeightVectorRescale, 2)] {
            let t = TransformSpec {
                target,
                ..TransformSpec::identity(kind, 2)
            };
            assert!(matches!(apply_transform(&layer, &data, &t), Err(Error::IndexOutOfRange { .. })));
        }
    }

    #[test]
    fn degenerate_data_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = ProbeLayer::random(4, 3, &mut rng);
        let constant = Tensor::filled(&[10, 3], 0.5);
        assert!(matches!(check_non_degenerate(&layer, &constant), Err(Error::DegenerateData(_))));
        let mut zero_row = layer.clone();
        zero_row.w.row_mut(1).fill(0.0);
        let data = Tensor::standard_normal(&[10, 3], &mut rng);
        assert!(matches!(check_non_degenerate(&zero_row, &data), Err(Error::ZeroWeightRow { row: 1 })));
    }

    #[test]
    fn identity_transform_is_invariant_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (layer, data) = default_probe(&mut rng);
        for scheme in SCHEMES {
            for kind in TransformKind::ALL {
                let t = TransformSpec::identity(kind, 8);
                assert_eq!(output_deviation(scheme, &layer, &data, &t).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn table_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (layer, data) = default_probe(&mut rng);
        let m = |s, t, rng: &mut ChaCha8Rng| measure_invariance(s, &layer, &data, t, DEFAULT_TRIALS, rng).unwrap();
        let v = m(NormKind::Layer, TransformKind::WeightMatrixRecenter, &mut rng);
        assert!(v.invariant && v.pass());
        let v = m(NormKind::Batch, TransformKind::SingleCaseRescale, &mut rng);
        assert!(!v.invariant && v.pass());
        let v = m(NormKind::Weight, TransformKind::DatasetRescale, &mut rng);
        assert!(!v.invariant && v.pass());
    }
}
