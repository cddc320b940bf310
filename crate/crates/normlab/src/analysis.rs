//! Invariance table and GLM geometry reports as CSV rows.

use std::path::{Path, PathBuf};

use normlab_core::geometry::oracle::score_monte_carlo;
use normlab_core::geometry::{
    fisher, gain_direction_metric, gaussian_samples, kl_quadratic_form, kl_sweep, projected_weight_metric, random_direction, Family, FisherMatrix,
    GlmModel, DEFAULT_INPUTS, DEFAULT_SAMPLES, DEFAULT_UNITS,
};
use normlab_core::invariance::{default_probe, full_table, VerdictTable, DEFAULT_TRIALS};
use normlab_core::tensor::Tensor;
use normlab_core::NormKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{NormlabError, Result};
use crate::plot::write_rows;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceRow {
    pub scheme: String,
    pub transform: String,
    pub deviation: f64,
    pub invariant: bool,
    pub expected: bool,
    pub pass: bool,
}

pub fn run_invariance(seed: u64, trials: usize) -> Result<VerdictTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (layer, data) = default_probe(&mut rng);
    Ok(full_table(&layer, &data, trials, &mut rng)?)
}

pub fn run_invariance_default(seed: u64) -> Result<VerdictTable> {
    run_invariance(seed, DEFAULT_TRIALS)
}

pub fn invariance_rows(table: &VerdictTable) -> Vec<InvarianceRow> {
    table
        .verdicts
        .iter()
        .map(|v| InvarianceRow {
            scheme: v.scheme.name().into(),
            transform: v.transform.name().into(),
            deviation: v.deviation,
            invariant: v.invariant,
            expected: v.expected,
            pass: v.pass(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryConfig {
    pub families: Vec<Family>,
    pub units: usize,
    pub inputs: usize,
    pub samples: usize,
    pub seed: u64,
    pub deltas: Vec<f64>,
    /// Score draws for the Monte Carlo Fisher comparison; 0 skips it.
    pub mc_draws: usize,
    pub input_scale: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            families: vec![Family::BernoulliLogistic, Family::GaussianIdentity { phi: 1.0 }],
            units: DEFAULT_UNITS,
            inputs: DEFAULT_INPUTS,
            samples: DEFAULT_SAMPLES,
            seed: 0,
            deltas: vec![1e-1, 1e-2, 1e-3],
            mc_draws: 0,
            input_scale: 10.0,
        }
    }
}

/// Seeded inputs and one random model per norm kind, in `NormKind::ALL`
/// order, plus the random directions the reports probe.
pub struct GeometrySetup {
    pub family: Family,
    pub samples: Tensor<f64>,
    pub models: Vec<GlmModel>,
    /// Full parameter directions for the KL sweep, one per model.
    pub kl_directions: Vec<Vec<f64>>,
    /// Unit direction in input space for the curvature probe.
    pub weight_direction: Vec<f64>,
    /// Gain perturbation shared by the gain and projected metrics.
    pub gain_delta: Vec<f64>,
}

pub fn geometry_setup(config: &GeometryConfig, family: Family) -> Result<GeometrySetup> {
    if config.units == 0 || config.inputs == 0 || config.samples < 2 {
        return Err(NormlabError::Config("geometry needs units, inputs >= 1 and samples >= 2".into()));
    }
    family.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let samples = gaussian_samples(config.samples, config.inputs, &mut rng);
    let weight_direction = random_direction(config.inputs, &mut rng);
    let gain_delta = random_direction(config.units, &mut rng);
    let mut models = Vec::new();
    let mut kl_directions = Vec::new();
    for norm in NormKind::ALL {
        let model = GlmModel::random(config.units, config.inputs, family, norm, &mut rng)?;
        kl_directions.push(random_direction(model.layout().dim(), &mut rng));
        models.push(model);
    }
    Ok(GeometrySetup {
        family,
        samples,
        models,
        kl_directions,
        weight_direction,
        gain_delta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub family: String,
    pub norm: String,
    pub delta_norm: f64,
    pub kl_exact: f64,
    pub kl_quadratic: f64,
    pub ratio: f64,
}

pub fn kl_rows(setup: &GeometrySetup, deltas: &[f64]) -> Result<Vec<KlRow>> {
    let mut rows = Vec::new();
    for (model, dir) in setup.models.iter().zip(&setup.kl_directions) {
        for p in kl_sweep(model, &setup.samples, dir, deltas)? {
            rows.push(KlRow {
                family: setup.family.name().into(),
                norm: model.norm.name().into(),
                delta_norm: p.delta_norm,
                kl_exact: p.kl_exact,
                kl_quadratic: p.kl_quadratic,
                ratio: p.ratio(),
            });
        }
    }
    Ok(rows)
}

/// `|ratio - 1|` below this is rounding in an exactly quadratic KL.
pub const KL_ROUNDING_FLOOR: f64 = 1e-9;

/// The ratio at the middle norm lies in `[0.9, 1.1]`, and `|ratio - 1|`
/// shrinks strictly as the step shrinks unless it is already at rounding
/// level.
pub fn kl_consistent(rows: &[KlRow]) -> bool {
    let dev: Vec<f64> = rows.iter().map(|r| (r.ratio - 1.0).abs()).collect();
    let within = rows.iter().any(|r| r.delta_norm == 1e-2 && (0.9..=1.1).contains(&r.ratio));
    let monotone = dev.windows(2).all(|w| w[0] <= KL_ROUNDING_FLOOR || w[1] < w[0]);
    within && monotone
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureRow {
    pub family: String,
    pub norm: String,
    pub unit: usize,
    pub metric_before: f64,
    pub metric_doubled: f64,
    pub ratio: f64,
}

/// `0.5 u^T F u` for `u` placed on the weights of `unit`.
pub fn weight_direction_metric(model: &GlmModel, f: &FisherMatrix, unit: usize, u: &[f64]) -> Result<f64> {
    let l = model.layout();
    let mut delta = vec![0.0; l.dim()];
    for (j, &v) in u.iter().enumerate() {
        delta[l.weight(unit, j)] = v;
    }
    Ok(kl_quadratic_form(f, &delta)?)
}

/// Metric along a fixed weight direction before and after doubling each
/// unit's weight vector, for the weight- and batch-normalized models.
pub fn curvature_rows(setup: &GeometrySetup) -> Result<Vec<CurvatureRow>> {
    let mut rows = Vec::new();
    for model in setup.models.iter().filter(|m| matches!(m.norm, NormKind::Weight | NormKind::Batch)) {
        let f = fisher(model, &setup.samples)?;
        for unit in 0..model.units() {
            let mut doubled = model.clone();
            doubled.w.row_mut(unit).iter_mut().for_each(|v| *v *= 2.0);
            let f2 = fisher(&doubled, &setup.samples)?;
            let before = weight_direction_metric(model, &f, unit, &setup.weight_direction)?;
            let after = weight_direction_metric(&doubled, &f2, unit, &setup.weight_direction)?;
            rows.push(CurvatureRow {
                family: setup.family.name().into(),
                norm: model.norm.name().into(),
                unit,
                metric_before: before,
                metric_doubled: after,
                ratio: after / before,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub family: String,
    pub norm: String,
    /// `gain` for normalized models, `projected` for the standard one.
    pub metric: String,
    pub value: f64,
    pub std_error: f64,
    pub value_scaled: f64,
    pub std_error_scaled: f64,
    /// `|difference|` in combined standard errors.
    pub separation: f64,
}

/// Gain-direction metric (projected weight metric for the standard model)
/// on the inputs as drawn and multiplied by `scale`.
pub fn gain_rows(setup: &GeometrySetup, scale: f64) -> Result<Vec<GainRow>> {
    let scaled = setup.samples.scale(scale);
    let mut rows = Vec::new();
    for model in &setup.models {
        let (metric, a, b) = if model.norm == NormKind::None {
            (
                "projected",
                projected_weight_metric(model, &setup.gain_delta, &setup.samples)?,
                projected_weight_metric(model, &setup.gain_delta, &scaled)?,
            )
        } else {
            (
                "gain",
                gain_direction_metric(model, &setup.gain_delta, &setup.samples)?,
                gain_direction_metric(model, &setup.gain_delta, &scaled)?,
            )
        };
        rows.push(GainRow {
            family: setup.family.name().into(),
            norm: model.norm.name().into(),
            metric: metric.into(),
            value: a.value,
            std_error: a.std_error,
            value_scaled: b.value,
            std_error_scaled: b.std_error,
            separation: a.separation(&b),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherRow {
    pub family: String,
    pub norm: String,
    pub draws: usize,
    pub entries: usize,
    /// Entries more than 3 standard errors from the estimate.
    pub exceedances: usize,
    /// Expected count of such entries if every deviation were pure
    /// Monte Carlo noise.
    pub expected_by_chance: f64,
    pub max_z: f64,
    /// Two-sided 5% family-wise threshold over `entries` comparisons.
    pub bonferroni_z: f64,
    pub max_asymmetry: f64,
    pub min_eigenvalue: f64,
    pub psd: bool,
}

impl FisherRow {
    pub fn within_three_se(&self) -> bool {
        self.exceedances == 0
    }

    /// No entry beyond the family-wise threshold.
    pub fn calibrated(&self) -> bool {
        self.max_z <= self.bonferroni_z
    }
}

pub fn fisher_rows(setup: &GeometrySetup, draws: usize, seed: u64) -> Result<Vec<FisherRow>> {
    let normal = Normal::standard();
    let tail = 2.0 * (1.0 - normal.cdf(3.0));
    let mut rows = Vec::new();
    for model in &setup.models {
        let f = fisher(model, &setup.samples)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mc = score_monte_carlo(model, &setup.samples, draws, &mut rng)?;
        let agreement = mc.compare(&f, 3.0)?;
        let m = agreement.entries as f64;
        rows.push(FisherRow {
            family: setup.family.name().into(),
            norm: model.norm.name().into(),
            draws: mc.draws,
            entries: agreement.entries,
            exceedances: agreement.exceedances,
            expected_by_chance: m * tail,
            max_z: agreement.max_z,
            bonferroni_z: normal.inverse_cdf(1.0 - 0.025 / m),
            max_asymmetry: f.max_asymmetry(),
            min_eigenvalue: f.eigenvalues().into_iter().fold(f64::INFINITY, f64::min),
            psd: f.is_psd(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeometryReport {
    pub kl: Vec<KlRow>,
    pub curvature: Vec<CurvatureRow>,
    pub gain: Vec<GainRow>,
    pub fisher: Vec<FisherRow>,
}

pub fn run_geometry(config: &GeometryConfig) -> Result<GeometryReport> {
    let mut report = GeometryReport::default();
    for &family in &config.families {
        let setup = geometry_setup(config, family)?;
        report.kl.extend(kl_rows(&setup, &config.deltas)?);
        report.curvature.extend(curvature_rows(&setup)?);
        report.gain.extend(gain_rows(&setup, config.input_scale)?);
        if config.mc_draws > 0 {
            report.fisher.extend(fisher_rows(&setup, config.mc_draws, config.seed)?);
        }
    }
    Ok(report)
}

/// Writes one CSV per report section into `dir`.
pub fn write_geometry(report: &GeometryReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| NormlabError::output(dir, e))?;
    let mut paths = Vec::new();
    let mut put = |name: &str, write: &dyn Fn(&Path) -> Result<()>, empty: bool| -> Result<()> {
        if !empty {
            let path = dir.join(name);
            write(&path)?;
            paths.push(path);
        }
        Ok(())
    };
    put("geometry-kl.csv", &|p| write_rows(&report.kl, p), report.kl.is_empty())?;
    put("geometry-curvature.csv", &|p| write_rows(&report.curvature, p), report.curvature.is_empty())?;
    put("geometry-gain.csv", &|p| write_rows(&report.gain, p), report.gain.is_empty())?;
    put("geometry-fisher.csv", &|p| write_rows(&report.fisher, p), report.fisher.is_empty())?;
    Ok(paths)
}
