//! Hidden-state and gradient norms of vanilla and layer-normalized tanh RNNs
//! over long random sequences, with the recurrent matrix set to a scaled
//! orthogonal matrix of chosen spectral radius.

use std::path::{Path, PathBuf};

use normlab_core::autodiff::{Activation, Graph};
use normlab_core::init::orthogonal;
use normlab_core::params::ParamStore;
use normlab_core::recurrent::{rnn_step, unroll, CellVariant, LnOptions, LossMode, RnnParams, StateVar};
use normlab_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NormlabError, Result};
use crate::plot::write_rows;

#[derive(Clone, Debug, PartialEq)]
pub struct SeqConfig {
    pub hidden: usize,
    pub input: usize,
    pub steps: usize,
    pub radii: Vec<f64>,
    pub seed: u64,
    /// Feed zeros instead of standard normal inputs.
    pub zero_input: bool,
    pub epsilon: f64,
}

impl Default for SeqConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            input: 16,
            steps: 500,
            radii: vec![0.5, 1.0, 1.5, 2.0],
            seed: 0,
            zero_input: false,
            epsilon: normlab_core::normalizers::DEFAULT_EPSILON,
        }
    }
}

pub const VARIANTS: [CellVariant; 2] = [CellVariant::Baseline, CellVariant::LnFull];

pub fn variant_name(v: CellVariant) -> &'static str {
    match v {
        CellVariant::Baseline => "baseline",
        CellVariant::LnFull => "ln-full",
        CellVariant::LnCellOnly => "ln-cell-only",
    }
}

/// One step of one run. `step` 0 is the initial state. `grad_norm` is
/// `||d loss / d h^t||_2` for the loss `sum(h^T)` at the last step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqRow {
    pub radius: f64,
    pub step: usize,
    pub h_sup_norm: f64,
    pub grad_norm: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqRun {
    pub variant: CellVariant,
    pub radius: f64,
    pub rows: Vec<SeqRow>,
    /// `max_i g_i + max_i |b_i|` of the run's parameters.
    pub bound: f64,
    pub diverged: bool,
}

impl SeqRun {
    /// Largest `||h^t||_inf` over steps `1..=T`.
    pub fn max_sup_norm(&self) -> f64 {
        self.rows.iter().skip(1).map(|r| r.h_sup_norm).fold(0.0, f64::max)
    }

    pub fn grad_at_initial_state(&self) -> f64 {
        self.rows[0].grad_norm
    }
}

/// Parameters and data shared by every variant at one radius.
struct Setup {
    store: ParamStore<f64>,
    params: RnnParams,
    inputs: Vec<Tensor<f64>>,
    h0: Tensor<f64>,
}

fn setup(config: &SeqConfig, radius: f64) -> Result<Setup> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let params = RnnParams::init(&mut store, "rnn", config.hidden, config.input, &mut rng)?;
    *store.value_mut(params.w_hh) = orthogonal::<f64, _>(config.hidden, &mut rng).scale(radius);
    let h0 = Tensor::uniform(&[config.hidden], -1.0, 1.0, &mut rng);
    let inputs = (0..config.steps)
        .map(|_| {
            if config.zero_input {
                Tensor::zeros(&[config.input])
            } else {
                Tensor::standard_normal(&[config.input], &mut rng)
            }
        })
        .collect();
    Ok(Setup {
        store,
        params,
        inputs,
        h0,
    })
}

fn trajectory(s: &Setup, variant: CellVariant, opts: &LnOptions<f64>, radius: f64) -> Result<SeqRun> {
    let g = Graph::new();
    let vars = s.params.bind(&g, &s.store);
    let h0 = g.leaf(s.h0.clone());
    let gain = s.store.value(s.params.gain).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bias = s.store.value(s.params.bias).data().iter().map(|b| b.abs()).fold(0.0, f64::max);
    let run = unroll(
        &g,
        &s.inputs,
        StateVar { h: h0, c: None },
        |x, st| {
            Ok(StateVar {
                h: rnn_step(&vars, x, st.h, variant, Activation::Tanh, opts)?,
                c: None,
            })
        },
        |_, h| Ok(h.sum()),
        LossMode::Final,
    );
    let mut out = SeqRun {
        variant,
        radius,
        rows: Vec::with_capacity(s.inputs.len() + 1),
        bound: gain + bias,
        diverged: false,
    };
    let run = match run {
        Ok(run) => run,
        Err(normlab_core::Error::NonFiniteState { step, norm }) => {
            out.diverged = true;
            out.rows.push(SeqRow {
                radius,
                step,
                h_sup_norm: norm,
                grad_norm: f64::NAN,
                diverged: true,
            });
            return Ok(out);
        }
        Err(e) => return Err(e.into()),
    };
    let grads = g.backward(run.loss)?;
    let states = std::iter::once(h0).chain(run.states.iter().map(|s| s.h));
    for (step, h) in states.enumerate() {
        let grad_norm = grads.wrt(h).map_or(0.0, |t| t.norm_l2());
        let h_sup_norm = h.value().norm_inf();
        let diverged = !(grad_norm.is_finite() && h_sup_norm.is_finite());
        out.diverged |= diverged;
        out.rows.push(SeqRow {
            radius,
            step,
            h_sup_norm,
            grad_norm,
            diverged,
        });
    }
    Ok(out)
}

/// Every variant at every radius. Overflow is recorded in the rows rather
/// than aborting the sweep.
pub fn run_seq_stability(config: &SeqConfig) -> Result<Vec<SeqRun>> {
    if config.hidden < 2 || config.steps == 0 || config.radii.is_empty() {
        return Err(NormlabError::Config("seq-stability needs hidden >= 2, steps >= 1 and at least one radius".into()));
    }
    let opts = LnOptions::with_epsilon(config.epsilon);
    let mut runs = Vec::new();
    for variant in VARIANTS {
        for &radius in &config.radii {
            runs.push(trajectory(&setup(config, radius)?, variant, &opts, radius)?);
        }
    }
    Ok(runs)
}

/// Max absolute difference between the normalized RNN's hidden trajectory
/// and the one with `W_hh` and `W_xh` both multiplied by `scale`, at
/// epsilon 0.
pub fn joint_scaling_deviation(config: &SeqConfig, radius: f64, scale: f64) -> Result<f64> {
    let opts = LnOptions::with_epsilon(0.0);
    let base = setup(config, radius)?;
    let mut scaled = setup(config, radius)?;
    for id in [scaled.params.w_hh, scaled.params.w_xh] {
        let v = scaled.store.value(id).scale(scale);
        *scaled.store.value_mut(id) = v;
    }
    let states = |s: &Setup| -> Result<Vec<Tensor<f64>>> {
        let g = Graph::new();
        let vars = s.params.bind(&g, &s.store);
        let run = unroll(
            &g,
            &s.inputs,
            StateVar {
                h: g.leaf(s.h0.clone()),
                c: None,
            },
            |x, st| {
                Ok(StateVar {
                    h: rnn_step(&vars, x, st.h, CellVariant::LnFull, Activation::Tanh, &opts)?,
                    c: None,
                })
            },
            |_, h| Ok(h.sum()),
            LossMode::Final,
        )?;
        Ok(run.states.iter().map(|s| s.h.value()).collect())
    };
    let (a, b) = (states(&base)?, states(&scaled)?);
    Ok(a.iter().zip(&b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max))
}

/// Max absolute difference between one normalized RNN step with the
/// original weights and one with `W_hh` and `W_xh` both multiplied by
/// `scale`, taken from the same previous state at every step of the
/// original trajectory, at epsilon 0.
///
/// Unlike [`joint_scaling_deviation`] this does not let rounding
/// differences compound along the sequence, which at spectral radii where
/// the dynamics are chaotic grow far above rounding level within a few
/// hundred steps.
pub fn step_scaling_deviation(config: &SeqConfig, radius: f64, scale: f64) -> Result<f64> {
    let opts = LnOptions::with_epsilon(0.0);
    let base = setup(config, radius)?;
    let mut scaled = setup(config, radius)?;
    for id in [scaled.params.w_hh, scaled.params.w_xh] {
        let v = scaled.store.value(id).scale(scale);
        *scaled.store.value_mut(id) = v;
    }
    let g = Graph::new();
    let (a, b) = (base.params.bind(&g, &base.store), scaled.params.bind(&g, &scaled.store));
    let mut h = g.leaf(base.h0.clone());
    let mut worst: f64 = 0.0;
    for x in &base.inputs {
        let x = g.leaf(x.clone());
        let next = rnn_step(&a, x, h, CellVariant::LnFull, Activation::Tanh, &opts)?;
        let other = rnn_step(&b, x, h, CellVariant::LnFull, Activation::Tanh, &opts)?;
        worst = worst.max(next.value().max_abs_diff(&other.value()));
        h = g.leaf(next.value());
    }
    Ok(worst)
}

/// Writes `seq-stability-{variant}.csv` per variant into `dir` and returns
/// the paths.
pub fn write_seq_stability(runs: &[SeqRun], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| NormlabError::output(dir, e))?;
    let mut paths = Vec::new();
    for variant in VARIANTS {
        let rows: Vec<SeqRow> = runs
            .iter()
            .filter(|r| r.variant == variant)
            .flat_map(|r| r.rows.iter().copied())
            .collect();
        if rows.is_empty() {
            continue;
        }
        let path = dir.join(format!("seq-stability-{}.csv", variant_name(variant)));
        write_rows(&rows, &path)?;
        paths.push(path);
    }
    Ok(paths)
}
