//! Vanilla RNN, LSTM and GRU cells with optional layer normalization, and
//! unrolling for backpropagation through time.
//!
//! Cells accept a single case (`x: [D]`, `h: [H]`) or a small batch
//! (`x: [N, D]`, `h: [N, H]`). Layer statistics are always per case and are
//! recomputed at every step; the gain and bias parameters are shared across
//! steps.
//!
//! Gate blocks are stacked in a fixed order: `(f, i, o, g)` for the LSTM and
//! `(z, r)` for the GRU. Gate nonlinearities are the logistic function.

use rand::Rng;

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::init::uniform_scaled;
use crate::normalizers::{layer_norm, layer_norm_with_stats};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellVariant {
    Baseline,
    /// Layer normalization at every position the cell defines.
    LnFull,
    /// LSTM only: normalize the cell state before the output tanh, nothing
    /// else.
    LnCellOnly,
}

/// How the layer-normalized variants compute their statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LnOptions<T> {
    pub epsilon: T,
    /// Replaces the per-step `(mu, sigma)` with constants. Only meant for
    /// wiring tests.
    pub stats_override: Option<(T, T)>,
}

impl<T: Scalar> LnOptions<T> {
    pub fn with_epsilon(epsilon: T) -> Self {
        Self {
            epsilon,
            stats_override: None,
        }
    }
}

impl<T: Scalar> Default for LnOptions<T> {
    fn default() -> Self {
        Self::with_epsilon(T::lit(crate::normalizers::DEFAULT_EPSILON))
    }
}

/// Gain/bias pair of one layer-normalization site.
#[derive(Clone, Copy, Debug)]
pub struct LnPair {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LnPair {
    fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, units: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::ones(&[units]))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[units]))?,
        })
    }

    fn bind<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>) -> LnVars<'g, T> {
        LnVars {
            gain: g.param(store, self.gain),
            bias: g.param(store, self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LnVars<'g, T> {
    pub gain: Var<'g, T>,
    pub bias: Var<'g, T>,
}

fn apply_ln<'g, T: Scalar>(z: Var<'g, T>, p: &LnVars<'g, T>, opts: &LnOptions<T>) -> Result<Var<'g, T>> {
    match opts.stats_override {
        None => layer_norm(z, p.gain, p.bias, opts.epsilon),
        Some((mu, sigma)) => {
            let shape = z.shape();
            let per_case: Vec<usize> = shape[..shape.len() - 1].to_vec();
            let g = z.graph();
            let mu = g.leaf(Tensor::filled(&per_case, mu));
            let sigma = g.leaf(Tensor::filled(&per_case, sigma));
            layer_norm_with_stats(z, mu, sigma, p.gain, p.bias, opts.epsilon)
        }
    }
}

fn last_axis<T: Scalar>(v: Var<'_, T>) -> usize {
    v.shape().len() - 1
}

/// Adds a per-unit `[H]` vector to `[H]` or `[N, H]`.
fn add_per_unit<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = a.shape();
    if shape.len() == 1 {
        a.add(b)
    } else {
        a.add(b.reshape(&[1, shape[1]])?.broadcast_to(&shape)?)
    }
}

/// Hidden state (and LSTM cell state) as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<T> {
    pub h: Tensor<T>,
    pub c: Option<Tensor<T>>,
}

impl<T: Scalar> CellState<T> {
    pub fn zeros(hidden: usize, with_cell: bool) -> Self {
        Self {
            h: Tensor::zeros(&[hidden]),
            c: with_cell.then(|| Tensor::zeros(&[hidden])),
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph<T>) -> StateVar<'g, T> {
        StateVar {
            h: g.leaf(self.h.clone()),
            c: self.c.as_ref().map(|c| g.leaf(c.clone())),
        }
    }
}

/// Hidden state living in a graph.
#[derive(Clone, Copy, Debug)]
pub struct StateVar<'g, T> {
    pub h: Var<'g, T>,
    pub c: Option<Var<'g, T>>,
}

impl<'g, T: Scalar> StateVar<'g, T> {
    pub fn value(&self) -> CellState<T> {
        CellState {
            h: self.h.value(),
            c: self.c.map(|c| c.value()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RnnParams {
    pub w_hh: ParamId,
    pub w_xh: ParamId,
    /// Post-normalization gain; unused by the baseline cell.
    pub gain: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
    pub input: usize,
}

impl RnnParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        hidden: usize,
        input: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w_hh: store.add(format!("{prefix}.w_hh"), uniform_scaled(&[hidden, hidden], hidden, rng))?,
            w_xh: store.add(format!("{prefix}.w_xh"), uniform_scaled(&[hidden, input], hidden, rng))?,
            gain: store.add(format!("{prefix}.gain"), Tensor::ones(&[hidden]))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[hidden]))?,
            hidden,
            input,
        })
    }

    pub fn bind<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>) -> RnnVars<'g, T> {
        RnnVars {
            w_hh: g.param(store, self.w_hh),
            w_xh: g.param(store, self.w_xh),
            ln: LnVars {
                gain: g.param(store, self.gain),
                bias: g.param(store, self.bias),
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RnnVars<'g, T> {
    pub w_hh: Var<'g, T>,
    pub w_xh: Var<'g, T>,
    pub ln: LnVars<'g, T>,
}

/// Summed inputs `W_hh h + W_xh x` of the vanilla RNN. There is no additive
/// term before normalization.
pub fn rnn_summed_inputs<'g, T: Scalar>(p: &RnnVars<'g, T>, x: Var<'g, T>, h_prev: Var<'g, T>) -> Result<Var<'g, T>> {
    h_prev.linear(p.w_hh)?.add(x.linear(p.w_xh)?)
}

/// One RNN step. The baseline computes `f(a + b)`; `LnFull` computes
/// `f(gain / sigma * (a - mu) + b)` with `(mu, sigma)` taken over this
/// step's summed inputs.
pub fn rnn_step<'g, T: Scalar>(
    p: &RnnVars<'g, T>,
    x: Var<'g, T>,
    h_prev: Var<'g, T>,
    variant: CellVariant,
    f: Activation,
    opts: &LnOptions<T>,
) -> Result<Var<'g, T>> {
    let a = rnn_summed_inputs(p, x, h_prev)?;
    let pre = match variant {
        CellVariant::Baseline => add_per_unit(a, p.ln.bias)?,
        CellVariant::LnFull => apply_ln(a, &p.ln, opts)?,
        CellVariant::LnCellOnly => {
            return Err(Error::InvalidConfig("ln-cell-only is defined for the LSTM only".into()))
        }
    };
    Ok(f.apply(pre))
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    /// `[4H, H]`
    pub w_h: ParamId,
    /// `[4H, D]`
    pub w_x: ParamId,
    /// `[4H]`
    pub b: ParamId,
    /// Recurrent-path normalization, over all `4H` pre-activations.
    pub ln_recurrent: Option<LnPair>,
    /// Input-path normalization, over all `4H` pre-activations.
    pub ln_input: Option<LnPair>,
    /// Cell-state normalization before the output tanh, over `H` units.
    pub ln_cell: Option<LnPair>,
    pub hidden: usize,
    pub input: usize,
}

impl LstmParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        hidden: usize,
        input: usize,
        variant: CellVariant,
        rng: &mut R,
    ) -> Result<Self> {
        let gates = 4 * hidden;
        let w_h = store.add(format!("{prefix}.w_h"), uniform_scaled(&[gates, hidden], hidden, rng))?;
        let w_x = store.add(format!("{prefix}.w_x"), uniform_scaled(&[gates, input], hidden, rng))?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[gates]))?;
        let full = variant == CellVariant::LnFull;
        Ok(Self {
            w_h,
            w_x,
            b,
            ln_recurrent: full.then(|| LnPair::register(store, &format!("{prefix}.ln1"), gates)).transpose()?,
            ln_input: full.then(|| LnPair::register(store, &format!("{prefix}.ln2"), gates)).transpose()?,
            ln_cell: (variant != CellVariant::Baseline)
                .then(|| LnPair::register(store, &format!("{prefix}.ln3"), hidden))
                .transpose()?,
            hidden,
            input,
        })
    }

    pub fn bind<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>) -> LstmVars<'g, T> {
        LstmVars {
            w_h: g.param(store, self.w_h),
            w_x: g.param(store, self.w_x),
            b: g.param(store, self.b),
            ln_recurrent: self.ln_recurrent.map(|p| p.bind(g, store)),
            ln_input: self.ln_input.map(|p| p.bind(g, store)),
            ln_cell: self.ln_cell.map(|p| p.bind(g, store)),
            hidden: self.hidden,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars<'g, T> {
    pub w_h: Var<'g, T>,
    pub w_x: Var<'g, T>,
    pub b: Var<'g, T>,
    pub ln_recurrent: Option<LnVars<'g, T>>,
    pub ln_input: Option<LnVars<'g, T>>,
    pub ln_cell: Option<LnVars<'g, T>>,
    pub hidden: usize,
}

fn missing(site: &str) -> Error {
    Error::InvalidConfig(format!("variant needs the {site} normalization parameters"))
}

pub fn lstm_step<'g, T: Scalar>(
    p: &LstmVars<'g, T>,
    x: Var<'g, T>,
    state: &StateVar<'g, T>,
    variant: CellVariant,
    opts: &LnOptions<T>,
) -> Result<StateVar<'g, T>> {
    let c_prev = state
        .c
        .ok_or_else(|| Error::InvalidConfig("LSTM state needs a cell vector".into()))?;
    let recurrent = state.h.linear(p.w_h)?;
    let input = x.linear(p.w_x)?;
    let summed = match variant {
        CellVariant::Baseline | CellVariant::LnCellOnly => recurrent.add(input)?,
        CellVariant::LnFull => {
            let r = apply_ln(recurrent, p.ln_recurrent.as_ref().ok_or_else(|| missing("recurrent"))?, opts)?;
            let i = apply_ln(input, p.ln_input.as_ref().ok_or_else(|| missing("input"))?, opts)?;
            r.add(i)?
        }
    };
    let pre = add_per_unit(summed, p.b)?;
    let axis = last_axis(pre);
    let h = p.hidden;
    let forget = pre.slice(axis, 0, h)?.sigmoid();
    let in_gate = pre.slice(axis, h, h)?.sigmoid();
    let out_gate = pre.slice(axis, 2 * h, h)?.sigmoid();
    let candidate = pre.slice(axis, 3 * h, h)?.tanh();
    let c = forget.mul(c_prev)?.add(in_gate.mul(candidate)?)?;
    let squashed = match variant {
        CellVariant::Baseline => c,
        CellVariant::LnFull | CellVariant::LnCellOnly => {
            apply_ln(c, p.ln_cell.as_ref().ok_or_else(|| missing("cell"))?, opts)?
        }
    };
    let h_new = out_gate.mul(squashed.tanh())?;
    Ok(StateVar { h: h_new, c: Some(c) })
}

#[derive(Clone, Debug)]
pub struct GruParams {
    /// `[2H, H]`
    pub w_h: ParamId,
    /// `[2H, D]`
    pub w_x: ParamId,
    /// `[H, D]`
    pub w: ParamId,
    /// `[H, H]`
    pub u: ParamId,
    /// Four sites in order: recurrent gates, input gates, candidate input,
    /// candidate recurrent.
    pub ln: Option<[LnPair; 4]>,
    pub hidden: usize,
    pub input: usize,
}

impl GruParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        hidden: usize,
        input: usize,
        variant: CellVariant,
        rng: &mut R,
    ) -> Result<Self> {
        if variant == CellVariant::LnCellOnly {
            return Err(Error::InvalidConfig("ln-cell-only is defined for the LSTM only".into()));
        }
        let w_h = store.add(format!("{prefix}.w_h"), uniform_scaled(&[2 * hidden, hidden], hidden, rng))?;
        let w_x = store.add(format!("{prefix}.w_x"), uniform_scaled(&[2 * hidden, input], hidden, rng))?;
        let w = store.add(format!("{prefix}.w"), uniform_scaled(&[hidden, input], hidden, rng))?;
        let u = store.add(format!("{prefix}.u"), uniform_scaled(&[hidden, hidden], hidden, rng))?;
        let ln = if variant == CellVariant::LnFull {
            Some([
                LnPair::register(store, &format!("{prefix}.ln1"), 2 * hidden)?,
                LnPair::register(store, &format!("{prefix}.ln2"), 2 * hidden)?,
                LnPair::register(store, &format!("{prefix}.ln3"), hidden)?,
                LnPair::register(store, &format!("{prefix}.ln4"), hidden)?,
            ])
        } else {
            None
        };
        Ok(Self {
            w_h,
            w_x,
            w,
            u,
            ln,
            hidden,
            input,
        })
    }

    pub fn bind<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>) -> GruVars<'g, T> {
        GruVars {
            w_h: g.param(store, self.w_h),
            w_x: g.param(store, self.w_x),
            w: g.param(store, self.w),
            u: g.param(store, self.u),
            ln: self.ln.map(|sites| sites.map(|p| p.bind(g, store))),
            hidden: self.hidden,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars<'g, T> {
    pub w_h: Var<'g, T>,
    pub w_x: Var<'g, T>,
    pub w: Var<'g, T>,
    pub u: Var<'g, T>,
    pub ln: Option<[LnVars<'g, T>; 4]>,
    pub hidden: usize,
}

pub fn gru_step<'g, T: Scalar>(
    p: &GruVars<'g, T>,
    x: Var<'g, T>,
    h_prev: Var<'g, T>,
    variant: CellVariant,
    opts: &LnOptions<T>,
) -> Result<Var<'g, T>> {
    let recurrent = h_prev.linear(p.w_h)?;
    let input = x.linear(p.w_x)?;
    let cand_in = x.linear(p.w)?;
    let cand_rec = h_prev.linear(p.u)?;
    let (gates, cand_in, cand_rec) = match variant {
        CellVariant::Baseline => (recurrent.add(input)?, cand_in, cand_rec),
        CellVariant::LnFull => {
            let ln = p.ln.as_ref().ok_or_else(|| missing("GRU"))?;
            (
                apply_ln(recurrent, &ln[0], opts)?.add(apply_ln(input, &ln[1], opts)?)?,
                apply_ln(cand_in, &ln[2], opts)?,
                apply_ln(cand_rec, &ln[3], opts)?,
            )
        }
        CellVariant::LnCellOnly => {
            return Err(Error::InvalidConfig("ln-cell-only is defined for the LSTM only".into()))
        }
    };
    let axis = last_axis(gates);
    let h = p.hidden;
    let update = gates.slice(axis, 0, h)?.sigmoid();
    let reset = gates.slice(axis, h, h)?.sigmoid();
    let candidate = cand_in.add(reset.mul(cand_rec)?)?.tanh();
    // (1 - z) h_prev + z h_hat == h_prev + z (h_hat - h_prev)
    let keep = update.neg().add_scalar(T::one());
    keep.mul(h_prev)?.add(update.mul(candidate)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Sum of the per-step losses.
    PerStep,
    /// Loss of the last step only.
    Final,
}

#[derive(Debug)]
pub struct Unrolled<'g, T> {
    pub inputs: Vec<Var<'g, T>>,
    /// State after each step; `states[t]` follows input `t`.
    pub states: Vec<StateVar<'g, T>>,
    pub loss: Var<'g, T>,
}

/// Runs `step` over `inputs` with one shared parameter set. `step_loss(t, h_t)`
/// must return a scalar node. Calling `backward` on the returned loss is
/// backpropagation through time.
pub fn unroll<'g, T, S, L>(
    graph: &'g Graph<T>,
    inputs: &[Tensor<T>],
    initial: StateVar<'g, T>,
    step: S,
    step_loss: L,
    mode: LossMode,
) -> Result<Unrolled<'g, T>>
where
    T: Scalar,
    S: Fn(Var<'g, T>, &StateVar<'g, T>) -> Result<StateVar<'g, T>>,
    L: Fn(usize, Var<'g, T>) -> Result<Var<'g, T>>,
{
    if inputs.is_empty() {
        return Err(Error::InvalidConfig("sequence must contain at least one step".into()));
    }
    let mut xs = Vec::with_capacity(inputs.len());
    let mut states = Vec::with_capacity(inputs.len());
    let mut state = initial;
    let mut total: Option<Var<'g, T>> = None;
    for (t, x) in inputs.iter().enumerate() {
        let x = graph.leaf(x.clone());
        state = step(x, &state)?;
        let h = state.h.value();
        if !h.all_finite() {
            return Err(Error::NonFiniteState {
                step: t,
                norm: h.norm_l2().as_f64(),
            });
        }
        if mode == LossMode::PerStep || t + 1 == inputs.len() {
            let l = step_loss(t, state.h)?;
            total = Some(match total {
                Some(acc) => acc.add(l)?,
                None => l,
            });
        }
        xs.push(x);
        states.push(state);
    }
    Ok(Unrolled {
        inputs: xs,
        states,
        loss: total.expect("at least one step"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(v)
    }

    fn exact() -> LnOptions<f64> {
        LnOptions::with_epsilon(0.0)
    }

    #[test]
    fn ln_rnn_identity_example() {
        let mut store = ParamStore::<f64>::new();
        let p = RnnParams {
            w_hh: store.add("w_hh", Tensor::zeros(&[2, 2])).unwrap(),
            w_xh: store.add("w_xh", Tensor::eye(2)).unwrap(),
            gain: store.add("g", Tensor::ones(&[2])).unwrap(),
            bias: store.add("b", Tensor::zeros(&[2])).unwrap(),
            hidden: 2,
            input: 2,
        };
        let g = Graph::new();
        let vars = p.bind(&g, &store);
        let h = rnn_step(&vars, g.leaf(t(&[1.0, -1.0])), g.leaf(t(&[0.0, 0.0])), CellVariant::LnFull, Activation::Identity, &exact()).unwrap();
        assert_eq!(h.value().data(), &[1.0, -1.0]);
    }

    #[test]
    fn ln_rnn_three_unit_example() {
        // a = [2, 4, 6] via W_xh = diag(2, 4, 6) and x = 1
        let mut store = ParamStore::<f64>::new();
        let mut w_xh = Tensor::zeros(&[3, 3]);
        for (i, v) in [2.0, 4.0, 6.0].iter().enumerate() {
            w_xh.data_mut()[i * 3 + i] = *v;
        }
        let p = RnnParams {
            w_hh: store.add("w_hh", Tensor::zeros(&[3, 3])).unwrap(),
            w_xh: store.add("w_xh", w_xh).unwrap(),
            gain: store.add("g", Tensor::ones(&[3])).unwrap(),
            bias: store.add("b", Tensor::zeros(&[3])).unwrap(),
            hidden: 3,
            input: 3,
        };
        let g = Graph::new();
        let vars = p.bind(&g, &store);
        let h = rnn_step(&vars, g.leaf(t(&[1.0; 3])), g.leaf(t(&[0.0; 3])), CellVariant::LnFull, Activation::Identity, &exact()).unwrap();
        let expected = [-1.224745, 0.0, 1.224745];
        for (a, b) in h.value().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn baseline_rnn_zero_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        let p = RnnParams {
            w_hh: store.add("w_hh", Tensor::zeros(&[3, 3])).unwrap(),
            w_xh: store.add("w_xh", Tensor::zeros(&[3, 2])).unwrap(),
            gain: store.add("g", Tensor::ones(&[3])).unwrap(),
            bias: store.add("b", Tensor::zeros(&[3])).unwrap(),
            hidden: 3,
            input: 2,
        };
        let g = Graph::new();
        let vars = p.bind(&g, &store);
        let mut h = g.leaf(Tensor::zeros(&[3]));
        for step in 0..10 {
            let x = g.leaf(t(&[step as f64, -1.0]));
            h = rnn_step(&vars, x, h, CellVariant::Baseline, Activation::Tanh, &exact()).unwrap();
            assert_eq!(h.value().data(), &[0.0; 3]);
        }
    }

    #[test]
    fn ln_cell_only_rejected_outside_lstm() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(GruParams::init(&mut store, "gru", 3, 2, CellVariant::LnCellOnly, &mut rng).is_err());
        let p = RnnParams::init(&mut store, "rnn", 3, 2, &mut rng).unwrap();
        let g = Graph::new();
        let vars = p.bind(&g, &store);
        let r = rnn_step(&vars, g.leaf(t(&[1.0, 2.0])), g.leaf(Tensor::zeros(&[3])), CellVariant::LnCellOnly, Activation::Tanh, &exact());
        assert!(r.is_err());
    }

    #[test]
    fn lstm_zero_fixed_point() {
        for variant in [CellVariant::Baseline, CellVariant::LnCellOnly] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let p = LstmParams::init(&mut store, "lstm", 3, 2, variant, &mut rng).unwrap();
            for id in [p.w_h, p.w_x] {
                store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            let g = Graph::new();
            let vars = p.bind(&g, &store);
            let state = CellState::zeros(3, true).bind(&g);
            let next = lstm_step(&vars, g.leaf(t(&[0.3, -0.7])), &state, variant, &LnOptions::default()).unwrap();
            assert_eq!(next.c.unwrap().value().data(), &[0.0; 3]);
            assert_eq!(next.h.value().data(), &[0.0; 3]);
        }
    }

    #[test]
    fn lstm_saturated_forget_gate_keeps_cell() {
        // f pre-activation +50, i pre-activation -50.
        let hidden = 2;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmParams::init(&mut store, "lstm", hidden, 1, CellVariant::Baseline, &mut rng).unwrap();
        for id in [p.w_h, p.w_x] {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut b = vec![0.0; 4 * hidden];
        b[..hidden].fill(50.0);
        b[hidden..2 * hidden].fill(-50.0);
        b[3 * hidden..].fill(0.9);
        *store.value_mut(p.b) = Tensor::vector(b);
        let g = Graph::new();
        let vars = p.bind(&g, &store);
        let prev = CellState {
            h: t(&[0.1, -0.2]),
            c: Some(t(&[0.8, -1.7])),
        };
        let next = lstm_step(&vars, g.leaf(t(&[1.0])), &prev.bind(&g), CellVariant::Baseline, &exact()).unwrap();
        let c = next.c.unwrap().value();
        assert!(c.max_abs_diff(&t(&[0.8, -1.7])) < 1e-10);
    }

    #[test]
    fn gru_closed_update_gate_keeps_state() {
        let hidden = 2;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GruParams::init(&mut store, "gru", hidden, 1, CellVariant::Baseline, &mut rng).unwrap();
        // z pre-activation = -50 through the input path; r path arbitrary.
        let mut w_x = vec![0.0; 2 * hidden];
        w_x[..hidden].fill(-50.0);
        *store.value_mut(p.w_x) = Tensor::matrix(2 * hidden, 1, w_x).unwrap();
        store.value_mut(p.w_h).data_mut()[..hidden * hidden].iter_mut().for_each(|v| *v = 0.0);
        let g = Graph::new();
        let vars = p.bind(&g, &store);
        let h_prev = t(&[0.4, -0.9]);
        let h = gru_step(&vars, g.leaf(t(&[1.0])), g.leaf(h_prev.clone()), CellVariant::Baseline, &exact()).unwrap();
        assert!(h.value().max_abs_diff(&h_prev) < 1e-10);
    }

    #[test]
    fn gru_zero_weights_zero_state() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GruParams::init(&mut store, "gru", 3, 2, CellVariant::Baseline, &mut rng).unwrap();
        for id in [p.w_h, p.w_x, p.w, p.u] {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::new();
        let vars = p.bind(&g, &store);
        let h = gru_step(&vars, g.leaf(t(&[1.0, 2.0])), g.leaf(Tensor::zeros(&[3])), CellVariant::Baseline, &exact()).unwrap();
        assert_eq!(h.value().data(), &[0.0; 3]);
    }

    fn random_sequence(len: usize, dim: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| Tensor::uniform(&[dim], -1.0, 1.0, &mut rng)).collect()
    }

    /// Perturbs every gain/bias so the check does not sit at the 1/0 init.
    fn jitter(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let v = store.value_mut(id);
            for x in v.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn lstm_single_step_gradients() {
        for variant in [CellVariant::Baseline, CellVariant::LnFull, CellVariant::LnCellOnly] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let p = LstmParams::init(&mut store, "lstm", 3, 2, variant, &mut rng).unwrap();
            jitter(&mut store, 6);
            let xs = random_sequence(1, 2, 7);
            let opts = LnOptions::default();
            let report = finite_diff_check(&mut store, 1e-5, |g, s| {
                let vars = p.bind(g, s);
                let init = CellState { h: t(&[0.1, -0.3, 0.2]), c: Some(t(&[0.5, 0.0, -0.4])) }.bind(g);
                let run = unroll(g, &xs, init, |x, st| lstm_step(&vars, x, st, variant, &opts), |_, h| Ok(h.square().sum()), LossMode::Final)?;
                Ok(run.loss)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{variant:?}: {report:?}");
        }
    }

    #[test]
    fn unroll_length_one_is_a_step() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = RnnParams::init(&mut store, "rnn", 4, 3, &mut rng).unwrap();
        let xs = random_sequence(1, 3, 10);
        let opts = LnOptions::default();
        let g = Graph::new();
        let vars = p.bind(&g, &store);
        let init = CellState::zeros(4, false).bind(&g);
        let run = unroll(&g, &xs, init, |x, st| Ok(StateVar { h: rnn_step(&vars, x, st.h, CellVariant::LnFull, Activation::Tanh, &opts)?, c: None }), |_, h| Ok(h.sum()), LossMode::PerStep).unwrap();
        let direct = rnn_step(&vars, g.leaf(xs[0].clone()), g.leaf(Tensor::zeros(&[4])), CellVariant::LnFull, Activation::Tanh, &opts).unwrap();
        assert_eq!(run.states[0].h.value(), direct.value());
    }

    #[test]
    fn unroll_identity_rnn_copies_inputs() {
        let mut store = ParamStore::<f64>::new();
        let p = RnnParams {
            w_hh: store.add("w_hh", Tensor::zeros(&[3, 3])).unwrap(),
            w_xh: store.add("w_xh", Tensor::eye(3)).unwrap(),
            gain: store.add("g", Tensor::ones(&[3])).unwrap(),
            bias: store.add("b", Tensor::zeros(&[3])).unwrap(),
            hidden: 3,
            input: 3,
        };
        let xs = random_sequence(3, 3, 4);
        let g = Graph::new();
        let vars = p.bind(&g, &store);
        let init = CellState::zeros(3, false).bind(&g);
        let run = unroll(&g, &xs, init, |x, st| Ok(StateVar { h: rnn_step(&vars, x, st.h, CellVariant::Baseline, Activation::Identity, &exact())?, c: None }), |_, h| Ok(h.sum()), LossMode::PerStep).unwrap();
        for (s, x) in run.states.iter().zip(&xs) {
            assert_eq!(&s.h.value(), x);
        }
    }

    #[test]
    fn unroll_reports_explosion_step() {
        let mut store = ParamStore::<f64>::new();
        let p = RnnParams {
            w_hh: store.add("w_hh", Tensor::eye(2).scale(1e200)).unwrap(),
            w_xh: store.add("w_xh", Tensor::eye(2)).unwrap(),
            gain: store.add("g", Tensor::ones(&[2])).unwrap(),
            bias: store.add("b", Tensor::zeros(&[2])).unwrap(),
            hidden: 2,
            input: 2,
        };
        let xs = vec![t(&[1.0, 1.0]); 4];
        let g = Graph::new();
        let vars = p.bind(&g, &store);
        let init = CellState::zeros(2, false).bind(&g);
        let err = unroll(&g, &xs, init, |x, st| Ok(StateVar { h: rnn_step(&vars, x, st.h, CellVariant::Baseline, Activation::Identity, &exact())?, c: None }), |_, h| Ok(h.sum()), LossMode::Final).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { step: 2, .. }), "{err:?}");
        assert!(unroll(&g, &[], CellState::zeros(2, false).bind(&g), |_, st| Ok(*st), |_, h| Ok(h.sum()), LossMode::Final).is_err());
    }
}
