use normlab_core::autodiff::{Activation, Graph};
use normlab_core::gradcheck::finite_diff_check;
use normlab_core::params::ParamStore;
use normlab_core::recurrent::*;
use normlab_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEPS: usize = 20;
const HIDDEN: usize = 3;
const INPUT: usize = 2;

fn sequence(len: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| Tensor::uniform(&[INPUT], -1.0, 1.0, &mut rng)).collect()
}

// Moves every gain and bias off its 1/0 init so their gradients are exercised.
fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn rnn_state(h: normlab_core::autodiff::Var<'_, f64>) -> StateVar<'_, f64> {
    StateVar { h, c: None }
}

#[test]
fn rnn_bptt_twenty_steps() {
    for variant in [CellVariant::Baseline, CellVariant::LnFull] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = RnnParams::init(&mut store, "rnn", HIDDEN, INPUT, &mut rng).unwrap();
        jitter(&mut store, 12);
        let xs = sequence(STEPS, 13);
        let opts = LnOptions::default();
        let report = finite_diff_check(&mut store, 1e-5, |g, s| {
            let vars = p.bind(g, s);
            let init = CellState::zeros(HIDDEN, false).bind(g);
            let run = unroll(
                g,
                &xs,
                init,
                |x, st| Ok(rnn_state(rnn_step(&vars, x, st.h, variant, Activation::Tanh, &opts)?)),
                |_, h| Ok(h.square().sum()),
                LossMode::PerStep,
            )?;
            Ok(run.loss)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{variant:?}: {report:?}");
    }
}

#[test]
fn lstm_bptt_twenty_steps() {
    for variant in [CellVariant::Baseline, CellVariant::LnFull, CellVariant::LnCellOnly] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = LstmParams::init(&mut store, "lstm", HIDDEN, INPUT, variant, &mut rng).unwrap();
        jitter(&mut store, 22);
        let xs = sequence(STEPS, 23);
        let opts = LnOptions::default();
        let report = finite_diff_check(&mut store, 1e-5, |g, s| {
            let vars = p.bind(g, s);
            let init = CellState::zeros(HIDDEN, true).bind(g);
            let run = unroll(
                g,
                &xs,
                init,
                |x, st| lstm_step(&vars, x, st, variant, &opts),
                |_, h| Ok(h.square().sum()),
                LossMode::PerStep,
            )?;
            Ok(run.loss)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{variant:?}: {report:?}");
        assert!(report.coordinates > 0);
    }
}

#[test]
fn gru_bptt_twenty_steps() {
    for variant in [CellVariant::Baseline, CellVariant::LnFull] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = GruParams::init(&mut store, "gru", HIDDEN, INPUT, variant, &mut rng).unwrap();
        jitter(&mut store, 32);
        let xs = sequence(STEPS, 33);
        let opts = LnOptions::default();
        let report = finite_diff_check(&mut store, 1e-5, |g, s| {
            let vars = p.bind(g, s);
            let init = CellState::zeros(HIDDEN, false).bind(g);
            let run = unroll(
                g,
                &xs,
                init,
                |x, st| Ok(rnn_state(gru_step(&vars, x, st.h, variant, &opts)?)),
                |_, h| Ok(h.square().sum()),
                LossMode::Final,
            )?;
            Ok(run.loss)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{variant:?}: {report:?}");
    }
}

#[test]
fn gradient_check_covers_every_ln_parameter() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    LstmParams::init(&mut store, "lstm", HIDDEN, INPUT, CellVariant::LnFull, &mut rng).unwrap();
    for site in ["ln1", "ln2", "ln3"] {
        for part in ["gain", "bias"] {
            assert!(store.id(&format!("lstm.{site}.{part}")).is_some());
        }
    }
    let mut store = ParamStore::<f64>::new();
    GruParams::init(&mut store, "gru", HIDDEN, INPUT, CellVariant::LnFull, &mut rng).unwrap();
    for site in ["ln1", "ln2", "ln3", "ln4"] {
        assert!(store.id(&format!("gru.{site}.gain")).is_some());
    }
}

fn ln_rnn_trajectory(store: &ParamStore<f64>, p: &RnnParams, xs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let g = Graph::new();
    let vars = p.bind(&g, store);
    let opts = LnOptions::with_epsilon(0.0);
    let init = CellState::zeros(p.hidden, false).bind(&g);
    let run = unroll(
        &g,
        xs,
        init,
        |x, st| Ok(rnn_state(rnn_step(&vars, x, st.h, CellVariant::LnFull, Activation::Tanh, &opts)?)),
        |_, h| Ok(h.sum()),
        LossMode::Final,
    )
    .unwrap();
    run.states.iter().map(|s| s.h.value()).collect()
}

#[test]
fn step_statistics_ignore_future_inputs() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let p = RnnParams::init(&mut store, "rnn", 5, INPUT, &mut rng).unwrap();
    let xs = sequence(10, 42);
    let base = ln_rnn_trajectory(&store, &p, &xs);
    for cut in [1, 4, 9] {
        let mut altered = xs.clone();
        for x in &mut altered[cut..] {
            *x = x.scale(-7.0).map(|v| v + 3.0);
        }
        let other = ln_rnn_trajectory(&store, &p, &altered);
        assert_eq!(&base[..cut], &other[..cut]);
        assert_ne!(base[cut], other[cut]);
    }
}

#[test]
fn ln_rnn_joint_weight_scaling_invariance() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let p = RnnParams::init(&mut store, "rnn", 6, INPUT, &mut rng).unwrap();
    let xs = sequence(30, 52);
    let base = ln_rnn_trajectory(&store, &p, &xs);
    for delta in [0.3, 2.0, 17.0] {
        let mut scaled = store.clone();
        for id in [p.w_hh, p.w_xh] {
            *scaled.value_mut(id) = store.value(id).scale(delta);
        }
        let other = ln_rnn_trajectory(&scaled, &p, &xs);
        for (a, b) in base.iter().zip(&other) {
            assert!(a.max_abs_diff(b) <= 1e-9, "delta {delta}");
        }
    }
}

const UNIT_STATS: LnOptions<f64> = LnOptions {
    epsilon: 0.0,
    stats_override: Some((0.0, 1.0)),
};

#[test]
fn unit_statistics_reproduce_baseline_rnn() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let p = RnnParams::init(&mut store, "rnn", HIDDEN, INPUT, &mut rng).unwrap();
    let xs = sequence(8, 62);
    let run = |variant| {
        let g = Graph::new();
        let vars = p.bind(&g, &store);
        let init = CellState::zeros(HIDDEN, false).bind(&g);
        unroll(
            &g,
            &xs,
            init,
            |x, st| Ok(rnn_state(rnn_step(&vars, x, st.h, variant, Activation::Tanh, &UNIT_STATS)?)),
            |_, h| Ok(h.sum()),
            LossMode::PerStep,
        )
        .unwrap()
        .states
        .iter()
        .map(|s| s.h.value())
        .collect::<Vec<_>>()
    };
    assert_eq!(run(CellVariant::Baseline), run(CellVariant::LnFull));
}

#[test]
fn unit_statistics_reproduce_baseline_lstm() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut store = ParamStore::<f64>::new();
    let p = LstmParams::init(&mut store, "lstm", HIDDEN, INPUT, CellVariant::LnFull, &mut rng).unwrap();
    *store.value_mut(p.b) = Tensor::uniform(&[4 * HIDDEN], -0.5, 0.5, &mut ChaCha8Rng::seed_from_u64(72));
    let xs = sequence(8, 73);
    let run = |variant| {
        let g = Graph::new();
        let vars = p.bind(&g, &store);
        let init = CellState::zeros(HIDDEN, true).bind(&g);
        unroll(&g, &xs, init, |x, st| lstm_step(&vars, x, st, variant, &UNIT_STATS), |_, h| Ok(h.sum()), LossMode::PerStep)
            .unwrap()
            .states
            .iter()
            .map(|s| s.value())
            .collect::<Vec<_>>()
    };
    let baseline = run(CellVariant::Baseline);
    assert_eq!(baseline, run(CellVariant::LnFull));
    assert_eq!(baseline, run(CellVariant::LnCellOnly));
}

#[test]
fn unit_statistics_reproduce_baseline_gru() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut store = ParamStore::<f64>::new();
    let p = GruParams::init(&mut store, "gru", HIDDEN, INPUT, CellVariant::LnFull, &mut rng).unwrap();
    let xs = sequence(8, 82);
    let run = |variant| {
        let g = Graph::new();
        let vars = p.bind(&g, &store);
        let init = CellState::zeros(HIDDEN, false).bind(&g);
        unroll(
            &g,
            &xs,
            init,
            |x, st| Ok(rnn_state(gru_step(&vars, x, st.h, variant, &UNIT_STATS)?)),
            |_, h| Ok(h.sum()),
            LossMode::PerStep,
        )
        .unwrap()
        .states
        .iter()
        .map(|s| s.h.value())
        .collect::<Vec<_>>()
    };
    assert_eq!(run(CellVariant::Baseline), run(CellVariant::LnFull));
}

#[test]
fn batched_cases_do_not_share_statistics() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let p = LstmParams::init(&mut store, "lstm", HIDDEN, INPUT, CellVariant::LnFull, &mut rng).unwrap();
    let opts = LnOptions::default();
    let cases = [[0.3, -0.8], [5.0, 2.0], [-1.0, 0.1]];
    let g = Graph::new();
    let vars = p.bind(&g, &store);
    let batch = CellState {
        h: Tensor::zeros(&[3, HIDDEN]),
        c: Some(Tensor::zeros(&[3, HIDDEN])),
    }
    .bind(&g);
    let x = g.leaf(Tensor::from_rows(&[&cases[0], &cases[1], &cases[2]]));
    let together = lstm_step(&vars, x, &batch, CellVariant::LnFull, &opts).unwrap().h.value();
    for (n, case) in cases.iter().enumerate() {
        let single = CellState::zeros(HIDDEN, true).bind(&g);
        let h = lstm_step(&vars, g.leaf(Tensor::from_f64s(case)), &single, CellVariant::LnFull, &opts)
            .unwrap()
            .h
            .value();
        for (a, b) in together.row(n).iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
