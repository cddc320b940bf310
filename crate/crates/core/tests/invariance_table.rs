use normlab_core::invariance::*;
use normlab_core::normalizers::NormKind;
use normlab_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const TABLE: [[bool; 6]; 3] = [
    [true, false, true, true, true, false],
    [true, false, true, false, false, false],
    [true, true, false, true, false, true],
];

#[test]
fn expectation_matrix_matches_table() {
    for (row, scheme) in SCHEMES.iter().enumerate() {
        for (col, t) in TransformKind::ALL.iter().enumerate() {
            assert_eq!(expected_invariant(*scheme, *t), TABLE[row][col], "{} {}", scheme.name(), t.name());
        }
    }
}

#[test]
fn full_table_reproduces_expectations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (layer, data) = default_probe(&mut rng);
    let table = full_table(&layer, &data, DEFAULT_TRIALS, &mut rng).unwrap();
    assert!(table.passed(), "{:?}", table.failures());
    let observed = table.matrix();
    for (row, expected) in TABLE.iter().enumerate() {
        assert_eq!(observed[row], expected.to_vec());
    }
}

#[test]
fn verdicts_stable_across_seeds_and_case_order() {
    let reference = {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let (layer, data) = default_probe(&mut rng);
        full_table(&layer, &data, DEFAULT_TRIALS, &mut rng).unwrap().matrix()
    };
    for seed in [101, 102, 103] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layer, data) = default_probe(&mut rng);
        assert_eq!(full_table(&layer, &data, DEFAULT_TRIALS, &mut rng).unwrap().matrix(), reference);
        let n = data.shape()[0];
        let rows: Vec<&[f64]> = (0..n).rev().map(|i| data.row(i)).collect();
        let reversed = Tensor::from_rows(&rows);
        assert_eq!(full_table(&layer, &reversed, DEFAULT_TRIALS, &mut rng).unwrap().matrix(), reference);
    }
}

#[test]
fn layer_norm_joint_weight_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (layer, data) = default_probe(&mut rng);
    let base = layer.forward(NormKind::Layer, &data).unwrap();
    for _ in 0..100 {
        let delta = rng.random_range(0.25f64.ln()..4f64.ln()).exp();
        let gamma: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut moved = layer.clone();
        moved.w = weight_affine(&layer.w, delta, &gamma).unwrap();
        let out = moved.forward(NormKind::Layer, &data).unwrap();
        assert!(base.max_abs_diff(&out) <= TOL_INVARIANT);
    }
}

#[test]
fn batch_norm_absorbs_dataset_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (layer, data) = default_probe(&mut rng);
    let t = TransformSpec {
        shift: (0..8).map(|i| i as f64 - 3.5).collect(),
        ..TransformSpec::identity(TransformKind::DatasetRecenter, 8)
    };
    assert!(output_deviation(NormKind::Batch, &layer, &data, &t).unwrap() <= TOL_INVARIANT);
}
