use normlab::plot::read_rows;
use normlab::seq::*;
use normlab_core::recurrent::CellVariant;
use tempfile::TempDir;

fn small() -> SeqConfig {
    SeqConfig {
        hidden: 16,
        input: 4,
        steps: 120,
        ..SeqConfig::default()
    }
}

#[test]
fn normalized_state_stays_within_gain_plus_bias() {
    let runs = run_seq_stability(&small()).unwrap();
    assert_eq!(runs.len(), 2 * 4);
    for run in runs.iter().filter(|r| r.variant == CellVariant::LnFull) {
        assert!(!run.diverged);
        assert_eq!(run.rows.len(), 121);
        assert!(run.max_sup_norm() <= run.bound + 1e-12, "radius {}: {}", run.radius, run.max_sup_norm());
        assert!(run.rows.iter().all(|r| r.grad_norm.is_finite()));
    }
}

#[test]
fn contracting_baseline_forgets_its_start() {
    let config = SeqConfig {
        zero_input: true,
        radii: vec![0.5],
        ..small()
    };
    let runs = run_seq_stability(&config).unwrap();
    let baseline = runs.iter().find(|r| r.variant == CellVariant::Baseline).unwrap();
    assert!(baseline.grad_at_initial_state() < 1e-20, "{}", baseline.grad_at_initial_state());
    assert!(baseline.rows.last().unwrap().h_sup_norm < 1e-20);
}

#[test]
fn joint_weight_scaling_leaves_trajectory_unchanged() {
    for scale in [0.1, 3.0, 50.0] {
        let dev = joint_scaling_deviation(&small(), 1.5, scale).unwrap();
        assert!(dev <= 1e-9, "scale {scale}: {dev}");
    }
}

#[test]
fn one_file_per_variant() {
    let runs = run_seq_stability(&SeqConfig { steps: 10, ..small() }).unwrap();
    let dir = TempDir::new().unwrap();
    let paths = write_seq_stability(&runs, dir.path()).unwrap();
    let names: Vec<_> = paths.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_owned()).collect();
    assert_eq!(names, ["seq-stability-baseline.csv", "seq-stability-ln-full.csv"]);
    let rows: Vec<SeqRow> = read_rows(&paths[1]).unwrap();
    assert_eq!(rows.len(), 4 * 11);
    let expected: Vec<SeqRow> = runs.iter().filter(|r| r.variant == CellVariant::LnFull).flat_map(|r| r.rows.clone()).collect();
    assert_eq!(rows, expected);
}

#[test]
fn degenerate_configs_rejected() {
    assert!(run_seq_stability(&SeqConfig { hidden: 1, ..small() }).is_err());
    assert!(run_seq_stability(&SeqConfig { radii: vec![], ..small() }).is_err());
}

#[test]
fn single_step_scaling_is_exact_even_where_trajectories_drift() {
    let config = SeqConfig::default();
    for radius in [0.5, 2.0] {
        for scale in [0.1, 3.0, 10.0] {
            assert!(step_scaling_deviation(&config, radius, scale).unwrap() <= 1e-12);
        }
    }
    // Powers of two scale exactly, so the whole trajectory matches bit for bit.
    assert_eq!(joint_scaling_deviation(&config, 2.0, 2.0).unwrap(), 0.0);
}
