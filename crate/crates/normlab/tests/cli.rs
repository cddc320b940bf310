use std::path::Path;
use std::process::{Command, Output};

use normlab::data::write_synthetic_mnist;
use normlab::plot::parse_plotdata;
use tempfile::TempDir;

fn normlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normlab")).args(args).current_dir(cwd).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synthetic_dir() -> TempDir {
    let dir = TempDir::new().unwrap();
    write_synthetic_mnist(dir.path(), 5100, 60, 2).unwrap();
    dir
}

#[test]
fn invariance_writes_table() {
    let dir = TempDir::new().unwrap();
    let out = normlab(&["invariance", "--trials", "2", "--out", "table.csv"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert!(text.starts_with("scheme,transform,deviation,invariant,expected,pass\n"), "{text}");
    assert!(!text.contains(",false\n"), "{text}");
}

#[test]
fn help_and_version_succeed() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&normlab(&["--help"], dir.path())), 0);
    assert_eq!(code(&normlab(&["--version"], dir.path())), 0);
}

#[test]
fn bad_configuration_exits_one() {
    let dir = TempDir::new().unwrap();
    let bn1 = normlab(&["mnist", "--norm", "batch", "--batch-size", "1", "--data", "."], dir.path());
    assert_eq!(code(&bn1), 1);
    assert!(stderr(&bn1).contains("at least 2"), "{}", stderr(&bn1));
    assert_eq!(code(&normlab(&["mnist", "--norm", "group"], dir.path())), 1);
    assert_eq!(code(&normlab(&["mnist"], dir.path())), 1);
    assert_eq!(code(&normlab(&["nonsense"], dir.path())), 1);
}

#[test]
fn missing_data_exits_two() {
    let dir = TempDir::new().unwrap();
    let out = normlab(&["mnist", "--data", "nowhere"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train-images-idx3-ubyte"), "{}", stderr(&out));
}

#[test]
fn unwritable_output_exits_two() {
    let dir = TempDir::new().unwrap();
    let out = normlab(&["invariance", "--trials", "1", "--out", "no/such/dir/t.csv"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no/such/dir/t.csv"), "{}", stderr(&out));
}

#[test]
fn divergence_exits_three_and_keeps_rows() {
    let data = synthetic_dir();
    let dir = TempDir::new().unwrap();
    let data_arg = data.path().to_str().unwrap();
    let args = ["mnist", "--data", data_arg, "--lr", "1e30", "--batch-size", "16", "--epochs", "3"];
    let out = normlab(&[&args[..], &["--train-limit", "64", "--test-limit", "30", "--out", "run.csv"]].concat(), dir.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let rows = parse_plotdata(&dir.path().join("run.csv")).unwrap();
    assert_eq!(rows[0].epoch, 0);
}

#[test]
fn short_training_run_succeeds() {
    let data = synthetic_dir();
    let dir = TempDir::new().unwrap();
    let data_arg = data.path().to_str().unwrap();
    let out = normlab(
        &["mnist", "--norm", "layer", "--data", data_arg, "--batch-size", "16", "--epochs", "1", "--train-limit", "64", "--test-limit", "30"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(parse_plotdata(&dir.path().join("mnist.csv")).unwrap().len(), 2);
}

#[test]
fn directory_experiments_list_their_files() {
    let dir = TempDir::new().unwrap();
    let seq = normlab(&["seq-stability", "--hidden", "8", "--steps", "20", "--out", "seq"], dir.path());
    assert_eq!(code(&seq), 0, "{}", stderr(&seq));
    assert_eq!(String::from_utf8_lossy(&seq.stdout).lines().count(), 2);
    let geo = normlab(&["geometry", "--samples", "64", "--out", "geo"], dir.path());
    assert_eq!(code(&geo), 0, "{}", stderr(&geo));
    assert_eq!(String::from_utf8_lossy(&geo.stdout).lines().count(), 3);
    assert!(dir.path().join("geo/geometry-kl.csv").is_file());
}
