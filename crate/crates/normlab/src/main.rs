use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use normlab::analysis::{invariance_rows, run_geometry, run_invariance, write_geometry, GeometryConfig};
use normlab::config::{default_epochs, Experiment, RunConfig, DEFAULT_BATCH_SIZE, DEFAULT_LR};
use normlab::data::load_mnist;
use normlab::plot::{write_rows, RowWriter};
use normlab::seq::{joint_scaling_deviation, run_seq_stability, step_scaling_deviation, variant_name, write_seq_stability, SeqConfig};
use normlab::train::train_mnist;
use normlab::Result;
use normlab_core::geometry::Family;
use normlab_core::{NormKind, VarianceEstimator};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExperimentArg {
    Mnist,
    SeqStability,
    Invariance,
    Geometry,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    None,
    Layer,
    Batch,
    Weight,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    Bernoulli,
    Gaussian,
    Both,
}

/// Normalization experiments: MNIST training, RNN stability, the
/// invariance table and GLM geometry.
#[derive(Debug, Parser)]
#[command(name = "normlab", version)]
struct Cli {
    experiment: ExperimentArg,

    #[arg(long, value_enum, default_value = "none")]
    norm: NormArg,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    /// Defaults to 20, or 5 at batch size 4 and below.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory with the four MNIST IDX files (raw or .gz).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output CSV for mnist and invariance, output directory otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Batch normalization divides the batch variance by N - 1.
    #[arg(long)]
    unbiased_variance: bool,
    /// Write 0 in the wall-time column so reruns are byte-identical.
    #[arg(long)]
    no_wall_time: bool,
    /// Train on the first N training records only.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Evaluate on the first N test records only.
    #[arg(long)]
    test_limit: Option<usize>,

    /// seq-stability: hidden units.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// seq-stability: sequence length.
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// seq-stability: spectral radii of the recurrent matrix.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0, 1.5, 2.0])]
    radii: Vec<f64>,
    /// seq-stability: feed zero inputs.
    #[arg(long)]
    zero_input: bool,

    /// invariance: random transforms per cell.
    #[arg(long, default_value_t = normlab_core::invariance::DEFAULT_TRIALS)]
    trials: usize,

    /// geometry: output family.
    #[arg(long, value_enum, default_value = "both")]
    family: FamilyArg,
    /// geometry: Gaussian dispersion.
    #[arg(long, default_value_t = 1.0)]
    phi: f64,
    /// geometry: output units H.
    #[arg(long, default_value_t = normlab_core::geometry::DEFAULT_UNITS)]
    units: usize,
    /// geometry: input dimension D.
    #[arg(long, default_value_t = normlab_core::geometry::DEFAULT_INPUTS)]
    inputs: usize,
    /// geometry: input samples N.
    #[arg(long, default_value_t = normlab_core::geometry::DEFAULT_SAMPLES)]
    samples: usize,
    /// geometry: perturbation norms of the KL sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1e-1, 1e-2, 1e-3])]
    deltas: Vec<f64>,
    /// geometry: score draws for the Monte Carlo Fisher check (0 skips it).
    #[arg(long, default_value_t = 0)]
    mc_draws: usize,
    /// geometry: input rescaling for the gain-metric comparison.
    #[arg(long, default_value_t = 10.0)]
    input_scale: f64,
}

impl Cli {
    fn norm(&self) -> NormKind {
        match self.norm {
            NormArg::None => NormKind::None,
            NormArg::Layer => NormKind::Layer,
            NormArg::Batch => NormKind::Batch,
            NormArg::Weight => NormKind::Weight,
        }
    }

    fn experiment(&self) -> Experiment {
        match self.experiment {
            ExperimentArg::Mnist => Experiment::Mnist,
            ExperimentArg::SeqStability => Experiment::SeqStability,
            ExperimentArg::Invariance => Experiment::Invariance,
            ExperimentArg::Geometry => Experiment::Geometry,
        }
    }

    fn run_config(&self) -> RunConfig {
        let experiment = self.experiment();
        let default_out = match experiment {
            Experiment::Mnist => "mnist.csv",
            Experiment::Invariance => "invariance.csv",
            Experiment::SeqStability | Experiment::Geometry => ".",
        };
        RunConfig {
            experiment,
            norm: self.norm(),
            batch_size: self.batch_size,
            epochs: self.epochs.unwrap_or_else(|| default_epochs(self.batch_size)),
            lr: self.lr,
            seed: self.seed,
            data: self.data.clone(),
            out: self.out.clone().unwrap_or_else(|| PathBuf::from(default_out)),
            estimator: if self.unbiased_variance {
                VarianceEstimator::Unbiased
            } else {
                VarianceEstimator::Biased
            },
            record_wall_time: !self.no_wall_time,
            train_limit: self.train_limit,
            test_limit: self.test_limit,
        }
    }
}

fn mnist(config: &RunConfig) -> Result<()> {
    let dir = config.data.as_deref().expect("validated");
    let data = load_mnist(dir, config.seed)?;
    let mut writer = RowWriter::create(&config.out)?;
    let summary = train_mnist(config, &data, Some(&mut writer))?;
    let last = summary.last();
    eprintln!(
        "{} updates; epoch {}: test nll {:.4}, test error {:.4}",
        summary.updates, last.epoch, last.test_nll, last.test_error_rate
    );
    println!("{}", config.out.display());
    Ok(())
}

fn seq_stability(cli: &Cli, config: &RunConfig) -> Result<()> {
    let seq = SeqConfig {
        hidden: cli.hidden,
        steps: cli.steps,
        radii: cli.radii.clone(),
        seed: config.seed,
        zero_input: cli.zero_input,
        ..SeqConfig::default()
    };
    let runs = run_seq_stability(&seq)?;
    for run in &runs {
        eprintln!(
            "{:<8} radius {:<4} max |h|_inf {:.6} (bound {}), |dL/dh0| {:.3e}{}",
            variant_name(run.variant),
            run.radius,
            run.max_sup_norm(),
            run.bound,
            run.grad_at_initial_state(),
            if run.diverged { ", diverged" } else { "" }
        );
    }
    if !cli.zero_input {
        for &radius in &seq.radii {
            eprintln!(
                "ln-full radius {radius}: joint x3 weight scaling moves one step by {:e}, the whole trajectory by {:e}",
                step_scaling_deviation(&seq, radius, 3.0)?,
                joint_scaling_deviation(&seq, radius, 3.0)?
            );
        }
    }
    for path in write_seq_stability(&runs, &config.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn invariance(cli: &Cli, config: &RunConfig) -> Result<()> {
    let table = run_invariance(config.seed, cli.trials)?;
    for f in table.failures() {
        eprintln!("unexpected verdict: {f}");
    }
    write_rows(&invariance_rows(&table), &config.out)?;
    println!("{}", config.out.display());
    Ok(())
}

fn geometry(cli: &Cli, config: &RunConfig) -> Result<()> {
    let gaussian = Family::GaussianIdentity { phi: cli.phi };
    let families = match cli.family {
        FamilyArg::Bernoulli => vec![Family::BernoulliLogistic],
        FamilyArg::Gaussian => vec![gaussian],
        FamilyArg::Both => vec![Family::BernoulliLogistic, gaussian],
    };
    let geo = GeometryConfig {
        families,
        units: cli.units,
        inputs: cli.inputs,
        samples: cli.samples,
        seed: config.seed,
        deltas: cli.deltas.clone(),
        mc_draws: cli.mc_draws,
        input_scale: cli.input_scale,
    };
    let report = run_geometry(&geo)?;
    for path in write_geometry(&report, &config.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let config = cli.run_config();
    config.validate()?;
    match config.experiment {
        Experiment::Mnist => mnist(&config),
        Experiment::SeqStability => seq_stability(cli, &config),
        Experiment::Invariance => invariance(cli, &config),
        Experiment::Geometry => geometry(cli, &config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("normlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
