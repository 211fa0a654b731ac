use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robust_lstm::bptt::gradient_check;
use robust_lstm::cohort::{load_csv, preprocess, synthesize, write_csv, LabelScheme, SplitName};
use robust_lstm::config::Config;
use robust_lstm::imputation::MissingStrategy;
use robust_lstm::lstm::write_checkpoint;
use robust_lstm::optimizer::write_history;
use robust_lstm::pipeline::{self, write_file, CHECKPOINT_FILE, HISTORY_FILE};
use robust_lstm::Error;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

/// Peephole LSTM forecasting of longitudinal biomarkers with missing data.
#[derive(Parser)]
#[command(name = "robust-lstm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Clean, split and scale a raw cohort CSV into a prepared directory.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Raw cohort CSV.
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `split.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a prepared directory; writes a checkpoint and history log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Prepared directory.
        prepared: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        strategy: StrategyArg,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report MAE per biomarker and LDA-based AUC for one split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        /// Prepared directory.
        prepared: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[command(flatten)]
        strategy: StrategyArg,
        /// Also write `metrics_<split>.txt` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on a random instance.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Overrides `gradcheck.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        inputs: Option<usize>,
        #[arg(long)]
        outputs: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        missing_rate: Option<f64>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file; defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct StrategyArg {
    /// Overrides `train.missing_strategy` (masked, mean or forward).
    #[arg(long = "missing-strategy")]
    missing_strategy: Option<MissingStrategy>,
}

impl Common {
    fn load(&self) -> robust_lstm::Result<Config> {
        match &self.config {
            Some(path) => Config::load(path),
            None => Ok(Config::default()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Divergence { .. } | Error::NonFiniteForward { .. } | Error::NonFiniteUpdate { .. } => EXIT_DIVERGED,
        _ => EXIT_DATA,
    }
}

fn run(command: Command) -> robust_lstm::Result<u8> {
    match command {
        Command::Synth { common, out, seed } => {
            let mut cfg = common.load()?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            let table = synthesize(&cfg.synth, &cfg.labels)?;
            write_file(&out, |w| write_csv(&table, w))?;
            eprintln!("wrote {} rows for {} subjects to {}", table.rows.len(), table.subjects().len(), out.display());
        }
        Command::Prepare { common, input, out, seed } => {
            let mut cfg = common.load()?;
            if let Some(s) = seed {
                cfg.preprocess.split_seed = s;
            }
            let raw = load_csv(&input, &cfg.labels)?;
            let cohort = preprocess(&raw, &cfg.preprocess)?;
            pipeline::write_prepared(&out, &cohort)?;
            eprintln!(
                "train/val/test subjects: {}/{}/{}; removed {}",
                cohort.train.batch.len(),
                cohort.val.batch.len(),
                cohort.test.batch.len(),
                cohort.removed.len()
            );
        }
        Command::Train { common, prepared, out, strategy, epochs, seed } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.init_seed = s;
            }
            let strategy = strategy.missing_strategy.unwrap_or(cfg.strategy);
            let scheme = prepared_scheme(&cfg);
            let train = pipeline::read_split(&prepared, SplitName::Train, &scheme)?;
            let val = pipeline::read_split(&prepared, SplitName::Val, &scheme)?;
            let scaling = pipeline::read_scaling(&prepared)?;
            let outcome =
                pipeline::train_strategy(&train.batch, &val.batch, &scaling, strategy, cfg.impute_targets, &cfg.train)?;
            write_file(&out.join(CHECKPOINT_FILE), |w| write_checkpoint(&outcome.params, w))?;
            write_file(&out.join(HISTORY_FILE), |w| write_history(&outcome.history, &scaling.names(), w))?;
            if let Some(last) = outcome.history.last() {
                eprintln!("{strategy}: {} epochs, final loss {:e}", last.epoch, last.loss);
            }
        }
        Command::Evaluate { common, checkpoint, prepared, split, strategy, out } => {
            let cfg = common.load()?;
            let strategy = strategy.missing_strategy.unwrap_or(cfg.strategy);
            let scheme = prepared_scheme(&cfg);
            let params = pipeline::read_checkpoint(&checkpoint)?;
            let train = pipeline::read_split(&prepared, SplitName::Train, &scheme)?;
            let target = pipeline::read_split(&prepared, split, &scheme)?;
            let scaling = pipeline::read_scaling(&prepared)?;
            let report = pipeline::evaluate(
                &params,
                &train.batch,
                &target.batch,
                split.as_str(),
                strategy,
                &scaling,
                &cfg.labels.names,
            )?;
            let mut stdout = std::io::stdout().lock();
            report.write(&mut stdout).and_then(|_| stdout.flush()).map_err(|e| Error::io("<stdout>", e))?;
            if let Some(dir) = out {
                write_file(&dir.join(format!("metrics_{split}.txt")), |w| report.write(w))?;
            }
        }
        Command::Gradcheck { common, seed, inputs, outputs, steps, subjects, missing_rate, tolerance } => {
            let mut cfg = common.load()?;
            let g = &mut cfg.gradcheck;
            g.seed = seed.unwrap_or(g.seed);
            g.inputs = inputs.unwrap_or(g.inputs);
            g.outputs = outputs.unwrap_or(g.outputs);
            g.steps = steps.unwrap_or(g.steps);
            g.subjects = subjects.unwrap_or(g.subjects);
            g.missing_rate = missing_rate.unwrap_or(g.missing_rate);
            g.tolerance = tolerance.unwrap_or(g.tolerance);
            cfg.validate()?;
            let g = &cfg.gradcheck;
            let (params, batch) = g.instance()?;
            let report = gradient_check(&params, &batch, g.fd_step, g.tolerance)?;
            for a in &report.arrays {
                let verdict = if a.passed { "PASS" } else { "FAIL" };
                println!("{:<4} max_rel_error={:.3e} worst_index={} {verdict}", a.name, a.max_rel_error, a.worst_index);
            }
            let failed = report.failing().count();
            println!("tolerance={:e} failing_arrays={failed}", report.tolerance);
            if failed > 0 {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
    }
    Ok(0)
}

/// Prepared files carry canonical class names only.
fn prepared_scheme(cfg: &Config) -> LabelScheme {
    LabelScheme {
        names: cfg.labels.names.clone(),
        merge: Vec::new(),
    }
}

