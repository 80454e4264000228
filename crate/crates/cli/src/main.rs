use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalab::attention::ProjectionKind;
use nalab::data::{DatasetSpec, Task};
use nalab::tensor::BackwardFault;
use nalab_cli::compare;
use nalab_cli::config::{env_seed, ExperimentConfig, Overrides};
use nalab_cli::dataset::{default_data_dir, write_dataset};
use nalab_cli::error::CliError;
use nalab_cli::evaluate::{self, EvalData};
use nalab_cli::gradcheck::{self, GradcheckOptions};
use nalab_cli::train;

#[derive(Parser)]
#[command(name = "nalab", version, about = "Attention projection variants: data, training, evaluation, gradient checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory with train/val files and a `dataset.json` sidecar.
    GenData {
        #[arg(long, default_value = "reversal")]
        task: Task,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Text corpus for `char-mlm` (defaults to the shipped one).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory (default `data/<task>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        projection: Option<ProjectionKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "config")]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path (default `<checkpoint>/eval.json`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Central-difference gradient checks of every projection kind.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "standard,dlp,neural")]
        kinds: Vec<ProjectionKind>,
        #[arg(long, default_value_t = nalab::gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = nalab::gradcheck::DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = 8)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Train the three projection variants on one config and tabulate them.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/compare")]
        output_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Relu,
    LayerNorm,
    Attention,
}

impl From<Fault> for BackwardFault {
    fn from(f: Fault) -> Self {
        match f {
            Fault::Relu => BackwardFault::Relu,
            Fault::LayerNorm => BackwardFault::LayerNorm,
            Fault::Attention => BackwardFault::Attention,
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, CliError> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), |p| ExperimentConfig::load(p))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            task,
            vocab,
            min_len,
            max_len,
            train,
            val,
            seed,
            corpus,
            out,
        } => {
            let d = DatasetSpec::default();
            let spec = DatasetSpec {
                task,
                vocab_size: vocab.unwrap_or(d.vocab_size),
                min_len: min_len.unwrap_or(d.min_len),
                max_len: max_len.unwrap_or(d.max_len),
                num_train: train.unwrap_or(d.num_train),
                num_val: val.unwrap_or(d.num_val),
                seed: seed.or(env_seed()?).unwrap_or(d.seed),
            };
            let dir = out.unwrap_or_else(|| default_data_dir(task));
            let side = write_dataset(&spec, corpus.as_deref(), &dir)?;
            println!(
                "wrote {} train / {} val ({}) to {}",
                side.num_train,
                side.num_val,
                side.train_file,
                dir.display()
            );
        }
        Command::Train {
            config,
            projection,
            seed,
            max_steps,
            output_dir,
            resume,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            cfg.apply(
                &Overrides {
                    projection,
                    seed,
                    max_steps,
                    output_dir,
                },
                env_seed()?,
            );
            let (obj, resolved) = train::prepare(&cfg)?;
            println!("{}", resolved.to_json());
            let outcome = train::run(&resolved, &obj, resume.as_deref())?;
            let e = outcome.report.final_eval;
            log::info!(
                "done after {} steps: eval loss {:.4}, accuracy {:.4}, perplexity {:.3}{}",
                outcome.report.steps,
                e.eval_loss,
                e.eval_accuracy,
                e.perplexity,
                e.bleu.map(|b| format!(", BLEU {b:.2}")).unwrap_or_default()
            );
        }
        Command::Eval {
            checkpoint,
            data_dir,
            config,
            output,
        } => {
            let source = match (data_dir, config) {
                (Some(d), _) => EvalData::Dir(d),
                (None, Some(c)) => EvalData::Config(c),
                (None, None) => EvalData::Run,
            };
            let report = evaluate::evaluate(&checkpoint, &source)?;
            let path = output.unwrap_or_else(|| checkpoint.join("eval.json"));
            print!("{}", evaluate::write_report(&report, &path)?);
        }
        Command::Gradcheck {
            kinds,
            tolerance,
            step,
            d_model,
            heads,
            inject_fault,
        } => {
            let mut on = [false; 3];
            for k in kinds {
                on[ProjectionKind::ALL.iter().position(|&a| a == k).expect("known kind")] = true;
            }
            let summary = gradcheck::run(&GradcheckOptions {
                kinds: on,
                d_model,
                heads,
                step,
                tolerance,
                fault: inject_fault.map(Into::into),
            })?;
            print!("{}", summary.table());
            println!("max relative error {:.3e} (tolerance {:.0e})", summary.max_error(), tolerance);
            if !summary.passed() {
                let worst: Vec<String> = summary
                    .worst_offenders(5)
                    .iter()
                    .map(|r| format!("{}/{}/{} {:.3e}", r.kind, r.block, r.group, r.max_rel_error))
                    .collect();
                return Err(CliError::Gradcheck(format!("worst offenders: {}", worst.join(", "))));
            }
        }
        Command::Compare {
            config,
            output_dir,
            seed,
            max_steps,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            cfg.apply(
                &Overrides {
                    seed,
                    max_steps,
                    ..Overrides::default()
                },
                env_seed()?,
            );
            let report = compare::run(&cfg, &output_dir)?;
            for v in &report.variants {
                match (&v.report, &v.error) {
                    (Some(r), _) => log::info!(
                        "{}: accuracy {:.4}, BLEU {}, perplexity {:.3}, params {}, steps to 0.99 {}",
                        v.variant,
                        r.final_eval.eval_accuracy,
                        r.final_eval.bleu.map(|b| format!("{b:.2}")).unwrap_or_else(|| "-".into()),
                        r.final_eval.perplexity,
                        v.params,
                        r.steps_to_99acc.map(|s| s.to_string()).unwrap_or_else(|| "-".into())
                    ),
                    (None, Some(e)) => log::error!("{}: {e}", v.variant),
                    (None, None) => {}
                }
            }
            log::info!("ordering: {}", report.ordering.note);
            let failed = report.failures();
            if !failed.is_empty() {
                let names: Vec<String> = failed.iter().map(|v| v.variant.to_string()).collect();
                return Err(CliError::Failed(format!("variants failed: {}", names.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NALAB_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
