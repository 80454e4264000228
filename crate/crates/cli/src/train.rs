use std::fs;
use std::path::{Path, PathBuf};

use nalab::checkpoint::Checkpoint;
use nalab::eval::BLEU_METHOD;
use nalab::training::{EvalMetrics, Objective, TrainSummary, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ResolvedConfig, RESOLVED_CONFIG_FILE};
use crate::dataset::load_objective;
use crate::error::{io_error, CliError};

pub const REPORT_FILE: &str = "report.json";

/// Written to `report.json` at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub projection: String,
    pub params: usize,
    pub steps: u64,
    pub final_eval: EvalMetrics,
    pub steps_to_99acc: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu_method: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub resolved: ResolvedConfig,
    pub summary: TrainSummary,
    pub report: TrainReport,
}

/// Load the data, resolve the config against it, and return both.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(Objective, ResolvedConfig), CliError> {
    let (obj, data) = load_objective(&cfg.data)?;
    let mut cfg = cfg.clone();
    cfg.data = data;
    let resolved = cfg.resolve(obj.vocab().len())?;
    Ok((obj, resolved))
}

pub fn write_resolved(resolved: &ResolvedConfig) -> Result<PathBuf, CliError> {
    let dir = &resolved.output_dir;
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&path, resolved.to_json() + "\n").map_err(|e| io_error(&path, e))?;
    Ok(path)
}

/// Train from scratch, or continue from `resume` (a checkpoint directory).
pub fn run(resolved: &ResolvedConfig, obj: &Objective, resume: Option<&Path>) -> Result<TrainOutcome, CliError> {
    write_resolved(resolved)?;
    let mut trainer = match resume {
        Some(dir) => {
            let ckpt = Checkpoint::load(dir)?;
            if ckpt.manifest.model != resolved.model {
                return Err(CliError::Checkpoint(format!(
                    "{} was saved for a different model configuration",
                    dir.display()
                )));
            }
            if ckpt.manifest.vocab != obj.vocab().tokens() {
                return Err(CliError::Checkpoint(format!("{} uses a different vocabulary", dir.display())));
            }
            Trainer::from_checkpoint(&ckpt, resolved.train.clone(), obj.train_size())?
        }
        None => Trainer::new(resolved.model, resolved.train.clone(), obj.train_size())?,
    };
    let summary = trainer.run(obj, Some(&resolved.output_dir))?;
    let report = TrainReport {
        projection: resolved.model.projection.headline_kind().to_string(),
        params: trainer.store.num_scalars(),
        steps: summary.steps,
        final_eval: summary.final_eval,
        steps_to_99acc: summary.steps_to_accuracy(0.99),
        bleu_method: summary.final_eval.bleu.map(|_| BLEU_METHOD.to_string()),
    };
    let path = resolved.output_dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, json + "\n").map_err(|e| io_error(&path, e))?;
    Ok(TrainOutcome {
        resolved: resolved.clone(),
        summary,
        report,
    })
}
