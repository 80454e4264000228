use std::fs;
use std::path::{Path, PathBuf};

use nalab::checkpoint::Checkpoint;
use nalab::data::Task;
use nalab::eval::{decode_bleu, mlm_perplexity, seq2seq_perplexity, BleuReport, PerplexityReport, BLEU_METHOD};
use nalab::training::{model_from_checkpoint, Objective};
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, ExperimentConfig, RESOLVED_CONFIG_FILE};
use crate::dataset::load_objective;
use crate::error::{io_error, CliError};

pub const EVAL_BATCH: usize = 100;

/// Output of `nalab eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub task: Task,
    pub examples: usize,
    pub perplexity: PerplexityReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<BleuReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu_method: Option<String>,
}

/// Where the evaluation data comes from.
#[derive(Debug, Clone)]
pub enum EvalData {
    Dir(PathBuf),
    Config(PathBuf),
    /// `resolved_config.json` of the run that produced the checkpoint.
    Run,
}

fn data_config(checkpoint: &Path, source: &EvalData) -> Result<DataConfig, CliError> {
    match source {
        EvalData::Dir(d) => Ok(DataConfig {
            dir: Some(d.clone()),
            ..DataConfig::default()
        }),
        EvalData::Config(p) => Ok(ExperimentConfig::load(p)?.data),
        EvalData::Run => {
            let path = checkpoint
                .parent()
                .map(|p| p.join(RESOLVED_CONFIG_FILE))
                .filter(|p| p.exists())
                .ok_or_else(|| {
                    CliError::config(format!(
                        "no {RESOLVED_CONFIG_FILE} next to {}; pass --data-dir or --config",
                        checkpoint.display()
                    ))
                })?;
            Ok(ExperimentConfig::load(&path)?.data)
        }
    }
}

/// Score a checkpoint on the validation split of `source`.
pub fn evaluate(checkpoint: &Path, source: &EvalData) -> Result<EvalReport, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, store, vocab) = model_from_checkpoint(&ckpt)?;
    let (obj, data) = load_objective(&data_config(checkpoint, source)?)?;
    if obj.vocab() != &vocab {
        return Err(CliError::Checkpoint(format!(
            "{} has a {}-token vocabulary that does not match the dataset's {} tokens",
            checkpoint.display(),
            vocab.len(),
            obj.vocab().len()
        )));
    }
    let report = match &obj {
        Objective::Seq2Seq(d) => {
            let ppl = seq2seq_perplexity(&model, &store, &d.val, EVAL_BATCH)?;
            let (bleu, _) = decode_bleu(&model, &store, &d.val, EVAL_BATCH)?;
            EvalReport {
                step: ckpt.manifest.step,
                task: data.task,
                examples: d.val.len(),
                perplexity: ppl,
                bleu: Some(bleu),
                bleu_method: Some(BLEU_METHOD.to_string()),
            }
        }
        Objective::Mlm(d) => EvalReport {
            step: ckpt.manifest.step,
            task: data.task,
            examples: d.val.len(),
            perplexity: mlm_perplexity(&model, &store, &d.val, EVAL_BATCH)?,
            bleu: None,
            bleu_method: None,
        },
    };
    Ok(report)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<String, CliError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, &json).map_err(|e| io_error(path, e))?;
    Ok(json)
}
