//! Dataset files on disk and loading the data section of a config.

use std::fs;
use std::path::{Path, PathBuf};

use nalab::data::{
    generate_seq2seq, read_pairs, split_corpus, write_pairs, CorpusSplit, DatasetSpec, Seq2SeqData, Task,
    Vocabulary, SHIPPED_CORPUS,
};
use nalab::training::{MlmData, Objective};
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, DATASET_FILE};
use crate::error::{io_error, CliError};

/// Sidecar written next to generated files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub spec: DatasetSpec,
    pub vocab: Vocabulary,
    pub train_file: String,
    pub val_file: String,
    pub num_train: usize,
    pub num_val: usize,
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Write the dataset described by `spec` into `dir`. For `char-mlm` the
/// shipped corpus (or `corpus`) is split into `train.txt` / `val.txt`.
pub fn write_dataset(spec: &DatasetSpec, corpus: Option<&Path>, dir: &Path) -> Result<DatasetSidecar, CliError> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let sidecar = match spec.task {
        Task::CharMlm => {
            let split = load_corpus(corpus)?;
            write(&dir.join("train.txt"), &split.train_text)?;
            write(&dir.join("val.txt"), &split.val_text)?;
            DatasetSidecar {
                spec: spec.clone(),
                vocab: split.vocab,
                train_file: "train.txt".into(),
                val_file: "val.txt".into(),
                num_train: split.train_text.chars().count(),
                num_val: split.val_text.chars().count(),
            }
        }
        Task::Reversal | Task::Copy => {
            let data = generate_seq2seq(spec)?;
            write_pairs(&dir.join("train.tsv"), &data.train, &data.vocab)?;
            write_pairs(&dir.join("val.tsv"), &data.val, &data.vocab)?;
            DatasetSidecar {
                spec: spec.clone(),
                vocab: data.vocab,
                train_file: "train.tsv".into(),
                val_file: "val.tsv".into(),
                num_train: data.train.len(),
                num_val: data.val.len(),
            }
        }
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    write(&dir.join(DATASET_FILE), &(json + "\n"))?;
    Ok(sidecar)
}

fn load_corpus(path: Option<&Path>) -> Result<CorpusSplit, CliError> {
    match path {
        Some(p) => Ok(split_corpus(&read(p)?)?),
        None => Ok(split_corpus(SHIPPED_CORPUS)?),
    }
}

pub fn read_sidecar(dir: &Path) -> Result<DatasetSidecar, CliError> {
    let path = dir.join(DATASET_FILE);
    serde_json::from_str(&read(&path)?).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Build the training objective. With `dir`, the `DatasetSpec` recorded in
/// the sidecar replaces the matching fields of `cfg` in the returned config.
pub fn load_objective(cfg: &DataConfig) -> Result<(Objective, DataConfig), CliError> {
    let mut resolved = cfg.clone();
    let spec = match &cfg.dir {
        Some(dir) => {
            let side = read_sidecar(dir)?;
            let s = side.spec.clone();
            resolved = DataConfig {
                task: s.task,
                vocab_size: Some(s.vocab_size),
                min_len: Some(s.min_len),
                max_len: Some(s.max_len),
                num_train: Some(s.num_train),
                num_val: Some(s.num_val),
                seed: Some(s.seed),
                dir: Some(dir.clone()),
                corpus: None,
            };
            let obj = match s.task {
                Task::CharMlm => {
                    let split = CorpusSplit {
                        vocab: side.vocab.clone(),
                        train_text: read(&dir.join(&side.train_file))?,
                        val_text: read(&dir.join(&side.val_file))?,
                    };
                    Objective::Mlm(MlmData::from_split(&split, s.max_len, s.seed))
                }
                Task::Reversal | Task::Copy => Objective::Seq2Seq(Seq2SeqData {
                    train: read_pairs(&dir.join(&side.train_file), &side.vocab)?,
                    val: read_pairs(&dir.join(&side.val_file), &side.vocab)?,
                    vocab: side.vocab,
                }),
            };
            return Ok((obj, resolved));
        }
        None => cfg.spec(),
    };
    let obj = match spec.task {
        Task::CharMlm => {
            spec.validate()?;
            let split = load_corpus(cfg.corpus.as_deref())?;
            Objective::Mlm(MlmData::from_split(&split, spec.max_len, spec.seed))
        }
        Task::Reversal | Task::Copy => Objective::Seq2Seq(generate_seq2seq(&spec)?),
    };
    if obj.train_size() == 0 {
        return Err(CliError::config("training set is empty"));
    }
    Ok((obj, resolved))
}

/// Default dataset directory for `gen-data`.
pub fn default_data_dir(task: Task) -> PathBuf {
    PathBuf::from("data").join(task.name())
}
