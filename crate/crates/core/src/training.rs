//! Training loop with periodic evaluation, metrics CSV and resumable
//! checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{BatcherState, Checkpoint, CheckpointError, Manifest, OptimizerMeta, RngStates, FORMAT_VERSION};
use crate::data::{mask_tokens, Batch, Example, PairBatch, Seq2SeqData, Vocabulary, PAD};
use crate::error::TensorError;
use crate::eval::{decode_bleu, mlm_perplexity, seq2seq_perplexity, MaskedSequence};
use crate::model::{ModelConfig, Transformer};
use crate::optim::{clip_grad_norm, Adam, AdamConfig, NonFiniteGradient};
use crate::rng::{streams, Rng};
use crate::tensor::{ParamStore, Tape};

pub const METRICS_HEADER: [&str; 7] = ["step", "seconds", "train_loss", "eval_loss", "eval_accuracy", "perplexity", "bleu"];

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("step {step}: {source}")]
    Gradient {
        step: u64,
        #[source]
        source: NonFiniteGradient,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {detail}")]
    Output { path: PathBuf, detail: String },
}

impl TrainError {
    /// Whether training diverged (NaN/∞ loss, activations or gradients).
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Self::Gradient { .. } | Self::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteInput { .. })
        )
    }
}

fn max_steps() -> u64 {
    3000
}
fn eval_every() -> u64 {
    250
}
fn log_every() -> u64 {
    50
}
fn batch_size() -> usize {
    32
}
fn seed() -> u64 {
    42
}
fn lr() -> f64 {
    3e-4
}
fn grad_clip() -> f64 {
    1.0
}
fn eval_batch_size() -> usize {
    100
}
fn bleu_examples() -> usize {
    200
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "max_steps")]
    pub max_steps: u64,
    /// When set, replaces `max_steps` by `ceil(epochs · train_size / batch_size)`.
    #[serde(default)]
    pub epochs: Option<f64>,
    #[serde(default = "eval_every")]
    pub eval_every: u64,
    #[serde(default = "log_every")]
    pub log_every: u64,
    #[serde(default = "batch_size")]
    pub batch_size: usize,
    #[serde(default = "seed")]
    pub seed: u64,
    #[serde(default = "lr")]
    pub lr: f64,
    #[serde(default = "grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "eval_batch_size")]
    pub eval_batch_size: usize,
    /// Validation examples decoded for BLEU at each evaluation (0 = all).
    #[serde(default = "bleu_examples")]
    pub bleu_examples: usize,
    /// Fill the `seconds` column; turn off for byte-reproducible metrics.
    #[serde(default = "yes")]
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: &str| Err(TensorError::Config(m.to_string()));
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        if matches!(self.epochs, Some(e) if !(e >= 0.0 && e.is_finite())) {
            return bad("epochs must be non-negative");
        }
        Ok(())
    }

    pub fn total_steps(&self, train_size: usize) -> u64 {
        match self.epochs {
            Some(e) => (e * train_size as f64 / self.batch_size as f64).ceil() as u64,
            None => self.max_steps,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// What is being learned and how it is scored.
#[derive(Debug, Clone)]
pub enum Objective {
    Seq2Seq(Seq2SeqData),
    Mlm(MlmData),
}

#[derive(Debug, Clone)]
pub struct MlmData {
    pub vocab: Vocabulary,
    pub train: Vec<Vec<usize>>,
    pub val: Vec<MaskedSequence>,
}

impl MlmData {
    /// Chunk both splits; validation masking is drawn once from its own stream.
    pub fn from_split(split: &crate::data::CorpusSplit, chunk_len: usize, seed: u64) -> Self {
        let tok = |t: &str| crate::data::char_tokenize(t, &split.vocab);
        let train = crate::data::chunk(&tok(&split.train_text), chunk_len);
        let mut rng = Rng::stream(seed, streams::MLM_VAL_MASK);
        let val = crate::data::chunk(&tok(&split.val_text), chunk_len)
            .into_iter()
            .map(|c| {
                let (input, labels) = mask_tokens(&c, &mut rng);
                MaskedSequence { input, labels }
            })
            .collect();
        Self {
            vocab: split.vocab.clone(),
            train,
            val,
        }
    }
}

impl Objective {
    pub fn vocab(&self) -> &Vocabulary {
        match self {
            Self::Seq2Seq(d) => &d.vocab,
            Self::Mlm(d) => &d.vocab,
        }
    }

    pub fn train_size(&self) -> usize {
        match self {
            Self::Seq2Seq(d) => d.train.len(),
            Self::Mlm(d) => d.train.len(),
        }
    }
}

/// One evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub perplexity: f64,
    pub bleu: Option<f64>,
}

pub fn evaluate(
    objective: &Objective,
    model: &Transformer,
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
) -> Result<EvalMetrics, TensorError> {
    match objective {
        Objective::Seq2Seq(d) => {
            let ppl = seq2seq_perplexity(model, store, &d.val, cfg.eval_batch_size)?;
            let n = if cfg.bleu_examples == 0 { d.val.len() } else { cfg.bleu_examples.min(d.val.len()) };
            let (bleu, _) = decode_bleu(model, store, &d.val[..n], cfg.eval_batch_size)?;
            Ok(EvalMetrics {
                eval_loss: ppl.mean_nll,
                eval_accuracy: ppl.accuracy,
                perplexity: ppl.perplexity,
                bleu: Some(bleu.bleu),
            })
        }
        Objective::Mlm(d) => {
            let ppl = mlm_perplexity(model, store, &d.val, cfg.eval_batch_size)?;
            Ok(EvalMetrics {
                eval_loss: ppl.mean_nll,
                eval_accuracy: ppl.accuracy,
                perplexity: ppl.perplexity,
                bleu: None,
            })
        }
    }
}

/// Epoch-wise shuffled index stream that can be saved and restored exactly.
#[derive(Debug, Clone)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
    rng: Rng,
    epoch_start: crate::rng::RngState,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, rng: Rng) -> Self {
        let mut b = Self {
            n,
            batch_size,
            epoch_start: rng.state(),
            rng,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        self.epoch_start = self.rng.state();
        self.order = (0..self.n).collect();
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    /// Indices of the next batch; the final batch of an epoch may be short.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.n {
            self.epoch += 1;
            self.shuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.n);
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }

    pub fn state(&self) -> BatcherState {
        BatcherState {
            epoch_rng: self.epoch_start.clone(),
            epoch: self.epoch,
            cursor: self.cursor,
        }
    }

    pub fn restore(n: usize, batch_size: usize, state: &BatcherState) -> Result<Self, CheckpointError> {
        if state.cursor > n {
            return Err(CheckpointError::Mismatch(format!(
                "batch cursor {} beyond dataset of {n}",
                state.cursor
            )));
        }
        let mut b = Self::new(n, batch_size, Rng::from_state(state.epoch_rng.clone()));
        b.epoch = state.epoch;
        b.cursor = state.cursor;
        Ok(b)
    }
}

/// One metrics row; `None` renders as an empty cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub seconds: Option<f64>,
    pub train_loss: Option<f64>,
    pub eval: Option<EvalMetrics>,
}

impl MetricsRow {
    pub fn record(&self) -> [String; 7] {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let e = self.eval;
        [
            self.step.to_string(),
            f(self.seconds),
            f(self.train_loss),
            f(e.map(|e| e.eval_loss)),
            f(e.map(|e| e.eval_accuracy)),
            f(e.map(|e| e.perplexity)),
            f(e.and_then(|e| e.bleu)),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub rows: Vec<MetricsRow>,
    pub final_eval: EvalMetrics,
    pub steps: u64,
}

impl TrainSummary {
    /// First evaluated step with validation accuracy ≥ `threshold`.
    pub fn steps_to_accuracy(&self, threshold: f64) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.eval.is_some_and(|e| e.eval_accuracy >= threshold))
            .map(|r| r.step)
    }
}

/// Model, parameters, optimizer and every RNG that influences training.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Transformer,
    pub store: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    pub cfg: TrainConfig,
    pub step: u64,
    /// Per-step training losses of this process (not restored on resume).
    pub losses: Vec<f64>,
    init_seed: u64,
    batcher: Batcher,
    dropout_rng: Rng,
    mask_rng: Rng,
    best_eval_loss: Option<f64>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, train_size: usize) -> Result<Self, TensorError> {
        cfg.validate()?;
        if train_size == 0 {
            return Err(TensorError::Config("training set is empty".into()));
        }
        let mut store = ParamStore::new();
        let init_seed = Rng::stream(cfg.seed, streams::INIT).next_u64();
        let model = Transformer::new(&mut store, model_cfg, init_seed)?;
        let optimizer = Adam::new(cfg.adam(), &store);
        Ok(Self {
            batcher: Batcher::new(train_size, cfg.batch_size, Rng::stream(cfg.seed, streams::BATCHES)),
            dropout_rng: Rng::stream(cfg.seed, streams::DROPOUT),
            mask_rng: Rng::stream(cfg.seed, streams::MLM_MASK),
            model,
            store,
            optimizer,
            cfg,
            step: 0,
            losses: Vec::new(),
            init_seed,
            best_eval_loss: None,
        })
    }

    /// Forward, backward, clip and update on the next batch. Returns the loss.
    pub fn train_step(&mut self, objective: &Objective) -> Result<f64, TrainError> {
        let idx = self.batcher.next_batch();
        let mut tape = Tape::new();
        let out = match objective {
            Objective::Seq2Seq(d) => {
                let ex: Vec<&Example> = idx.iter().map(|&i| &d.train[i]).collect();
                let pb = PairBatch::new(&ex)?;
                self.model
                    .seq2seq_forward_loss(&mut tape, &self.store, &pb.src, &pb.tgt, true, &mut self.dropout_rng)?
            }
            Objective::Mlm(d) => {
                let (inputs, labels): (Vec<_>, Vec<_>) =
                    idx.iter().map(|&i| mask_tokens(&d.train[i], &mut self.mask_rng)).unzip();
                let batch = Batch::pad(&inputs, 0)?;
                let mut flat = Vec::with_capacity(batch.ids.len());
                for l in &labels {
                    flat.extend_from_slice(l);
                    flat.resize(flat.len() + batch.len - l.len(), PAD);
                }
                self.model
                    .mlm_forward_loss(&mut tape, &self.store, &batch, &flat, true, &mut self.dropout_rng)?
            }
        };
        let loss = tape.scalar_value(out.loss) as f64;
        let grads = tape.backward(out.loss)?;
        self.store.zero_grads();
        self.store.accumulate_grads(&tape, &grads);
        clip_grad_norm(&mut self.store, self.cfg.grad_clip);
        self.optimizer.step(&mut self.store).map_err(|source| TrainError::Gradient {
            step: self.step + 1,
            source,
        })?;
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    pub fn evaluate(&self, objective: &Objective) -> Result<EvalMetrics, TensorError> {
        evaluate(objective, &self.model, &self.store, &self.cfg)
    }

    /// Run up to the configured step count, evaluating at step 0 (fresh runs),
    /// every `eval_every` steps and at the end. With `out_dir`, streams
    /// `metrics.csv` and writes `best/` and `final/` checkpoints there.
    pub fn run(&mut self, objective: &Objective, out_dir: Option<&Path>) -> Result<TrainSummary, TrainError> {
        let total = self.cfg.total_steps(objective.train_size());
        let start = Instant::now();
        let mut writer = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| output_err(dir, e))?;
                let path = dir.join("metrics.csv");
                let append = self.step > 0 && path.exists();
                let file = fs::OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(append)
                    .truncate(!append)
                    .open(&path)
                    .map_err(|e| output_err(&path, e))?;
                let mut w = csv::Writer::from_writer(file);
                if !append {
                    w.write_record(METRICS_HEADER).map_err(|e| output_err(&path, e))?;
                }
                Some((w, path))
            }
            None => None,
        };
        let mut rows = Vec::new();
        let mut window = Vec::new();
        let mut last_eval = None;
        let mut emit = |row: MetricsRow, rows: &mut Vec<MetricsRow>| -> Result<(), TrainError> {
            if let Some((w, path)) = writer.as_mut() {
                w.write_record(row.record()).map_err(|e| output_err(path, e))?;
                w.flush().map_err(|e| output_err(path, e))?;
            }
            rows.push(row);
            Ok(())
        };
        let seconds = |cfg: &TrainConfig| cfg.record_time.then(|| start.elapsed().as_secs_f64());

        if self.step == 0 {
            let e = self.evaluate(objective)?;
            self.note_eval(e, out_dir, objective)?;
            last_eval = Some(e);
            emit(MetricsRow { step: 0, seconds: seconds(&self.cfg), train_loss: None, eval: Some(e) }, &mut rows)?;
        }
        while self.step < total {
            window.push(self.train_step(objective)?);
            let s = self.step;
            let eval_now = s % self.cfg.eval_every == 0 || s == total;
            if eval_now || s % self.cfg.log_every == 0 {
                let train_loss = window.iter().sum::<f64>() / window.len() as f64;
                window.clear();
                let eval = if eval_now {
                    let e = self.evaluate(objective)?;
                    self.note_eval(e, out_dir, objective)?;
                    last_eval = Some(e);
                    Some(e)
                } else {
                    None
                };
                log::info!(
                    "step {s}/{total} train_loss {train_loss:.4}{}",
                    eval.map(|e| format!(
                        " eval_loss {:.4} acc {:.4} ppl {:.3}{}",
                        e.eval_loss,
                        e.eval_accuracy,
                        e.perplexity,
                        e.bleu.map(|b| format!(" bleu {b:.2}")).unwrap_or_default()
                    ))
                    .unwrap_or_default()
                );
                emit(MetricsRow { step: s, seconds: seconds(&self.cfg), train_loss: Some(train_loss), eval }, &mut rows)?;
            }
        }
        let final_eval = match last_eval {
            Some(e) => e,
            None => self.evaluate(objective)?,
        };
        if let Some(dir) = out_dir {
            self.checkpoint(objective.vocab()).save(&dir.join("final"))?;
        }
        Ok(TrainSummary {
            rows,
            final_eval,
            steps: self.step,
        })
    }

    fn note_eval(&mut self, e: EvalMetrics, out_dir: Option<&Path>, objective: &Objective) -> Result<(), TrainError> {
        if self.best_eval_loss.is_none_or(|b| e.eval_loss < b) {
            self.best_eval_loss = Some(e.eval_loss);
            if let Some(dir) = out_dir {
                self.checkpoint(objective.vocab()).save(&dir.join("best"))?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self, vocab: &Vocabulary) -> Checkpoint<f32> {
        let manifest = Manifest {
            format: FORMAT_VERSION.to_string(),
            step: self.step,
            model: self.model.cfg,
            vocab: vocab.tokens().to_vec(),
            init_seed: self.init_seed,
            optimizer: OptimizerMeta {
                kind: "adam".into(),
                config: self.optimizer.cfg,
                t: self.optimizer.t,
                first_moment_prefix: "adam.m/".into(),
                second_moment_prefix: "adam.v/".into(),
            },
            rng: RngStates {
                dropout: self.dropout_rng.state(),
                masking: self.mask_rng.state(),
                batches: self.batcher.state(),
            },
            best_eval_loss: self.best_eval_loss,
            tensors: Vec::new(),
        };
        let mut tensors = Vec::with_capacity(3 * self.store.len());
        for (name, t) in self.store.iter() {
            tensors.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
        }
        for (prefix, moments) in [("adam.m/", &self.optimizer.m), ("adam.v/", &self.optimizer.v)] {
            for ((name, t), m) in self.store.iter().zip(moments) {
                tensors.push((format!("{prefix}{name}"), t.shape().to_vec(), m.clone()));
            }
        }
        Checkpoint::assemble(manifest, tensors)
    }

    /// Rebuild a trainer from a checkpoint. `cfg` supplies run settings that
    /// are not part of the saved state (step budget, eval cadence…).
    pub fn from_checkpoint(ckpt: &Checkpoint<f32>, cfg: TrainConfig, train_size: usize) -> Result<Self, TrainError> {
        let m = &ckpt.manifest;
        let mut store = ParamStore::new();
        let model = Transformer::new(&mut store, m.model, m.init_seed)?;
        let mut optimizer = Adam::new(m.optimizer.config, &store);
        optimizer.t = m.optimizer.t;
        load_params(ckpt, &mut store)?;
        for (prefix, moments) in [
            (&m.optimizer.first_moment_prefix, &mut optimizer.m),
            (&m.optimizer.second_moment_prefix, &mut optimizer.v),
        ] {
            for ((name, t), slot) in store.iter().zip(moments.iter_mut()) {
                let key = format!("{prefix}{name}");
                let v = ckpt.get(&key).ok_or_else(|| CheckpointError::Mismatch(format!("missing tensor {key}")))?;
                if v.len() != t.numel() {
                    return Err(CheckpointError::Mismatch(format!("tensor {key} has {} values", v.len())).into());
                }
                slot.copy_from_slice(v);
            }
        }
        Ok(Self {
            batcher: Batcher::restore(train_size, cfg.batch_size, &m.rng.batches)?,
            dropout_rng: Rng::from_state(m.rng.dropout.clone()),
            mask_rng: Rng::from_state(m.rng.masking.clone()),
            model,
            store,
            optimizer,
            cfg,
            step: m.step,
            losses: Vec::new(),
            init_seed: m.init_seed,
            best_eval_loss: m.best_eval_loss,
        })
    }
}

/// Copy parameter values from `ckpt` into `store`, checking every name and
/// shape before writing anything.
pub fn load_params(ckpt: &Checkpoint<f32>, store: &mut ParamStore<f32>) -> Result<(), CheckpointError> {
    let mut staged = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let i = ckpt
            .manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("missing parameter {name}")))?;
        let entry = &ckpt.manifest.tensors[i];
        if entry.shape != t.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "parameter {name} has shape {:?} in the checkpoint but {:?} in the model",
                entry.shape,
                t.shape()
            )));
        }
        staged.push(i);
    }
    for ((_, t), i) in store.tensors_mut().zip(staged) {
        t.data_mut().copy_from_slice(&ckpt.values[i]);
    }
    Ok(())
}

/// Rebuild the model described by a checkpoint with its saved parameters.
pub fn model_from_checkpoint(ckpt: &Checkpoint<f32>) -> Result<(Transformer, ParamStore<f32>, Vocabulary), TrainError> {
    let m = &ckpt.manifest;
    let vocab = Vocabulary::try_from(m.vocab.clone())?;
    if vocab.len() != m.model.vocab_size {
        return Err(CheckpointError::Mismatch(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            m.model.vocab_size
        ))
        .into());
    }
    let mut store = ParamStore::new();
    let model = Transformer::new(&mut store, m.model, m.init_seed)?;
    load_params(ckpt, &mut store)?;
    Ok((model, store, vocab))
}

fn output_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Output {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}
