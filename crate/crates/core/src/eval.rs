//! Corpus BLEU, perplexity and token accuracy.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Example, PairBatch, BOS, EOS, PAD};
use crate::error::{Result, TensorError};
use crate::model::{argmax, Transformer};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Scalar, Tape};

pub const MAX_ORDER: usize = 4;

/// Description of the BLEU variant, included in reports.
pub const BLEU_METHOD: &str = "corpus-level, whitespace tokens, n = 1..4, clipped counts, single reference, no smoothing";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches pooled over the corpus. Any order with no matches
/// (or no candidate n-grams) makes the score 0.
pub fn corpus_bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(TensorError::Invalid {
            op: "corpus_bleu",
            detail: "no candidates".into(),
        });
    }
    if candidates.len() != references.len() {
        return Err(TensorError::Invalid {
            op: "corpus_bleu",
            detail: format!("{} candidates but {} references", candidates.len(), references.len()),
        });
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0, 0);
    for (cand, refr) in candidates.iter().zip(references) {
        c += cand.len();
        r += refr.len();
        for n in 1..=MAX_ORDER {
            let ref_counts = ngram_counts(refr, n);
            for (gram, count) in ngram_counts(cand, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp().min(1.0)
    };
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    } else {
        0.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        candidate_length: c,
        reference_length: r,
    })
}

/// Drop `PAD`, `BOS` and `EOS`.
pub fn strip_specials(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&t| t != PAD && t != BOS && t != EOS).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub mean_nll: f64,
    pub perplexity: f64,
    pub positions: usize,
    pub accuracy: f64,
}

/// Running negative log-likelihood and argmax hits, accumulated in `f64`.
#[derive(Debug, Clone, Default)]
pub struct NllAccumulator {
    nll: f64,
    correct: usize,
    positions: usize,
}

impl NllAccumulator {
    /// Score rows of `logits` (`[rows × vocab]`) whose label is not `PAD`.
    pub fn add<S: Scalar>(&mut self, logits: &[S], vocab: usize, labels: &[usize]) {
        for (r, &label) in labels.iter().enumerate() {
            if label == PAD {
                continue;
            }
            let row = &logits[r * vocab..(r + 1) * vocab];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let lse = row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln() + max;
            self.nll += lse - row[label].f64();
            self.correct += usize::from(argmax(row) == label);
            self.positions += 1;
        }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn report(&self) -> Result<PerplexityReport> {
        if self.positions == 0 {
            return Err(TensorError::EmptyMean { op: "perplexity" });
        }
        let mean_nll = self.nll / self.positions as f64;
        Ok(PerplexityReport {
            mean_nll,
            perplexity: mean_nll.exp(),
            positions: self.positions,
            accuracy: self.correct as f64 / self.positions as f64,
        })
    }
}

/// A masked-LM evaluation set: corrupted inputs with labels (`PAD` where
/// not predicted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Teacher-forced NLL and accuracy over non-`PAD` target positions, in
/// dataset order.
pub fn seq2seq_perplexity<S: Scalar>(
    model: &Transformer,
    store: &ParamStore<S>,
    examples: &[Example],
    batch_size: usize,
) -> Result<PerplexityReport> {
    let mut acc = NllAccumulator::default();
    let mut rng = Rng::new(0);
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let pb = PairBatch::new(&refs)?;
        let mut tape = Tape::new();
        let out = model.seq2seq_forward_loss(&mut tape, store, &pb.src, &pb.tgt, false, &mut rng)?;
        let (_, labels) = crate::model::shift_target(&pb.tgt)?;
        acc.add(tape.value(out.logits), model.cfg.vocab_size, &labels);
    }
    acc.report()
}

/// Masked-position NLL and accuracy, in dataset order.
pub fn mlm_perplexity<S: Scalar>(
    model: &Transformer,
    store: &ParamStore<S>,
    data: &[MaskedSequence],
    batch_size: usize,
) -> Result<PerplexityReport> {
    let mut acc = NllAccumulator::default();
    let mut rng = Rng::new(0);
    for chunk in data.chunks(batch_size.max(1)) {
        let inputs: Vec<Vec<usize>> = chunk.iter().map(|m| m.input.clone()).collect();
        let batch = Batch::pad(&inputs, 0)?;
        let mut labels = Vec::with_capacity(batch.ids.len());
        for m in chunk {
            labels.extend_from_slice(&m.labels);
            labels.resize(labels.len() + batch.len - m.labels.len(), PAD);
        }
        let mut tape = Tape::new();
        let logits = model.mlm_logits(&mut tape, store, &batch, false, &mut rng)?;
        acc.add(tape.value(logits), model.cfg.vocab_size, &labels);
    }
    acc.report()
}

/// Fraction of predicted positions whose argmax matches the label.
pub fn token_accuracy<S: Scalar>(
    model: &Transformer,
    store: &ParamStore<S>,
    examples: &[Example],
    batch_size: usize,
) -> Result<f64> {
    seq2seq_perplexity(model, store, examples, batch_size).map(|r| r.accuracy)
}

/// Greedy translations of `examples`, scored against their targets. Every
/// row may run to one past the longest target in the set.
pub fn decode_bleu<S: Scalar>(
    model: &Transformer,
    store: &ParamStore<S>,
    examples: &[Example],
    batch_size: usize,
) -> Result<(BleuReport, Vec<Vec<usize>>)> {
    let max_len = examples.iter().map(|e| e.tgt.len()).max().unwrap_or(0) + 1;
    let mut hyps = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let pb = PairBatch::new(&refs)?;
        hyps.extend(model.greedy_decode(store, &pb.src, max_len)?);
    }
    let cands: Vec<Vec<usize>> = hyps.iter().map(|h| strip_specials(h)).collect();
    let refs: Vec<Vec<usize>> = examples.iter().map(|e| strip_specials(&e.tgt)).collect();
    Ok((corpus_bleu(&cands, &refs)?, hyps))
}
