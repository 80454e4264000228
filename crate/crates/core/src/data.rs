//! Vocabulary, synthetic sequence tasks, char-level corpus handling, batching
//! and the plain-text dataset file format.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::rng::{streams, Rng};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<mask>", "<unk>"];

/// The shipped public-domain corpus (a Shakespeare play, ~100 KB).
pub const SHIPPED_CORPUS: &str = include_str!("../data/tempest.txt");

/// Token ↔ id table with the five special ids fixed at 0..5.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials followed by `tokens` in the given order.
    pub fn with_tokens<I, T>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::try_from(all)
    }

    /// `size` ids in total: the specials and tokens `t0`, `t1`, ….
    pub fn synthetic(size: usize) -> Result<Self> {
        if size <= NUM_SPECIAL {
            return Err(TensorError::Config(format!(
                "vocab size must be at least {} (got {size})",
                NUM_SPECIAL + 1
            )));
        }
        Self::with_tokens((0..size - NUM_SPECIAL).map(|i| format!("t{i}")))
    }

    /// One token per distinct character of `text`, sorted by code point.
    pub fn from_corpus(text: &str) -> Self {
        let mut chars: Vec<char> = text.chars().collect::<HashSet<_>>().into_iter().collect();
        chars.sort_unstable();
        Self::with_tokens(chars.into_iter().map(String::from)).expect("distinct characters")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-special tokens.
    pub fn content_size(&self) -> usize {
        self.tokens.len() - NUM_SPECIAL
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Space-separated rendering.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = TensorError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(TensorError::Config("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(TensorError::Config(format!("duplicate token {t:?} in vocabulary")));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Per-character ids; characters outside the vocabulary map to `UNK`.
pub fn char_tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    let mut buf = [0u8; 4];
    text.chars()
        .map(|c| vocab.id(c.encode_utf8(&mut buf)).unwrap_or(UNK))
        .collect()
}

pub fn char_detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter().map(|&i| vocab.token(i)).collect()
}

/// Row-major padded id matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl Batch {
    /// Pad `rows` with `PAD` to the longest row (or `min_len`, if larger).
    pub fn pad(rows: &[Vec<usize>], min_len: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "batch",
                detail: "no sequences".into(),
            });
        }
        let len = rows.iter().map(Vec::len).max().unwrap_or(0).max(min_len);
        if len == 0 {
            return Err(TensorError::Invalid {
                op: "batch",
                detail: "all sequences are empty".into(),
            });
        }
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r);
            ids.resize(ids.len() + len - r.len(), PAD);
        }
        Ok(Self {
            ids,
            batch: rows.len(),
            len,
            lengths: rows.iter().map(Vec::len).collect(),
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    /// The unpadded part of row `b`.
    pub fn sequence(&self, b: usize) -> &[usize] {
        &self.row(b)[..self.lengths[b]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Reversal,
    Copy,
    CharMlm,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Self::Reversal => "reversal",
            Self::Copy => "copy",
            Self::CharMlm => "char-mlm",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reversal" => Ok(Self::Reversal),
            "copy" => Ok(Self::Copy),
            "char-mlm" => Ok(Self::CharMlm),
            other => Err(TensorError::Config(format!(
                "unknown task {other:?} (expected reversal, copy or char-mlm)"
            ))),
        }
    }
}

fn default_task() -> Task {
    Task::Reversal
}
fn default_vocab() -> usize {
    20
}
fn default_min_len() -> usize {
    4
}
fn default_max_len() -> usize {
    12
}
fn default_train() -> usize {
    20_000
}
fn default_val() -> usize {
    1_000
}
fn default_seed() -> u64 {
    42
}

/// Parameters of a generated dataset. For `char-mlm`, lengths are chunk
/// lengths in characters, `vocab_size` is ignored, and `num_val` is unused:
/// the last 10% of the corpus is held out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_train")]
    pub num_train: usize,
    #[serde(default = "default_val")]
    pub num_val: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            task: default_task(),
            vocab_size: default_vocab(),
            min_len: default_min_len(),
            max_len: default_max_len(),
            num_train: default_train(),
            num_val: default_val(),
            seed: default_seed(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(TensorError::Config(format!(
                "need 1 <= min_len <= max_len (got {}..{})",
                self.min_len, self.max_len
            )));
        }
        if self.task != Task::CharMlm {
            if self.vocab_size <= NUM_SPECIAL {
                return Err(TensorError::Config(format!(
                    "vocab size must be at least {} (got {})",
                    NUM_SPECIAL + 1,
                    self.vocab_size
                )));
            }
            let space = self.sequence_space();
            if (self.num_val as u128) > space {
                return Err(TensorError::Config(format!(
                    "{} validation examples requested but only {space} distinct sequences exist",
                    self.num_val
                )));
            }
            if self.num_train > 0 && (self.num_val as u128) == space {
                return Err(TensorError::Config(
                    "validation set exhausts the sequence space; no training sequences remain".into(),
                ));
            }
        }
        Ok(())
    }

    /// Distinct source sequences with lengths in `[min_len, max_len]`
    /// (saturating).
    pub fn sequence_space(&self) -> u128 {
        let c = self.vocab_size.saturating_sub(NUM_SPECIAL) as u128;
        let mut total: u128 = 0;
        for len in self.min_len..=self.max_len {
            let n = u32::try_from(len)
                .ok()
                .and_then(|l| c.checked_pow(l))
                .unwrap_or(u128::MAX);
            total = total.saturating_add(n);
        }
        total
    }
}

/// A source/target pair of content ids (no BOS/EOS).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seq2SeqData {
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

fn random_sequence(rng: &mut Rng, spec: &DatasetSpec) -> Vec<usize> {
    let len = rng.range_inclusive(spec.min_len, spec.max_len);
    let c = (spec.vocab_size - NUM_SPECIAL) as u64;
    (0..len).map(|_| NUM_SPECIAL + rng.below(c) as usize).collect()
}

impl Example {
    /// Pair `src` with its reversal (or a copy, for every other task).
    pub fn new(task: Task, src: Vec<usize>) -> Self {
        let tgt = match task {
            Task::Reversal => src.iter().rev().copied().collect(),
            _ => src.clone(),
        };
        Self { src, tgt }
    }
}

/// Reversal or copy pairs. The validation set is drawn first from its own
/// stream without repeats; training sources never coincide with a
/// validation source.
pub fn generate_seq2seq(spec: &DatasetSpec) -> Result<Seq2SeqData> {
    spec.validate()?;
    if spec.task == Task::CharMlm {
        return Err(TensorError::Config("char-mlm is not a sequence-pair task".into()));
    }
    let vocab = Vocabulary::synthetic(spec.vocab_size)?;
    let mut seen = HashSet::with_capacity(spec.num_val);
    let mut val = Vec::with_capacity(spec.num_val);
    let mut rng = Rng::stream(spec.seed, streams::DATA_VAL);
    while val.len() < spec.num_val {
        let s = random_sequence(&mut rng, spec);
        if seen.insert(s.clone()) {
            val.push(Example::new(spec.task, s));
        }
    }
    let mut rng = Rng::stream(spec.seed, streams::DATA_TRAIN);
    let mut train = Vec::with_capacity(spec.num_train);
    while train.len() < spec.num_train {
        let s = random_sequence(&mut rng, spec);
        if !seen.contains(&s) {
            train.push(Example::new(spec.task, s));
        }
    }
    Ok(Seq2SeqData { vocab, train, val })
}

/// Char-level corpus split: the last tenth (at a line boundary) is held out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub vocab: Vocabulary,
    pub train_text: String,
    pub val_text: String,
}

pub fn split_corpus(text: &str) -> Result<CorpusSplit> {
    let text = text.replace("\r\n", "\n");
    if text.chars().count() < 20 {
        return Err(TensorError::Config("corpus too small to split".into()));
    }
    let target = text.len() * 9 / 10;
    let cut = text[target..].find('\n').map_or(target, |p| target + p + 1);
    let cut = (0..=cut).rev().find(|&i| text.is_char_boundary(i)).unwrap_or(0);
    let (train, val) = text.split_at(cut);
    Ok(CorpusSplit {
        vocab: Vocabulary::from_corpus(train),
        train_text: train.to_string(),
        val_text: val.to_string(),
    })
}

/// Consecutive non-overlapping chunks of `len` ids; a trailing remainder of
/// at least two ids is kept as a shorter chunk.
pub fn chunk(ids: &[usize], len: usize) -> Vec<Vec<usize>> {
    ids.chunks(len.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

pub const MASK_RATE: f64 = 0.15;

/// Replace ~15% of the non-special positions by `MASK` (at least one).
/// Returns the corrupted input and per-position labels, `PAD` where the
/// position is not predicted.
pub fn mask_tokens(ids: &[usize], rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut input = ids.to_vec();
    let mut labels = vec![PAD; ids.len()];
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] >= NUM_SPECIAL).collect();
    for &i in &candidates {
        if rng.bernoulli(MASK_RATE) {
            labels[i] = ids[i];
            input[i] = MASK;
        }
    }
    if !candidates.is_empty() && labels.iter().all(|&l| l == PAD) {
        let i = candidates[rng.below(candidates.len() as u64) as usize];
        labels[i] = ids[i];
        input[i] = MASK;
    }
    (input, labels)
}

/// Split `0..n` into consecutive groups of `batch_size`, after an optional
/// shuffle. The last group may be short.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut Rng, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(TensorError::Invalid {
            op: "make_batches",
            detail: "empty dataset".into(),
        });
    }
    if batch_size == 0 {
        return Err(TensorError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn make_batches(sequences: &[Vec<usize>], batch_size: usize, rng: &mut Rng, shuffle: bool) -> Result<Vec<Batch>> {
    batch_indices(sequences.len(), batch_size, rng, shuffle)?
        .into_iter()
        .map(|idx| {
            let rows: Vec<Vec<usize>> = idx.iter().map(|&i| sequences[i].clone()).collect();
            Batch::pad(&rows, 0)
        })
        .collect()
}

/// Encoder input `src EOS`, decoder sequence `BOS tgt EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub src: Batch,
    pub tgt: Batch,
}

impl PairBatch {
    pub fn new(examples: &[&Example]) -> Result<Self> {
        let src: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| e.src.iter().copied().chain([EOS]).collect())
            .collect();
        let tgt: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| [BOS].into_iter().chain(e.tgt.iter().copied()).chain([EOS]).collect())
            .collect();
        Ok(Self {
            src: Batch::pad(&src, 0)?,
            tgt: Batch::pad(&tgt, 0)?,
        })
    }
}

fn invalid_line(path: &Path, line: usize, detail: impl std::fmt::Display) -> TensorError {
    TensorError::Config(format!("{}:{line}: {detail}", path.display()))
}

fn io_error(path: &Path, e: std::io::Error) -> TensorError {
    TensorError::Config(format!("{}: {e}", path.display()))
}

/// One `source TAB target` line per example, tokens separated by spaces.
pub fn write_pairs(path: &Path, examples: &[Example], vocab: &Vocabulary) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        writeln!(w, "{}\t{}", vocab.render(&e.src), vocab.render(&e.tgt)).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn read_pairs(path: &Path, vocab: &Vocabulary) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_error(path, e))?;
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| invalid_line(path, n + 1, "expected source<TAB>target"))?;
        let parse = |s: &str| -> Result<Vec<usize>> {
            s.split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    vocab
                        .id(t)
                        .filter(|&i| i >= NUM_SPECIAL)
                        .ok_or_else(|| invalid_line(path, n + 1, format!("unknown token {t:?}")))
                })
                .collect()
        };
        out.push(Example {
            src: parse(src)?,
            tgt: parse(tgt)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn special_ids_are_fixed() {
        let v = Vocabulary::synthetic(8).unwrap();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("t0"), Some(NUM_SPECIAL));
        assert_eq!(v.len(), 8);
        assert!(Vocabulary::synthetic(5).is_err());
    }

    #[test]
    fn corpus_split_holds_out_the_tail() {
        let text = "abc\n".repeat(100);
        let s = split_corpus(&text).unwrap();
        assert_eq!(format!("{}{}", s.train_text, s.val_text), text);
        assert!(s.train_text.ends_with('\n'));
        assert!(s.val_text.len() * 8 < text.len());
    }
}
