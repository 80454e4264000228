//! Pre-norm transformer encoder and encoder-decoder built from
//! [`MultiHeadAttention`] blocks.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, MultiHeadAttention, ProjectionConfig, SequenceLayout};
use crate::data::{Batch, BOS, EOS, PAD};
use crate::error::{Result, TensorError};
use crate::layers::{init_with_std, LayerNorm, Linear};
use crate::rng::Rng;
use crate::tensor::{AttentionMask, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Encoder,
    EncoderDecoder,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::EncoderDecoder => "encoder-decoder",
        }
    }
}

fn d_model() -> usize {
    64
}
fn num_layers() -> usize {
    2
}
fn num_heads() -> usize {
    4
}
fn d_ff() -> usize {
    256
}
fn dropout_p() -> f64 {
    0.1
}
fn max_seq_len() -> usize {
    64
}
fn architecture() -> Architecture {
    Architecture::EncoderDecoder
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "num_layers")]
    pub num_layers: usize,
    #[serde(default = "num_heads")]
    pub num_heads: usize,
    #[serde(default = "d_ff")]
    pub d_ff: usize,
    #[serde(default = "dropout_p")]
    pub dropout_p: f64,
    #[serde(default = "max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "architecture")]
    pub architecture: Architecture,
    #[serde(default = "yes")]
    pub positional_encoding: bool,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub projection: ProjectionConfig,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, architecture: Architecture) -> Self {
        Self {
            vocab_size,
            d_model: d_model(),
            num_layers: num_layers(),
            num_heads: num_heads(),
            d_ff: d_ff(),
            dropout_p: dropout_p(),
            max_seq_len: max_seq_len(),
            architecture,
            positional_encoding: true,
            tie_embeddings: false,
            projection: ProjectionConfig::default(),
        }
    }

    fn attention(&self, causal: bool) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            num_heads: self.num_heads,
            dropout_p: self.dropout_p,
            projection: self.projection,
            causal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 6 {
            return Err(TensorError::Config(format!("vocab_size must be at least 6 (got {})", self.vocab_size)));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(TensorError::Config("d_ff and max_seq_len must be positive".into()));
        }
        self.attention(false).validate()
    }

    /// Closed-form number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let ln = 2 * d;
        let ff = Linear::parameter_count(d, self.d_ff, true) + Linear::parameter_count(self.d_ff, d, true);
        let attn = self.attention(false).parameter_count();
        let mut total = self.vocab_size * d;
        total += self.num_layers * (2 * ln + attn + ff) + ln;
        if self.architecture == Architecture::EncoderDecoder {
            total += self.num_layers * (3 * ln + 2 * attn + ff) + ln;
        }
        total += if self.tie_embeddings {
            self.vocab_size
        } else {
            Linear::parameter_count(d, self.vocab_size, true)
        };
        total
    }
}

/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(…)`.
pub fn sinusoidal_table(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

#[derive(Debug, Clone, PartialEq)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.down.forward(tape, store, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
enum OutputHead {
    Untied(Linear),
    Tied { bias: ParamId },
}

/// Token embeddings start at the same scale as the positional encodings.
pub const EMBED_STD: f64 = 1.0;

/// Init stream of one module, keyed by its name. Resizing one module leaves
/// the initial values of the others untouched.
fn module_rng(base: u64, name: &str) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    Rng::stream(base, h)
}

/// Gradients flow into `store`; the model only holds parameter handles.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub cfg: ModelConfig,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Option<LayerNorm>,
    head: OutputHead,
    pe: Vec<f64>,
}

/// Mean loss plus the counts needed for accuracy.
#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub loss: Var,
    pub logits: Var,
    pub correct: usize,
    pub count: usize,
}

impl Transformer {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = {
            let mut rng = module_rng(seed, "embed");
            store.add("embed.tokens", init_with_std(&mut rng, cfg.vocab_size, d, EMBED_STD))
        };
        let ff = |store: &mut ParamStore<S>, name: &str| FeedForward {
            up: Linear::new(store, &format!("{name}.ff1"), d, cfg.d_ff, true, &mut module_rng(seed, &format!("{name}.ff1"))),
            down: Linear::new(store, &format!("{name}.ff2"), cfg.d_ff, d, true, &mut module_rng(seed, &format!("{name}.ff2"))),
        };
        let attn = |store: &mut ParamStore<S>, name: &str, causal: bool| {
            MultiHeadAttention::new(store, name, cfg.attention(causal), &mut module_rng(seed, name))
        };
        let mut encoder = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let n = format!("enc.{i}");
            encoder.push(EncoderLayer {
                ln1: LayerNorm::new(store, &format!("{n}.ln1"), d),
                attn: attn(store, &format!("{n}.self_attn"), false)?,
                ln2: LayerNorm::new(store, &format!("{n}.ln2"), d),
                ff: ff(store, &n),
            });
        }
        let enc_norm = LayerNorm::new(store, "enc.ln_f", d);
        let mut decoder = Vec::new();
        let mut dec_norm = None;
        if cfg.architecture == Architecture::EncoderDecoder {
            for i in 0..cfg.num_layers {
                let n = format!("dec.{i}");
                decoder.push(DecoderLayer {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d),
                    self_attn: attn(store, &format!("{n}.self_attn"), true)?,
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d),
                    cross_attn: attn(store, &format!("{n}.cross_attn"), false)?,
                    ln3: LayerNorm::new(store, &format!("{n}.ln3"), d),
                    ff: ff(store, &n),
                });
            }
            dec_norm = Some(LayerNorm::new(store, "dec.ln_f", d));
        }
        let head = if cfg.tie_embeddings {
            OutputHead::Tied {
                bias: store.add("out.b", Tensor::zeros(vec![cfg.vocab_size])),
            }
        } else {
            OutputHead::Untied(Linear::new(store, "out", d, cfg.vocab_size, true, &mut module_rng(seed, "out")))
        };
        Ok(Self {
            cfg,
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            head,
            pe: sinusoidal_table(cfg.max_seq_len, d),
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.len > self.cfg.max_seq_len {
            return Err(TensorError::Invalid {
                op: "transformer",
                detail: format!("sequence length {} exceeds max_seq_len {}", batch.len, self.cfg.max_seq_len),
            });
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(TensorError::Invalid {
                op: "transformer",
                detail: format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size),
            });
        }
        Ok(())
    }

    /// Token embedding plus positional encoding, then dropout.
    fn embed<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        batch: &Batch,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let table = tape.param(store, self.embed);
        let mut x = tape.embedding(table, &batch.ids)?;
        if self.cfg.positional_encoding {
            let d = self.cfg.d_model;
            let mut pe = Vec::with_capacity(batch.ids.len() * d);
            for _ in 0..batch.batch {
                pe.extend(self.pe[..batch.len * d].iter().map(|&v| S::of(v)));
            }
            let pe = tape.input(&Tensor::new(vec![batch.ids.len(), d], pe)?)?;
            x = tape.add(x, pe)?;
        }
        tape.dropout(x, self.cfg.dropout_p, rng, training)
    }

    fn residual_branch<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, branch: Var, training: bool, rng: &mut Rng) -> Result<Var> {
        let b = tape.dropout(branch, self.cfg.dropout_p, rng, training)?;
        tape.add(x, b)
    }

    /// Residual stream after the encoder layers, `[batch·len × d_model]`,
    /// before the final LayerNorm. Keys at `PAD` positions are masked.
    pub fn encoder_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        ids: &Batch,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let mut x = self.embed(tape, store, ids, training, rng)?;
        let mask = key_mask(ids, ids.len, false)?;
        let layout = SequenceLayout {
            batch: ids.batch,
            q_len: ids.len,
            kv_len: ids.len,
        };
        for layer in &self.encoder {
            let h = layer.ln1.forward(tape, store, x)?;
            let a = layer.attn.forward(tape, store, h, h, layout, Some(&mask), training, rng)?;
            x = self.residual_branch(tape, x, a, training, rng)?;
            let h = layer.ln2.forward(tape, store, x)?;
            let f = layer.ff.forward(tape, store, h)?;
            x = self.residual_branch(tape, x, f, training, rng)?;
        }
        Ok(x)
    }

    /// Normalized encoder output, used as cross-attention memory.
    pub fn encode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        src: &Batch,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let x = self.encoder_forward(tape, store, src, training, rng)?;
        self.enc_norm.forward(tape, store, x)
    }

    fn logits<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, h: Var) -> Result<Var> {
        match &self.head {
            OutputHead::Untied(lin) => lin.forward(tape, store, h),
            OutputHead::Tied { bias } => {
                let table = tape.param(store, self.embed);
                let t = tape.transpose(table)?;
                let y = tape.matmul(h, t)?;
                let b = tape.param(store, *bias);
                tape.add_bias(y, b)
            }
        }
    }

    /// Encoder-only logits `[batch·len × vocab]`.
    pub fn mlm_logits<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        ids: &Batch,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let h = self.encode(tape, store, ids, training, rng)?;
        self.logits(tape, store, h)
    }

    /// Cross-entropy over positions whose label is not `PAD`.
    pub fn mlm_forward_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        input: &Batch,
        labels: &[usize],
        training: bool,
        rng: &mut Rng,
    ) -> Result<LossOutput> {
        if labels.len() != input.ids.len() {
            return Err(TensorError::Shape {
                op: "mlm_forward_loss",
                lhs: vec![input.batch, input.len],
                rhs: vec![labels.len()],
            });
        }
        if labels.iter().all(|&l| l == PAD) {
            return Err(TensorError::Invalid {
                op: "mlm_forward_loss",
                detail: "no masked positions".into(),
            });
        }
        let logits = self.mlm_logits(tape, store, input, training, rng)?;
        finish_loss(tape, logits, labels)
    }

    /// Decoder logits for teacher-forced input `tgt_in` against `memory`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_logits<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        memory: Var,
        src: &Batch,
        tgt_in: &Batch,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let dec_norm = self.dec_norm.as_ref().ok_or_else(|| TensorError::Config("model has no decoder".into()))?;
        let mut x = self.embed(tape, store, tgt_in, training, rng)?;
        let self_mask = key_mask(tgt_in, tgt_in.len, true)?;
        let cross_mask = key_mask(src, tgt_in.len, false)?;
        let self_layout = SequenceLayout {
            batch: tgt_in.batch,
            q_len: tgt_in.len,
            kv_len: tgt_in.len,
        };
        let cross_layout = SequenceLayout {
            batch: tgt_in.batch,
            q_len: tgt_in.len,
            kv_len: src.len,
        };
        for layer in &self.decoder {
            let h = layer.ln1.forward(tape, store, x)?;
            let a = layer.self_attn.forward(tape, store, h, h, self_layout, Some(&self_mask), training, rng)?;
            x = self.residual_branch(tape, x, a, training, rng)?;
            let h = layer.ln2.forward(tape, store, x)?;
            let c = layer
                .cross_attn
                .forward(tape, store, h, memory, cross_layout, Some(&cross_mask), training, rng)?;
            x = self.residual_branch(tape, x, c, training, rng)?;
            let h = layer.ln3.forward(tape, store, x)?;
            let f = layer.ff.forward(tape, store, h)?;
            x = self.residual_branch(tape, x, f, training, rng)?;
        }
        let h = dec_norm.forward(tape, store, x)?;
        self.logits(tape, store, h)
    }

    /// Teacher-forced loss on `tgt = BOS y… EOS`: the decoder reads all but
    /// the last position and predicts all but the first.
    pub fn seq2seq_forward_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        src: &Batch,
        tgt: &Batch,
        training: bool,
        rng: &mut Rng,
    ) -> Result<LossOutput> {
        if src.batch != tgt.batch {
            return Err(TensorError::Shape {
                op: "seq2seq_forward_loss",
                lhs: vec![src.batch, src.len],
                rhs: vec![tgt.batch, tgt.len],
            });
        }
        let (tgt_in, labels) = shift_target(tgt)?;
        let memory = self.encode(tape, store, src, training, rng)?;
        let logits = self.decode_logits(tape, store, memory, src, &tgt_in, training, rng)?;
        finish_loss(tape, logits, &labels)
    }

    /// Greedy decoding in eval mode. Each output excludes BOS and stops
    /// before EOS; sequences without EOS are cut at `max_len` tokens.
    pub fn greedy_decode<S: Scalar>(&self, store: &ParamStore<S>, src: &Batch, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let memory = self.encode(&mut tape, store, src, false, &mut rng)?;
        let mut rows: Vec<Vec<usize>> = vec![vec![BOS]; src.batch];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); src.batch];
        let mut done = vec![false; src.batch];
        let steps = max_len.min(self.cfg.max_seq_len);
        for _ in 0..steps {
            if done.iter().all(|&d| d) {
                break;
            }
            let tgt_in = Batch::pad(&rows, 0)?;
            let logits = self.decode_logits(&mut tape, store, memory, src, &tgt_in, false, &mut rng)?;
            let vocab = self.cfg.vocab_size;
            let values = tape.value(logits);
            let t = tgt_in.len - 1;
            for b in 0..src.batch {
                let off = (b * tgt_in.len + t) * vocab;
                let next = argmax(&values[off..off + vocab]);
                if !done[b] {
                    if next == EOS {
                        done[b] = true;
                    } else {
                        out[b].push(next);
                    }
                }
                // Finished rows keep a constant input so the batch stays rectangular.
                rows[b].push(if done[b] { EOS } else { next });
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn finish_loss<S: Scalar>(tape: &mut Tape<S>, logits: Var, labels: &[usize]) -> Result<LossOutput> {
    let (loss, count) = tape.cross_entropy(logits, labels, PAD)?;
    let vocab = tape.dims2(logits).1;
    let values = tape.value(logits);
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| l != PAD && argmax(&values[r * vocab..(r + 1) * vocab]) == l)
        .count();
    Ok(LossOutput {
        loss,
        logits,
        correct,
        count,
    })
}

/// Split `BOS y… EOS` rows into decoder input and per-position labels (`PAD`
/// where ignored).
pub fn shift_target(tgt: &Batch) -> Result<(Batch, Vec<usize>)> {
    if tgt.len < 2 {
        return Err(TensorError::Invalid {
            op: "seq2seq_forward_loss",
            detail: "target needs at least BOS and EOS".into(),
        });
    }
    let mut inputs = Vec::with_capacity(tgt.batch);
    let mut labels = Vec::with_capacity(tgt.batch * (tgt.len - 1));
    for b in 0..tgt.batch {
        let seq = tgt.sequence(b);
        if seq.len() < 2 || seq[0] != BOS || seq[seq.len() - 1] != EOS {
            return Err(TensorError::Invalid {
                op: "seq2seq_forward_loss",
                detail: format!("target row {b} must start with BOS and end with EOS"),
            });
        }
        inputs.push(seq[..seq.len() - 1].to_vec());
        let mut l = seq[1..].to_vec();
        l.resize(tgt.len - 1, PAD);
        labels.extend(l);
    }
    let tgt_in = Batch::pad(&inputs, tgt.len - 1)?;
    Ok((tgt_in, labels))
}

/// Allow key `j` of element `b` when it is not `PAD` (and `j ≤ i` when causal).
fn key_mask(keys: &Batch, q_len: usize, causal: bool) -> Result<AttentionMask> {
    let mut allow = Vec::with_capacity(keys.batch * q_len * keys.len);
    for b in 0..keys.batch {
        let row = keys.row(b);
        for i in 0..q_len {
            allow.extend(row.iter().enumerate().map(|(j, &t)| t != PAD && (!causal || j <= i)));
        }
    }
    AttentionMask::new(keys.batch, q_len, keys.len, allow)
}
