//! Multi-head attention with interchangeable query/key/value projections.
//!
//! Each of the three roles is computed by one of:
//!
//! * `standard`: a single affine map `x·W + b`;
//! * `dlp` (dual linear projection): `LayerNorm(x·W1 + b1)·W2 + b2`, with a
//!   hidden width of `expansion · d_model`;
//! * `neural`: the same two-layer map with a ReLU after the LayerNorm,
//!   `ReLU(LayerNorm(x·W1 + b1))·W2 + b2`.
//!
//! All three produce a full `d_model`-wide output that is split into heads
//! afterwards, and the output projection is the same affine map for every
//! kind.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::layers::{Linear, LayerNorm};
use crate::rng::Rng;
use crate::tensor::{AttentionGeometry, AttentionMask, ParamStore, Scalar, Tape, Tensor, Var, MASK_LOGIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProjectionKind {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "dlp")]
    DualLinear,
    #[serde(rename = "neural")]
    NeuralMlp,
}

impl ProjectionKind {
    pub const ALL: [ProjectionKind; 3] = [Self::Standard, Self::DualLinear, Self::NeuralMlp];

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::DualLinear => "dlp",
            Self::NeuralMlp => "neural",
        }
    }
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProjectionKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "dlp" => Ok(Self::DualLinear),
            "neural" => Ok(Self::NeuralMlp),
            other => Err(TensorError::Config(format!(
                "unknown projection kind {other:?} (expected standard, dlp or neural)"
            ))),
        }
    }
}

/// Which roles a preset replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionScope {
    /// Keys and values only; queries stay standard.
    Kv,
    /// Queries, keys and values.
    Qkv,
}

impl FromStr for ProjectionScope {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kv" => Ok(Self::Kv),
            "qkv" => Ok(Self::Qkv),
            other => Err(TensorError::Config(format!("unknown projection scope {other:?} (expected kv or qkv)"))),
        }
    }
}

fn default_expansion() -> usize {
    2
}

fn default_true() -> bool {
    true
}

/// Per-role projection choice shared by every attention block of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub q: ProjectionKind,
    pub k: ProjectionKind,
    pub v: ProjectionKind,
    /// Hidden width multiplier of the two-layer projections.
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    /// Bias on standard projections.
    #[serde(default = "default_true")]
    pub bias: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self::uniform(ProjectionKind::Standard)
    }
}

impl ProjectionConfig {
    pub fn uniform(kind: ProjectionKind) -> Self {
        Self {
            q: kind,
            k: kind,
            v: kind,
            expansion: default_expansion(),
            bias: true,
        }
    }

    /// Keys and values use `kind`, queries stay standard.
    pub fn keys_values(kind: ProjectionKind) -> Self {
        Self {
            q: ProjectionKind::Standard,
            ..Self::uniform(kind)
        }
    }

    pub fn preset(kind: ProjectionKind, scope: ProjectionScope) -> Self {
        match scope {
            ProjectionScope::Kv => Self::keys_values(kind),
            ProjectionScope::Qkv => Self::uniform(kind),
        }
    }

    /// The kind that is not `standard`, if any role uses one.
    pub fn headline_kind(&self) -> ProjectionKind {
        [self.k, self.v, self.q]
            .into_iter()
            .find(|k| *k != ProjectionKind::Standard)
            .unwrap_or(ProjectionKind::Standard)
    }

    pub fn roles(&self) -> [(&'static str, ProjectionKind); 3] {
        [("q", self.q), ("k", self.k), ("v", self.v)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.expansion == 0 {
            return Err(TensorError::Config("projection expansion must be positive".into()));
        }
        Ok(())
    }

    /// Scalars in one role's projection at width `d_model`.
    pub fn role_parameter_count(&self, kind: ProjectionKind, d_model: usize) -> usize {
        let h = self.expansion * d_model;
        match kind {
            ProjectionKind::Standard => Linear::parameter_count(d_model, d_model, self.bias),
            ProjectionKind::DualLinear | ProjectionKind::NeuralMlp => {
                d_model * h + h + 2 * h + h * d_model + d_model
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub dropout_p: f64,
    pub projection: ProjectionConfig,
    pub causal: bool,
}

impl AttentionConfig {
    pub fn new(d_model: usize, num_heads: usize, projection: ProjectionConfig) -> Self {
        Self {
            d_model,
            num_heads,
            dropout_p: 0.0,
            projection,
            causal: false,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(TensorError::Config(format!(
                "num_heads ({}) must divide d_model ({})",
                self.num_heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(TensorError::Config(format!("dropout must be in [0, 1), got {}", self.dropout_p)));
        }
        self.projection.validate()
    }

    /// Closed-form scalar count of one attention block.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let p = &self.projection;
        p.roles()
            .iter()
            .map(|&(_, kind)| p.role_parameter_count(kind, d))
            .sum::<usize>()
            + Linear::parameter_count(d, d, true)
    }
}

/// Two-layer projection; `use_relu` distinguishes `neural` from `dlp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpProjection {
    pub first: Linear,
    pub norm: LayerNorm,
    pub second: Linear,
    pub use_relu: bool,
    pub expansion: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Standard(Linear),
    DualLinear(MlpProjection),
    NeuralMlp(MlpProjection),
}

impl Projection {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        kind: ProjectionKind,
        cfg: &ProjectionConfig,
        d_model: usize,
        rng: &mut Rng,
    ) -> Self {
        match kind {
            ProjectionKind::Standard => Self::Standard(Linear::new(store, name, d_model, d_model, cfg.bias, rng)),
            ProjectionKind::DualLinear | ProjectionKind::NeuralMlp => {
                let h = cfg.expansion * d_model;
                let first = Linear::new(store, &format!("{name}.w1"), d_model, h, true, rng);
                let norm = LayerNorm::new(store, &format!("{name}.ln"), h);
                let second = Linear::new(store, &format!("{name}.w2"), h, d_model, true, rng);
                let use_relu = kind == ProjectionKind::NeuralMlp;
                let mlp = MlpProjection {
                    first,
                    norm,
                    second,
                    use_relu,
                    expansion: cfg.expansion,
                };
                if use_relu {
                    Self::NeuralMlp(mlp)
                } else {
                    Self::DualLinear(mlp)
                }
            }
        }
    }

    pub fn kind(&self) -> ProjectionKind {
        match self {
            Self::Standard(_) => ProjectionKind::Standard,
            Self::DualLinear(_) => ProjectionKind::DualLinear,
            Self::NeuralMlp(_) => ProjectionKind::NeuralMlp,
        }
    }
}

/// Apply a projection row-wise to `x: [n × d_model]`.
pub fn project<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>, p: &Projection, x: Var) -> Result<Var> {
    match p {
        Projection::Standard(lin) => {
            check_width(tape, x, lin.d_in)?;
            lin.forward(tape, store, x)
        }
        Projection::DualLinear(mlp) | Projection::NeuralMlp(mlp) => {
            check_width(tape, x, mlp.first.d_in)?;
            let hidden = mlp.first.forward(tape, store, x)?;
            let normed = mlp.norm.forward(tape, store, hidden)?;
            let act = if mlp.use_relu { tape.relu(normed)? } else { normed };
            mlp.second.forward(tape, store, act)
        }
    }
}

fn check_width<S: Scalar>(tape: &Tape<S>, x: Var, d: usize) -> Result<()> {
    let (_, cols) = tape.dims2(x);
    if cols != d {
        return Err(TensorError::Shape {
            op: "project",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![d],
        });
    }
    Ok(())
}

/// `softmax(Q·Kᵀ/√d_k + M)·V` for one sequence, composed from primitive
/// tape operations. `mask` must have batch size 1.
pub fn scaled_dot_product_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let (n, dk) = tape.dims2(q);
    let (m, dk2) = tape.dims2(k);
    let (mv, _) = tape.dims2(v);
    if dk != dk2 || m != mv {
        return Err(TensorError::Shape {
            op: "scaled_dot_product_attention",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let mut scores = tape.scale(raw, S::of(1.0 / (dk as f64).sqrt()))?;
    if let Some(mask) = mask {
        if mask.batch() != 1 || mask.q_len() != n || mask.kv_len() != m {
            return Err(TensorError::Shape {
                op: "scaled_dot_product_attention",
                lhs: vec![1, n, m],
                rhs: vec![mask.batch(), mask.q_len(), mask.kv_len()],
            });
        }
        let mut add = Vec::with_capacity(n * m);
        for i in 0..n {
            add.extend(
                mask.row(0, i)
                    .iter()
                    .map(|&ok| if ok { S::ZERO } else { S::of(MASK_LOGIT) }),
            );
        }
        let bias = tape.input(&Tensor::new(vec![n, m], add)?)?;
        scores = tape.add(scores, bias)?;
    }
    let weights = tape.softmax_rows(scores)?;
    tape.matmul(weights, v)
}

/// Sequence layout of a multi-head call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: AttentionConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let p = cfg.projection;
        // One init stream per role.
        let base = rng.next_u64();
        let role = |tag: u64| Rng::stream(base, tag);
        let q = Projection::new(store, &format!("{name}.q"), p.q, &p, d, &mut role(1));
        let k = Projection::new(store, &format!("{name}.k"), p.k, &p, d, &mut role(2));
        let v = Projection::new(store, &format!("{name}.v"), p.v, &p, d, &mut role(3));
        let out = Linear::new(store, &format!("{name}.o"), d, d, true, &mut role(4));
        Ok(Self { cfg, q, k, v, out })
    }

    /// `x_q: [batch·q_len × d_model]`, `x_kv: [batch·kv_len × d_model]`.
    /// Attention-weight dropout is applied when `training`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x_q: Var,
        x_kv: Var,
        layout: SequenceLayout,
        mask: Option<&AttentionMask>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let q = project(tape, store, &self.q, x_q)?;
        let k = project(tape, store, &self.k, x_kv)?;
        let v = project(tape, store, &self.v, x_kv)?;
        let geom = AttentionGeometry {
            batch: layout.batch,
            q_len: layout.q_len,
            kv_len: layout.kv_len,
            heads: self.cfg.num_heads,
        };
        let dropout = (training && self.cfg.dropout_p > 0.0).then_some((self.cfg.dropout_p, rng));
        let ctx = tape.attention(q, k, v, geom, mask, dropout)?;
        self.out.forward(tape, store, ctx)
    }

    /// Same computation as `forward` (without dropout), assembled from
    /// per-element, per-head calls to [`scaled_dot_product_attention`].
    /// Returns one `[q_len × d_model]` output per batch element.
    pub fn forward_reference<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x_q: Var,
        x_kv: Var,
        layout: SequenceLayout,
        mask: Option<&AttentionMask>,
    ) -> Result<Vec<Var>> {
        let q = project(tape, store, &self.q, x_q)?;
        let k = project(tape, store, &self.k, x_kv)?;
        let v = project(tape, store, &self.v, x_kv)?;
        let dk = self.cfg.d_k();
        let mut outputs = Vec::with_capacity(layout.batch);
        for b in 0..layout.batch {
            let qrows: Vec<usize> = (b * layout.q_len..(b + 1) * layout.q_len).collect();
            let krows: Vec<usize> = (b * layout.kv_len..(b + 1) * layout.kv_len).collect();
            let qb = tape.gather_rows(q, &qrows)?;
            let kb = tape.gather_rows(k, &krows)?;
            let vb = tape.gather_rows(v, &krows)?;
            let elem_mask = match mask {
                Some(mk) => {
                    let mut allow = Vec::with_capacity(layout.q_len * layout.kv_len);
                    for i in 0..layout.q_len {
                        allow.extend_from_slice(mk.row(b, i));
                    }
                    Some(AttentionMask::new(1, layout.q_len, layout.kv_len, allow)?)
                }
                None => None,
            };
            let mut heads = Vec::with_capacity(self.cfg.num_heads);
            for h in 0..self.cfg.num_heads {
                let qh = tape.slice_cols(qb, h * dk, dk)?;
                let kh = tape.slice_cols(kb, h * dk, dk)?;
                let vh = tape.slice_cols(vb, h * dk, dk)?;
                heads.push(scaled_dot_product_attention(tape, qh, kh, vh, elem_mask.as_ref())?);
            }
            let ctx = tape.concat_cols(&heads)?;
            outputs.push(self.out.forward(tape, store, ctx)?);
        }
        Ok(outputs)
    }
}
