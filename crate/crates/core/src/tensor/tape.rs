//! Wengert-style tape: every primitive appends a node holding its output
//! value and whatever it needs for the backward rule. `backward` walks the
//! nodes once, in reverse recording order.

use std::collections::HashMap;

use super::kernels::{self, axpy, dot, softmax_in_place};
use super::{AttentionMask, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Result, TensorError};
use crate::rng::Rng;

/// Additive logit for forbidden attention positions.
pub const MASK_LOGIT: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberately wrong backward rules, used to prove the gradient checker
/// notices mistakes.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// ReLU passes gradient through negative inputs too.
    Relu,
    /// LayerNorm drops the `x̂·mean(dx̂·x̂)` term.
    LayerNorm,
    /// Attention softmax backward drops the row-sum correction.
    Attention,
}

/// Batch layout of a fused multi-head attention call. Query rows are
/// `batch × q_len`, key/value rows `batch × kv_len`; the feature width is
/// split into `heads` contiguous column slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionGeometry {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
}

enum Op<S: Scalar> {
    Input,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBias(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Dropout(Var, Vec<S>),
    Sum(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows(Var, Vec<usize>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        probs: Vec<S>,
        drop: Option<Vec<S>>,
    },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], kept for leaf nodes only.
pub struct Gradients<S: Scalar> {
    by_node: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&[S]> {
        self.by_node.get(var.0).and_then(|g| g.as_deref())
    }

    /// Accumulate the gradient of `var` into `tensor.grad`.
    pub fn write_to(&self, var: Var, tensor: &mut Tensor<S>) {
        if let Some(g) = self.get(var) {
            tensor.accumulate_grad(g);
        }
    }
}

pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
    fault: Option<BackwardFault>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let numel: usize = shape.iter().product();
    (numel / cols.max(1), cols)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims2(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded node shape")
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<S>, op: Op<S>) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Input | Op::Param => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<S>) -> Vec<Var> {
        match op {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::Dropout(a, _)
            | Op::Sum(a)
            | Op::GatherRows(a, _) => vec![*a],
            Op::SliceCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatCols(vs) => vs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    /// Record a constant or a differentiable leaf (`requires_grad`).
    pub fn input(&mut self, t: &Tensor<S>) -> Result<Var> {
        if !t.is_finite() {
            return Err(TensorError::NonFiniteInput { op: "input" });
        }
        let var = self.push("input", t.shape().to_vec(), t.data().to_vec(), Op::Input)?;
        self.nodes[var.0].needs_grad = t.requires_grad;
        Ok(var)
    }

    /// Record a parameter leaf; repeated calls for the same id share a node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                detail: format!("expected a matrix, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![S::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale(a, c))
    }

    /// Add a bias row to every row of `a`: the only broadcast supported.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims2(a);
        if self.shape(bias) != [cols] {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        self.push("add_bias", self.shape(a).to_vec(), out, Op::AddBias(a, bias))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > S::ZERO { x } else { S::ZERO })
            .collect();
        self.push("relu", self.shape(a).to_vec(), out, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFiniteInput { op: "softmax_rows" });
        }
        let (_, cols) = self.dims2(a);
        let mut out = self.value(a).to_vec();
        out.chunks_mut(cols).for_each(softmax_in_place);
        self.push("softmax_rows", self.shape(a).to_vec(), out, Op::SoftmaxRows(a))
    }

    /// Row-wise LayerNorm over the last dimension with biased variance and
    /// `eps` inside the square root, followed by `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, h) = self.dims2(x);
        if self.shape(gamma) != [h] || self.shape(beta) != [h] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let eps = S::of(eps);
        let inv_h = S::ONE / S::of(h as f64);
        let (g, b, xv) = (self.value(gamma), self.value(beta), self.value(x));
        let mut xhat = vec![S::ZERO; rows * h];
        let mut rstd = vec![S::ZERO; rows];
        let mut out = vec![S::ZERO; rows * h];
        for r in 0..rows {
            let row = &xv[r * h..(r + 1) * h];
            let mean = row.iter().copied().sum::<S>() * inv_h;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_h;
            let rs = S::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..h {
                let xh = (row[j] - mean) * rs;
                xhat[r * h + j] = xh;
                out[r * h + j] = g[j] * xh + b[j];
            }
        }
        self.push(
            "layer_norm",
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Inverted dropout. Identity when not training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        check_dropout_p(p)?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = S::of(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < p { S::ZERO } else { keep_scale })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.push("dropout", self.shape(x).to_vec(), out, Op::Dropout(x, mask))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum::<S>();
        self.push("sum", vec![1], vec![s], Op::Sum(a))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Invalid {
                op: "embedding",
                detail: format!("id {bad} outside vocabulary of {vocab}"),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding",
                detail: "no ids".into(),
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        self.push(
            "embedding",
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(a);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                detail: format!("row index out of range for {n} rows or empty selection"),
            });
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&x[r * d..(r + 1) * d]);
        }
        self.push("gather_rows", vec![rows.len(), d], out, Op::GatherRows(a, rows.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if width == 0 || start + width > cols {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                detail: format!("columns {start}..{} out of {cols}", start + width),
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + width]);
        }
        self.push("slice_cols", vec![rows, width], out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.dims2(p).0).ok_or(TensorError::Invalid {
            op: "concat_cols",
            detail: "nothing to concatenate".into(),
        })?;
        for &p in parts {
            if self.dims2(p).0 != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let w = self.dims2(p).1;
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        self.push("concat_cols", vec![rows, total], out, Op::ConcatCols(parts.to_vec()))
    }

    /// Mean negative log-softmax over rows whose target differs from
    /// `ignore_id`. Returns the scalar loss and the number of contributing rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<(Var, usize)> {
        let (n, vocab) = self.dims2(logits);
        if targets.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut tg = Vec::with_capacity(n);
        for &t in targets {
            if t == ignore_id {
                tg.push(None);
            } else if t < vocab {
                tg.push(Some(t));
            } else {
                return Err(TensorError::Invalid {
                    op: "cross_entropy",
                    detail: format!("target {t} outside vocabulary of {vocab}"),
                });
            }
        }
        let count = tg.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::EmptyMean { op: "cross_entropy" });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f64;
        for (r, t) in tg.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            if let Some(t) = *t {
                let max = row.iter().fold(row[0], |m, &v| m.max(v));
                let lse = row.iter().map(|&v| (v - max).f64().exp()).sum::<f64>().ln() + max.f64();
                total += lse - row[t].f64();
            }
            softmax_in_place(row);
        }
        let loss = S::of(total / count as f64);
        let var = self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: tg,
                probs,
                count,
            },
        )?;
        Ok((var, count))
    }

    /// Fused scaled dot-product attention over a batch of sequences and
    /// heads: per (element, head), `softmax(Q Kᵀ / √d_k + M) V`, where `M` is
    /// 0 on allowed positions and `MASK_LOGIT` elsewhere. With `dropout`,
    /// attention weights are dropped after the softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        mask: Option<&AttentionMask>,
        dropout: Option<(f64, &mut Rng)>,
    ) -> Result<Var> {
        let AttentionGeometry {
            batch,
            q_len: n,
            kv_len: m,
            heads,
        } = geom;
        let (qr, width) = self.dims2(q);
        let (kr, kw) = self.dims2(k);
        let (vr, vw) = self.dims2(v);
        if heads == 0 || width % heads != 0 || vw % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                detail: format!("{heads} heads do not divide widths {width}/{vw}"),
            });
        }
        if qr != batch * n || kr != batch * m || vr != batch * m || kw != width {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if let Some(mk) = mask {
            if mk.batch() != batch || mk.q_len() != n || mk.kv_len() != m {
                return Err(TensorError::Shape {
                    op: "attention_mask",
                    lhs: vec![batch, n, m],
                    rhs: vec![mk.batch(), mk.q_len(), mk.kv_len()],
                });
            }
        }
        let dk = width / heads;
        let dv = vw / heads;
        let scale = S::of(1.0 / (dk as f64).sqrt());
        let neg = S::of(MASK_LOGIT);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![S::ZERO; batch * heads * n * m];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..n {
                    let qi = &qv[(b * n + i) * width + h * dk..][..dk];
                    let row = &mut probs[((b * heads + h) * n + i) * m..][..m];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kv[(b * m + j) * width + h * dk..][..dk];
                        *s = dot(qi, kj) * scale;
                    }
                    if let Some(mk) = mask {
                        for (s, &ok) in row.iter_mut().zip(mk.row(b, i)) {
                            if !ok {
                                *s += neg;
                            }
                        }
                    }
                    softmax_in_place(row);
                }
            }
        }
        let drop = match dropout {
            Some((p, rng)) if p > 0.0 => {
                check_dropout_p(p)?;
                let keep = S::of(1.0 / (1.0 - p));
                Some(
                    (0..probs.len())
                        .map(|_| if rng.uniform() < p { S::ZERO } else { keep })
                        .collect::<Vec<S>>(),
                )
            }
            Some((p, _)) => {
                check_dropout_p(p)?;
                None
            }
            None => None,
        };
        let mut out = vec![S::ZERO; batch * n * vw];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..n {
                    let base = ((b * heads + h) * n + i) * m;
                    let orow = &mut out[(b * n + i) * vw + h * dv..][..dv];
                    for j in 0..m {
                        let mut w = probs[base + j];
                        if let Some(d) = &drop {
                            w *= d[base + j];
                        }
                        axpy(w, &vv[(b * m + j) * vw + h * dv..][..dv], orow);
                    }
                }
            }
        }
        self.push(
            "attention",
            vec![batch * n, vw],
            out,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
                drop,
            },
        )
    }

    /// Post-softmax attention weights of a recorded attention node, laid out
    /// as `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.shape(loss) != [1] {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::ONE]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let is_leaf = matches!(node.op, Op::Input | Op::Param);
            if is_leaf || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { by_node: grads })
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(a) {
                    let da = slot(grads, *a, m * k);
                    kernels::matmul_nt_acc(g, self.value(*b), da, m, n, k);
                }
                if wants(b) {
                    let db = slot(grads, *b, k * n);
                    kernels::matmul_tn_acc(self.value(*a), g, db, k, m, n);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let da = slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if wants(x) {
                        let d = slot(grads, *x, g.len());
                        d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = self.value(*b);
                    let d = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if wants(b) {
                    let av = self.value(*a);
                    let d = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let d = slot(grads, *a, g.len());
                d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *c);
            }
            Op::AddBias(a, bias) => {
                let cols = self.shape(*bias)[0];
                if wants(a) {
                    let d = slot(grads, *a, g.len());
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                if wants(bias) {
                    let d = slot(grads, *bias, cols);
                    for row in g.chunks(cols) {
                        d.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let leak = self.fault == Some(BackwardFault::Relu);
                let d = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] > S::ZERO || leak {
                        d[i] += g[i];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                let d = slot(grads, *a, g.len());
                for r in 0..g.len() / cols {
                    let (yr, gr) = (&y[r * cols..][..cols], &g[r * cols..][..cols]);
                    let dotv = dot(yr, gr);
                    for j in 0..cols {
                        d[r * cols + j] += yr[j] * (gr[j] - dotv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let h = self.shape(*gamma)[0];
                let rows = g.len() / h;
                if wants(gamma) {
                    let dg = slot(grads, *gamma, h);
                    for r in 0..rows {
                        for j in 0..h {
                            dg[j] += g[r * h + j] * xhat[r * h + j];
                        }
                    }
                }
                if wants(beta) {
                    let db = slot(grads, *beta, h);
                    for r in 0..rows {
                        for j in 0..h {
                            db[j] += g[r * h + j];
                        }
                    }
                }
                if wants(x) {
                    let gam = self.value(*gamma);
                    let inv_h = S::ONE / S::of(h as f64);
                    let drop_term = self.fault == Some(BackwardFault::LayerNorm);
                    let dx = slot(grads, *x, g.len());
                    let mut dxhat = vec![S::ZERO; h];
                    for r in 0..rows {
                        let xh = &xhat[r * h..][..h];
                        let mut mean_d = S::ZERO;
                        let mut mean_dx = S::ZERO;
                        for j in 0..h {
                            dxhat[j] = g[r * h + j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d *= inv_h;
                        mean_dx *= inv_h;
                        if drop_term {
                            mean_dx = S::ZERO;
                        }
                        for j in 0..h {
                            dx[r * h + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let d = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * mask[i];
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let d = slot(grads, *a, n);
                d.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Embedding { table, ids } => {
                let (vocab, dm) = self.dims2(*table);
                let d = slot(grads, *table, vocab * dm);
                for (r, &id) in ids.iter().enumerate() {
                    d[id * dm..(id + 1) * dm]
                        .iter_mut()
                        .zip(&g[r * dm..(r + 1) * dm])
                        .for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::GatherRows(a, rows) => {
                let (n, dm) = self.dims2(*a);
                let d = slot(grads, *a, n * dm);
                for (i, &r) in rows.iter().enumerate() {
                    d[r * dm..(r + 1) * dm]
                        .iter_mut()
                        .zip(&g[i * dm..(i + 1) * dm])
                        .for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.dims2(*x);
                let w = node.shape[1];
                let d = slot(grads, *x, rows * cols);
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for p in parts {
                    let w = self.dims2(*p).1;
                    if wants(p) {
                        let d = slot(grads, *p, rows * w);
                        for r in 0..rows {
                            d[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + w])
                                .for_each(|(d, &gv)| *d += gv);
                        }
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (_, vocab) = self.dims2(*logits);
                let coef = g[0] / S::of(*count as f64);
                let d = slot(grads, *logits, probs.len());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = &mut d[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            row[j] += coef * probs[r * vocab + j];
                        }
                        row[t] -= coef;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
                drop,
            } => self.attention_backward(*q, *k, *v, *geom, probs, drop.as_deref(), g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        probs: &[S],
        drop: Option<&[S]>,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let AttentionGeometry {
            batch,
            q_len: n,
            kv_len: m,
            heads,
        } = geom;
        let width = self.dims2(q).1;
        let vw = self.dims2(v).1;
        let (dk, dv) = (width / heads, vw / heads);
        let scale = S::of(1.0 / (dk as f64).sqrt());
        let skip_rowsum = self.fault == Some(BackwardFault::Attention);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![S::ZERO; qv.len()];
        let mut dkb = vec![S::ZERO; kv.len()];
        let mut dvb = vec![S::ZERO; vv.len()];
        let mut dp = vec![S::ZERO; m];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..n {
                    let base = ((b * heads + h) * n + i) * m;
                    let p = &probs[base..base + m];
                    let go = &g[(b * n + i) * vw + h * dv..][..dv];
                    for j in 0..m {
                        let voff = (b * m + j) * vw + h * dv;
                        let keep = drop.map_or(S::ONE, |d| d[base + j]);
                        dp[j] = dot(go, &vv[voff..voff + dv]) * keep;
                        axpy(p[j] * keep, go, &mut dvb[voff..voff + dv]);
                    }
                    let rowsum = if skip_rowsum { S::ZERO } else { dot(&dp, p) };
                    let qoff = (b * n + i) * width + h * dk;
                    for j in 0..m {
                        let ds = p[j] * (dp[j] - rowsum) * scale;
                        if ds == S::ZERO {
                            continue;
                        }
                        let koff = (b * m + j) * width + h * dk;
                        axpy(ds, &kv[koff..koff + dk], &mut dq[qoff..qoff + dk]);
                        axpy(ds, &qv[qoff..qoff + dk], &mut dkb[koff..koff + dk]);
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dkb), (v, dvb)] {
            if self.nodes[var.0].needs_grad {
                let d = slot(grads, var, buf.len());
                d.iter_mut().zip(&buf).for_each(|(d, &x)| *d += x);
            }
        }
    }
}

fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Config(format!("dropout probability must be in [0, 1), got {p}")));
    }
    Ok(())
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::ZERO; len])
}
