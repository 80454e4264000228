//! f64 central-difference checks of every projection kind, on one attention
//! block and on a full one-layer encoder-decoder loss.

use std::fmt::Write as _;

use nalab::attention::{AttentionConfig, MultiHeadAttention, ProjectionConfig, ProjectionKind, SequenceLayout};
use nalab::data::{Batch, BOS, EOS};
use nalab::gradcheck::{check_inputs, check_params, GroupReport};
use nalab::model::{Architecture, ModelConfig, Transformer};
use nalab::tensor::{AttentionMask, BackwardFault};
use nalab::{ParamStore, Rng, Tensor};
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub kinds: [bool; 3],
    pub d_model: usize,
    pub heads: usize,
    pub step: f64,
    pub tolerance: f64,
    pub fault: Option<BackwardFault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            kinds: [true; 3],
            d_model: 8,
            heads: 2,
            step: nalab::gradcheck::DEFAULT_STEP,
            tolerance: nalab::gradcheck::DEFAULT_TOLERANCE,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub kind: ProjectionKind,
    pub block: &'static str,
    pub group: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub tolerance: f64,
    pub step: f64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<9} {:<10} {:<28} {:>6} {:>12}  status\n", "kind", "block", "group", "numel", "max_rel_err");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<9} {:<10} {:<28} {:>6} {:>12.3e}  {}",
                r.kind.name(),
                r.block,
                r.group,
                r.numel,
                r.max_rel_error,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
        s
    }

    /// Failing groups, worst first.
    pub fn worst_offenders(&self, n: usize) -> Vec<&GradcheckRow> {
        let mut bad: Vec<&GradcheckRow> = self.rows.iter().filter(|r| !r.passed).collect();
        bad.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        bad.truncate(n);
        bad
    }
}

const PERTURB: f64 = 0.2;
const BATCH: usize = 2;
const SEQ: usize = 5;

/// Push parameters well away from their near-zero init.
fn perturb(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = Rng::new(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.normal() * PERTURB;
        }
    }
}

fn random_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor<f64>, CliError> {
    Ok(Tensor::from_f64(vec![rows, cols], &(0..rows * cols).map(|_| rng.normal()).collect::<Vec<_>>())?)
}

fn attention_block(kind: ProjectionKind, o: &GradcheckOptions) -> Result<Vec<GroupReport>, CliError> {
    let d = o.d_model;
    let mut cfg = AttentionConfig::new(d, o.heads, ProjectionConfig::uniform(kind));
    cfg.dropout_p = 0.0;
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "attn", cfg, &mut Rng::new(11))?;
    perturb(&mut store, 12);
    let mut rng = Rng::new(13);
    let x = random_tensor(BATCH * SEQ, d, &mut rng)?;
    let w = random_tensor(BATCH * SEQ, d, &mut rng)?;
    let mask = AttentionMask::from_key_lengths(&[SEQ, 3], SEQ, SEQ, false)?;
    let layout = SequenceLayout {
        batch: BATCH,
        q_len: SEQ,
        kv_len: SEQ,
    };
    let fault = o.fault;
    let build = |tape: &mut nalab::Tape<f64>, s: &ParamStore<f64>, xv: nalab::Var| {
        tape.inject_fault(fault);
        let out = mha.forward(tape, s, xv, xv, layout, Some(&mask), false, &mut Rng::new(0))?;
        let wv = tape.input(&w)?;
        let p = tape.mul(out, wv)?;
        tape.sum(p)
    };
    let mut reports = check_params(&mut store, o.step, |tape, s| {
        let xv = tape.input(&x)?;
        build(tape, s, xv)
    })?;
    let inputs = check_inputs(std::slice::from_ref(&x), o.step, |tape, vars| build(tape, &store, vars[0]))?;
    reports.extend(inputs.into_iter().map(|mut r| {
        r.name = "input".into();
        r
    }));
    Ok(reports)
}

fn full_model(kind: ProjectionKind, o: &GradcheckOptions) -> Result<Vec<GroupReport>, CliError> {
    let cfg = ModelConfig {
        d_model: o.d_model,
        num_layers: 1,
        num_heads: o.heads,
        d_ff: 2 * o.d_model,
        dropout_p: 0.0,
        max_seq_len: 16,
        projection: ProjectionConfig::uniform(kind),
        ..ModelConfig::new(10, Architecture::EncoderDecoder)
    };
    let mut store = ParamStore::<f64>::new();
    let model = Transformer::new(&mut store, cfg, 21)?;
    perturb(&mut store, 22);
    let src = Batch::pad(&[vec![5, 6, 7, 8, EOS], vec![9, 5, EOS]], 0)?;
    let tgt = Batch::pad(&[vec![BOS, 8, 7, 6, 5, EOS], vec![BOS, 5, 9, EOS]], 0)?;
    let fault = o.fault;
    Ok(check_params(&mut store, o.step, |tape, s| {
        tape.inject_fault(fault);
        Ok(model.seq2seq_forward_loss(tape, s, &src, &tgt, false, &mut Rng::new(0))?.loss)
    })?)
}

pub fn run(o: &GradcheckOptions) -> Result<GradcheckSummary, CliError> {
    if o.d_model == 0 || o.heads == 0 || o.d_model % o.heads != 0 {
        return Err(CliError::config("d_model must be a positive multiple of the head count"));
    }
    if !(o.step > 0.0 && o.tolerance > 0.0) {
        return Err(CliError::config("step and tolerance must be positive"));
    }
    let mut rows = Vec::new();
    for (kind, on) in ProjectionKind::ALL.into_iter().zip(o.kinds) {
        if !on {
            continue;
        }
        type Check = fn(ProjectionKind, &GradcheckOptions) -> Result<Vec<GroupReport>, CliError>;
        for (block, check) in [("attention", attention_block as Check), ("model", full_model as Check)] {
            for r in check(kind, o)? {
                rows.push(GradcheckRow {
                    kind,
                    block,
                    passed: r.passes(o.tolerance),
                    group: r.name,
                    numel: r.numel,
                    max_rel_error: r.max_rel_error,
                });
            }
        }
    }
    Ok(GradcheckSummary {
        tolerance: o.tolerance,
        step: o.step,
        rows,
    })
}
