//! Parameter-holding building blocks shared by attention and the models.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

pub(crate) fn init_weight<S: Scalar>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<S> {
    init_with_std(rng, rows, cols, INIT_STD)
}

pub(crate) fn init_with_std<S: Scalar>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor<S> {
    let data = (0..rows * cols)
        .map(|_| S::of(rng.truncated_normal(std)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("weight shape")
}

/// `y = x·W + b` with `W: [d_in × d_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_weight(rng, d_in, d_out));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![d_out])));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn parameter_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }
}

/// Learnable affine LayerNorm (`gamma = 1`, `beta = 0` at init).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![width], S::ONE));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![width]));
        Self { gamma, beta }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}
