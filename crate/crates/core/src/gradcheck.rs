//! Central-difference gradient checking in `f64`.
//!
//! Numerical derivatives only evaluate the forward pass, so they are
//! independent of every backward rule on the tape.

use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Worst disagreement found inside one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl GroupReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn loss_value(f: &mut impl FnMut(&mut Tape<f64>) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = f(&mut tape)?;
    Ok(tape.scalar_value(loss))
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> GroupReport {
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
    }
    GroupReport {
        name: name.to_string(),
        numel: analytic.len(),
        max_rel_error: worst.0,
        worst_index: worst.1,
    }
}

/// Check every parameter of `store` against central differences of the
/// scalar loss built by `build`.
pub fn check_params<F>(store: &mut ParamStore<f64>, step: f64, mut build: F) -> Result<Vec<GroupReport>>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    store.accumulate_grads(&tape, &grads);

    let mut reports = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let numel = store.get(id).numel();
        let analytic = store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; numel]);
        let mut numeric = vec![0.0; numel];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let plus = {
                let s = &*store;
                loss_value(&mut |t| build(t, s))?
            };
            store.get_mut(id).data_mut()[i] = orig - step;
            let minus = {
                let s = &*store;
                loss_value(&mut |t| build(t, s))?
            };
            store.get_mut(id).data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        reports.push(compare(store.name(id), &analytic, &numeric));
    }
    Ok(reports)
}

/// Check the gradients with respect to free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, mut build: F) -> Result<Vec<GroupReport>>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut record = |tape: &mut Tape<f64>, ts: &[Tensor<f64>]| -> Result<(Vec<Var>, Var)> {
        let vars = ts
            .iter()
            .map(|t| tape.input(&t.clone().with_grad()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(tape, &vars)?;
        Ok((vars, loss))
    };
    let mut tape = Tape::new();
    let (vars, loss) = record(&mut tape, inputs)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut reports = Vec::new();
    for (k, var) in vars.iter().enumerate() {
        let numel = work[k].numel();
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        let mut numeric = vec![0.0; numel];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = loss_value(&mut |t| record(t, &work).map(|(_, l)| l))?;
            work[k].data_mut()[i] = orig - step;
            let minus = loss_value(&mut |t| record(t, &work).map(|(_, l)| l))?;
            work[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        reports.push(compare(&format!("input{k}"), &analytic, &numeric));
    }
    Ok(reports)
}

/// Largest error across reports.
pub fn max_error(reports: &[GroupReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_unit_floor() {
        assert_eq!(relative_error(1e-7, 0.0), 1e-7);
        assert!((relative_error(100.0, 101.0) - 1.0 / 101.0).abs() < 1e-15);
    }
}
