//! Central finite-difference gradient checking.

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `|a - n| / max(|a| + |n|, tiny)` over the concatenated gradient vector.
    pub rel_error: f64,
    pub max_abs_diff: f64,
}

/// Compares `Tape::backward` against central differences with step
/// `h = 1e-5 * max(1, |w|)` for every value in `store`.
pub fn check_gradients<F>(store: &ParamStore, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = store.clone();
    for id in 0..store.len() {
        let n = store.get(id).numel();
        match grads.get(id) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
        for j in 0..n {
            let w = store.get(id).data()[j];
            let h = 1e-5 * w.abs().max(1.0);
            probe.get_mut(id).data_mut()[j] = w + h;
            let up = eval(&probe, &f)?;
            probe.get_mut(id).data_mut()[j] = w - h;
            let down = eval(&probe, &f)?;
            probe.get_mut(id).data_mut()[j] = w;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm_a: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_n: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let max_abs_diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    Ok(GradCheck {
        rel_error: diff / (norm_a + norm_n).max(1e-12),
        max_abs_diff,
    })
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = f(&mut tape, store)?;
    Ok(tape.value(v).item())
}
