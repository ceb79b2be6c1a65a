//! Central finite-difference checks for tape gradients.
//!
//! The numerical side only ever runs forward passes, so it is independent of
//! every backward closure it checks.

use super::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn eval<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Analytic gradients of the scalar `f` with respect to every input.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Vec<Tensor>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect()
}

/// Central difference of `f` at one coordinate.
pub fn numeric_partial<F>(inputs: &[Tensor], f: &F, input: usize, index: usize, step: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut shifted = inputs.to_vec();
    let x0 = inputs[input].data()[index];
    shifted[input].data_mut()[index] = x0 + step;
    let plus = eval(&shifted, f);
    shifted[input].data_mut()[index] = x0 - step;
    let minus = eval(&shifted, f);
    (plus - minus) / (2.0 * step)
}

fn compare(coords: &[(usize, usize)], analytic: &[Tensor], numeric: &[f64]) -> GradReport {
    let mut report = GradReport {
        checked: coords.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
    };
    for (&(i, j), &n) in coords.iter().zip(numeric) {
        let a = analytic[i].data()[j];
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((i, j, a, n));
        }
    }
    report
}

/// Check every coordinate of every input.
pub fn check_gradient<F>(inputs: &[Tensor], f: F, step: f64) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    check_at(inputs, f, step, &coords)
}

/// Check `count` coordinates drawn uniformly from the inputs listed in
/// `which` (all inputs when empty).
pub fn check_gradient_sampled<F, R>(
    inputs: &[Tensor],
    f: F,
    step: f64,
    which: &[usize],
    count: usize,
    rng: &mut R,
) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
    R: Rng,
{
    let pool: Vec<usize> = if which.is_empty() {
        (0..inputs.len()).collect()
    } else {
        which.to_vec()
    };
    let coords: Vec<(usize, usize)> = (0..count)
        .map(|_| {
            let i = pool[rng.random_range(0..pool.len())];
            (i, rng.random_range(0..inputs[i].len()))
        })
        .collect();
    check_at(inputs, f, step, &coords)
}

/// Check an explicit list of `(input, flat index)` coordinates.
pub fn check_at<F>(inputs: &[Tensor], f: F, step: f64, coords: &[(usize, usize)]) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let analytic = analytic_gradients(inputs, &f);
    let numeric: Vec<f64> = coords
        .iter()
        .map(|&(i, j)| numeric_partial(inputs, &f, i, j, step))
        .collect();
    compare(coords, &analytic, &numeric)
}

/// Standard-normal entries, for test inputs.
pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

/// Reduce a tensor to a scalar through fixed weights (typically drawn with
/// [`random_tensor`] outside the closure), so that every output entry
/// influences the checked loss.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(x, w);
    tape.sum(p)
}
