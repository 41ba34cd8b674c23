//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass, so it is
//! independent of the gradient rules it validates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, flat index)` of the coordinate with the largest error.
    pub worst: Option<(usize, usize)>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `f` against central differences with step `h`.
///
/// `f` receives a fresh tape and one leaf per input and must return a
/// scalar. When `sample` is `Some(k)`, only `k` randomly chosen coordinates
/// (across all inputs) are checked.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64, sample: Option<usize>, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient populated"))
        .collect();

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    if let Some(k) = sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(k);
    }

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut worst: f64 = 0.0;
    let mut worst_at = None;
    let mut work = inputs.to_vec();
    for &(i, j) in &coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i].data()[j], numeric, 1e-6);
        if worst_at.is_none() || err > worst {
            worst = err;
            worst_at = Some((i, j));
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked: coords.len(),
        worst: worst_at,
    })
}

/// Central difference of `f` along one input coordinate.
pub fn central_difference<F>(f: F, inputs: &[Tensor], input: usize, index: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |delta: f64| -> Result<f64> {
        let mut work = inputs.to_vec();
        work[input].data_mut()[index] += delta;
        let mut tape = Tape::new();
        let vars: Vec<Var> = work.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}
