//! Central finite-difference verification of tape gradients (64-bit).

mod suite;

pub use suite::{run_suite, CheckResult, SUITE_MODULES};

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
/// Coordinates whose error exceeds this are retried with smaller steps.
const RETRY_BELOW: f64 = 1e-6;

/// Largest relative disagreement between the tape gradient of scalar `f` and
/// a central difference with step [`FD_STEP`] (or a tenth or hundredth of
/// it, whichever agrees best), over every coordinate of every input. Per coordinate: `|g_a - g_fd| / max(1, |g_a|, |g_fd|)`.
///
/// The closure may bind data that outlives the call (model parameters,
/// extractors) onto the tape it receives.
pub fn grad_check<'a, F>(f: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, usize::MAX, 0)
}

/// [`grad_check`] restricted to at most `max_coords` coordinates per input,
/// drawn without replacement with `seed`. The analytic gradient is still
/// computed in full.
pub fn grad_check_sampled<'a, F>(f: F, inputs: &[Tensor<f64>], max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let analytic = {
        let mut tape = Tape::strict();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect::<Vec<_>>()
    };
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::strict();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        let n = inputs[i].numel();
        let coords = if n <= max_coords { (0..n).collect() } else { rand::seq::index::sample(&mut rng, n, max_coords).into_vec() };
        for j in coords {
            let ga = grad[j];
            let mut err = f64::INFINITY;
            // A step that straddles a kink (leaky ReLU, |x|) skews the central
            // difference; a wrong gradient stays wrong at every step.
            for h in [FD_STEP, FD_STEP * 0.1, FD_STEP * 0.01] {
                let x0 = inputs[i].data()[j];
                work[i].data_mut()[j] = x0 + h;
                let up = eval(&work)?;
                work[i].data_mut()[j] = x0 - h;
                let down = eval(&work)?;
                work[i].data_mut()[j] = x0;
                let fd = (up - down) / (2.0 * h);
                if ga.is_nan() || fd.is_nan() {
                    return Err(Error::NonFinite("grad_check"));
                }
                err = err.min((ga - fd).abs() / 1f64.max(ga.abs()).max(fd.abs()));
                if err < RETRY_BELOW {
                    break;
                }
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
