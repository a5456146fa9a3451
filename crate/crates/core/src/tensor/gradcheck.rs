//! Central finite-difference check of tape gradients.

use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Relative error of the analytic gradient for each input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare tape gradients of `sum(w ⊙ build(inputs))` against the
/// fourth-order central difference with step `h`, for a random weighting `w`
/// drawn from `seed`.
///
/// The error for each input is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// with the objective accumulated in f64.
pub fn gradcheck(
    inputs: &[Tensor],
    h: f32,
    seed: u64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let mut rng = Rng::seed(seed);
    let weights: Vec<f32> = (0..tape.value(out).numel()).map(|_| rng.normal()).collect();
    tape.backward_with(out, &weights)?;

    let objective = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(y, w)| *y as f64 * *w as f64)
            .sum())
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut values = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*var) {
            Some(g) => g.iter().map(|v| *v as f64).collect(),
            None => alloc::vec![0.0; inputs[i].numel()],
        };
        let (mut diff, mut norm_a, mut norm_n) = (0.0f64, 0.0f64, 0.0f64);
        for (j, a) in analytic.iter().enumerate() {
            let x = inputs[i].data()[j];
            let mut at = |offset: f32| -> Result<f64> {
                values[i].data_mut()[j] = x + offset;
                objective(&values)
            };
            let (f1, f_1, f2, f_2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            values[i].data_mut()[j] = x;
            let numeric = (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * h as f64);
            diff += (a - numeric) * (a - numeric);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
        let scale = libm::sqrt(norm_a.max(norm_n));
        rel_errors.push(if scale == 0.0 {
            0.0
        } else {
            libm::sqrt(diff) / scale
        });
    }
    Ok(GradCheck { rel_errors })
}
