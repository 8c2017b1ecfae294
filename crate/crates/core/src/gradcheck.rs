//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Tensor};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradCheck {
    Checked { max_rel_error: f64 },
    /// Some ReLU/LeakyReLU input sat within `10 h` of its kink, where
    /// central differences are meaningless.
    Skipped { kink_distance: f64 },
}

impl GradCheck {
    pub fn max_rel_error(self) -> Option<f64> {
        match self {
            GradCheck::Checked { max_rel_error } => Some(max_rel_error),
            GradCheck::Skipped { .. } => None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Checks the gradient of scalar-valued `f` with respect to every tensor in
/// `inputs`. Returns one result per input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let kink = tape.min_kink_distance();
    if kink <= 10.0 * h {
        return Ok(vec![GradCheck::Skipped { kink_distance: kink }; inputs.len()]);
    }
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut work = inputs.to_vec();
    let mut results = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.tensor(*var);
        let mut worst = 0.0f64;
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        results.push(GradCheck::Checked { max_rel_error: worst });
    }
    Ok(results)
}

/// Single-input form of [`check_gradients`].
pub fn gradient_check<F>(x: &Tensor, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let r = check_gradients(std::slice::from_ref(x), h, |tape, vars| f(tape, vars[0]))?;
    Ok(r[0])
}
