use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max_i |ad_i - fd_i| / max(1e-8, |ad_i| + |fd_i|)` over finite coordinates.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    /// Coordinates skipped because a perturbed evaluation was not finite.
    pub non_finite: usize,
}

/// Checks the tape gradient of the scalar function `f` at `x` against
/// central differences with step `step`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::unchecked();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    let grads = tape.backward(root)?;
    let analytic = grads.wrt(&tape, leaf);
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::unchecked();
        let leaf = tape.leaf(point.clone());
        let root = f(&mut tape, leaf)?;
        Ok(tape.value(root).data()[0])
    };
    compare_with_differences(eval, x, &analytic, step)
}

/// Compares `analytic` with central differences of `eval` around `x`.
pub(crate) fn compare_with_differences<E>(
    eval: E,
    x: &Tensor,
    analytic: &Tensor,
    step: f64,
) -> Result<GradCheck>
where
    E: Fn(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {step}")));
    }
    if analytic.len() != x.len() {
        return Err(Error::Dimension(format!(
            "analytic gradient has {} entries for an input of {}",
            analytic.len(),
            x.len()
        )));
    }
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        non_finite: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let ad = analytic.data()[i];
        if !plus.is_finite() || !minus.is_finite() || !ad.is_finite() {
            report.non_finite += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * step);
        let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
