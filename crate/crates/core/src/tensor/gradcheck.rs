use super::{Precision, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar function with central finite
/// differences and returns `max_i |g_tape - g_fd| / max(1, |g_fd|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::Double);
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !analytic.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::inference(Precision::Double);
        let v = tape.constant(t);
        let y = f(&mut tape, v)?;
        Ok(tape.value(y).item())
    };
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !fd.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
