//! Central-difference verification of analytic gradients.

use crate::autograd::{backward, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest relative disagreement between the analytic gradient of the scalar
/// function `f` at `x` and its central-difference estimate:
/// `max_i |a_i - fd_i| / (|a_i| + |fd_i| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&Var) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Contract(format!("eps {eps} outside [1e-6, 1e-2]")));
    }
    let xv = Var::param(x.clone());
    let y = f(&xv)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!("function output has shape {:?}", y.shape())));
    }
    y.value().check_finite("gradient check forward")?;
    let grads = backward(y)?;
    let analytic = grads
        .get(&xv)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let out = f(&Var::constant(probe))?;
        out.value().check_finite("gradient check probe")?;
        Ok(out.value().item() as f64)
    };

    let mut worst = 0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        // the step actually taken in f32
        let h = (plus.data()[i] as f64) - (minus.data()[i] as f64);
        let fd = (eval(plus)? - eval(minus)?) / h;
        let a = analytic[i] as f64;
        let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst as f32)
}
