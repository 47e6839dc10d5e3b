//! Central-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::{Result, Tensor, TensorError};

/// Relative error between an analytic and a numeric derivative, guarded
/// against both being tiny.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compare the tape gradient of a scalar-valued function against central
/// differences at `x`, returning the maximum relative error over coordinates.
///
/// `f` must build the function on the provided tape from the given input var;
/// any other tensors it needs can be registered as leaves inside the closure.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    if !tape.value(out).is_scalar() {
        return Err(TensorError::Usage {
            op: "grad_check",
            msg: format!("function output must be scalar, got {:?}", tape.value(out).shape()),
        });
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let eval = |point: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(point.clone());
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };

    let mut max_err = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        max_err = max_err.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(&[5], vec![0.4, -1.2, 3.3, 0.0, 2.0]).unwrap();
        let err = grad_check(|tape, v| Ok(tape.sum_all(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "sum grad check err {err}");
    }

    #[test]
    fn cross_entropy_after_linear() {
        let x = Tensor::from_vec(&[1, 3], vec![0.3, -0.8, 1.1]).unwrap();
        let w = Tensor::from_vec(&[3, 2], vec![0.5, -0.2, 0.1, 0.9, -0.7, 0.4]).unwrap();
        let err = grad_check(
            move |tape, v| {
                let wv = tape.leaf(w.clone());
                let z = tape.matmul(v, wv)?;
                tape.cross_entropy(z, 1)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "cross entropy grad check err {err}");
    }

    #[test]
    fn non_scalar_output_is_a_usage_error() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|tape, v| Ok(tape.relu(v)), &x, 1e-5).is_err());
    }
}
