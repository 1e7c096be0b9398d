//! Finite-difference oracle for every differentiable path.

use alloc::vec;
use alloc::vec::Vec;

use super::{Tape, Tensor, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

fn eval_scalar<F>(f: &F, x: Tensor) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = f(&mut tape, xv)?;
    let out = tape.value(y);
    if out.len() != 1 {
        return Err(TensorError::NotScalar(out.shape().to_vec()));
    }
    Ok(out.item())
}

/// Central-difference gradient of a scalar function at `x`.
pub fn central_difference<F>(f: F, x: &Tensor, h: f64) -> Result<Vec<f64>, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut data = x.data().to_vec();
    let mut grad = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let plus = eval_scalar(&f, Tensor::new(x.shape().to_vec(), data.clone())?)?;
        data[i] = orig - h;
        let minus = eval_scalar(&f, Tensor::new(x.shape().to_vec(), data.clone())?)?;
        data[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over the coordinates of
/// `x`, comparing the tape gradient against central differences.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = match tape.grad(xv) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.len()],
    };
    let numeric = central_difference(&f, x, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = gradcheck(
            |tp, x| {
                let s = tp.square(x)?;
                tp.sum_all(s)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function() {
        let x = Tensor::new([2], vec![0.3, 0.7]).unwrap();
        let err = gradcheck(|tp, _| Ok(tp.constant(Tensor::scalar(4.0))), &x, DEFAULT_STEP).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::new([1], vec![800.0]).unwrap();
        let r = gradcheck(
            |tp, x| {
                let e = tp.exp(x)?;
                tp.sum_all(e)
            },
            &x,
            DEFAULT_STEP,
        );
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }
}
