//! Central-difference gradient oracle, evaluated in 64-bit.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between tape gradients of the scalar function `f`
/// and central differences at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps, usize::MAX)
}

/// Like [`grad_check`] but over several input tensors at once.
///
/// When a tensor has more than `max_coords` entries, an evenly strided
/// subset of `max_coords` coordinates is probed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor<f64>], eps: f64, max_coords: usize) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-6, 1e-3]")));
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let v = f(&tape, &vars)?.value().item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!("function value {v} is not finite")))
        }
    };

    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let v = loss.value().item()?;
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("function value {v} is not finite")));
        }
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let mut worst: f64 = 0.0;
    let mut probe = xs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[t].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn sum_of_squares() {
        let x = random(&[3, 4], 7);
        let err = grad_check(|_, x| Ok(x.mul(x)?.sum()), &x, 1e-4).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn linear_is_exact() {
        let x = random(&[5], 1);
        let err = grad_check(|_, x| Ok(x.sum()), &x, 1e-4).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Tensor::vector(vec![-1.0, 2.0]);
        let r = grad_check(|_, x| Ok(x.ln().sum()), &x, 1e-4);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }

    #[test]
    fn eps_out_of_range() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|_, x| Ok(x.sum()), &x, 0.1).is_err());
    }
}
