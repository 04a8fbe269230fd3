use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Indicator vector of length `classes` with a one at `label`.
pub fn one_hot<T: Scalar>(label: usize, classes: usize) -> Result<Tensor<T>> {
    if label >= classes {
        return Err(Error::Contract(format!("label {label} out of range for {classes} classes")));
    }
    Ok(Tensor::from_fn(&[classes], |i| if i == label { T::one() } else { T::zero() }))
}

/// Index of the single one in a valid indicator vector.
pub fn check_one_hot<T: Scalar>(y: &Tensor<T>, classes: usize) -> Result<usize> {
    let d = y.data();
    let ones: Vec<usize> = (0..d.len()).filter(|&i| d[i] == T::one()).collect();
    let valid = y.rank() == 1
        && d.len() == classes
        && ones.len() == 1
        && d.iter().all(|&v| v == T::zero() || v == T::one());
    if !valid {
        return Err(Error::Contract(format!(
            "not a one-hot vector of length {classes}: {:?}",
            y.to_f64_vec()
        )));
    }
    Ok(ones[0])
}

/// `−Σ yᵢ ln(max(pᵢ, 1e-12))`
pub fn cross_entropy<'t, T: Scalar>(probs: Var<'t, T>, one_hot: &Tensor<T>) -> Result<Var<'t, T>> {
    let h = probs.value().numel();
    check_one_hot(one_hot, h)?;
    let y = probs.tape().constant(one_hot.reshape(&probs.shape())?);
    Ok(probs.clamp_min(T::of(PROB_CLAMP)).ln().mul(y)?.sum().scale(-T::one()))
}
