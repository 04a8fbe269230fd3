//! Interface shared by the three classifier branches.

use crate::error::Result;
use crate::nn::{Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Number of labels: tumor (0) and no tumor (1).
pub const NUM_CLASSES: usize = 2;

/// Forward result of one branch on one image.
pub struct BranchOutput<'t, T> {
    /// Class probabilities `[NUM_CLASSES]`, summing to one.
    pub probs: Var<'t, T>,
    /// Class capsules `[NUM_CLASSES×d]`, for capsule branches only.
    pub capsules: Option<Var<'t, T>>,
}

/// A trainable image classifier producing a probability vector.
pub trait Classifier<T: Scalar> {
    fn params(&self) -> &ParamSet<T>;

    fn params_mut(&mut self) -> &mut ParamSet<T>;

    /// Expected image shape `[C, H, W]`.
    fn input_shape(&self) -> [usize; 3];

    fn forward<'t>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<BranchOutput<'t, T>>;

    /// Training loss of one forward output against `label`.
    fn loss<'t>(&self, out: &BranchOutput<'t, T>, label: usize) -> Result<Var<'t, T>>;

    /// Class probabilities for one image, without keeping the tape.
    fn predict_proba(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params().bind(&tape);
        let out = self.forward(&p, tape.constant(image.clone()))?;
        let probs = out.probs.value().clone();
        Ok(probs)
    }

    /// Most probable label; ties resolve to label 0.
    fn predict(&self, image: &Tensor<T>) -> Result<usize> {
        Ok(argmax(self.predict_proba(image)?.data()))
    }
}

/// Index of the largest value, first index on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
