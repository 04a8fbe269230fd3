use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer configuration plus per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    /// Adam with betas 0.9/0.999 and eps 1e-8.
    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is aligned with `params`; frozen
    /// parameters are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::dim(
                    "optimizer_step",
                    format!("gradient {:?} for parameter {}", g.shape(), params.name(id)),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(format!(
                    "gradient of {} contains non-finite values",
                    params.name(id)
                )));
            }
        }
        if self.kind == OptimizerKind::Adam && self.first_moment.is_empty() {
            self.first_moment = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
            self.second_moment = self.first_moment.clone();
        }
        self.step += 1;
        let lr = T::of(self.learning_rate);
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in params.ids().zip(grads) {
                    if !params.is_trainable(id) {
                        continue;
                    }
                    for (w, &gv) in params.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
                let t = self.step as i32;
                let c1 = T::one() - T::of(self.beta1.powi(t));
                let c2 = T::one() - T::of(self.beta2.powi(t));
                let eps = T::of(self.eps);
                for (k, (id, g)) in params.ids().zip(grads).enumerate() {
                    if !params.is_trainable(id) {
                        continue;
                    }
                    let m = self.first_moment[k].data_mut();
                    let v = self.second_moment[k].data_mut();
                    let w = params.get_mut(id).data_mut();
                    for i in 0..w.len() {
                        let gv = g.data()[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * gv;
                        v[i] = b2 * v[i] + (T::one() - b2) * gv * gv;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{cross_entropy, one_hot, Dense, Init};
    use crate::tensor::Tape;

    fn single(w: f64) -> (ParamSet<f64>, crate::nn::ParamId) {
        let mut ps = ParamSet::new(0);
        let id = ps.add("w", &[1], Init::Zeros);
        *ps.get_mut(id) = Tensor::vector(vec![w]);
        (ps, id)
    }

    #[test]
    fn sgd_hand_step() {
        let (mut ps, id) = single(1.0);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut ps, &[Tensor::vector(vec![0.5])]).unwrap();
        assert!((ps.get(id).data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn zero_lr_and_zero_grad_leave_params() {
        for (lr, g) in [(0.0, 0.7), (0.1, 0.0)] {
            for mut opt in [Optimizer::sgd(lr), Optimizer::adam(lr)] {
                let (mut ps, id) = single(1.25);
                opt.step(&mut ps, &[Tensor::vector(vec![g])]).unwrap();
                assert_eq!(ps.get(id).data()[0], 1.25);
            }
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut ps, id) = single(1.0);
        let mut opt = Optimizer::adam(0.1);
        let r = opt.step(&mut ps, &[Tensor::vector(vec![f64::NAN])]);
        assert!(matches!(r, Err(Error::NonFiniteGradient(_))));
        assert_eq!(ps.get(id).data()[0], 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut ps, id) = single(0.0);
        let mut opt = Optimizer::adam(1e-3);
        opt.step(&mut ps, &[Tensor::vector(vec![3.0])]).unwrap();
        assert!((ps.get(id).data()[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn two_layer_net_fits_separable_points() {
        let run = || {
            let mut ps = ParamSet::<f32>::new(0);
            let l1 = Dense::new(&mut ps, "l1", 2, 8);
            let l2 = Dense::new(&mut ps, "l2", 8, 2);
            let data = [([0.0f32, 0.0], 0usize), ([0.0, 1.0], 0), ([1.0, 0.0], 1), ([1.0, 1.0], 1)];
            let mut opt = Optimizer::adam(1e-2);
            let mut last = f32::INFINITY;
            for _ in 0..500 {
                let tape = Tape::new();
                let b = ps.bind(&tape);
                let mut total = tape.constant(Tensor::scalar(0.0));
                for (x, y) in &data {
                    let h = l1.forward(&b, tape.constant(Tensor::vector(x.to_vec()))).unwrap().relu();
                    let p = l2.forward(&b, h).unwrap().softmax(0).unwrap();
                    total = total.add(cross_entropy(p, &one_hot(*y, 2).unwrap()).unwrap()).unwrap();
                }
                let loss = total.scale(0.25);
                last = loss.value().item().unwrap();
                let mut g = tape.backward(loss).unwrap();
                let grads = b.gradients(&mut g);
                drop(b);
                opt.step(&mut ps, &grads).unwrap();
            }
            (last, ps.tensors())
        };
        let (loss, params) = run();
        assert!(loss < 0.01, "loss {loss}");
        assert_eq!(run().1, params);
    }
}
