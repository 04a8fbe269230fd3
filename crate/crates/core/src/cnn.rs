//! Branch 3: plain convolutional classifier.

use serde::{Deserialize, Serialize};

use crate::classifier::{BranchOutput, Classifier, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, one_hot, Bound, Conv2d, Dense, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub stage_channels: Vec<usize>,
    pub hidden: usize,
    pub in_channels: usize,
    pub input_size: (usize, usize),
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![8, 16, 32],
            hidden: 32,
            in_channels: 1,
            input_size: (64, 64),
        }
    }
}

/// Conv3×3 + ReLU + 2×2 max-pool per stage, then two dense layers.
#[derive(Clone, Debug)]
pub struct CnnClassifier<T> {
    cfg: CnnConfig,
    params: ParamSet<T>,
    convs: Vec<Conv2d>,
    hidden: Dense,
    head: Dense,
}

impl<T: Scalar> CnnClassifier<T> {
    pub fn new(cfg: &CnnConfig, seed: u64) -> Result<Self> {
        if cfg.stage_channels.is_empty() || cfg.stage_channels.contains(&0) || cfg.hidden == 0 {
            return Err(Error::Config("cnn stage_channels and hidden must be positive".into()));
        }
        let mut params = ParamSet::new(seed);
        let (mut h, mut w) = cfg.input_size;
        let mut c = cfg.in_channels;
        let mut convs = Vec::new();
        for (i, &out) in cfg.stage_channels.iter().enumerate() {
            if h < 2 || w < 2 {
                return Err(Error::dim(
                    "cnn",
                    format!("input {:?} too small for {} pooling stages", cfg.input_size, cfg.stage_channels.len()),
                ));
            }
            convs.push(Conv2d::new(&mut params, &format!("conv{i}"), c, out, 3, 1, 1));
            (h, w, c) = (h / 2, w / 2, out);
        }
        let hidden = Dense::new(&mut params, "hidden", c * h * w, cfg.hidden);
        let head = Dense::new(&mut params, "head", cfg.hidden, NUM_CLASSES);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            convs,
            hidden,
            head,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }
}

impl<T: Scalar> Classifier<T> for CnnClassifier<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn input_shape(&self) -> [usize; 3] {
        let (h, w) = self.cfg.input_size;
        [self.cfg.in_channels, h, w]
    }

    fn forward<'t>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<BranchOutput<'t, T>> {
        let mut x = image;
        for conv in &self.convs {
            x = conv.forward(p, x)?.relu().max_pool2d(2, 2)?;
        }
        let n = x.numel();
        let h = self.hidden.forward(p, x.reshape(&[n])?)?.relu();
        Ok(BranchOutput {
            probs: self.head.forward(p, h)?.softmax(0)?,
            capsules: None,
        })
    }

    fn loss<'t>(&self, out: &BranchOutput<'t, T>, label: usize) -> Result<Var<'t, T>> {
        cross_entropy(out.probs, &one_hot(label, NUM_CLASSES)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use crate::tensor::{grad_check_many, Tensor};
    use rand::SeedableRng;

    #[test]
    fn output_is_distribution() {
        let model = CnnClassifier::<f32>::new(&CnnConfig::default(), 0).unwrap();
        let p = model.predict_proba(&Tensor::full(&[1, 64, 64], 0.3)).unwrap();
        assert_eq!(p.numel(), 2);
        assert!((p.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_tiny_input() {
        let cfg = CnnConfig {
            input_size: (4, 4),
            ..CnnConfig::default()
        };
        assert!(CnnClassifier::<f32>::new(&cfg, 0).is_err());
    }

    #[test]
    fn passes_grad_check() {
        let cfg = CnnConfig {
            stage_channels: vec![2, 3],
            hidden: 4,
            in_channels: 1,
            input_size: (8, 8),
        };
        for seed in 0..10u64 {
            let model = CnnClassifier::<f64>::new(&cfg, seed).unwrap();
            let mut inputs = model.params().tensors();
            inputs.push(Init::Normal { std: 1.0 }.sample(&[1, 8, 8], &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)));
            let n = inputs.len();
            let err = grad_check_many(
                |tape, vars| {
                    let b = Bound::from_vars(tape, vars[..n - 1].to_vec());
                    let out = model.forward(&b, vars[n - 1])?;
                    model.loss(&out, (seed % 2) as usize)
                },
                &inputs,
                1e-6,
                usize::MAX,
            )
            .unwrap();
            assert!(err <= 1e-3, "seed {seed}: {err}");
        }
    }
}
