//! Finite-difference verification of every layer and each full branch.
//!
//! Each check builds a fresh f64 module per seed, draws a random input, and
//! compares the tape gradient of a scalar (a random projection of the
//! output, or the branch loss) against central differences, over every
//! parameter and the input.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbones::{Backbone, BackboneConfig, ResidualBlock};
use crate::capsnet::{margin_loss, CapsNetClassifier, CapsNetConfig, CapsuleLayer};
use crate::classifier::Classifier;
use crate::cnn::{CnnClassifier, CnnConfig};
use crate::error::Result;
use crate::nn::{cross_entropy, one_hot, Bound, Conv2d, Dense, Init, LayerNorm, ParamSet};
use crate::tensor::{grad_check_many, Tape, Tensor, Var};
use crate::vit::{EncoderBlock, MultiHeadAttention, VitClassifier, VitConfig};

/// Largest accepted relative error.
pub const GRAD_TOL: f64 = 1e-3;
/// Central-difference step.
pub const GRAD_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    /// Worst relative error over all instances.
    pub max_error: f64,
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= GRAD_TOL
    }
}

/// Fixed pseudo-random direction so every output entry reaches the scalar.
fn direction(shape: &[usize], seed: u64) -> Tensor<f64> {
    let phase = seed as f64 * 0.569_840_290_998_053_3;
    Tensor::from_fn(shape, |i| ((i as f64 * 0.754_877_666_246_692_8 + phase).fract() - 0.5) * 2.0)
}

fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let r = direction(&y.shape(), seed);
    Ok(y.mul(tape.constant(r))?.sum())
}

/// Checks `f(module, params, input)` over `instances` seeds.
fn check<M>(
    name: &'static str,
    instances: u64,
    input_shape: &[usize],
    build: impl Fn(&mut ParamSet<f64>) -> Result<M>,
    f: impl for<'t> Fn(&M, &Bound<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> Result<CheckResult> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut params = ParamSet::new(seed);
        let module = build(&mut params)?;
        let mut inputs = params.tensors();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
        inputs.push(Init::Normal { std: 1.0 }.sample(input_shape, &mut rng));
        let n = inputs.len();
        let err = grad_check_many(
            |tape, vars| {
                let b = Bound::from_vars(tape, vars[..n - 1].to_vec());
                let y = f(&module, &b, vars[n - 1])?;
                if y.shape().is_empty() {
                    Ok(y)
                } else {
                    project(tape, y, seed)
                }
            },
            &inputs,
            GRAD_EPS,
            usize::MAX,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name,
        instances: instances as usize,
        max_error: worst,
        elapsed: start.elapsed(),
    })
}

/// Same check for a whole classifier: loss of a forward pass, with the
/// label alternating by seed.
fn check_branch<C: Classifier<f64>>(
    name: &'static str,
    instances: u64,
    build: impl Fn(u64) -> Result<C>,
) -> Result<CheckResult> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let model = build(seed)?;
        let mut inputs = model.params().tensors();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
        inputs.push(Init::Normal { std: 1.0 }.sample(&model.input_shape(), &mut rng));
        let n = inputs.len();
        let err = grad_check_many(
            |tape, vars| {
                let b = Bound::from_vars(tape, vars[..n - 1].to_vec());
                let out = model.forward(&b, vars[n - 1])?;
                model.loss(&out, (seed % 2) as usize)
            },
            &inputs,
            GRAD_EPS,
            usize::MAX,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name,
        instances: instances as usize,
        max_error: worst,
        elapsed: start.elapsed(),
    })
}

fn toy_backbone(kind_resnet: bool) -> BackboneConfig {
    let base = if kind_resnet {
        BackboneConfig::resnet((8, 8))
    } else {
        BackboneConfig::vgg((8, 8))
    };
    BackboneConfig {
        stage_channels: vec![2, 3],
        ..base
    }
}

/// Small configurations of the three branches, sized for finite differences.
pub fn toy_vit() -> VitConfig {
    VitConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        mlp_hidden: 12,
        backbone: toy_backbone(false),
        ..VitConfig::default()
    }
}

pub fn toy_capsnet() -> CapsNetConfig {
    CapsNetConfig {
        backbone: toy_backbone(true),
        heads: 1,
        primary_capsules: 2,
        primary_dim: 3,
        class_dim: 4,
        routing_iterations: 3,
    }
}

pub fn toy_cnn() -> CnnConfig {
    CnnConfig {
        stage_channels: vec![2, 3],
        hidden: 4,
        in_channels: 1,
        input_size: (8, 8),
    }
}

/// Runs every layer and branch check with `instances` seeds each.
pub fn gradient_suite(instances: u64) -> Result<Vec<CheckResult>> {
    let k = instances;
    Ok(vec![
        check("dense", k, &[3, 5], |p| Ok(Dense::new(p, "d", 5, 4)), |m, p, x| m.forward(p, x))?,
        check("conv2d", k, &[2, 6, 6], |p| Ok(Conv2d::new(p, "c", 2, 3, 3, 1, 1)), |m, p, x| m.forward(p, x))?,
        check(
            "conv2d stride 2",
            k,
            &[2, 7, 7],
            |p| Ok(Conv2d::new(p, "c", 2, 3, 3, 2, 1)),
            |m, p, x| m.forward(p, x),
        )?,
        check("max_pool2d", k, &[2, 6, 6], |_| Ok(()), |_, _, x| x.max_pool2d(2, 2))?,
        check("layer_norm", k, &[4, 6], |p| Ok(LayerNorm::new(p, "n", 6)), |m, p, x| m.forward(p, x))?,
        check(
            "residual block",
            k,
            &[2, 6, 6],
            |p| Ok(ResidualBlock::new(p, "r", 2, 3, 2)),
            |m, p, x| m.forward(p, x),
        )?,
        check(
            "vgg backbone",
            k,
            &[1, 8, 8],
            |p| Backbone::new(p, "b", &toy_backbone(false)),
            |m, p, x| m.forward(p, x),
        )?,
        check(
            "resnet backbone",
            k,
            &[1, 8, 8],
            |p| Backbone::new(p, "b", &toy_backbone(true)),
            |m, p, x| m.forward(p, x),
        )?,
        check(
            "multi-head attention",
            k,
            &[5, 8],
            |p| MultiHeadAttention::new(p, "a", 8, 2),
            |m, p, x| m.forward(p, x),
        )?,
        check(
            "encoder block",
            k,
            &[5, 8],
            |p| EncoderBlock::new(p, "e", 8, 2, 12),
            |m, p, x| m.forward(p, x),
        )?,
        check(
            "capsule routing",
            k,
            &[6, 4],
            |p| CapsuleLayer::new(p, "caps", (6, 4), (2, 3), 3),
            |m, p, x| m.forward(p, x),
        )?,
        check(
            "cross entropy",
            k,
            &[2],
            |_| Ok(()),
            |_, _, x| cross_entropy(x.softmax(0)?, &one_hot(1, 2)?),
        )?,
        check("margin loss", k, &[2, 4], |_| Ok(()), |_, _, x| margin_loss(x, &one_hot(0, 2)?))?,
        check_branch("vit branch", k, |s| VitClassifier::<f64>::new(&toy_vit(), s))?,
        check_branch("capsnet branch", k, |s| CapsNetClassifier::<f64>::new(&toy_capsnet(), s))?,
        check_branch("cnn branch", k, |s| CnnClassifier::<f64>::new(&toy_cnn(), s))?,
    ])
}
