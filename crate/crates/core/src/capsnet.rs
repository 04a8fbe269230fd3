//! Capsule layers with dynamic routing, and the capsule classifier used by
//! the second branch.

use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, BackboneConfig};
use crate::classifier::{BranchOutput, Classifier, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{check_one_hot, one_hot, Bound, Conv2d, Init, LayerNorm, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{feature_tokens, tokens_to_map, MultiHeadAttention};

pub const MARGIN_POSITIVE: f64 = 0.9;
pub const MARGIN_NEGATIVE: f64 = 0.1;
pub const MARGIN_DOWN_WEIGHT: f64 = 0.5;

/// Squash a single capsule vector.
pub fn squash<T: Scalar>(s: &Tensor<T>) -> Tensor<T> {
    let tape = Tape::new();
    let v = tape.constant(s.clone()).squash().expect("rank checked by tensor");
    let out = v.value().clone();
    out
}

/// Routing outputs on a tape: class capsules `[n_out×d]` and the couplings
/// `[n_in×n_out]` used at every iteration.
pub fn route<'t, T: Scalar>(u_hat: Var<'t, T>, iterations: usize) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
    if iterations < 1 {
        return Err(Error::Contract(format!(
            "routing needs at least one iteration, got {iterations}"
        )));
    }
    let s = u_hat.shape();
    if s.len() != 3 {
        return Err(Error::dim("routing", format!("predictions must be [n_in, n_out, d], got {s:?}")));
    }
    let tape = u_hat.tape();
    let mut b = tape.constant(Tensor::zeros(&[s[0], s[1]]));
    let mut couplings = Vec::with_capacity(iterations);
    let mut v = None;
    for it in 0..iterations {
        let c = b.softmax(1)?;
        let out = c.routing_combine(u_hat)?.squash()?;
        couplings.push(c);
        if it + 1 < iterations {
            b = b.add(u_hat.agreement(out)?)?;
        }
        v = Some(out);
    }
    Ok((v.expect("at least one iteration"), couplings))
}

/// Result of [`dynamic_routing`] on plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing<T> {
    pub outputs: Tensor<T>,
    /// Coupling coefficients of each iteration, in order.
    pub couplings: Vec<Tensor<T>>,
}

impl<T: Scalar> Routing<T> {
    /// Couplings of the final iteration.
    pub fn final_couplings(&self) -> &Tensor<T> {
        self.couplings.last().expect("at least one iteration")
    }
}

/// Routing-by-agreement over predictions `û` of shape `[n_in×n_out×d]`.
pub fn dynamic_routing<T: Scalar>(u_hat: &Tensor<T>, iterations: usize) -> Result<Routing<T>> {
    let tape = Tape::new();
    let (v, cs) = route(tape.constant(u_hat.clone()), iterations)?;
    let outputs = v.value().clone();
    let couplings = cs.iter().map(|c| c.value().clone()).collect();
    Ok(Routing { outputs, couplings })
}

/// Capsule lengths normalized to sum to one.
pub fn length_probabilities<'t, T: Scalar>(capsules: Var<'t, T>) -> Result<Var<'t, T>> {
    let lengths = capsules.row_norms()?;
    lengths.div_scalar(lengths.sum())
}

/// Margin loss on class-capsule lengths.
pub fn margin_loss<'t, T: Scalar>(capsules: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    let lengths = capsules.row_norms()?;
    check_one_hot(target, lengths.numel())?;
    if lengths.shape() != target.shape() {
        return Err(Error::dim(
            "margin_loss",
            format!("{} capsules for target {:?}", lengths.numel(), target.shape()),
        ));
    }
    let tape = capsules.tape();
    let present = tape.constant(target.clone());
    let absent = tape.constant(target.map(|y| T::of(MARGIN_DOWN_WEIGHT) * (T::one() - y)));
    let miss = lengths.scale(-T::one()).add_scalar(T::of(MARGIN_POSITIVE)).relu().square()?;
    let leak = lengths.add_scalar(T::of(-MARGIN_NEGATIVE)).relu().square()?;
    Ok(miss.mul(present)?.add(leak.mul(absent)?)?.sum())
}

/// Fully connected capsule layer: transforms `W[i][j]` and routing.
#[derive(Clone, Debug)]
pub struct CapsuleLayer {
    pub weights: ParamId,
    pub inputs: usize,
    pub input_dim: usize,
    pub outputs: usize,
    pub output_dim: usize,
    pub iterations: usize,
}

impl CapsuleLayer {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        (inputs, input_dim): (usize, usize),
        (outputs, output_dim): (usize, usize),
        iterations: usize,
    ) -> Result<Self> {
        if iterations < 1 {
            return Err(Error::Config("routing_iterations must be at least 1".into()));
        }
        let std = 1.0 / ((inputs * input_dim) as f64).sqrt();
        Ok(Self {
            weights: params.add(
                format!("{name}.weights"),
                &[inputs, outputs, output_dim, input_dim],
                Init::Normal { std },
            ),
            inputs,
            input_dim,
            outputs,
            output_dim,
            iterations,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, u: Var<'t, T>) -> Result<Var<'t, T>> {
        let u_hat = u.caps_predict(p.get(self.weights))?;
        Ok(route(u_hat, self.iterations)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapsNetConfig {
    pub backbone: BackboneConfig,
    pub heads: usize,
    pub primary_capsules: usize,
    pub primary_dim: usize,
    pub class_dim: usize,
    pub routing_iterations: usize,
}

impl Default for CapsNetConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::resnet((64, 64)),
            heads: 4,
            primary_capsules: 8,
            primary_dim: 4,
            class_dim: 8,
            routing_iterations: 3,
        }
    }
}

/// Branch 2: ResNet features → tokens → self-attention → primary capsules
/// (3×3 stride-2 conv, squashed) → routed class capsules → length probabilities.
#[derive(Clone, Debug)]
pub struct CapsNetClassifier<T> {
    cfg: CapsNetConfig,
    params: ParamSet<T>,
    backbone: Backbone,
    norm: LayerNorm,
    attention: MultiHeadAttention,
    primary: Conv2d,
    classes: CapsuleLayer,
    grid: (usize, usize),
}

impl<T: Scalar> CapsNetClassifier<T> {
    pub fn new(cfg: &CapsNetConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new(seed);
        let backbone = Backbone::new(&mut params, "backbone", &cfg.backbone)?;
        let (c, h, w) = backbone.output_shape();
        let norm = LayerNorm::new(&mut params, "attn_norm", c);
        let attention = MultiHeadAttention::new(&mut params, "attn", c, cfg.heads)?;
        if cfg.primary_capsules == 0 || cfg.primary_dim == 0 || cfg.class_dim == 0 {
            return Err(Error::Config("capsule counts and dims must be positive".into()));
        }
        let primary = Conv2d::new(
            &mut params,
            "primary",
            c,
            cfg.primary_capsules * cfg.primary_dim,
            3,
            2,
            1,
        );
        let grid = primary.output_size(h, w)?;
        let classes = CapsuleLayer::new(
            &mut params,
            "class_caps",
            (cfg.primary_capsules * grid.0 * grid.1, cfg.primary_dim),
            (NUM_CLASSES, cfg.class_dim),
            cfg.routing_iterations,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            backbone,
            norm,
            attention,
            primary,
            classes,
            grid,
        })
    }

    pub fn config(&self) -> &CapsNetConfig {
        &self.cfg
    }

    /// Squashed primary capsules `[n_in×primary_dim]`, grouped by capsule type.
    pub fn primary_capsules<'t>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let features = self.backbone.forward(p, image)?;
        let (_, h, w) = self.backbone.output_shape();
        let tokens = feature_tokens(features)?;
        let tokens = tokens.add(self.attention.forward(p, self.norm.forward(p, tokens)?)?)?;
        let maps = self.primary.forward(p, tokens_to_map(tokens, h, w)?)?;
        let sites = self.grid.0 * self.grid.1;
        let dim = self.cfg.primary_dim;
        let flat = maps.reshape(&[self.cfg.primary_capsules * dim, sites])?;
        let groups = (0..self.cfg.primary_capsules)
            .map(|k| flat.slice_rows(k * dim, dim)?.transpose())
            .collect::<Result<Vec<_>>>()?;
        let caps = if groups.len() == 1 { groups[0] } else { Var::concat_rows(&groups)? };
        caps.squash()
    }
}

impl<T: Scalar> Classifier<T> for CapsNetClassifier<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn input_shape(&self) -> [usize; 3] {
        let (h, w) = self.cfg.backbone.input_size;
        [self.cfg.backbone.in_channels, h, w]
    }

    fn forward<'t>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<BranchOutput<'t, T>> {
        let capsules = self.classes.forward(p, self.primary_capsules(p, image)?)?;
        Ok(BranchOutput {
            probs: length_probabilities(capsules)?,
            capsules: Some(capsules),
        })
    }

    fn loss<'t>(&self, out: &BranchOutput<'t, T>, label: usize) -> Result<Var<'t, T>> {
        let caps = out
            .capsules
            .ok_or_else(|| Error::Contract("capsule branch output without capsules".into()))?;
        margin_loss(caps, &one_hot(label, NUM_CLASSES)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        Init::Normal { std: 1.0 }.sample(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash(&Tensor::<f64>::zeros(&[3])).data(), &[0.0; 3]);
        let v = squash(&Tensor::vector(vec![0.6, 0.8]));
        assert!((norm(v.data()) - 0.5).abs() < 1e-7);
        assert!((v.data()[0] / v.data()[1] - 0.75).abs() < 1e-12);
        let v = squash(&Tensor::vector(vec![0.0, 3.0, 0.0]));
        assert!((norm(v.data()) - 0.9).abs() < 1e-7, "{:?}", v.data());
    }

    proptest! {
        #[test]
        fn squash_is_contractive_and_keeps_direction(xs in prop::collection::vec(-50.0f64..50.0, 1..8)) {
            let s = Tensor::vector(xs.clone());
            let v = squash(&s);
            prop_assert!(norm(v.data()) < 1.0);
            let ns = norm(&xs);
            if ns > 1e-6 {
                let cos = v.data().iter().zip(&xs).map(|(a, b)| a * b).sum::<f64>() / (norm(v.data()) * ns);
                prop_assert!((cos - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn couplings_are_distributions(n_in in 1usize..6, n_out in 1usize..4, d in 1usize..5, r in 1usize..5, seed in 0u64..500) {
            let u = random(&[n_in, n_out, d], seed);
            let routing = dynamic_routing(&u, r).unwrap();
            prop_assert_eq!(routing.couplings.len(), r);
            for c in &routing.couplings {
                for row in c.data().chunks(n_out) {
                    prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
            prop_assert_eq!(dynamic_routing(&u, r).unwrap(), routing);
        }
    }

    #[test]
    fn single_input_capsule_routes_fully() {
        let u = random(&[1, 1, 4], 3);
        for r in 1..4 {
            let out = dynamic_routing(&u, r).unwrap();
            assert_eq!(out.final_couplings().data(), &[1.0]);
            assert_eq!(out.outputs.data(), squash(&u.reshape(&[4]).unwrap()).data());
        }
    }

    #[test]
    fn one_iteration_uses_uniform_couplings() {
        let u: Tensor<f64> = random(&[4, 2, 3], 5);
        let out = dynamic_routing::<f64>(&u, 1).unwrap();
        assert!(out.couplings[0].data().iter().all(|&c| c == 0.5));
        let s = Tensor::from_fn(&[2, 3], |jq| {
            let (j, q) = (jq / 3, jq % 3);
            (0..4).map(|i| 0.5 * u.data()[(i * 2 + j) * 3 + q]).sum()
        });
        for j in 0..2 {
            let row: Tensor<f64> = Tensor::vector(s.data()[j * 3..(j + 1) * 3].to_vec());
            let expect = squash(&row);
            for q in 0..3 {
                assert!((out.outputs.at(&[j, q]) - expect.data()[q]).abs() < 1e-12);
            }
        }
    }

    fn hand_squash(s: &[f64]) -> Vec<f64> {
        let n2: f64 = s.iter().map(|x| x * x).sum();
        s.iter().map(|x| x * n2 / ((1.0 + n2) * (n2.sqrt() + 1e-8))).collect()
    }

    #[test]
    fn two_inputs_one_output_hand_execution() {
        // c = 1 for the only output, so v = squash(û1 + û2) for any r
        let u = Tensor::from_f64(&[2, 1, 2], &[1.0, 0.0, 0.0, 2.0]).unwrap();
        let out = dynamic_routing::<f64>(&u, 2).unwrap();
        let expect = hand_squash(&[1.0, 2.0]);
        for q in 0..2 {
            assert!((out.outputs.data()[q] - expect[q]).abs() < 1e-12);
        }
        assert!((norm(out.outputs.data()) - 5.0 / 6.0).abs() < 1e-7);
    }

    #[test]
    fn two_by_two_routing_hand_execution() {
        let uh = [[[1.0, 0.0], [0.5, 0.5]], [[0.0, 2.0], [-1.0, 1.0]]];
        let flat: Vec<f64> = uh.iter().flatten().flatten().copied().collect();
        let out = dynamic_routing::<f64>(&Tensor::from_f64(&[2, 2, 2], &flat).unwrap(), 2).unwrap();
        // iteration 1: c = 0.5 everywhere
        let s1 = |j: usize| [0.5 * (uh[0][j][0] + uh[1][j][0]), 0.5 * (uh[0][j][1] + uh[1][j][1])];
        let v1 = [hand_squash(&s1(0)), hand_squash(&s1(1))];
        let b = |i: usize, j: usize| uh[i][j][0] * v1[j][0] + uh[i][j][1] * v1[j][1];
        let c = |i: usize, j: usize| b(i, j).exp() / (b(i, 0).exp() + b(i, 1).exp());
        for j in 0..2 {
            let s2 = [
                c(0, j) * uh[0][j][0] + c(1, j) * uh[1][j][0],
                c(0, j) * uh[0][j][1] + c(1, j) * uh[1][j][1],
            ];
            let v2 = hand_squash(&s2);
            for q in 0..2 {
                assert!((out.outputs.at(&[j, q]) - v2[q]).abs() < 1e-12);
            }
            for i in 0..2 {
                assert!((out.couplings[1].at(&[i, j]) - c(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_iterations_is_contract_error() {
        assert!(matches!(
            dynamic_routing(&Tensor::<f64>::zeros(&[1, 1, 1]), 0),
            Err(Error::Contract(_))
        ));
    }

    fn with_lengths(a: f64, b: f64) -> Tensor<f64> {
        Tensor::from_f64(&[2, 2], &[a, 0.0, 0.0, b]).unwrap()
    }

    #[test]
    fn length_probability_examples() {
        let tape = Tape::new();
        let p = length_probabilities(tape.constant(with_lengths(0.9, 0.1))).unwrap();
        assert!((p.value().data()[0] - 0.9).abs() < 1e-9);
        assert!((p.value().data()[1] - 0.1).abs() < 1e-9);
        let p = length_probabilities(tape.constant(with_lengths(0.4, 0.4))).unwrap();
        assert_eq!(p.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn margin_loss_examples() {
        let tape = Tape::new();
        let y0 = one_hot::<f64>(0, 2).unwrap();
        let loss = |a, b, y: &Tensor<f64>| {
            margin_loss(tape.constant(with_lengths(a, b)), y).unwrap().value().item().unwrap()
        };
        assert!(loss(0.95, 0.05, &y0).abs() < 1e-12);
        // lengths carry a 1e-12 guard inside the square root
        assert!((loss(0.0, 0.0, &y0) - 0.81).abs() < 1e-5);
        // wrong class at length 0.5: 0.5 * 0.4²
        assert!((loss(0.95, 0.5, &y0) - 0.08).abs() < 1e-9);
        assert!(margin_loss(tape.constant(with_lengths(0.1, 0.1)), &Tensor::vector(vec![0.5, 0.5])).is_err());
    }

    #[test]
    fn branch_output_is_distribution_and_deterministic() {
        let cfg = CapsNetConfig::default();
        let img = Tensor::<f32>::from_fn(&[1, 64, 64], |i| ((i * 7) % 23) as f32 / 23.0);
        let a = CapsNetClassifier::<f32>::new(&cfg, 4).unwrap();
        let pa = a.predict_proba(&img).unwrap();
        let pb = CapsNetClassifier::<f32>::new(&cfg, 4).unwrap().predict_proba(&img).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(pa.numel(), 2);
        assert!((pa.sum() - 1.0).abs() < 1e-6);
        assert_eq!(a.classes.inputs, 8 * 4 * 4);
    }

    fn toy_config() -> CapsNetConfig {
        CapsNetConfig {
            backbone: BackboneConfig {
                stage_channels: vec![2, 4],
                input_size: (8, 8),
                ..BackboneConfig::resnet((8, 8))
            },
            heads: 2,
            primary_capsules: 2,
            primary_dim: 3,
            class_dim: 4,
            routing_iterations: 3,
        }
    }

    #[test]
    fn full_branch_passes_grad_check() {
        for seed in 0..10u64 {
            let model = CapsNetClassifier::<f64>::new(&toy_config(), seed).unwrap();
            let mut inputs = model.params().tensors();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
            for t in inputs.iter_mut().filter(|t| t.rank() == 1) {
                let shift = Init::Normal { std: 0.1 }.sample::<f64>(t.shape(), &mut rng);
                for (v, s) in t.data_mut().iter_mut().zip(shift.data()) {
                    *v += s;
                }
            }
            inputs.push(random(&[1, 8, 8], seed + 500));
            let n = inputs.len();
            let label = (seed % 2) as usize;
            for use_margin in [true, false] {
                let err = grad_check_many(
                    |tape, vars| {
                        let b = Bound::from_vars(tape, vars[..n - 1].to_vec());
                        let out = model.forward(&b, vars[n - 1])?;
                        if use_margin {
                            model.loss(&out, label)
                        } else {
                            Ok(out.probs.ln().sum())
                        }
                    },
                    &inputs,
                    1e-6,
                    usize::MAX,
                )
                .unwrap();
                assert!(err <= 1e-3, "seed {seed} margin {use_margin}: {err}");
            }
        }
    }
}
