//! Weighted training loops, the deep weak learner used inside boosting,
//! and the three-branch run.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, RunConfig, TrainSettings};
use super::data::{ingest_dataset, split, stratified_take, synth_generate, Dataset, Domain};
use super::{derive_seed, Branch, Model};
use crate::classifier::{argmax, Classifier};
use crate::error::{Error, Result};
use crate::fusion::{build_decision_templates, DecisionProfile, DecisionTemplate};
use crate::nn::Optimizer;
use crate::tensor::{Tape, Tensor};
use crate::tradaboost::{self, Labeled, RoundLog, WeakLearner};

const TAG_SPLIT: u64 = 0x10;
const TAG_SYNTH_TARGET: u64 = 0x11;
const TAG_SYNTH_SOURCE: u64 = 0x12;
const TAG_LIMIT: u64 = 0x13;
const TAG_VAL: u64 = 0x14;
const TAG_TEMPLATES: u64 = 0x15;

/// Seed of the synthetic set for `domain` in a run seeded with `seed`.
pub fn synth_seed(seed: u64, domain: Domain) -> u64 {
    derive_seed(
        seed,
        match domain {
            Domain::Target => TAG_SYNTH_TARGET,
            Domain::Source => TAG_SYNTH_SOURCE,
        },
    )
}

fn branch_seed(seed: u64, branch: Branch, round: usize) -> u64 {
    derive_seed(seed, (branch.tag() << 32) | round as u64)
}

fn order_seed(seed: u64, branch: Branch, round: usize) -> u64 {
    derive_seed(seed, (branch.tag() << 40) | round as u64)
}

/// Samples with per-sample loss multipliers.
pub struct WeightedSet<'a> {
    pub images: Vec<&'a Tensor<f32>>,
    pub labels: Vec<usize>,
    pub scales: Vec<f64>,
}

impl<'a> WeightedSet<'a> {
    pub fn uniform(ds: &'a Dataset) -> Self {
        Self {
            images: ds.images.iter().collect(),
            labels: ds.labels.clone(),
            scales: vec![1.0; ds.len()],
        }
    }
}

/// Scale-weighted mean loss and accuracy over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochFit {
    pub loss: f64,
    pub accuracy: f64,
}

/// Loss and predicted probabilities of one image, without gradients.
pub fn score(model: &dyn Classifier<f32>, image: &Tensor<f32>, label: usize) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let p = model.params().bind(&tape);
    let out = model.forward(&p, tape.constant(image.clone()))?;
    let loss = model.loss(&out, label)?;
    let l = loss.value().item()? as f64;
    let probs = out.probs.value().to_f64_vec();
    Ok((l, probs))
}

/// Mean loss and accuracy on a labeled set.
pub fn assess(model: &dyn Classifier<f32>, ds: &Dataset) -> Result<EpochFit> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot assess on an empty set".into()));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for (img, &y) in ds.images.iter().zip(&ds.labels) {
        let (l, probs) = score(model, img, y)?;
        loss += l;
        correct += usize::from(argmax(&probs) == y);
    }
    Ok(EpochFit {
        loss: loss / ds.len() as f64,
        accuracy: correct as f64 / ds.len() as f64,
    })
}

/// Mini-batch training. Each batch minimizes `Σ scale_i·loss_i / batch`;
/// samples are reshuffled every epoch from `seed`. `after_epoch` sees the
/// model after each epoch.
pub fn fit(
    model: &mut dyn Classifier<f32>,
    branch: &str,
    set: &WeightedSet<'_>,
    epochs: usize,
    settings: &TrainSettings,
    seed: u64,
    mut after_epoch: impl FnMut(usize, EpochFit, &dyn Classifier<f32>) -> Result<()>,
) -> Result<()> {
    let n = set.images.len();
    if set.labels.len() != n || set.scales.len() != n {
        return Err(Error::Contract(format!(
            "{} images, {} labels, {} scales",
            n,
            set.labels.len(),
            set.scales.len()
        )));
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| set.scales[i] > 0.0).collect();
    if order.is_empty() {
        return Err(Error::Contract(format!("{branch}: no sample has positive weight")));
    }
    let mut opt = Optimizer::new(settings.optimizer, settings.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut step = 0;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct_sum, mut weight_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(settings.batch_size) {
            step += 1;
            let tape = Tape::new();
            let p = model.params().bind(&tape);
            let mut total = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let out = model.forward(&p, tape.constant(set.images[i].clone()))?;
                let loss = model.loss(&out, set.labels[i])?;
                let l = loss.value().item()? as f64;
                let pred = argmax(out.probs.value().data());
                let s = set.scales[i];
                loss_sum += s * l;
                correct_sum += if pred == set.labels[i] { s } else { 0.0 };
                weight_sum += s;
                batch_loss += s * l;
                let term = loss.scale((s / batch.len() as f64) as f32);
                total = Some(match total {
                    None => term,
                    Some(t) => term.add(t)?,
                });
            }
            let diverged = |loss: f64| Error::Divergence {
                branch: branch.to_string(),
                step,
                loss,
            };
            if !batch_loss.is_finite() {
                return Err(diverged(batch_loss));
            }
            let total = total.expect("batches are nonempty");
            let mut grads = tape.backward(total)?;
            let grads = p.gradients(&mut grads);
            drop(p);
            opt.step(model.params_mut(), &grads).map_err(|e| match e {
                Error::NonFiniteGradient(_) => diverged(batch_loss),
                other => other,
            })?;
        }
        opt.learning_rate *= settings.lr_decay;
        let fit = EpochFit {
            loss: loss_sum / weight_sum,
            accuracy: correct_sum / weight_sum,
        };
        log::debug!("{branch} epoch {epoch}: loss {:.4} acc {:.4}", fit.loss, fit.accuracy);
        after_epoch(epoch, fit, &*model)?;
    }
    Ok(())
}

/// One boosting round's learner: a fresh branch model trained for a few
/// epochs with loss weights `(n+m)·w`.
pub struct DeepWeakLearner<'a> {
    branch: Branch,
    cfg: &'a RunConfig,
    round: usize,
    model: Option<Model>,
}

impl<'a> DeepWeakLearner<'a> {
    pub fn new(branch: Branch, cfg: &'a RunConfig, round: usize) -> Self {
        Self {
            branch,
            cfg,
            round,
            model: None,
        }
    }
}

impl WeakLearner<Tensor<f32>> for DeepWeakLearner<'_> {
    fn fit(&mut self, samples: &[&Tensor<f32>], labels: &[usize], weights: &[f64]) -> Result<()> {
        let total = samples.len() as f64;
        let set = WeightedSet {
            images: samples.to_vec(),
            labels: labels.to_vec(),
            scales: weights.iter().map(|w| w * total).collect(),
        };
        let mut model = self.branch.build(self.cfg, branch_seed(self.cfg.seed, self.branch, self.round))?;
        let name = format!("{} (boosting round {})", self.branch, self.round);
        fit(
            &mut *model,
            &name,
            &set,
            self.cfg.boost.weak_epochs,
            &self.cfg.train,
            order_seed(self.cfg.seed, self.branch, self.round),
            |_, _, _| Ok(()),
        )?;
        self.model = Some(model);
        Ok(())
    }

    fn predict(&self, x: &Tensor<f32>) -> Result<usize> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Contract("weak learner used before fit".into()))?
            .predict(x)
    }
}

/// Runs boosting for one branch and returns the final instance weights,
/// scaled to mean one over source then target, plus the round log.
pub fn transfer_weights(
    branch: Branch,
    cfg: &RunConfig,
    source: &Dataset,
    target: &Dataset,
) -> Result<(Vec<f64>, Vec<RoundLog>)> {
    let model = tradaboost::train(
        Labeled::new(&source.images, &source.labels)?,
        Labeled::new(&target.images, &target.labels)?,
        |t| Ok(DeepWeakLearner::new(branch, cfg, t)),
        &cfg.boost.boost_config(),
        None,
    )?;
    let (n, m) = (source.len(), target.len());
    let (ws, wt) = model.effective_weights(n, m)?;
    let total = (n + m) as f64;
    let scales = ws.iter().chain(wt).map(|w| w * total).collect();
    Ok((scales, model.log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveSplit {
    Train,
    Validation,
}

/// One row of `curves.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub branch: Branch,
    pub split: CurveSplit,
    pub loss: f64,
    pub accuracy: f64,
}

/// Target train/test (and optional validation) plus source data.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    /// Carved from train when `val_ratio > 0`; otherwise the test split.
    pub validation: Option<Dataset>,
    pub source: Option<Dataset>,
}

impl Prepared {
    pub fn validation(&self) -> &Dataset {
        self.validation.as_ref().unwrap_or(&self.test)
    }
}

/// Loads or generates the datasets and splits the target set.
pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let size = cfg.image_size;
    let (target, source) = match cfg.data.source {
        DataSource::Synthetic => (
            synth_generate(cfg.data.target_counts, size, Domain::Target, synth_seed(cfg.seed, Domain::Target))?,
            Some(synth_generate(cfg.data.source_counts, size, Domain::Source, synth_seed(cfg.seed, Domain::Source))?),
        ),
        DataSource::Directories => {
            let dir = cfg.data.target_dir.as_ref().expect("validated config has target_dir");
            let (target, _) = ingest_dataset(dir, &cfg.class_names, size)?;
            let source = match &cfg.data.source_dir {
                Some(d) => Some(ingest_dataset(d, &cfg.class_names, size)?.0),
                None => None,
            };
            (target, source)
        }
    };
    let (mut train, test) = split(&target, cfg.split_ratio, derive_seed(cfg.seed, TAG_SPLIT))?;
    let validation = if cfg.val_ratio > 0.0 {
        let (rest, val) = split(&train, 1.0 - cfg.val_ratio, derive_seed(cfg.seed, TAG_VAL))?;
        train = rest;
        Some(val)
    } else {
        None
    };
    if let Some(limit) = cfg.data.target_train_limit {
        train = stratified_take(&train, limit, derive_seed(cfg.seed, TAG_LIMIT))?;
    }
    Ok(Prepared {
        train,
        test,
        validation,
        source,
    })
}

/// Everything a run produces before it is written to disk.
pub struct Artifacts {
    pub config: RunConfig,
    /// One model per branch, in [`Branch::ALL`] order.
    pub models: Vec<(Branch, Model)>,
    pub templates: Vec<DecisionTemplate>,
    pub curves: Vec<CurvePoint>,
    pub round_logs: Vec<(Branch, Vec<RoundLog>)>,
}

impl Artifacts {
    pub fn model(&self, branch: Branch) -> &dyn Classifier<f32> {
        &*self.models.iter().find(|(b, _)| *b == branch).expect("every branch is trained").1
    }
}

pub struct BranchRun {
    pub model: Model,
    pub curves: Vec<CurvePoint>,
    pub round_log: Option<Vec<RoundLog>>,
}

/// Trains one branch: boosting weights first when the branch uses
/// transfer and source data exists, then the final weighted training.
pub fn train_branch(branch: Branch, cfg: &RunConfig, data: &Prepared) -> Result<BranchRun> {
    let boosted = branch.uses_transfer() && cfg.boost.enabled;
    let (joined, scales, round_log) = match (&data.source, boosted) {
        (Some(source), true) => {
            let (scales, log) = transfer_weights(branch, cfg, source, &data.train)?;
            let mut joined = source.clone();
            joined.images.extend(data.train.images.iter().cloned());
            joined.labels.extend(&data.train.labels);
            (joined, scales, Some(log))
        }
        _ => (data.train.clone(), vec![1.0; data.train.len()], None),
    };
    let set = WeightedSet {
        images: joined.images.iter().collect(),
        labels: joined.labels.clone(),
        scales,
    };
    let mut model = branch.build(cfg, branch_seed(cfg.seed, branch, 0))?;
    let mut curves = Vec::new();
    let validation = data.validation();
    fit(
        &mut *model,
        branch.name(),
        &set,
        cfg.epochs,
        &cfg.train,
        order_seed(cfg.seed, branch, 0),
        |epoch, train, model| {
            let val = assess(model, validation)?;
            log::info!(
                "{branch} epoch {epoch}: train loss {:.4} acc {:.4}, validation loss {:.4} acc {:.4}",
                train.loss,
                train.accuracy,
                val.loss,
                val.accuracy
            );
            for (split, f) in [(CurveSplit::Train, train), (CurveSplit::Validation, val)] {
                curves.push(CurvePoint {
                    epoch,
                    branch,
                    split,
                    loss: f.loss,
                    accuracy: f.accuracy,
                });
            }
            Ok(())
        },
    )?;
    Ok(BranchRun {
        model,
        curves,
        round_log,
    })
}

/// Decision profile of one image: one probability row per branch.
pub fn decision_profile(models: &[(Branch, Model)], image: &Tensor<f32>) -> Result<DecisionProfile> {
    let rows = models
        .iter()
        .map(|(_, m)| Ok(m.predict_proba(image)?.to_f64_vec()))
        .collect::<Result<Vec<_>>>()?;
    DecisionProfile::new(&rows)
}

/// Templates from up to `cap` training profiles per label, sampled in a
/// seeded order.
pub fn templates_from(models: &[(Branch, Model)], train: &Dataset, cap: usize, seed: u64) -> Result<Vec<DecisionTemplate>> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut taken = [0usize; 2];
    let mut profiles = Vec::new();
    for i in order {
        let y = train.labels[i];
        if taken[y] < cap {
            taken[y] += 1;
            profiles.push((decision_profile(models, &train.images[i])?, y));
        }
    }
    build_decision_templates(&profiles, 2, cap)
}

/// Trains all branches (in parallel threads), then builds the templates.
pub fn train_all(cfg: &RunConfig, data: &Prepared) -> Result<Artifacts> {
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Contract("training and test splits must be nonempty".into()));
    }
    let runs: Vec<Result<BranchRun>> = std::thread::scope(|s| {
        let handles: Vec<_> = Branch::ALL.map(|b| s.spawn(move || train_branch(b, cfg, data))).into();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect()
    });
    let mut models = Vec::new();
    let mut curves = Vec::new();
    let mut round_logs = Vec::new();
    for (branch, run) in Branch::ALL.into_iter().zip(runs) {
        let run = run?;
        models.push((branch, run.model));
        curves.extend(run.curves);
        if let Some(log) = run.round_log {
            round_logs.push((branch, log));
        }
    }
    curves.sort_by_key(|c| (c.branch, c.epoch, c.split == CurveSplit::Validation));
    let templates = templates_from(&models, &data.train, cfg.train.template_cap, derive_seed(cfg.seed, TAG_TEMPLATES))?;
    Ok(Artifacts {
        config: cfg.clone(),
        models,
        templates,
        curves,
        round_logs,
    })
}
