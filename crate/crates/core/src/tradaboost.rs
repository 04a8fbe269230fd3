//! Instance-transfer boosting (TrAdaBoost) over any weighted weak learner.
//!
//! Source samples that the current learner gets wrong are discounted by a
//! fixed factor, while misclassified target samples are boosted as in
//! AdaBoost. The final instance weights can be read back and used as loss
//! weights for a single deep model.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp on `β_t` after a perfect target fit.
pub const BETA_T_FLOOR: f64 = 1e-10;
/// Upper clamp on the target error, keeping `ln(1/β_t)` finite.
pub const EPSILON_CEILING: f64 = 0.5 - 1e-6;

/// Classifier that can be fit to weighted samples.
pub trait WeakLearner<X: ?Sized> {
    /// Fits to `samples` with positive `weights` summing to one.
    fn fit(&mut self, samples: &[&X], labels: &[usize], weights: &[f64]) -> Result<()>;

    fn predict(&self, x: &X) -> Result<usize>;
}

/// Labeled samples from one domain.
#[derive(Clone, Copy, Debug)]
pub struct Labeled<'a, X> {
    pub samples: &'a [X],
    pub labels: &'a [usize],
}

impl<'a, X> Labeled<'a, X> {
    pub fn new(samples: &'a [X], labels: &'a [usize]) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Contract(format!("label {bad} is not binary")));
        }
        Ok(Self { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Which stored rounds take part in the final vote.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteWindow {
    /// Rounds `⌈T/2⌉..=T`.
    #[default]
    LastHalf,
    /// Every stored round, as in plain AdaBoost.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostConfig {
    pub rounds: usize,
    pub vote: VoteWindow,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            vote: VoteWindow::LastHalf,
        }
    }
}

/// Source discount `β = 1/(1+√(2 ln n / T))`.
pub fn source_beta(n: usize, rounds: usize) -> f64 {
    1.0 / (1.0 + (2.0 * (n as f64).ln() / rounds as f64).sqrt())
}

/// `β_t = ε_t/(1−ε_t)`.
pub fn round_beta(epsilon: f64) -> f64 {
    epsilon / (1.0 - epsilon)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundOutcome {
    Kept,
    /// Zero target error; the round is kept and boosting stops.
    PerfectFit,
    /// Target error at or above one half; the round is dropped and boosting stops.
    Discarded,
}

/// One line of the round log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub epsilon_t: f64,
    pub beta_t: f64,
    pub source_weight_mass: f64,
    pub target_weight_mass: f64,
    #[serde(skip)]
    pub outcome: RoundOutcome,
}

/// A stored round: learner plus its error and discount.
#[derive(Clone, Debug)]
pub struct Round<L> {
    pub learner: L,
    pub epsilon: f64,
    pub beta: f64,
}

impl<L> Round<L> {
    /// Vote weight `ln(1/β_t)`.
    pub fn vote_weight(&self) -> f64 {
        (1.0 / self.beta).ln()
    }
}

#[derive(Clone, Debug)]
pub struct BoostedModel<L> {
    pub rounds: Vec<Round<L>>,
    /// Source discount constant.
    pub beta: f64,
    pub source_len: usize,
    pub target_len: usize,
    /// Normalized instance weights after the last update, source first.
    pub final_weights: Vec<f64>,
    pub log: Vec<RoundLog>,
    pub vote: VoteWindow,
}

fn normalize(w: &mut [f64]) -> Result<()> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Contract(format!("weights sum to {total}")));
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    Ok(())
}

/// Runs up to `cfg.rounds` boosting rounds.
///
/// `initial` overrides the uniform starting weights (source first); entries
/// must be nonnegative with a positive target share.
pub fn train<X, L, F>(
    source: Labeled<'_, X>,
    target: Labeled<'_, X>,
    mut make_learner: F,
    cfg: &BoostConfig,
    initial: Option<Vec<f64>>,
) -> Result<BoostedModel<L>>
where
    L: WeakLearner<X>,
    F: FnMut(usize) -> Result<L>,
{
    let (n, m) = (source.len(), target.len());
    if n == 0 || m == 0 {
        return Err(Error::Contract(format!(
            "boosting needs nonempty source and target, got {n} and {m}"
        )));
    }
    if cfg.rounds == 0 {
        return Err(Error::Contract("boosting needs at least one round".into()));
    }
    let mut weights = match initial {
        Some(w) => {
            if w.len() != n + m || w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::Contract(format!(
                    "initial weights must be {} finite nonnegative values",
                    n + m
                )));
            }
            if w[n..].iter().sum::<f64>() <= 0.0 {
                return Err(Error::Contract("initial target weights are all zero".into()));
            }
            w
        }
        None => vec![1.0; n + m],
    };
    normalize(&mut weights)?;

    let samples: Vec<&X> = source.samples.iter().chain(target.samples).collect();
    let labels: Vec<usize> = source.labels.iter().chain(target.labels).copied().collect();
    let beta = source_beta(n, cfg.rounds);
    let mut rounds = Vec::new();
    let mut log = Vec::new();

    for t in 1..=cfg.rounds {
        normalize(&mut weights)?;
        let source_mass: f64 = weights[..n].iter().sum();
        let target_mass = 1.0 - source_mass;

        let mut learner = make_learner(t)?;
        learner.fit(&samples, &labels, &weights)?;
        let wrong = samples
            .iter()
            .zip(&labels)
            .map(|(x, &y)| Ok(learner.predict(x)? != y))
            .collect::<Result<Vec<bool>>>()?;

        let target_w: f64 = weights[n..].iter().sum();
        let target_err = (n..n + m).filter(|&i| wrong[i]).fold(0.0, |a, i| a + weights[i]);
        let mut epsilon = target_err / target_w;

        let outcome = if epsilon >= 0.5 {
            epsilon = EPSILON_CEILING;
            RoundOutcome::Discarded
        } else if epsilon == 0.0 {
            RoundOutcome::PerfectFit
        } else {
            RoundOutcome::Kept
        };
        let beta_t = if outcome == RoundOutcome::PerfectFit {
            BETA_T_FLOOR
        } else {
            round_beta(epsilon)
        };
        log.push(RoundLog {
            round: t,
            epsilon_t: epsilon,
            beta_t,
            source_weight_mass: source_mass,
            target_weight_mass: target_mass,
            outcome,
        });
        match outcome {
            RoundOutcome::Discarded => {
                log::warn!("boosting round {t}: target error reached 0.5, round dropped, stopping");
                break;
            }
            RoundOutcome::PerfectFit => {
                log::info!("boosting round {t}: perfect target fit, stopping");
            }
            RoundOutcome::Kept => {}
        }

        for i in 0..n {
            if wrong[i] {
                weights[i] *= beta;
            }
        }
        for i in n..n + m {
            if wrong[i] {
                weights[i] /= beta_t;
            }
        }
        rounds.push(Round {
            learner,
            epsilon,
            beta: beta_t,
        });
        if outcome == RoundOutcome::PerfectFit {
            break;
        }
    }
    normalize(&mut weights)?;
    Ok(BoostedModel {
        rounds,
        beta,
        source_len: n,
        target_len: m,
        final_weights: weights,
        log,
        vote: cfg.vote,
    })
}

impl<L> BoostedModel<L> {
    /// Index range of the rounds that vote.
    pub fn voting_rounds(&self) -> std::ops::Range<usize> {
        let t = self.rounds.len();
        match self.vote {
            VoteWindow::LastHalf => t.div_ceil(2).saturating_sub(1)..t,
            VoteWindow::All => 0..t,
        }
    }

    /// Normalized final instance weights `(source, target)`.
    pub fn effective_weights(&self, source_len: usize, target_len: usize) -> Result<(&[f64], &[f64])> {
        if source_len != self.source_len || target_len != self.target_len {
            return Err(Error::Contract(format!(
                "model was trained on {}+{} samples, not {source_len}+{target_len}",
                self.source_len, self.target_len
            )));
        }
        Ok(self.final_weights.split_at(source_len))
    }

    /// Writes the round log as CSV.
    pub fn write_log<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        for row in &self.log {
            w.serialize(row).map_err(|e| Error::Contract(format!("round log: {e}")))?;
        }
        w.flush().map_err(|e| Error::Contract(format!("round log: {e}")))?;
        Ok(())
    }

    /// Weighted vote of the voting rounds; ties go to label 0.
    pub fn predict<X: ?Sized>(&self, x: &X) -> Result<usize>
    where
        L: WeakLearner<X>,
    {
        if self.rounds.is_empty() {
            return Err(Error::Contract("boosted model has no rounds".into()));
        }
        let mut score = [0.0f64; 2];
        for round in &self.rounds[self.voting_rounds()] {
            let label = round.learner.predict(x)?;
            if label > 1 {
                return Err(Error::Contract(format!("weak learner returned label {label}")));
            }
            score[label] += round.vote_weight();
        }
        Ok(usize::from(score[1] > score[0]))
    }
}

/// Weighted vote over `(vote weight, label)` pairs; ties go to label 0.
pub fn weighted_vote(votes: &[(f64, usize)]) -> usize {
    let mut score = [0.0f64; 2];
    for &(w, l) in votes {
        score[l.min(1)] += w;
    }
    usize::from(score[1] > score[0])
}

/// Axis-aligned threshold classifier on feature vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecisionStump {
    pub feature: usize,
    pub threshold: f64,
    /// Label predicted when the feature exceeds the threshold.
    pub above: usize,
}

impl WeakLearner<[f64]> for DecisionStump {
    fn fit(&mut self, samples: &[&[f64]], labels: &[usize], weights: &[f64]) -> Result<()> {
        let dims = samples.first().map(|s| s.len()).unwrap_or(0);
        if dims == 0 || samples.iter().any(|s| s.len() != dims) {
            return Err(Error::Contract("stump needs equal-length nonempty features".into()));
        }
        let mut best = (f64::INFINITY, DecisionStump::default());
        for f in 0..dims {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.sort_by(|&a, &b| samples[a][f].total_cmp(&samples[b][f]));
            // weighted error of "everything above" for each label, then sweep
            let mut err_above = [0.0f64; 2];
            for (i, &y) in labels.iter().enumerate() {
                err_above[1 - y] += weights[i];
            }
            let first = samples[order[0]][f];
            let mut candidates = vec![(first - 1.0, err_above)];
            for (k, &i) in order.iter().enumerate() {
                let y = labels[i];
                // sample i moves below the threshold and takes the opposite label
                err_above[1 - y] -= weights[i];
                err_above[y] += weights[i];
                let v = samples[i][f];
                match order.get(k + 1) {
                    Some(&j) if samples[j][f] == v => continue,
                    Some(&j) => candidates.push((0.5 * (v + samples[j][f]), err_above)),
                    None => {}
                }
            }
            for (threshold, errs) in candidates {
                for above in 0..2 {
                    if errs[above] < best.0 {
                        best = (
                            errs[above],
                            DecisionStump {
                                feature: f,
                                threshold,
                                above,
                            },
                        );
                    }
                }
            }
        }
        *self = best.1;
        Ok(())
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        let v = x
            .get(self.feature)
            .ok_or_else(|| Error::dim("stump", format!("feature {} of {}", self.feature, x.len())))?;
        Ok(if *v > self.threshold { self.above } else { 1 - self.above })
    }
}

impl WeakLearner<Vec<f64>> for DecisionStump {
    fn fit(&mut self, samples: &[&Vec<f64>], labels: &[usize], weights: &[f64]) -> Result<()> {
        let views: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        WeakLearner::<[f64]>::fit(self, &views, labels, weights)
    }

    fn predict(&self, x: &Vec<f64>) -> Result<usize> {
        WeakLearner::<[f64]>::predict(self, x.as_slice())
    }
}
