//! Fused and per-branch evaluation on a labeled test set.

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::train::decision_profile;
use super::{Branch, Model};
use crate::classifier::argmax;
use crate::error::{Error, Result};
use crate::fusion::{fuse, DecisionTemplate};

/// 2×2 counts with tumor (label 0) as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn record(&mut self, truth: usize, predicted: usize) {
        match (truth == 0, predicted == 0) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `(TP+TN)/total`.
    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// `[actual][predicted]` counts, label 0 first.
    pub fn matrix(&self) -> [[usize; 2]; 2] {
        [[self.tp, self.fn_], [self.fp, self.tn]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchAccuracy {
    pub branch: Branch,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Confusion,
    /// Fused accuracy.
    pub accuracy: f64,
    pub branches: Vec<BranchAccuracy>,
}

impl Metrics {
    pub fn branch(&self, b: Branch) -> Option<f64> {
        self.branches.iter().find(|x| x.branch == b).map(|x| x.accuracy)
    }

    pub fn best_branch(&self) -> f64 {
        self.branches.iter().map(|b| b.accuracy).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Fuses the branch outputs of every test image against the templates.
pub fn evaluate(models: &[(Branch, Model)], templates: &[DecisionTemplate], test: &Dataset) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::Contract("test set is empty".into()));
    }
    let mut fused = Confusion::default();
    let mut per_branch = vec![Confusion::default(); models.len()];
    for (img, &y) in test.images.iter().zip(&test.labels) {
        let dp = decision_profile(models, img)?;
        for (k, c) in per_branch.iter_mut().enumerate() {
            c.record(y, argmax(dp.row(k)));
        }
        fused.record(y, fuse(&dp, templates)?.label);
    }
    Ok(Metrics {
        confusion: fused,
        accuracy: fused.accuracy(),
        branches: models
            .iter()
            .zip(&per_branch)
            .map(|((b, _), c)| BranchAccuracy {
                branch: *b,
                accuracy: c.accuracy(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let mut c = Confusion::default();
        for y in [0, 0, 1, 0, 1] {
            c.record(y, y);
        }
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(c.accuracy(), 1.0);
    }

    #[test]
    fn cells_and_accuracy() {
        let mut c = Confusion::default();
        for (y, p) in [(0, 0), (0, 1), (1, 0), (1, 1), (1, 1), (0, 0)] {
            c.record(y, p);
        }
        assert_eq!(c, Confusion { tp: 2, fp: 1, fn_: 1, tn: 2 });
        assert_eq!(c.total(), 6);
        assert_eq!(c.accuracy(), 4.0 / 6.0);
        assert_eq!(c.matrix(), [[2, 1], [1, 2]]);
    }

    #[test]
    fn empty_test_set_rejected() {
        assert!(matches!(evaluate(&[], &[], &Dataset::default()), Err(Error::Contract(_))));
    }
}
