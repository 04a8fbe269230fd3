//! Decision profiles, decision templates, and nearest-template fusion of the
//! branch outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on each profile row summing to one.
pub const ROW_SUM_TOL: f64 = 1e-6;
/// Default number of training profiles averaged into a template.
pub const TEMPLATE_CAP: usize = 100;

/// `l×h` matrix whose row `i` is classifier `i`'s probability output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionProfile {
    classifiers: usize,
    labels: usize,
    values: Vec<f64>,
}

impl DecisionProfile {
    /// Stacks one probability vector per classifier.
    pub fn new(outputs: &[Vec<f64>]) -> Result<Self> {
        let labels = outputs
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Contract("decision profile needs at least one classifier".into()))?;
        if labels == 0 {
            return Err(Error::Contract("classifier 0 produced an empty output".into()));
        }
        for (i, row) in outputs.iter().enumerate() {
            if row.len() != labels {
                return Err(Error::Contract(format!(
                    "classifier {i} produced {} values, expected {labels}",
                    row.len()
                )));
            }
            let total: f64 = row.iter().sum();
            let in_range = row.iter().all(|&v| (-ROW_SUM_TOL..=1.0 + ROW_SUM_TOL).contains(&v));
            if !in_range || (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Contract(format!(
                    "classifier {i} output {row:?} is not a probability vector"
                )));
            }
        }
        Ok(Self {
            classifiers: outputs.len(),
            labels,
            values: outputs.concat(),
        })
    }

    pub fn classifiers(&self) -> usize {
        self.classifiers
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.labels..(i + 1) * self.labels]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values.chunks(self.labels).map(|r| r.iter().sum()).collect()
    }
}

/// Mean decision profile of one label's training samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTemplate {
    pub label: usize,
    pub classifiers: usize,
    pub labels: usize,
    pub values: Vec<f64>,
    pub sample_count: usize,
}

impl DecisionTemplate {
    pub fn at(&self, classifier: usize, label: usize) -> f64 {
        self.values[classifier * self.labels + label]
    }

    /// Frobenius distance to a profile of the same shape.
    pub fn distance(&self, dp: &DecisionProfile) -> Result<f64> {
        Ok(self.squared_distance(dp)?.sqrt())
    }

    /// Squared Frobenius distance; comparisons use this so that two
    /// distances one ulp apart are not collapsed by the square root.
    pub fn squared_distance(&self, dp: &DecisionProfile) -> Result<f64> {
        if dp.classifiers != self.classifiers || dp.labels != self.labels {
            return Err(Error::Contract(format!(
                "profile is {}x{} but template {} is {}x{}",
                dp.classifiers, dp.labels, self.label, self.classifiers, self.labels
            )));
        }
        Ok(dp
            .values
            .iter()
            .zip(&self.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
    }
}

/// Averages the first `min(cap, available)` profiles of each label, in the
/// order given. Returns one template per label `0..labels`.
pub fn build_decision_templates(
    profiles: &[(DecisionProfile, usize)],
    labels: usize,
    cap: usize,
) -> Result<Vec<DecisionTemplate>> {
    if cap == 0 {
        return Err(Error::Estimation("template sample cap must be positive".into()));
    }
    let shape = profiles.first().map(|(p, _)| (p.classifiers, p.labels));
    let mut templates = Vec::with_capacity(labels);
    for label in 0..labels {
        let chosen: Vec<&DecisionProfile> = profiles
            .iter()
            .filter(|(_, y)| *y == label)
            .map(|(p, _)| p)
            .take(cap)
            .collect();
        let (l, h) = match shape {
            Some(s) if !chosen.is_empty() => s,
            _ => {
                return Err(Error::Estimation(format!(
                    "no training profiles for label {label}"
                )))
            }
        };
        let mut values = vec![0.0; l * h];
        for p in &chosen {
            if (p.classifiers, p.labels) != (l, h) {
                return Err(Error::Contract(format!(
                    "profile shape {}x{} differs from {l}x{h}",
                    p.classifiers, p.labels
                )));
            }
            for (acc, v) in values.iter_mut().zip(&p.values) {
                *acc += v;
            }
        }
        let n = chosen.len();
        values.iter_mut().for_each(|v| *v /= n as f64);
        templates.push(DecisionTemplate {
            label,
            classifiers: l,
            labels: h,
            values,
            sample_count: n,
        });
    }
    Ok(templates)
}

/// Fused decision: `score = d₀/(d₀+d₁)`, label 1 only when `score > 0.5`.
///
/// The label is taken from `d₁² < d₀²` directly, which is the same rule
/// without the rounding of the ratio or the square roots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fused {
    pub score: f64,
    pub label: usize,
    pub distances: [f64; 2],
}

pub fn fuse(dp: &DecisionProfile, templates: &[DecisionTemplate]) -> Result<Fused> {
    let find = |label: usize| {
        templates
            .iter()
            .find(|t| t.label == label)
            .ok_or_else(|| Error::Contract(format!("missing decision template for label {label}")))
    };
    let q0 = find(0)?.squared_distance(dp)?;
    let q1 = find(1)?.squared_distance(dp)?;
    let (d0, d1) = (q0.sqrt(), q1.sqrt());
    let total = d0 + d1;
    let score = if total > 0.0 { d0 / total } else { 0.5 };
    Ok(Fused {
        score,
        label: usize::from(q1 < q0),
        distances: [d0, d1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dp(rows: &[[f64; 2]]) -> DecisionProfile {
        DecisionProfile::new(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn template(label: usize, rows: &[[f64; 2]]) -> DecisionTemplate {
        let p = dp(rows);
        DecisionTemplate {
            label,
            classifiers: p.classifiers,
            labels: 2,
            values: p.values,
            sample_count: 1,
        }
    }

    #[test]
    fn profile_examples() {
        let p = dp(&[[1.0, 0.0]; 3]);
        assert_eq!(p.values(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let p = dp(&[[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]]);
        assert_eq!(p.row(1), &[0.2, 0.8]);
        for s in p.row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_errors_name_classifier() {
        let err = DecisionProfile::new(&[vec![0.5, 0.5], vec![0.6, 0.6]]).unwrap_err().to_string();
        assert!(err.contains("classifier 1"), "{err}");
        let err = DecisionProfile::new(&[vec![0.5, 0.5], vec![1.0]]).unwrap_err().to_string();
        assert!(err.contains("classifier 1"), "{err}");
    }

    #[test]
    fn template_examples() {
        let a = dp(&[[0.8, 0.2]]);
        let b = dp(&[[0.1, 0.9]]);
        let t = build_decision_templates(&[(a.clone(), 0), (b.clone(), 1)], 2, 100).unwrap();
        assert_eq!(t[0].values, a.values);
        assert_eq!(t[1].values, b.values);

        let t = build_decision_templates(&[(dp(&[[1.0, 0.0]]), 0), (dp(&[[0.0, 1.0]]), 0), (b, 1)], 2, 100)
            .unwrap();
        assert_eq!(t[0].values, vec![0.5, 0.5]);
        assert_eq!(t[0].sample_count, 2);
    }

    #[test]
    fn template_cap_limits_samples() {
        let mut profiles: Vec<(DecisionProfile, usize)> = (0..400).map(|_| (dp(&[[0.9, 0.1]]), 0)).collect();
        profiles.push((dp(&[[0.2, 0.8]]), 1));
        // only the first 100 of label 0 count
        profiles[100].0 = dp(&[[0.0, 1.0]]);
        let t = build_decision_templates(&profiles, 2, TEMPLATE_CAP).unwrap();
        assert_eq!(t[0].sample_count, 100);
        assert!((t[0].values[0] - 0.9).abs() < 1e-12);
        assert_eq!(t[1].sample_count, 1);
    }

    #[test]
    fn missing_label_is_estimation_error() {
        let r = build_decision_templates(&[(dp(&[[0.9, 0.1]]), 0)], 2, 100);
        assert!(matches!(r, Err(Error::Estimation(_))));
    }

    #[test]
    fn fuse_examples() {
        let t0 = template(0, &[[1.0, 0.0]]);
        let t1 = template(1, &[[0.0, 1.0]]);
        let f = fuse(&dp(&[[1.0, 0.0]]), &[t0.clone(), t1.clone()]).unwrap();
        assert_eq!((f.score, f.label), (0.0, 0));
        let f = fuse(&dp(&[[0.5, 0.5]]), &[t0.clone(), t1.clone()]).unwrap();
        assert_eq!((f.score, f.label), (0.5, 0));
        let f = fuse(&dp(&[[0.9, 0.1]]), &[t0.clone(), t1.clone()]).unwrap();
        let (d0, d1) = (0.02f64.sqrt(), 1.62f64.sqrt());
        assert!((f.distances[0] - d0).abs() < 1e-12 && (f.distances[1] - d1).abs() < 1e-12);
        assert!((f.score - d0 / (d0 + d1)).abs() < 1e-12);
        // √0.02 / (√0.02 + √1.62) = 1 / (1 + 9)
        assert!((f.score - 0.1).abs() < 1e-12);
        assert_eq!(f.label, 0);
        // both distances zero
        let f = fuse(&dp(&[[0.5, 0.5]]), &[template(0, &[[0.5, 0.5]]), template(1, &[[0.5, 0.5]])]).unwrap();
        assert_eq!((f.score, f.label), (0.5, 0));
    }

    #[test]
    fn fuse_shape_mismatch() {
        let t = [template(0, &[[1.0, 0.0]]), template(1, &[[0.0, 1.0]])];
        assert!(fuse(&dp(&[[1.0, 0.0], [1.0, 0.0]]), &t).is_err());
        assert!(fuse(&dp(&[[1.0, 0.0]]), &t[..1]).is_err());
    }

    fn prob_rows(n: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec((0.0f64..=1.0).prop_map(|p| [p, 1.0 - p]), n)
    }

    proptest! {
        #[test]
        fn fuse_matches_nearest_template(x in prob_rows(3), a in prob_rows(3), b in prob_rows(3)) {
            let f = fuse(&dp(&x), &[template(0, &a), template(1, &b)]).unwrap();
            prop_assert!((0.0..=1.0).contains(&f.score));
            if f.distances[0] != f.distances[1] {
                prop_assert_eq!(f.label, usize::from(f.distances[1] < f.distances[0]));
            }
            let scaled = [f.distances[0] * 7.5, f.distances[1] * 7.5];
            let s = scaled[0] / (scaled[0] + scaled[1]);
            if scaled[0] + scaled[1] > 0.0 {
                prop_assert_eq!(usize::from(s > 0.5), f.label);
            }
        }

        #[test]
        fn templates_ignore_order(rows in prop::collection::vec(prob_rows(3), 1..12), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut profiles: Vec<(DecisionProfile, usize)> = rows.iter().map(|r| (dp(r), 0)).collect();
            profiles.push((dp(&[[0.5, 0.5]; 3]), 1));
            let t = build_decision_templates(&profiles, 2, usize::MAX).unwrap();
            profiles.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let u = build_decision_templates(&profiles, 2, usize::MAX).unwrap();
            for (a, b) in t[0].values.iter().zip(&u[0].values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
