//! Exhaustive check of template fusion on a 0.1 probability grid for three
//! classifiers and two labels, against fixed and random templates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumorfuse::fusion::{fuse, DecisionProfile, DecisionTemplate};

fn template(label: usize, first_column: [f64; 3]) -> DecisionTemplate {
    DecisionTemplate {
        label,
        classifiers: 3,
        labels: 2,
        values: first_column.iter().flat_map(|&p| [p, 1.0 - p]).collect(),
        sample_count: 1,
    }
}

/// Nearest template by explicit squared Euclidean distance; ties go to label 0.
fn brute_force(dp: &[[f64; 2]; 3], templates: &[DecisionTemplate; 2]) -> usize {
    let mut dist = [0.0f64; 2];
    for (k, t) in templates.iter().enumerate() {
        let mut acc = 0.0;
        for (i, row) in dp.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let diff = v - t.values[i * 2 + j];
                acc += diff * diff;
            }
        }
        dist[k] = acc;
    }
    if dist[1] < dist[0] {
        1
    } else {
        0
    }
}

#[test]
fn fuse_agrees_with_brute_force_on_grid() {
    let mut template_sets = vec![
        [template(0, [0.9, 0.8, 0.7]), template(1, [0.1, 0.3, 0.2])],
        [template(0, [0.6, 0.6, 0.6]), template(1, [0.4, 0.4, 0.4])],
        [template(0, [1.0, 0.0, 0.5]), template(1, [0.0, 1.0, 0.5])],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..7 {
        let mut col = || [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        template_sets.push([template(0, col()), template(1, col())]);
    }
    let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let mut checked = 0;
    for templates in &template_sets {
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    let rows = [[a, 1.0 - a], [b, 1.0 - b], [c, 1.0 - c]];
                    let dp = DecisionProfile::new(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
                    let fused = fuse(&dp, templates).unwrap();
                    assert!((0.0..=1.0).contains(&fused.score));
                    assert_eq!(fused.label, brute_force(&rows, templates), "{rows:?}");
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 10 * 11 * 11 * 11);
}
