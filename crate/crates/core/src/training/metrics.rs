use serde::{Deserialize, Serialize};

use crate::model::argmax;

/// Macro-averaged classification metrics.
///
/// Per-class precision (recall) is 0 when the class is never predicted (never
/// present); macro averages run over classes that are present or predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest macro AUROC; absent when fewer than two classes occur.
    pub auroc: Option<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Area under the ROC curve by the rank statistic with midranks for ties.
///
/// `None` unless both positives and negatives are present.
pub fn binary_auroc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    assert_eq!(positive.len(), scores.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Metrics from true labels and per-sample class scores; the prediction is the
/// highest-scoring class.
pub fn compute_metrics(labels: &[usize], scores: &[Vec<f64>], n_classes: usize) -> MetricsReport {
    assert_eq!(labels.len(), scores.len());
    let n = labels.len();
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&y, s) in labels.iter().zip(scores) {
        confusion[y][argmax(s)] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();

    let (mut p_sum, mut r_sum, mut f_sum, mut counted) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..n_classes {
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        if actual == 0 && predicted == 0 {
            continue;
        }
        let tp = confusion[c][c] as f64;
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        p_sum += precision;
        r_sum += recall;
        f_sum += f1;
        counted += 1;
    }
    let macro_avg = |s: f64| if counted > 0 { s / counted as f64 } else { 0.0 };

    let per_class: Vec<f64> = (0..n_classes)
        .filter_map(|c| {
            let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            let class_scores: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            binary_auroc(&positive, &class_scores)
        })
        .collect();
    let auroc = (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64);

    MetricsReport {
        n,
        accuracy: if n > 0 { correct as f64 / n as f64 } else { 0.0 },
        precision: macro_avg(p_sum),
        recall: macro_avg(r_sum),
        f1: macro_avg(f_sum),
        auroc,
        confusion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(c: usize, n: usize) -> Vec<f64> {
        (0..n).map(|i| if i == c { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn hand_auroc() {
        let auc = binary_auroc(&[true, true, false, false], &[0.9, 0.4, 0.6, 0.1]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(binary_auroc(&[true, false], &[0.5, 0.5]), Some(0.5));
        assert_eq!(binary_auroc(&[true, true], &[0.1, 0.2]), None);
    }

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 2, 1, 0];
        let scores: Vec<Vec<f64>> = labels.iter().map(|&c| one_hot(c, 3)).collect();
        let m = compute_metrics(&labels, &scores, 3);
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1, m.auroc), (1.0, 1.0, 1.0, 1.0, Some(1.0)));
        assert_eq!(m.confusion.iter().flatten().sum::<usize>(), 6);
    }

    #[test]
    fn hand_computed_macro_scores() {
        // confusion rows (true): [2,1,0], [0,1,1], [0,0,1]
        let labels = [0, 0, 0, 1, 1, 2];
        let preds = [0, 0, 1, 1, 2, 2];
        let scores: Vec<Vec<f64>> = preds.iter().map(|&c| one_hot(c, 3)).collect();
        let m = compute_metrics(&labels, &scores, 3);
        assert_eq!(m.confusion, vec![vec![2, 1, 0], vec![0, 1, 1], vec![0, 0, 1]]);
        let p = (1.0 + 0.5 + 0.5) / 3.0;
        let r = (2.0 / 3.0 + 0.5 + 1.0) / 3.0;
        let f = (0.8 + 0.5 + 2.0 / 3.0) / 3.0;
        assert!((m.precision - p).abs() < 1e-15);
        assert!((m.recall - r).abs() < 1e-15);
        assert!((m.f1 - f).abs() < 1e-15);
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_split_has_no_auroc() {
        let m = compute_metrics(&[1, 1, 1], &[one_hot(1, 3), one_hot(0, 3), one_hot(1, 3)], 3);
        assert_eq!(m.auroc, None);
        assert!(m.f1 < 1.0);
    }

    #[test]
    fn null_scores_give_chance_auroc() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let labels: Vec<usize> = (0..2000).map(|_| rng.random_range(0..3)).collect();
        let scores: Vec<Vec<f64>> = (0..2000).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let auc = compute_metrics(&labels, &scores, 3).auroc.unwrap();
        assert!((auc - 0.5).abs() < 0.02, "{auc}");
    }

    #[test]
    fn auroc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let pos: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..6)) as f64).collect();
            let Some(auc) = binary_auroc(&pos, &scores) else { continue };
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if pos[i] && !pos[j] {
                        den += 1.0;
                        num += if scores[i] > scores[j] {
                            1.0
                        } else if scores[i] == scores[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            assert!((auc - num / den).abs() < 1e-12);
        }
    }
}
