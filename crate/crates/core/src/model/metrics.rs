use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when no class has both positive and negative examples.
    pub auc: Option<f64>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Metrics over clip-level probability vectors (frame means).
///
/// With two classes precision, recall and F1 are those of class 1. With more
/// classes they are macro-averaged. AUC is the macro one-vs-rest rank
/// statistic over classes that have both positives and negatives.
pub fn classification_metrics(
    clip_probs: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
) -> Result<ClassificationMetrics> {
    if clip_probs.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions but {} labels",
            clip_probs.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("no predictions to score".into()));
    }
    if classes < 2 {
        return Err(Error::Input("need at least two classes".into()));
    }
    if let Some(p) = clip_probs.iter().find(|p| p.len() != classes) {
        return Err(Error::Input(format!(
            "probability vector of length {} for {classes} classes",
            p.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!(
            "label {l} out of range for {classes} classes"
        )));
    }
    let preds: Vec<usize> = clip_probs.iter().map(|p| argmax(p)).collect();
    let mut cm = vec![vec![0usize; classes]; classes];
    for (&y, &p) in labels.iter().zip(&preds) {
        cm[y][p] += 1;
    }
    let n = labels.len() as f64;
    let accuracy = (0..classes).map(|c| cm[c][c]).sum::<usize>() as f64 / n;

    let per_class = |c: usize| -> (f64, f64, f64) {
        let tp = cm[c][c] as f64;
        let predicted: usize = (0..classes).map(|r| cm[r][c]).sum();
        let actual: usize = cm[c].iter().sum();
        let precision = ratio(tp, predicted as f64);
        let recall = ratio(tp, actual as f64);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        (precision, recall, f1)
    };
    let (precision, recall, f1) = if classes == 2 {
        per_class(1)
    } else {
        let mut sums = (0.0, 0.0, 0.0);
        for c in 0..classes {
            let (p, r, f) = per_class(c);
            sums.0 += p;
            sums.1 += r;
            sums.2 += f;
        }
        let m = classes as f64;
        (sums.0 / m, sums.1 / m, sums.2 / m)
    };

    let auc = if classes == 2 {
        let scores: Vec<f64> = clip_probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        rank_auc(&scores, &pos)
    } else {
        let aucs: Vec<f64> = (0..classes)
            .filter_map(|c| {
                let scores: Vec<f64> = clip_probs.iter().map(|p| p[c]).collect();
                let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                rank_auc(&scores, &pos)
            })
            .collect();
        (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
    };

    Ok(ClassificationMetrics {
        accuracy,
        precision,
        recall,
        f1,
        auc,
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` without both classes present.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney U with mid-ranks for tied scores.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}
