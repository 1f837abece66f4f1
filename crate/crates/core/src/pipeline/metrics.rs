//! Classification metrics: accuracy, F1, PR/ROC areas, confusion matrix.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::write_text;
use crate::error::{Error, Result};

/// One point of a precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision/recall curve for one positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class: usize,
    pub points: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub pr_auc: f64,
    pub roc_auc: f64,
    /// Binary tasks carry the positive-class curve only; multi-class tasks
    /// one curve per class.
    pub pr_curves: Vec<PrCurve>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    accuracy: f64,
    f1: f64,
    pr_auc: f64,
    roc_auc: f64,
    confusion: &'a [Vec<u64>],
}

impl Metrics {
    /// JSON document with keys `accuracy, f1, pr_auc, roc_auc, confusion`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MetricsDocument {
            accuracy: self.accuracy,
            f1: self.f1,
            pr_auc: self.pr_auc,
            roc_auc: self.roc_auc,
            confusion: &self.confusion,
        })
        .expect("finite metrics serialize")
    }

    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut s = String::from("true\\pred");
        for c in 0..k {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{t}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn sample_count(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Index of the largest score; the first wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn confusion_matrix(predicted: &[usize], labels: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &t) in predicted.iter().zip(labels) {
        m[t][p] += 1;
    }
    m
}

fn class_f1(confusion: &[Vec<u64>], c: usize) -> f64 {
    let tp = confusion[c][c] as f64;
    let fp: f64 = (0..confusion.len())
        .filter(|&t| t != c)
        .map(|t| confusion[t][c] as f64)
        .sum();
    let fn_: f64 = (0..confusion.len())
        .filter(|&p| p != c)
        .map(|p| confusion[c][p] as f64)
        .sum();
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    2.0 * precision * recall / (precision + recall)
}

/// Binary: F1 of class 1. Multi-class: macro average over classes.
pub fn f1_score(confusion: &[Vec<u64>]) -> f64 {
    let k = confusion.len();
    if k == 2 {
        class_f1(confusion, 1)
    } else {
        (0..k).map(|c| class_f1(confusion, c)).sum::<f64>() / k as f64
    }
}

/// Mann-Whitney statistic: the fraction of (positive, negative) pairs where
/// the positive scores higher, ties counting one half. `None` when either
/// class is absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count() as u64;
    let n_neg = positive.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the pair count, so half-credit stays integral
    let mut doubled: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_g, mut neg_g) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            j += 1;
        }
        doubled += 2 * pos_g * neg_below + pos_g * neg_g;
        neg_below += neg_g;
        i = j;
    }
    Some(doubled as f64 / (2 * n_pos * n_neg) as f64)
}

/// Curve from the `(recall 0, precision 1)` anchor through every distinct
/// score threshold, descending, until full recall is reached.
pub fn pr_curve(scores: &[f64], positive: &[bool], class: usize) -> PrCurve {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let mut points = vec![PrPoint {
        threshold: f64::INFINITY,
        recall: 0.0,
        precision: 1.0,
    }];
    if n_pos > 0 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < order.len() {
            let t = scores[order[i]];
            while i < order.len() && scores[order[i]] == t {
                if positive[order[i]] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            points.push(PrPoint {
                threshold: t,
                recall: tp as f64 / n_pos as f64,
                precision: tp as f64 / (tp + fp) as f64,
            });
            if tp == n_pos {
                break;
            }
        }
    }
    PrCurve { class, points }
}

/// Trapezoidal area under `(recall, precision)` points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

impl PrCurve {
    pub fn area(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .map(|p| (p.recall, p.precision))
            .collect();
        trapezoid_area(&pts)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,recall,precision\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.recall, p.precision);
        }
        s
    }
}

/// Writes `threshold,recall,precision` rows, thresholds descending.
pub fn export_pr_curve(curve: &PrCurve, path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &curve.to_csv())
}

/// Metrics from per-sample class probabilities.
pub fn compute_metrics(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<Metrics> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty dataset".into(),
        ));
    }
    if probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} score rows but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(
            "metrics need at least 2 classes".into(),
        ));
    }
    if let Some(row) = probs.iter().find(|r| r.len() != k) {
        return Err(Error::shape("metrics", &[k], &[row.len()]));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!(
            "label {l} out of range for {k} classes"
        )));
    }
    let predicted: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
    let confusion = confusion_matrix(&predicted, labels, k);
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / labels.len() as f64;
    let f1 = f1_score(&confusion);

    let classes: Vec<usize> = if k == 2 { vec![1] } else { (0..k).collect() };
    let mut pr_curves = Vec::with_capacity(classes.len());
    let (mut roc_sum, mut roc_n) = (0.0, 0usize);
    let (mut pr_sum, mut pr_n) = (0.0, 0usize);
    for &c in &classes {
        let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Some(a) = roc_auc(&scores, &positive) {
            roc_sum += a;
            roc_n += 1;
        }
        let curve = pr_curve(&scores, &positive, c);
        if positive.iter().any(|&p| p) {
            pr_sum += curve.area();
            pr_n += 1;
        }
        pr_curves.push(curve);
    }
    // classes without both outcomes are left out of the macro average;
    // if none qualify the chance-level value is reported
    let roc_auc = if roc_n > 0 {
        roc_sum / roc_n as f64
    } else {
        0.5
    };
    let pr_auc = if pr_n > 0 { pr_sum / pr_n as f64 } else { 0.0 };
    Ok(Metrics {
        accuracy,
        f1,
        pr_auc,
        roc_auc,
        pr_curves,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise(scores: &[f64], positive: &[bool]) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if positive[i] && !positive[j] {
                    n += 1.0;
                    if scores[i] > scores[j] {
                        s += 1.0;
                    } else if scores[i] == scores[j] {
                        s += 0.5;
                    }
                }
            }
        }
        s / n
    }

    fn binary_probs(p1: &[f64]) -> Vec<Vec<f64>> {
        p1.iter().map(|&p| vec![1.0 - p, p]).collect()
    }

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 1, 0, 1];
        let probs = binary_probs(&[0.1, 0.9, 0.8, 0.2, 0.7]);
        let m = compute_metrics(&probs, &labels, 2).unwrap();
        assert_eq!((m.accuracy, m.f1, m.roc_auc), (1.0, 1.0, 1.0));
        assert!(m.pr_curves[0].points.iter().all(|p| p.precision == 1.0));
        assert_eq!(m.pr_auc, 1.0);
    }

    #[test]
    fn random_scores_have_chance_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let labels: Vec<usize> = (0..2000).map(|i| i % 2).collect();
        let scores: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        let m = compute_metrics(&binary_probs(&scores), &labels, 2).unwrap();
        assert!((m.roc_auc - 0.5).abs() <= 0.03, "{}", m.roc_auc);
    }

    #[test]
    fn ten_sample_roc_matches_pairs() {
        let scores = [0.3, 0.3, 0.9, 0.1, 0.5, 0.5, 0.7, 0.2, 0.3, 0.8];
        let pos = [
            true, false, true, false, true, false, false, false, true, true,
        ];
        assert_eq!(roc_auc(&scores, &pos).unwrap(), pairwise(&scores, &pos));
    }

    #[test]
    fn degenerate_scores_single_row() {
        let scores = [0.4; 6];
        let pos = [true, false, false, true, false, false];
        let c = pr_curve(&scores, &pos, 1);
        assert_eq!(c.points.len(), 2);
        assert_eq!(c.points[1].recall, 1.0);
        assert!((c.points[1].precision - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn multiclass_macro() {
        let probs = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.7, 0.2],
            vec![0.2, 0.2, 0.6],
            vec![0.5, 0.4, 0.1],
        ];
        let labels = [0, 1, 2, 1];
        let m = compute_metrics(&probs, &labels, 3).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.pr_curves.len(), 3);
        // class 0: P=1, R=1 -> 2/3 ; class 1: P=1, R=1/2 -> 2/3 ; class 2: 1
        assert!((m.f1 - (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-12);
        assert_eq!(m.sample_count(), 4);
    }

    #[test]
    fn json_has_exact_keys() {
        let m = compute_metrics(&binary_probs(&[0.2, 0.9]), &[0, 1], 2).unwrap();
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["accuracy", "confusion", "f1", "pr_auc", "roc_auc"]);
    }

    #[test]
    fn errors() {
        assert!(compute_metrics(&[], &[], 2).is_err());
        assert!(compute_metrics(&binary_probs(&[0.5]), &[2], 2).is_err());
    }
}
