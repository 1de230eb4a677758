//! Classification metrics: per-class reports, Mann-Whitney AUROC, and the
//! DeLong comparison of correlated AUROCs.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::TrainError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Mirror of a classification-report table: per-class rows plus summary
/// lines and AUROC.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub control: ClassMetrics,
    pub epilepsy: ClassMetrics,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub auroc: f64,
    pub counts: ConfusionCounts,
}

/// Mann-Whitney AUROC: the fraction of (positive, negative) pairs where the
/// positive outscores the negative, ties counted half. Computed via
/// midranks.
pub fn auroc(labels: &[usize], scores: &[f64]) -> Result<f64, TrainError> {
    if labels.len() != scores.len() {
        return Err(TrainError::LengthMismatch(labels.len(), scores.len()));
    }
    let m = labels.iter().filter(|&&l| l == 1).count();
    let n = labels.len() - m;
    if m == 0 || n == 0 {
        return Err(TrainError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Midranks: tied scores share the average of their 1-based rank range.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let m_f = m as f64;
    Ok((rank_sum_pos - m_f * (m_f + 1.0) / 2.0) / (m_f * n as f64))
}

/// Per-class precision/recall/F1 from the confusion matrix (epilepsy is the
/// positive class), plus accuracy, macro/weighted F1, and AUROC over
/// `scores`.
pub fn compute_metrics(
    labels: &[usize],
    predictions: &[usize],
    scores: &[f64],
) -> Result<MetricsReport, TrainError> {
    if labels.len() != predictions.len() {
        return Err(TrainError::LengthMismatch(labels.len(), predictions.len()));
    }
    if labels.len() != scores.len() {
        return Err(TrainError::LengthMismatch(labels.len(), scores.len()));
    }
    let mut counts = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&l, &p) in labels.iter().zip(predictions) {
        match (l, p) {
            (1, 1) => counts.tp += 1,
            (0, 1) => counts.fp += 1,
            (1, 0) => counts.fn_ += 1,
            (0, 0) => counts.tn += 1,
            _ => unreachable!("binary labels"),
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let f1_of = |precision: f64, recall: f64| {
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    };

    let pos_precision = ratio(counts.tp, counts.tp + counts.fp);
    let pos_recall = ratio(counts.tp, counts.tp + counts.fn_);
    let neg_precision = ratio(counts.tn, counts.tn + counts.fn_);
    let neg_recall = ratio(counts.tn, counts.tn + counts.fp);
    let epilepsy = ClassMetrics {
        precision: pos_precision,
        recall: pos_recall,
        f1: f1_of(pos_precision, pos_recall),
        support: counts.tp + counts.fn_,
    };
    let control = ClassMetrics {
        precision: neg_precision,
        recall: neg_recall,
        f1: f1_of(neg_precision, neg_recall),
        support: counts.tn + counts.fp,
    };
    let total = labels.len() as f64;
    let accuracy = (counts.tp + counts.tn) as f64 / total;
    let macro_f1 = (control.f1 + epilepsy.f1) / 2.0;
    let weighted_f1 =
        (control.f1 * control.support as f64 + epilepsy.f1 * epilepsy.support as f64) / total;
    let auroc = auroc(labels, scores)?;
    Ok(MetricsReport { control, epilepsy, accuracy, macro_f1, weighted_f1, auroc, counts })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DelongResult {
    pub auroc_a: f64,
    pub auroc_b: f64,
    pub z: f64,
    pub p_two_sided: f64,
}

fn heaviside_half(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

/// Structural components of one scorer: per-positive and per-negative
/// placement averages. The component means equal the AUROC.
fn structural_components(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let v10 = pos
        .iter()
        .map(|&x| neg.iter().map(|&y| heaviside_half(x, y)).sum::<f64>() / neg.len() as f64)
        .collect();
    let v01 = neg
        .iter()
        .map(|&y| pos.iter().map(|&x| heaviside_half(x, y)).sum::<f64>() / pos.len() as f64)
        .collect();
    (v10, v01)
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    if a.len() < 2 {
        return 0.0;
    }
    a.iter().zip(b).map(|(&x, &y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// DeLong comparison of two correlated AUROCs over the same subjects.
///
/// Identical score vectors short-circuit to `z = 0, p = 1`; a non-positive
/// variance with differing AUROCs is reported as degenerate.
pub fn delong_test(
    labels: &[usize],
    scores_a: &[f64],
    scores_b: &[f64],
) -> Result<DelongResult, TrainError> {
    if labels.len() != scores_a.len() {
        return Err(TrainError::LengthMismatch(labels.len(), scores_a.len()));
    }
    if labels.len() != scores_b.len() {
        return Err(TrainError::LengthMismatch(labels.len(), scores_b.len()));
    }
    let pos_a: Vec<f64> = labels
        .iter()
        .zip(scores_a)
        .filter_map(|(&l, &s)| (l == 1).then_some(s))
        .collect();
    let neg_a: Vec<f64> = labels
        .iter()
        .zip(scores_a)
        .filter_map(|(&l, &s)| (l == 0).then_some(s))
        .collect();
    let pos_b: Vec<f64> = labels
        .iter()
        .zip(scores_b)
        .filter_map(|(&l, &s)| (l == 1).then_some(s))
        .collect();
    let neg_b: Vec<f64> = labels
        .iter()
        .zip(scores_b)
        .filter_map(|(&l, &s)| (l == 0).then_some(s))
        .collect();
    if pos_a.is_empty() || neg_a.is_empty() {
        return Err(TrainError::SingleClass);
    }

    let (v10_a, v01_a) = structural_components(&pos_a, &neg_a);
    let (v10_b, v01_b) = structural_components(&pos_b, &neg_b);
    let auroc_a = v10_a.iter().sum::<f64>() / v10_a.len() as f64;
    let auroc_b = v10_b.iter().sum::<f64>() / v10_b.len() as f64;

    if scores_a == scores_b {
        return Ok(DelongResult { auroc_a, auroc_b, z: 0.0, p_two_sided: 1.0 });
    }

    let m = pos_a.len() as f64;
    let n = neg_a.len() as f64;
    let var = (sample_cov(&v10_a, &v10_a) + sample_cov(&v10_b, &v10_b)
        - 2.0 * sample_cov(&v10_a, &v10_b))
        / m
        + (sample_cov(&v01_a, &v01_a) + sample_cov(&v01_b, &v01_b)
            - 2.0 * sample_cov(&v01_a, &v01_b))
            / n;

    let diff = auroc_a - auroc_b;
    if var <= 0.0 {
        if diff == 0.0 {
            return Ok(DelongResult { auroc_a, auroc_b, z: 0.0, p_two_sided: 1.0 });
        }
        return Err(TrainError::DegenerateVariance);
    }
    let z = diff / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p_two_sided = 2.0 * (1.0 - normal.cdf(z.abs()));
    Ok(DelongResult { auroc_a, auroc_b, z, p_two_sided })
}
