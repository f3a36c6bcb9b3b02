//! Evaluation metrics for both tasks.
//!
//! Regression: MAE, RMSE, R² (with an explicit undefined sentinel when the
//! targets are constant). Classification: accuracy, macro-F1 over classes
//! present in labels or predictions, and macro one-vs-rest ROC AUC over
//! classes present in the labels, skipping classes without both positives
//! and negatives — the non-IID client splits make that case routine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Flat report; metrics that do not apply to the task (or are undefined on
/// the given data) are `None` and serialize as JSON null.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: TaskKind,
    pub mae: Option<f32>,
    pub rmse: Option<f32>,
    pub r2: Option<f32>,
    pub accuracy: Option<f32>,
    pub macro_f1: Option<f32>,
    pub macro_auc: Option<f32>,
    pub n: u64,
}

impl MetricsReport {
    fn empty(task: TaskKind) -> MetricsReport {
        MetricsReport {
            task,
            mae: None,
            rmse: None,
            r2: None,
            accuracy: None,
            macro_f1: None,
            macro_auc: None,
            n: 0,
        }
    }
}

/// MAE, RMSE and R² over paired slices. R² is `None` when the targets are
/// constant and the fit is not exact.
pub fn regression_metrics(y: &[f32], y_hat: &[f32]) -> Result<MetricsReport> {
    if y.is_empty() {
        return Err(Error::Data("regression metrics on empty input".into()));
    }
    if y.len() != y_hat.len() {
        return Err(Error::Data(format!(
            "length mismatch: {} targets vs {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    if y.iter().chain(y_hat).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in regression metrics".into()));
    }
    let n = y.len() as f64;
    let mut abs_sum = 0.0f64;
    let mut sq_sum = 0.0f64;
    let mut mean_y = 0.0f64;
    for (&t, &p) in y.iter().zip(y_hat) {
        let d = (t - p) as f64;
        abs_sum += d.abs();
        sq_sum += d * d;
        mean_y += t as f64;
    }
    mean_y /= n;
    let ss_res = sq_sum;
    let ss_tot: f64 = y.iter().map(|&t| (t as f64 - mean_y).powi(2)).sum();
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            Some(1.0)
        } else {
            None
        }
    } else {
        Some((1.0 - ss_res / ss_tot) as f32)
    };
    Ok(MetricsReport {
        mae: Some((abs_sum / n) as f32),
        rmse: Some((sq_sum / n).sqrt() as f32),
        r2,
        n: y.len() as u64,
        ..MetricsReport::empty(TaskKind::Regression)
    })
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-vs-rest ROC AUC for `positive`, trapezoidal over all thresholds with
/// tied scores handled as one group (equivalent to rank averaging).
/// `None` when the class has no positives or no negatives.
pub fn roc_auc_ovr(labels: &[usize], scores: &[f32], positive: usize) -> Option<f32> {
    let pos_total = labels.iter().filter(|&&l| l == positive).count();
    let neg_total = labels.len() - pos_total;
    if pos_total == 0 || neg_total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut area = 0.0f64;
    let mut tp = 0u64;
    let mut i = 0;
    while i < order.len() {
        // Consume the whole group of tied scores before adding its trapezoid.
        let mut tp_delta = 0u64;
        let mut fp_delta = 0u64;
        let group_score = scores[order[i]];
        while i < order.len() && scores[order[i]] == group_score {
            if labels[order[i]] == positive {
                tp_delta += 1;
            } else {
                fp_delta += 1;
            }
            i += 1;
        }
        area += fp_delta as f64 * (2.0 * tp as f64 + tp_delta as f64) / 2.0;
        tp += tp_delta;
    }
    Some((area / (pos_total as f64 * neg_total as f64)) as f32)
}

/// Accuracy, macro-F1 and macro one-vs-rest AUC from per-class probability
/// rows. Rows must be non-negative and sum to 1 within 1e-5.
pub fn classification_metrics(labels: &[usize], probs: &[Vec<f32>]) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(Error::Data("classification metrics on empty input".into()));
    }
    if labels.len() != probs.len() {
        return Err(Error::Data(format!(
            "length mismatch: {} labels vs {} probability rows",
            labels.len(),
            probs.len()
        )));
    }
    let num_classes = probs[0].len();
    for (i, row) in probs.iter().enumerate() {
        if row.len() != num_classes {
            return Err(Error::Data(format!("probability row {i} has wrong width")));
        }
        let mut sum = 0.0f64;
        for &p in row {
            if !(-1e-6..=1.0 + 1e-5).contains(&p) {
                return Err(Error::Data(format!(
                    "probability row {i} has value {p} outside [0,1]"
                )));
            }
            sum += p as f64;
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Data(format!(
                "probability row {i} sums to {sum}, expected 1"
            )));
        }
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Data(format!(
                "label {l} at index {i} out of range 0..{num_classes}"
            )));
        }
    }

    let preds: Vec<usize> = probs.iter().map(|row| argmax_row(row)).collect();
    let correct = labels.iter().zip(&preds).filter(|(a, b)| a == b).count();
    let accuracy = correct as f32 / labels.len() as f32;

    // Macro-F1 over classes present in labels or predictions.
    let mut f1_sum = 0.0f64;
    let mut f1_count = 0usize;
    for c in 0..num_classes {
        let present = labels.iter().any(|&l| l == c) || preds.iter().any(|&p| p == c);
        if !present {
            continue;
        }
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fneg = 0u64;
        for (&l, &p) in labels.iter().zip(&preds) {
            match (l == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fneg == 0 {
            0.0
        } else {
            tp as f64 / (tp + fneg) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        f1_count += 1;
    }
    let macro_f1 = (f1_count > 0).then(|| (f1_sum / f1_count as f64) as f32);

    // Macro AUC over classes present in the labels; classes without both
    // positives and negatives are skipped, not scored zero.
    let mut auc_sum = 0.0f64;
    let mut auc_count = 0usize;
    for c in 0..num_classes {
        if !labels.iter().any(|&l| l == c) {
            continue;
        }
        let scores: Vec<f32> = probs.iter().map(|row| row[c]).collect();
        if let Some(auc) = roc_auc_ovr(labels, &scores, c) {
            auc_sum += auc as f64;
            auc_count += 1;
        }
    }
    let macro_auc = (auc_count > 0).then(|| (auc_sum / auc_count as f64) as f32);

    Ok(MetricsReport {
        accuracy: Some(accuracy),
        macro_f1,
        macro_auc,
        n: labels.len() as u64,
        ..MetricsReport::empty(TaskKind::Classification)
    })
}

/// Sample-count-weighted mean of client reports; a metric missing from a
/// client is skipped for that metric's mean. Used for the per-round
/// server-side view of client validation.
pub fn weighted_mean_reports(reports: &[(u64, MetricsReport)]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Data("no reports to aggregate".into()))?;
    let task = first.1.task;
    let mut out = MetricsReport::empty(task);
    out.n = reports.iter().map(|(w, _)| *w).sum();
    type Get = fn(&MetricsReport) -> Option<f32>;
    type Set = fn(&mut MetricsReport, Option<f32>);
    let fields: [(Get, Set); 6] = [
        (|r| r.mae, |r, v| r.mae = v),
        (|r| r.rmse, |r, v| r.rmse = v),
        (|r| r.r2, |r, v| r.r2 = v),
        (|r| r.accuracy, |r, v| r.accuracy = v),
        (|r| r.macro_f1, |r, v| r.macro_f1 = v),
        (|r| r.macro_auc, |r, v| r.macro_auc = v),
    ];
    for (get, set) in fields {
        let mut weight = 0.0f64;
        let mut acc = 0.0f64;
        for (w, r) in reports {
            if let Some(v) = get(r) {
                weight += *w as f64;
                acc += *w as f64 * v as f64;
            }
        }
        set(&mut out, (weight > 0.0).then(|| (acc / weight) as f32));
    }
    Ok(out)
}
