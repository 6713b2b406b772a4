use super::stats::average_ranks;
use super::EvalError;

/// Area under the ROC curve as the Mann-Whitney statistic with midranks, equal
/// to `(#concordant + 0.5·#tied) / (#pos · #neg)`. `None` when a class lacks
/// positives or negatives.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "roc_auc length mismatch");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Multi-label classification summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SscMetrics {
    /// Mean per-class AUC over classes with both outcomes present.
    pub auc: Option<f64>,
    /// Macro F1 at the threshold, percent.
    pub f_score: f64,
    /// Per-label binary accuracy, percent.
    pub acc: f64,
    /// Classes left out of the AUC mean.
    pub skipped_classes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArpMetrics {
    pub mae: f64,
    pub rmse: f64,
}

fn check_matrix(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<usize, EvalError> {
    if probs.len() != labels.len() {
        return Err(EvalError::Input(format!(
            "{} prediction rows, {} label rows",
            probs.len(),
            labels.len()
        )));
    }
    let c = probs.first().map_or(0, Vec::len);
    if probs.iter().zip(labels).any(|(p, l)| p.len() != c || l.len() != c) {
        return Err(EvalError::Input("ragged prediction or label rows".into()));
    }
    Ok(c)
}

/// Macro F1 (a class with no true or predicted positives scores 0) and
/// per-label accuracy, both in percent.
pub fn f_score_acc(probs: &[Vec<f64>], labels: &[Vec<bool>], threshold: f64) -> Result<(f64, f64), EvalError> {
    let c = check_matrix(probs, labels)?;
    if probs.is_empty() || c == 0 {
        return Err(EvalError::Input("empty predictions".into()));
    }
    let mut f_sum = 0.0;
    let mut correct = 0usize;
    for k in 0..c {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (p, l) in probs.iter().zip(labels) {
            let pred = p[k] >= threshold;
            match (pred, l[k]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
            if pred == l[k] {
                correct += 1;
            }
        }
        let denom = 2 * tp + fp + fneg;
        if tp > 0 {
            f_sum += 2.0 * tp as f64 / denom as f64;
        }
    }
    let f = 100.0 * f_sum / c as f64;
    let acc = 100.0 * correct as f64 / (c * probs.len()) as f64;
    Ok((f, acc))
}

pub fn ssc_metrics(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<SscMetrics, EvalError> {
    let c = check_matrix(probs, labels)?;
    let (f_score, acc) = f_score_acc(probs, labels, 0.5)?;
    let mut aucs = Vec::new();
    let mut skipped_classes = Vec::new();
    for k in 0..c {
        let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let l: Vec<bool> = labels.iter().map(|l| l[k]).collect();
        match roc_auc(&s, &l) {
            Some(a) => aucs.push(a),
            None => skipped_classes.push(k),
        }
    }
    let auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    Ok(SscMetrics {
        auc,
        f_score,
        acc,
        skipped_classes,
    })
}

pub fn mae_rmse(pred: &[f64], truth: &[f64]) -> Result<ArpMetrics, EvalError> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(EvalError::Input(format!(
            "{} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let rmse = (pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n).sqrt();
    Ok(ArpMetrics { mae, rmse })
}
