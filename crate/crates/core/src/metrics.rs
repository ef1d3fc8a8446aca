//! Token-level detection metrics.
//!
//! ROC-AUC uses midranks, so tied scores earn half credit and the result
//! equals the pairwise probability that a positive outranks a negative.
//! Recall at a fixed false-positive rate walks the ROC curve and linearly
//! interpolates between adjacent operating points when no threshold hits the
//! target FPR exactly; with constant scores the curve is the diagonal and the
//! recall equals the target. Thresholded predictions count a token positive
//! when `score >= threshold`.
//!
//! Entropy and perplexity scorers back the label-free baselines: high token
//! entropy or surprisal as a stand-in hallucination signal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor inside logarithms.
const EPS: f64 = 1e-7;

fn check_inputs(scores: &[f64], labels: &[u8], context: &str) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: context.to_owned(),
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric(format!("{context}: empty input")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::UndefinedMetric(format!("{context}: non-finite score")));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::UndefinedMetric(format!("{context}: labels must be 0 or 1")));
    }
    Ok(())
}

/// Area under the ROC curve via midranks. Errors when only one class is
/// present.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels, "roc_auc")?;
    let p = labels.iter().filter(|&&y| y == 1).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(
            "roc_auc needs both classes present".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Midranks: tied scores share the average of their 1-based rank range.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }

    let p_f = p as f64;
    Ok((rank_sum_pos - p_f * (p_f + 1.0) / 2.0) / (p_f * n as f64))
}

/// ROC operating points (FPR, TPR), FPR-ascending, starting at (0,0) and
/// ending at (1,1). One point per distinct threshold `score >= theta`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_inputs(scores, labels, "roc_curve")?;
    let p = labels.iter().filter(|&&y| y == 1).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(
            "roc_curve needs both classes present".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let theta = scores[order[i]];
        while i < order.len() && scores[order[i]] == theta {
            match labels[order[i]] {
                1 => tp += 1,
                _ => fp += 1,
            }
            i += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(points)
}

/// Highest attainable recall subject to FPR <= `fpr_target`, linearly
/// interpolated between adjacent ROC points when the target falls between
/// attainable FPRs.
pub fn recall_at_fpr(scores: &[f64], labels: &[u8], fpr_target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(Error::Config(format!(
            "fpr_target must be in [0, 1], got {fpr_target}"
        )));
    }
    let points = roc_curve(scores, labels)?;

    // Last point at or below the target; (0,0) always qualifies. Ties in FPR
    // keep the later (higher TPR) point.
    let mut below = (0.0, 0.0);
    let mut above: Option<(f64, f64)> = None;
    for &pt in &points {
        if pt.0 <= fpr_target {
            below = pt;
        } else {
            above = Some(pt);
            break;
        }
    }
    Ok(match above {
        None => below.1, // target >= 1: full curve attainable
        Some(b) => {
            if below.0 == fpr_target {
                below.1
            } else {
                below.1 + (fpr_target - below.0) * (b.1 - below.1) / (b.0 - below.0)
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// `None` when nothing was predicted positive (undefined, not an error).
    pub fn precision(&self) -> Option<f64> {
        let denom = self.tp + self.fp;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    /// `None` when there are no actual positives.
    pub fn recall(&self) -> Option<f64> {
        let denom = self.tp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

/// Confusion counts predicting positive when `score >= threshold`.
pub fn confusion_at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_inputs(scores, labels, "confusion_at_threshold")?;
    let mut c = ConfusionCounts { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Shannon entropy in nats of one probability row, with an epsilon floor
/// inside the log.
pub fn entropy_score(dist_row: &[f32]) -> f64 {
    dist_row
        .iter()
        .map(|&p| {
            let p = f64::from(p);
            if p <= 0.0 {
                0.0
            } else {
                -p * p.max(EPS).ln()
            }
        })
        .sum()
}

/// Per-token perplexity over a trailing window: token `t` scores
/// `exp(mean(nll[t+1-w ..= t]))` with the window clipped at the sequence
/// start. `window` 1 reduces to `exp(nll[t])`.
pub fn perplexity_scores(nll: &[f32], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::Config("perplexity window must be >= 1".into()));
    }
    Ok((0..nll.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            let slice = &nll[lo..=t];
            let mean: f64 = slice.iter().map(|&v| f64::from(v)).sum::<f64>() / slice.len() as f64;
            mean.exp()
        })
        .collect())
}

/// The five headline columns plus the raw counts behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub recall_at_fpr: f64,
    pub fpr_target: f64,
    pub accuracy: f64,
    /// `None` when no token was predicted positive at `threshold`.
    pub precision: Option<f64>,
    pub recall: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

/// Full report at a decision threshold (default convention: 0.5) and an FPR
/// target (default convention: 0.1). Requires both classes present.
pub fn report(scores: &[f64], labels: &[u8], fpr_target: f64, threshold: f64) -> Result<MetricsReport> {
    let auc = roc_auc(scores, labels)?;
    let r_at = recall_at_fpr(scores, labels, fpr_target)?;
    let counts = confusion_at_threshold(scores, labels, threshold)?;
    Ok(MetricsReport {
        auc,
        recall_at_fpr: r_at,
        fpr_target,
        accuracy: counts.accuracy(),
        precision: counts.precision(),
        // Both classes are present (roc_auc checked), so recall is defined.
        recall: counts.recall().expect("positives present"),
        threshold,
        counts,
    })
}
