//! Multi-objective training loss.
//!
//! The total objective over a batch of sequences is
//!
//! ```text
//! total = focal + lambda_span * span + lambda_sparse * sparse + lambda_kl * kl
//! ```
//!
//! * **focal**: class-balanced focal BCE per token. A token with label `y`
//!   and probability `p` contributes `alpha_i (1 - p_t)^gamma * bce * w_i`,
//!   where `p_t` is `p` for positives and `1 - p` for negatives, `alpha_i`
//!   is `alpha_pos` for positives and `1 - alpha_pos` otherwise. Averaged
//!   over a sequence's unmasked tokens, then over sequences.
//! * **span**: each annotated span is aggregated to one logit with a
//!   soft-max weighting (`lambda_soft` 0 recovers the plain mean), then
//!   scored with a span-level focal term: positives pay
//!   `-(1-p)^gamma ln p`, negatives `-p^gamma ln(1-p)`. Averaged over a
//!   sequence's spans, then over sequences that have spans.
//! * **sparse**: mean sigmoid activation over all positions (attention mask
//!   applied to the numerator), a pressure toward predicting "supported".
//! * **kl**: distribution-shift penalty `sum_t KL(base_t || adapted_t)` on
//!   unmasked tokens, averaged over sequences. Computed from dataset-provided
//!   distribution pairs, so it carries no gradient with respect to the
//!   probe's logits.
//!
//! Before the focal and span terms, spans whose maximum per-token NLL
//! exceeds `tau` are dropped and their tokens removed from the focal average
//! (likely label noise rather than signal). `tau` unset means no masking.
//!
//! Setting a lambda to 0 disables its term exactly: the value is reported as
//! 0 and no gradient flows. `focal_weight` (default 1) does the same for the
//! token-level term; it exists for ablation runs.
//!
//! Logits are clamped to +-30 before sigmoids and logs are floored at 1e-7.

use serde::{Deserialize, Serialize};

use crate::dataset::{SpanAnnotation, TokenSequence};
use crate::error::{Error, Result};
use crate::num::{sigmoid_clamped, sigmoid_clamped_grad, LOG_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Focusing exponent of the focal terms; 0 recovers plain weighted BCE.
    pub gamma_focal: f64,
    /// Weight on positive tokens; negatives get `1 - alpha_pos`.
    pub alpha_pos: f64,
    /// Span aggregation temperature; 0 means plain mean over the span.
    pub lambda_soft: f64,
    pub lambda_span: f64,
    pub lambda_sparse: f64,
    pub lambda_kl: f64,
    /// High-loss span threshold; `None` disables masking.
    pub tau: Option<f64>,
    /// Coefficient on the token-level focal term (ablation hook).
    pub focal_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma_focal: 2.0,
            alpha_pos: 0.25,
            lambda_soft: 1.0,
            lambda_span: 0.5,
            lambda_sparse: 0.01,
            lambda_kl: 0.1,
            tau: None,
            focal_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.gamma_focal >= 0.0) {
            return fail(format!("gamma_focal must be >= 0, got {}", self.gamma_focal));
        }
        if !(self.alpha_pos > 0.0 && self.alpha_pos < 1.0) {
            return fail(format!("alpha_pos must be in (0, 1), got {}", self.alpha_pos));
        }
        if !(self.lambda_soft >= 0.0) {
            return fail(format!("lambda_soft must be >= 0, got {}", self.lambda_soft));
        }
        for (name, v) in [
            ("lambda_span", self.lambda_span),
            ("lambda_sparse", self.lambda_sparse),
            ("lambda_kl", self.lambda_kl),
            ("focal_weight", self.focal_weight),
        ] {
            if !(v >= 0.0) {
                return fail(format!("{name} must be >= 0, got {v}"));
            }
        }
        if let Some(tau) = self.tau {
            if tau.is_nan() {
                return fail("tau must not be NaN".into());
            }
        }
        Ok(())
    }

    fn tau_value(&self) -> f64 {
        self.tau.unwrap_or(f64::INFINITY)
    }
}

/// Per-term values for one batch. `total` is exactly
/// `focal_weight*focal + lambda_span*span + lambda_sparse*sparse +
/// lambda_kl*kl` as composed from these fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub span: f64,
    pub sparse: f64,
    pub kl: f64,
    pub total: f64,
    /// Spans removed by high-loss masking across the batch.
    pub masked_span_count: usize,
    /// False when the span term contributed nothing (no surviving spans or
    /// `lambda_span` 0).
    pub span_term_active: bool,
}

// ---------------------------------------------------------------------------
// Token-level focal term
// ---------------------------------------------------------------------------

/// Value of one token's focal term given its probability.
fn focal_value(p: f64, y: u8, weight: f64, cfg: &LossConfig) -> f64 {
    let pt = if y == 1 { p } else { 1.0 - p };
    let alpha = if y == 1 { cfg.alpha_pos } else { 1.0 - cfg.alpha_pos };
    let bce = -pt.max(LOG_EPS).ln();
    let modulation = if cfg.gamma_focal == 0.0 {
        1.0
    } else {
        (1.0 - pt).powf(cfg.gamma_focal)
    };
    alpha * modulation * bce * weight
}

/// Value and d/dz of one token's focal term given its logit.
fn focal_value_grad(z: f64, y: u8, weight: f64, cfg: &LossConfig) -> (f64, f64) {
    let p = sigmoid_clamped(z);
    let value = focal_value(p, y, weight, cfg);

    let pt = if y == 1 { p } else { 1.0 - p };
    let alpha = if y == 1 { cfg.alpha_pos } else { 1.0 - cfg.alpha_pos };
    let dp_dz = sigmoid_clamped_grad(z);
    let dpt_dz = if y == 1 { dp_dz } else { -dp_dz };

    let ptf = pt.max(LOG_EPS);
    let bce = -ptf.ln();
    let dbce_dpt = if pt > LOG_EPS { -1.0 / ptf } else { 0.0 };
    let (modulation, dmod_dpt) = if cfg.gamma_focal == 0.0 {
        (1.0, 0.0)
    } else {
        let omp = 1.0 - pt;
        (
            omp.powf(cfg.gamma_focal),
            -cfg.gamma_focal * omp.powf(cfg.gamma_focal - 1.0),
        )
    };
    let grad = alpha * weight * (dmod_dpt * bce + modulation * dbce_dpt) * dpt_dz;
    (value, grad)
}

/// Class-balanced focal loss: mean over unmasked tokens of the per-token
/// focal term. `weights` defaults to 1 per token.
pub fn focal_loss(
    probs: &[f64],
    labels: &[u8],
    mask: &[u8],
    weights: Option<&[f64]>,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let n = probs.len();
    for (name, len) in [("labels", labels.len()), ("mask", mask.len())] {
        if len != n {
            return Err(Error::ShapeMismatch {
                context: format!("focal_loss {name}"),
                expected: n,
                got: len,
            });
        }
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::ShapeMismatch {
                context: "focal_loss weights".into(),
                expected: n,
                got: w.len(),
            });
        }
    }

    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..n {
        if mask[t] != 1 {
            continue;
        }
        let w = weights.map_or(1.0, |w| w[t]);
        sum += focal_value(probs[t], labels[t], w, cfg);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask("focal_loss".into()));
    }
    Ok(sum / count as f64)
}

// ---------------------------------------------------------------------------
// Span term
// ---------------------------------------------------------------------------

/// Soft-max-weighted span aggregate `sum_t softmax(lambda * z)_t * z_t`.
/// `lambda_soft` 0 is exactly the arithmetic mean; large values approach the
/// span maximum.
pub fn span_aggregate(span_logits: &[f64], lambda_soft: f64) -> Result<f64> {
    if span_logits.is_empty() {
        return Err(Error::EmptyMask("span_aggregate".into()));
    }
    if lambda_soft == 0.0 {
        return Ok(span_logits.iter().sum::<f64>() / span_logits.len() as f64);
    }
    let (zhat, _) = span_aggregate_grad(span_logits, lambda_soft);
    Ok(zhat)
}

/// Aggregate plus `d(zhat)/d(z_k) = w_k (1 + lambda (z_k - zhat))`.
fn span_aggregate_grad(span_logits: &[f64], lambda_soft: f64) -> (f64, Vec<f64>) {
    let n = span_logits.len();
    if lambda_soft == 0.0 {
        let mean = span_logits.iter().sum::<f64>() / n as f64;
        return (mean, vec![1.0 / n as f64; n]);
    }
    let m = span_logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(lambda_soft * b));
    let exps: Vec<f64> = span_logits.iter().map(|&z| (lambda_soft * z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let zhat: f64 = weights.iter().zip(span_logits).map(|(w, z)| w * z).sum();
    let grad = weights
        .iter()
        .zip(span_logits)
        .map(|(w, z)| w * (1.0 + lambda_soft * (z - zhat)))
        .collect();
    (zhat, grad)
}

/// Span-level focal value and d/d(zhat) from the aggregated logit.
fn span_term_grad(zhat: f64, label: u8, cfg: &LossConfig) -> (f64, f64) {
    let p = sigmoid_clamped(zhat);
    let gamma = cfg.gamma_focal;
    let dp_dz = sigmoid_clamped_grad(zhat);
    if label == 1 {
        let pf = p.max(LOG_EPS);
        let modulation = if gamma == 0.0 { 1.0 } else { (1.0 - p).powf(gamma) };
        let value = -modulation * pf.ln();
        let dmod = if gamma == 0.0 { 0.0 } else { -gamma * (1.0 - p).powf(gamma - 1.0) };
        let dlog = if p > LOG_EPS { 1.0 / pf } else { 0.0 };
        let dv_dp = -(dmod * pf.ln() + modulation * dlog);
        (value, dv_dp * dp_dz)
    } else {
        let qf = (1.0 - p).max(LOG_EPS);
        let modulation = if gamma == 0.0 { 1.0 } else { p.powf(gamma) };
        let value = -modulation * qf.ln();
        let dmod = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
        let dlog = if 1.0 - p > LOG_EPS { -1.0 / qf } else { 0.0 };
        let dv_dp = -(dmod * qf.ln() + modulation * dlog);
        (value, dv_dp * dp_dz)
    }
}

/// Span focal loss for one sequence: mean of the per-span terms.
pub fn span_loss(logits: &[f64], spans: &[SpanAnnotation], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if spans.is_empty() {
        return Err(Error::EmptyMask("span_loss: no spans".into()));
    }
    let mut sum = 0.0;
    for span in spans {
        if span.end >= logits.len() {
            return Err(Error::ShapeMismatch {
                context: format!("span {}..={} vs logits", span.start, span.end),
                expected: logits.len(),
                got: span.end + 1,
            });
        }
        let (zhat, _) = span_aggregate_grad(&logits[span.start..=span.end], cfg.lambda_soft);
        sum += span_term_grad(zhat, span.label, cfg).0;
    }
    Ok(sum / spans.len() as f64)
}

// ---------------------------------------------------------------------------
// Sparsity and distribution-shift terms
// ---------------------------------------------------------------------------

/// Mean predicted probability over all positions; masked positions count in
/// the denominator but not the numerator.
pub fn sparse_loss(logits: &[f64], mask: &[u8]) -> Result<f64> {
    if logits.len() != mask.len() {
        return Err(Error::ShapeMismatch {
            context: "sparse_loss mask".into(),
            expected: logits.len(),
            got: mask.len(),
        });
    }
    if logits.is_empty() {
        return Err(Error::EmptyMask("sparse_loss".into()));
    }
    let sum: f64 = logits
        .iter()
        .zip(mask)
        .filter(|&(_, &m)| m == 1)
        .map(|(&z, _)| sigmoid_clamped(z))
        .sum();
    Ok(sum / logits.len() as f64)
}

/// `sum_t sum_v base ln(base/adapted)` over unmasked tokens of one sequence,
/// rows row-major `[num_tokens, vocab]`. Identical rows contribute exactly 0.
pub fn kl_loss(base: &[f32], adapted: &[f32], mask: &[u8], vocab: usize) -> Result<f64> {
    if vocab == 0 {
        return Err(Error::Config("kl_loss vocab must be >= 1".into()));
    }
    let n = mask.len();
    for (name, len) in [("base", base.len()), ("adapted", adapted.len())] {
        if len != n * vocab {
            return Err(Error::ShapeMismatch {
                context: format!("kl_loss {name}"),
                expected: n * vocab,
                got: len,
            });
        }
    }
    let mut total = 0.0f64;
    for t in 0..n {
        if mask[t] != 1 {
            continue;
        }
        for v in 0..vocab {
            let p = f64::from(base[t * vocab + v]);
            let q = f64::from(adapted[t * vocab + v]);
            if p <= 0.0 {
                continue;
            }
            total += p * (p.max(LOG_EPS).ln() - q.max(LOG_EPS).ln());
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// High-loss masking
// ---------------------------------------------------------------------------

/// Result of high-loss masking: surviving spans and the dropped ones.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskOutcome {
    pub kept: Vec<SpanAnnotation>,
    pub dropped: Vec<SpanAnnotation>,
}

/// Drop spans whose maximum per-token NLL strictly exceeds `tau`. An
/// infinite `tau` keeps everything.
pub fn apply_high_loss_mask(spans: &[SpanAnnotation], nll: &[f32], tau: f64) -> Result<MaskOutcome> {
    let mut kept = Vec::with_capacity(spans.len());
    let mut dropped = Vec::new();
    for span in spans {
        if span.end >= nll.len() {
            return Err(Error::ShapeMismatch {
                context: format!("span {}..={} vs nll", span.start, span.end),
                expected: nll.len(),
                got: span.end + 1,
            });
        }
        let max_nll = nll[span.start..=span.end]
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(f64::from(b)));
        if max_nll > tau {
            dropped.push(*span);
        } else {
            kept.push(*span);
        }
    }
    Ok(MaskOutcome { kept, dropped })
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

/// Batch loss without gradients.
pub fn total_loss(logits: &[Vec<f64>], batch: &[&TokenSequence], cfg: &LossConfig) -> Result<LossBreakdown> {
    total_loss_with_grad(logits, batch, cfg).map(|(b, _)| b)
}

/// Batch loss plus `d(total)/d(logit)` per sequence and token.
///
/// Token-level terms average within each sequence first, then across the
/// batch. Sequences without surviving spans are left out of the span-term
/// average; if none survive anywhere the term is 0 and flagged inactive.
pub fn total_loss_with_grad(
    logits: &[Vec<f64>],
    batch: &[&TokenSequence],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("total_loss: empty batch".into()));
    }
    if logits.len() != batch.len() {
        return Err(Error::ShapeMismatch {
            context: "total_loss batch".into(),
            expected: batch.len(),
            got: logits.len(),
        });
    }

    let b = batch.len();
    let tau = cfg.tau_value();
    let mut grads: Vec<Vec<f64>> = logits.iter().map(|z| vec![0.0; z.len()]).collect();

    // (sequence index, value, per-token gradient), scaled after the set sizes
    // are known.
    let mut focal_parts: Vec<(usize, f64, Vec<f64>)> = Vec::new();
    let mut span_parts: Vec<(usize, f64, Vec<f64>)> = Vec::new();
    let mut sparse_total = 0.0;
    let mut kl_total = 0.0;
    let mut masked_span_count = 0usize;

    for (i, seq) in batch.iter().enumerate() {
        let n = seq.num_tokens;
        let z = &logits[i];
        if z.len() != n {
            return Err(Error::ShapeMismatch {
                context: format!("total_loss logits for `{}`", seq.id),
                expected: n,
                got: z.len(),
            });
        }

        // High-loss masking decides both surviving spans and the focal mask.
        let outcome = if tau.is_finite() {
            let nll = seq.nll.as_deref().ok_or(Error::MissingPayload {
                payload: "nll",
                needed_by: "high-loss masking (finite tau)".into(),
            })?;
            apply_high_loss_mask(&seq.spans, nll, tau)?
        } else {
            MaskOutcome { kept: seq.spans.clone(), dropped: Vec::new() }
        };
        masked_span_count += outcome.dropped.len();

        let mut excluded = vec![false; n];
        for span in &outcome.dropped {
            for t in span.start..=span.end {
                excluded[t] = true;
            }
        }

        if cfg.focal_weight > 0.0 {
            let mut value = 0.0;
            let mut grad = vec![0.0f64; n];
            let mut count = 0usize;
            for t in 0..n {
                if seq.mask[t] != 1 || excluded[t] {
                    continue;
                }
                let (v, g) = focal_value_grad(z[t], seq.token_labels[t], 1.0, cfg);
                value += v;
                grad[t] = g;
                count += 1;
            }
            if count > 0 {
                let c = count as f64;
                grad.iter_mut().for_each(|g| *g /= c);
                focal_parts.push((i, value / c, grad));
            }
        }

        if cfg.lambda_span > 0.0 && !outcome.kept.is_empty() {
            let mut value = 0.0;
            let mut grad = vec![0.0f64; n];
            for span in &outcome.kept {
                if span.end >= n {
                    return Err(Error::ShapeMismatch {
                        context: format!("span {}..={} vs sequence `{}`", span.start, span.end, seq.id),
                        expected: n,
                        got: span.end + 1,
                    });
                }
                let slice = &z[span.start..=span.end];
                let (zhat, dzhat) = span_aggregate_grad(slice, cfg.lambda_soft);
                let (v, dv_dzhat) = span_term_grad(zhat, span.label, cfg);
                value += v;
                for (k, t) in (span.start..=span.end).enumerate() {
                    grad[t] += dv_dzhat * dzhat[k];
                }
            }
            let c = outcome.kept.len() as f64;
            grad.iter_mut().for_each(|g| *g /= c);
            span_parts.push((i, value / c, grad));
        }

        if cfg.lambda_sparse > 0.0 {
            let mut value = 0.0;
            for t in 0..n {
                if seq.mask[t] == 1 {
                    value += sigmoid_clamped(z[t]);
                    grads[i][t] += cfg.lambda_sparse * sigmoid_clamped_grad(z[t]) / (n as f64 * b as f64);
                }
            }
            sparse_total += value / n as f64;
        }

        if cfg.lambda_kl > 0.0 {
            let vocab = seq
                .dist_base
                .as_ref()
                .zip(seq.dist_adapted.as_ref())
                .map(|(base, _)| base.len() / n.max(1));
            let (base, adapted, vocab) = match (&seq.dist_base, &seq.dist_adapted, vocab) {
                (Some(base), Some(adapted), Some(v)) if v > 0 => (base, adapted, v),
                _ => {
                    return Err(Error::MissingPayload {
                        payload: "dist_base/dist_adapted",
                        needed_by: "kl term (lambda_kl > 0)".into(),
                    })
                }
            };
            kl_total += kl_loss(base, adapted, &seq.mask, vocab)?;
        }
    }

    let focal = if cfg.focal_weight > 0.0 {
        if focal_parts.is_empty() {
            return Err(Error::EmptyMask("total_loss focal term".into()));
        }
        let c = focal_parts.len() as f64;
        for (i, _, grad) in &focal_parts {
            for (t, g) in grad.iter().enumerate() {
                grads[*i][t] += cfg.focal_weight * g / c;
            }
        }
        focal_parts.iter().map(|(_, v, _)| v).sum::<f64>() / c
    } else {
        0.0
    };

    let span_term_active = cfg.lambda_span > 0.0 && !span_parts.is_empty();
    let span = if span_term_active {
        let c = span_parts.len() as f64;
        for (i, _, grad) in &span_parts {
            for (t, g) in grad.iter().enumerate() {
                grads[*i][t] += cfg.lambda_span * g / c;
            }
        }
        span_parts.iter().map(|(_, v, _)| v).sum::<f64>() / c
    } else {
        0.0
    };

    let sparse = if cfg.lambda_sparse > 0.0 { sparse_total / b as f64 } else { 0.0 };
    let kl = if cfg.lambda_kl > 0.0 { kl_total / b as f64 } else { 0.0 };

    let total = cfg.focal_weight * focal
        + cfg.lambda_span * span
        + cfg.lambda_sparse * sparse
        + cfg.lambda_kl * kl;

    Ok((
        LossBreakdown {
            focal,
            span,
            sparse,
            kl,
            total,
            masked_span_count,
            span_term_active,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::labels_from_spans;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn seq(
        id: &str,
        logits_len: usize,
        spans: Vec<SpanAnnotation>,
        nll: Option<Vec<f32>>,
    ) -> TokenSequence {
        TokenSequence {
            id: id.into(),
            num_tokens: logits_len,
            states: BTreeMap::new(),
            mask: vec![1; logits_len],
            token_labels: labels_from_spans(logits_len, &spans),
            spans,
            nll,
            dist_base: None,
            dist_adapted: None,
        }
    }

    fn no_kl() -> LossConfig {
        LossConfig { lambda_kl: 0.0, ..Default::default() }
    }

    #[test]
    fn focal_matches_hand_computed_value() {
        // p=0.9/y=1: 0.25 * 0.1^2 * -ln(0.9); p=0.2/y=0: 0.75 * 0.2^2 * -ln(0.8).
        // Mean = 0.0034788539142854293 (scalar hand calculation).
        let cfg = LossConfig::default();
        let v = focal_loss(&[0.9, 0.2], &[1, 0], &[1, 1], None, &cfg).unwrap();
        assert!((v - 0.0034788539142854293).abs() < 1e-15, "got {v}");
    }

    #[test]
    fn focal_with_gamma_zero_alpha_half_is_half_bce() {
        let cfg = LossConfig { gamma_focal: 0.0, alpha_pos: 0.5, ..Default::default() };
        let probs = [0.9, 0.2, 0.55, 0.31, 0.74];
        let labels = [1, 0, 1, 1, 0];
        let mask = [1, 1, 1, 0, 1];
        let v = focal_loss(&probs, &labels, &mask, None, &cfg).unwrap();

        // Independent plain BCE over the unmasked tokens.
        let mut bce = 0.0;
        let mut n = 0.0;
        for t in [0usize, 1, 2, 4] {
            let p: f64 = probs[t];
            bce += if labels[t] == 1 { -p.ln() } else { -(1.0 - p).ln() };
            n += 1.0;
        }
        assert!((v - 0.5 * bce / n).abs() <= 1e-12, "focal {v} vs half-bce {}", 0.5 * bce / n);
    }

    #[test]
    fn focal_sample_weights_scale_linearly() {
        let cfg = LossConfig::default();
        let base = focal_loss(&[0.7], &[1], &[1], None, &cfg).unwrap();
        let double = focal_loss(&[0.7], &[1], &[1], Some(&[2.0]), &cfg).unwrap();
        assert!((double - 2.0 * base).abs() < 1e-15);
    }

    #[test]
    fn focal_input_errors() {
        let cfg = LossConfig::default();
        assert!(matches!(
            focal_loss(&[0.5], &[1, 0], &[1], None, &cfg),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            focal_loss(&[0.5], &[1], &[0], None, &cfg),
            Err(Error::EmptyMask(_))
        ));
        let bad = LossConfig { alpha_pos: 1.5, ..Default::default() };
        assert!(matches!(
            focal_loss(&[0.5], &[1], &[1], None, &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn aggregate_limits() {
        // Large temperature approaches the max.
        let zhat = span_aggregate(&[1.0, 3.0, 2.0], 50.0).unwrap();
        assert!((zhat - 3.0).abs() <= 1e-3, "got {zhat}");
        // Zero temperature is exactly the mean.
        let mean = span_aggregate(&[1.0, 3.0, 2.0], 0.0).unwrap();
        assert!((mean - 2.0).abs() <= 1e-12);
        // Single token: the token itself.
        assert_eq!(span_aggregate(&[0.7], 1.0).unwrap(), 0.7);
    }

    #[test]
    fn span_loss_at_neutral_logit() {
        // zhat = 0 -> p = 0.5; positive span pays (0.5)^gamma * ln 2.
        let cfg = LossConfig::default();
        let spans = vec![SpanAnnotation { start: 0, end: 2, label: 1 }];
        let v = span_loss(&[0.0, 0.0, 0.0], &spans, &cfg).unwrap();
        let expected = 0.5f64.powf(cfg.gamma_focal) * 2f64.ln();
        assert!((v - expected).abs() < 1e-15, "got {v}, expected {expected}");

        // Negative span at zhat = 0 is symmetric.
        let neg = vec![SpanAnnotation { start: 0, end: 2, label: 0 }];
        let vn = span_loss(&[0.0, 0.0, 0.0], &neg, &cfg).unwrap();
        assert!((vn - expected).abs() < 1e-15);
    }

    #[test]
    fn span_loss_requires_spans_in_bounds() {
        let cfg = LossConfig::default();
        assert!(span_loss(&[0.0], &[], &cfg).is_err());
        let out = vec![SpanAnnotation { start: 0, end: 3, label: 1 }];
        assert!(matches!(
            span_loss(&[0.0, 0.0], &out, &cfg),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sparse_loss_edge_values() {
        assert!((sparse_loss(&[0.0; 8], &[1; 8]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(sparse_loss(&[3.0; 8], &[0; 8]).unwrap(), 0.0);
        // Masked positions still count in the denominator.
        let half = sparse_loss(&[0.0, 0.0], &[1, 0]).unwrap();
        assert!((half - 0.25).abs() < 1e-15);
    }

    #[test]
    fn kl_of_identical_rows_is_exactly_zero() {
        let rows = vec![0.5f32, 0.3, 0.2, 0.1, 0.6, 0.3];
        let v = kl_loss(&rows, &rows.clone(), &[1, 1], 3).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn kl_matches_hand_computed_two_rows() {
        // Row 1: p=[0.5,0.3,0.2], q=[0.4,0.4,0.2]
        //   0.5 ln(0.5/0.4) + 0.3 ln(0.3/0.4) = 0.025267123709681597
        // Row 2: p=[0.2,0.2,0.6], q=[0.3,0.3,0.4]
        //   2*0.2 ln(2/3) + 0.6 ln(1.5)    = 0.081093021621632877
        let base = vec![0.5f32, 0.3, 0.2, 0.2, 0.2, 0.6];
        let adapted = vec![0.4f32, 0.4, 0.2, 0.3, 0.3, 0.4];
        let v = kl_loss(&base, &adapted, &[1, 1], 3).unwrap();
        let expected = 0.5 * (0.5f64 / 0.4).ln() + 0.3 * (0.3f64 / 0.4).ln()
            + 0.4 * (2.0f64 / 3.0).ln()
            + 0.6 * 1.5f64.ln();
        // f32 storage rounds the inputs; compare at f32-induced precision.
        assert!((v - expected).abs() < 1e-7, "got {v}, expected {expected}");

        // Masking the second row keeps only the first row's contribution.
        let first = kl_loss(&base, &adapted, &[1, 0], 3).unwrap();
        assert!((first - (0.5 * (0.5f64 / 0.4).ln() + 0.3 * (0.3f64 / 0.4).ln())).abs() < 1e-7);
    }

    #[test]
    fn high_loss_mask_drops_strictly_above_tau() {
        let spans = vec![
            SpanAnnotation { start: 0, end: 1, label: 1 },
            SpanAnnotation { start: 2, end: 3, label: 0 },
            SpanAnnotation { start: 4, end: 5, label: 1 },
        ];
        let nll = [0.5f32, 1.0, 2.0, 0.1, 3.0, 0.2];
        let out = apply_high_loss_mask(&spans, &nll, 2.0).unwrap();
        assert_eq!(out.kept, vec![spans[0], spans[1]], "max == tau survives");
        assert_eq!(out.dropped, vec![spans[2]]);

        let all = apply_high_loss_mask(&spans, &nll, f64::INFINITY).unwrap();
        assert_eq!(all.kept, spans);
        assert!(all.dropped.is_empty());
    }

    #[test]
    fn total_recomposes_from_independent_component_calls() {
        let spans = vec![
            SpanAnnotation { start: 1, end: 3, label: 1 },
            SpanAnnotation { start: 5, end: 6, label: 0 },
        ];
        let s = seq("a", 8, spans.clone(), None);
        let logits = vec![vec![0.3, -0.2, 1.4, 0.8, -1.0, 0.2, -0.4, 0.9]];
        let cfg = no_kl();
        let breakdown = total_loss(&logits, &[&s], &cfg).unwrap();

        let probs: Vec<f64> = logits[0].iter().map(|&z| sigmoid_clamped(z)).collect();
        let focal = focal_loss(&probs, &s.token_labels, &s.mask, None, &cfg).unwrap();
        let span = span_loss(&logits[0], &s.spans, &cfg).unwrap();
        let sparse = sparse_loss(&logits[0], &s.mask).unwrap();
        let total = cfg.focal_weight * focal + cfg.lambda_span * span + cfg.lambda_sparse * sparse;

        assert!((breakdown.focal - focal).abs() <= 1e-12);
        assert!((breakdown.span - span).abs() <= 1e-12);
        assert!((breakdown.sparse - sparse).abs() <= 1e-12);
        assert!((breakdown.total - total).abs() <= 1e-12);
        assert!(breakdown.span_term_active);
        assert_eq!(breakdown.masked_span_count, 0);
    }

    #[test]
    fn infinite_tau_equals_no_masking() {
        let spans = vec![SpanAnnotation { start: 0, end: 2, label: 1 }];
        let nll = Some(vec![5.0f32, 10.0, 0.1, 0.2]);
        let s = seq("a", 4, spans, nll);
        let logits = vec![vec![0.5, -0.5, 0.25, 0.0]];
        let unmasked = total_loss(&logits, &[&s], &no_kl()).unwrap();
        let finite_huge = total_loss(
            &logits,
            &[&s],
            &LossConfig { tau: Some(f64::INFINITY), ..no_kl() },
        )
        .unwrap();
        assert_eq!(unmasked, finite_huge);
    }

    #[test]
    fn masked_spans_leave_focal_and_span_terms() {
        let spans = vec![
            SpanAnnotation { start: 0, end: 1, label: 1 }, // max nll 9 -> dropped
            SpanAnnotation { start: 3, end: 4, label: 1 },
        ];
        let nll = vec![0.1f32, 9.0, 0.1, 0.1, 0.1, 0.1];
        let s = seq("a", 6, spans.clone(), Some(nll));
        let logits = vec![vec![2.0, 2.0, -0.3, 0.4, 0.1, -0.2]];
        let cfg = LossConfig { tau: Some(1.0), ..no_kl() };
        let breakdown = total_loss(&logits, &[&s], &cfg).unwrap();
        assert_eq!(breakdown.masked_span_count, 1);

        // Focal must equal the mean over tokens 2..=5 only.
        let probs: Vec<f64> = logits[0][2..].iter().map(|&z| sigmoid_clamped(z)).collect();
        let labels = &s.token_labels[2..];
        let focal = focal_loss(&probs, labels, &[1, 1, 1, 1], None, &cfg).unwrap();
        assert!((breakdown.focal - focal).abs() <= 1e-12);

        // Span term sees only the surviving span.
        let span = span_loss(&logits[0], &spans[1..], &cfg).unwrap();
        assert!((breakdown.span - span).abs() <= 1e-12);
    }

    #[test]
    fn finite_tau_without_nll_is_an_error() {
        let s = seq("a", 3, vec![SpanAnnotation { start: 0, end: 1, label: 1 }], None);
        let cfg = LossConfig { tau: Some(1.0), ..no_kl() };
        assert!(matches!(
            total_loss(&[vec![0.0; 3]], &[&s], &cfg),
            Err(Error::MissingPayload { payload: "nll", .. })
        ));
    }

    #[test]
    fn kl_term_requires_distributions() {
        let s = seq("a", 2, vec![SpanAnnotation { start: 0, end: 0, label: 1 }], None);
        let cfg = LossConfig::default(); // lambda_kl > 0
        assert!(matches!(
            total_loss(&[vec![0.0; 2]], &[&s], &cfg),
            Err(Error::MissingPayload { .. })
        ));
    }

    #[test]
    fn no_spans_anywhere_flags_span_term_inactive() {
        let mut s = seq("a", 4, vec![], None);
        s.token_labels = vec![0, 1, 0, 0]; // labels without spans still legal here
        let breakdown = total_loss(&[vec![0.1; 4]], &[&s], &no_kl()).unwrap();
        assert!(!breakdown.span_term_active);
        assert_eq!(breakdown.span, 0.0);
        assert!(breakdown.total.is_finite());
    }

    #[test]
    fn zero_lambda_disables_terms_exactly() {
        let spans = vec![SpanAnnotation { start: 1, end: 2, label: 1 }];
        let s = seq("a", 5, spans, None);
        let logits = vec![vec![0.4, -0.7, 1.2, 0.0, -0.1]];
        let cfg = LossConfig {
            lambda_span: 0.0,
            lambda_sparse: 0.0,
            lambda_kl: 0.0,
            ..Default::default()
        };
        let (breakdown, grads) = total_loss_with_grad(&logits, &[&s], &cfg).unwrap();
        assert_eq!(breakdown.span, 0.0);
        assert_eq!(breakdown.sparse, 0.0);
        assert_eq!(breakdown.kl, 0.0);
        assert!((breakdown.total - breakdown.focal).abs() <= 1e-15);

        // Gradients reduce to the focal term's.
        let focal_only = LossConfig { focal_weight: 1.0, ..cfg.clone() };
        let (_, focal_grads) = total_loss_with_grad(&logits, &[&s], &focal_only).unwrap();
        assert_eq!(grads, focal_grads);
    }

    #[test]
    fn gradients_match_finite_differences_of_the_total() {
        let mut rng = crate::rng::stream(17, "test/loss/fd");
        for case in 0..20 {
            let n = rng.gen_range(4..10);
            let mut spans = Vec::new();
            if rng.gen_bool(0.8) {
                let start = rng.gen_range(0..n - 1);
                let end = rng.gen_range(start..n.min(start + 3));
                spans.push(SpanAnnotation { start, end, label: rng.gen_range(0..=1) });
            }
            let nll: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
            let mut s = seq("fd", n, spans, Some(nll));
            for m in s.mask.iter_mut() {
                if rng.gen_bool(0.15) {
                    *m = 0;
                }
            }
            s.mask[0] = 1;
            let cfg = LossConfig {
                gamma_focal: [0.0, 1.0, 2.0, 3.0][case % 4],
                alpha_pos: rng.gen_range(0.1..0.9),
                lambda_soft: [0.0, 1.0, 4.0][case % 3],
                lambda_span: 0.5,
                lambda_sparse: 0.05,
                lambda_kl: 0.0,
                tau: if case % 2 == 0 { Some(1.0) } else { None },
                focal_weight: 1.0,
            };
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();

            let (_, grads) = total_loss_with_grad(&[logits.clone()], &[&s], &cfg).unwrap();
            let h = 1e-6;
            for t in 0..n {
                let mut plus = logits.clone();
                plus[t] += h;
                let mut minus = logits.clone();
                minus[t] -= h;
                let lp = total_loss(&[plus], &[&s], &cfg).unwrap().total;
                let lm = total_loss(&[minus], &[&s], &cfg).unwrap().total;
                let fd = (lp - lm) / (2.0 * h);
                let denom = grads[0][t].abs().max(fd.abs()).max(1e-4);
                assert!(
                    (grads[0][t] - fd).abs() / denom <= 1e-5,
                    "case {case} token {t}: analytic {} vs fd {fd}",
                    grads[0][t]
                );
            }
        }
    }

    #[test]
    fn sequence_then_batch_averaging() {
        // Two sequences with different lengths: the batch focal is the mean of
        // the two per-sequence means, not the pooled-token mean.
        let s1 = seq("a", 2, vec![], None);
        let s2 = seq("b", 4, vec![], None);
        let logits = vec![vec![0.6, -0.3], vec![0.2, 0.1, -0.5, 0.8]];
        let cfg = LossConfig { lambda_span: 0.0, lambda_sparse: 0.0, lambda_kl: 0.0, ..Default::default() };
        let breakdown = total_loss(&logits, &[&s1, &s2], &cfg).unwrap();

        let per_seq: Vec<f64> = logits
            .iter()
            .zip([&s1, &s2])
            .map(|(z, s)| {
                let probs: Vec<f64> = z.iter().map(|&v| sigmoid_clamped(v)).collect();
                focal_loss(&probs, &s.token_labels, &s.mask, None, &cfg).unwrap()
            })
            .collect();
        let expected = (per_seq[0] + per_seq[1]) / 2.0;
        assert!((breakdown.focal - expected).abs() <= 1e-12);
    }
}
