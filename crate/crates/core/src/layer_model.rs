//! Cheap per-layer scoring used to rank candidate layers before any probe
//! is trained.
//!
//! Three ingredients per layer `l`:
//!
//! * **Separability** `S_l`: KL divergence between diagonal Gaussians fitted
//!   to the two token classes' hidden states at that layer.
//! * **Modeled probe accuracy** `A_l = sigmoid(b0 + b1 S_l - g d_l - e a)`,
//!   with `d_l = l / (num_layers * rank)` a depth-over-capacity ratio and
//!   `a` the perturbation weight. Coefficients default to (0, 1, 1, 1) and
//!   can be refit from observed accuracies. Measured accuracy, when present,
//!   overrides the model in the utility.
//! * **Modeled backbone loss** `base + lambda * a * S_l`: separable layers
//!   are the ones a perturbation distorts most, so probing them costs more
//!   downstream.
//!
//! Accuracy and loss columns are min-max normalized across the profile and
//! combined as `U_l = w * acc - (1 - w) * loss`, so U always lands in
//! [-1, 1]. A constant column normalizes to 0.5 everywhere, which keeps
//! utilities defined when only one layer has been scored. Normalization is
//! recomputed from scratch every time entries change.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::num::LOG_EPS;

const VAR_FLOOR: f64 = 1e-6;

/// Coefficients of the accuracy model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerfCoeffs {
    pub beta0: f64,
    pub beta1: f64,
    /// Depth penalty weight.
    pub gamma_capacity: f64,
    /// Perturbation penalty weight.
    pub eta: f64,
}

impl Default for PerfCoeffs {
    fn default() -> Self {
        PerfCoeffs { beta0: 0.0, beta1: 1.0, gamma_capacity: 1.0, eta: 1.0 }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// KL divergence between diagonal Gaussians fitted to the label-0 and
/// label-1 token populations of one layer, summed over dimensions:
///
/// ```text
/// 0.5 * sum_d [ var0/var1 + (mu1 - mu0)^2/var1 - 1 + ln(var1/var0) ]
/// ```
///
/// Variances are floored at 1e-6. Errors unless both classes have at least
/// one unmasked token.
pub fn estimate_separability(ds: &Dataset, layer: usize) -> Result<f64> {
    let d = ds.meta.hidden_dim;
    let mut count = [0usize; 2];
    let mut mean = [vec![0.0f64; d], vec![0.0f64; d]];
    let mut msq = [vec![0.0f64; d], vec![0.0f64; d]];

    // Welford updates keep single-pass sums stable for large token counts.
    for seq in &ds.sequences {
        let states = seq.layer_states(layer)?;
        for t in 0..seq.num_tokens {
            if seq.mask[t] != 1 {
                continue;
            }
            let c = usize::from(seq.token_labels[t]);
            count[c] += 1;
            let k = count[c] as f64;
            for (i, &x) in states[t * d..(t + 1) * d].iter().enumerate() {
                let x = f64::from(x);
                let delta = x - mean[c][i];
                mean[c][i] += delta / k;
                msq[c][i] += delta * (x - mean[c][i]);
            }
        }
    }

    if count[0] == 0 || count[1] == 0 {
        return Err(Error::Config(format!(
            "separability at layer {layer} needs both classes, got {} supported / {} hallucinated tokens",
            count[0], count[1]
        )));
    }

    let mut kl = 0.0;
    for i in 0..d {
        let var0 = (msq[0][i] / count[0] as f64).max(VAR_FLOOR);
        let var1 = (msq[1][i] / count[1] as f64).max(VAR_FLOOR);
        let diff = mean[1][i] - mean[0][i];
        kl += 0.5 * (var0 / var1 + diff * diff / var1 - 1.0 + (var1 / var0).ln());
    }
    Ok(kl)
}

/// Modeled probe accuracy at a layer.
pub fn performance_model(
    separability: f64,
    layer: usize,
    num_layers: usize,
    rank: usize,
    alpha: f64,
    c: &PerfCoeffs,
) -> f64 {
    let depth = layer as f64 / (num_layers as f64 * rank as f64);
    sigmoid(c.beta0 + c.beta1 * separability - c.gamma_capacity * depth - c.eta * alpha)
}

/// Modeled backbone loss after attaching a probe of weight `alpha` to a
/// layer of the given separability.
pub fn lm_loss_model(base_loss: f64, lambda: f64, alpha: f64, separability: f64) -> f64 {
    base_loss + lambda * alpha * separability
}

/// One candidate layer's scores. The normalized columns are filled by
/// [`normalize_and_utility`] and cleared whenever the raw entries change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub separability: f64,
    pub a_model: f64,
    /// Measured recall at the target FPR, once a probe has been trained
    /// here. Takes precedence over `a_model` in the utility.
    pub a_empirical: Option<f64>,
    pub lm_loss: f64,
    pub a_norm: Option<f64>,
    pub l_norm: Option<f64>,
    pub utility: Option<f64>,
}

impl LayerRecord {
    pub fn new(layer: usize, separability: f64, a_model: f64, lm_loss: f64) -> Self {
        LayerRecord {
            layer,
            separability,
            a_model,
            a_empirical: None,
            lm_loss,
            a_norm: None,
            l_norm: None,
            utility: None,
        }
    }

    /// Accuracy entering the utility: measured when available, modeled
    /// otherwise.
    pub fn effective_accuracy(&self) -> f64 {
        self.a_empirical.unwrap_or(self.a_model)
    }
}

/// Scores for a whole candidate set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub records: Vec<LayerRecord>,
}

/// Min-max normalize to [0, 1]; a constant column maps to 0.5 everywhere.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo <= 0.0 {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Fill `a_norm`, `l_norm`, and `utility = w * a_norm - (1 - w) * l_norm`
/// for every record, normalizing over the records present.
pub fn normalize_and_utility(profile: &mut LayerProfile, w: f64) -> Result<()> {
    if profile.records.is_empty() {
        return Err(Error::EmptyProfile("layer profile has no records".into()));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("tradeoff w must be in [0, 1], got {w}")));
    }
    let acc: Vec<f64> = profile.records.iter().map(LayerRecord::effective_accuracy).collect();
    let loss: Vec<f64> = profile.records.iter().map(|r| r.lm_loss).collect();
    let acc_n = min_max_normalize(&acc);
    let loss_n = min_max_normalize(&loss);
    for (record, (a, l)) in profile.records.iter_mut().zip(acc_n.iter().zip(&loss_n)) {
        record.a_norm = Some(*a);
        record.l_norm = Some(*l);
        record.utility = Some(w * a - (1.0 - w) * l);
    }
    Ok(())
}

/// Layer with the highest utility; ties break toward the smaller layer.
/// Requires [`normalize_and_utility`] to have filled the utilities.
pub fn best_layer(profile: &LayerProfile) -> Result<(usize, f64)> {
    if profile.records.is_empty() {
        return Err(Error::EmptyProfile("layer profile has no records".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for record in &profile.records {
        let u = record.utility.ok_or_else(|| {
            Error::Config(format!("layer {} has no utility; normalize first", record.layer))
        })?;
        let better = match best {
            None => true,
            Some((bl, bu)) => u > bu || (u == bu && record.layer < bl),
        };
        if better {
            best = Some((record.layer, u));
        }
    }
    Ok(best.expect("records checked non-empty"))
}

/// One observed (inputs, accuracy) pair for refitting [`PerfCoeffs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfObservation {
    pub separability: f64,
    pub layer: usize,
    pub num_layers: usize,
    pub rank: usize,
    pub alpha: f64,
    pub accuracy: f64,
}

/// Least-squares refit of the accuracy model on the logit scale.
///
/// Accuracies are clamped away from 0 and 1, mapped through logit, and
/// regressed on `[1, S, -depth, -alpha]`; the normal equations are solved
/// with partial-pivot Gaussian elimination. Needs at least 4 observations
/// spanning a non-degenerate design.
pub fn fit_performance_coefficients(obs: &[PerfObservation]) -> Result<PerfCoeffs> {
    if obs.len() < 4 {
        return Err(Error::Config(format!(
            "coefficient fit needs >= 4 observations, got {}",
            obs.len()
        )));
    }
    let mut xtx = [[0.0f64; 4]; 4];
    let mut xty = [0.0f64; 4];
    for o in obs {
        let depth = o.layer as f64 / (o.num_layers as f64 * o.rank as f64);
        let row = [1.0, o.separability, -depth, -o.alpha];
        let a = o.accuracy.clamp(LOG_EPS, 1.0 - LOG_EPS);
        let y = (a / (1.0 - a)).ln();
        for i in 0..4 {
            for j in 0..4 {
                xtx[i][j] += row[i] * row[j];
            }
            xty[i] += row[i] * y;
        }
    }

    // Gaussian elimination with partial pivoting on the 4x4 normal equations.
    let mut aug = [[0.0f64; 5]; 4];
    for i in 0..4 {
        aug[i][..4].copy_from_slice(&xtx[i]);
        aug[i][4] = xty[i];
    }
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs()))
            .expect("non-empty range");
        if aug[pivot][col].abs() < 1e-12 {
            return Err(Error::Config(
                "coefficient fit: observations do not span the design (singular system)".into(),
            ));
        }
        aug.swap(col, pivot);
        for r in 0..4 {
            if r == col {
                continue;
            }
            let f = aug[r][col] / aug[col][col];
            for c in col..5 {
                aug[r][c] -= f * aug[col][c];
            }
        }
    }
    Ok(PerfCoeffs {
        beta0: aug[0][4] / aug[0][0],
        beta1: aug[1][4] / aug[1][1],
        gamma_capacity: aug[2][4] / aug[2][2],
        eta: aug[3][4] / aug[3][3],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, DatasetMeta, TokenSequence};
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    use std::collections::BTreeMap;

    /// One-dimensional two-class dataset with the classes drawn from the
    /// given Gaussians.
    fn two_class_1d(mu0: f64, mu1: f64, sigma: f64, n_per_class: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, "test/layer_model/gauss");
        let normal = Normal::new(0.0, 1.0).unwrap();
        let num_tokens = 2 * n_per_class;
        let mut states = Vec::with_capacity(num_tokens);
        let mut labels = Vec::with_capacity(num_tokens);
        for t in 0..num_tokens {
            let (mu, y) = if t % 2 == 0 { (mu0, 0u8) } else { (mu1, 1u8) };
            states.push((mu + sigma * normal.sample(&mut rng)) as f32);
            labels.push(y);
        }
        let seq = TokenSequence {
            id: "s0".into(),
            num_tokens,
            states: BTreeMap::from([(1usize, states)]),
            mask: vec![1; num_tokens],
            spans: vec![],
            token_labels: labels,
            nll: None,
            dist_base: None,
            dist_adapted: None,
        };
        Dataset {
            meta: DatasetMeta {
                hidden_dim: 1,
                num_layers: 1,
                vocab_size: None,
                fingerprint: "test".into(),
            },
            sequences: vec![seq],
        }
    }

    fn profile_from(entries: &[(usize, f64, f64)]) -> LayerProfile {
        LayerProfile {
            records: entries
                .iter()
                .map(|&(layer, acc, lm)| LayerRecord::new(layer, 0.0, acc, lm))
                .collect(),
        }
    }

    #[test]
    fn separability_of_unit_shift_is_near_half() {
        // KL(N(0,1) || N(1,1)) = 0.5 exactly; the estimate from 8000 samples
        // should land within 0.05.
        let ds = two_class_1d(0.0, 1.0, 1.0, 4000, 5);
        let s = estimate_separability(&ds, 1).unwrap();
        assert!((s - 0.5).abs() <= 0.05, "estimate {s}");
    }

    #[test]
    fn separability_of_identical_classes_is_near_zero() {
        let ds = two_class_1d(0.3, 0.3, 1.0, 4000, 6);
        let s = estimate_separability(&ds, 1).unwrap();
        assert!(s.abs() <= 0.05, "estimate {s}");
        assert!(s >= 0.0, "KL must be non-negative, got {s}");
    }

    #[test]
    fn separability_survives_zero_variance() {
        // All states constant within each class: the variance floor keeps
        // the divergence finite and large.
        let mut ds = two_class_1d(0.0, 1.0, 1.0, 10, 7);
        for (t, x) in ds.sequences[0].states.get_mut(&1).unwrap().iter_mut().enumerate() {
            *x = if t % 2 == 1 { 1.0 } else { 0.0 };
        }
        let s = estimate_separability(&ds, 1).unwrap();
        assert!(s.is_finite());
        assert!(s > 1.0, "fully separated classes should score high, got {s}");
    }

    #[test]
    fn separability_requires_both_classes() {
        let mut ds = two_class_1d(0.0, 1.0, 1.0, 10, 8);
        ds.sequences[0].token_labels = vec![0; 20];
        assert!(matches!(estimate_separability(&ds, 1), Err(Error::Config(_))));
    }

    #[test]
    fn accuracy_model_matches_sigmoid_by_hand() {
        // beta = (0, 2), S = 1, depth penalty 1 at the last layer with rank
        // 1: sigmoid(2 - 1) = sigmoid(1) = 0.7310585786300049.
        let c = PerfCoeffs { beta0: 0.0, beta1: 2.0, gamma_capacity: 1.0, eta: 0.0 };
        let a = performance_model(1.0, 8, 8, 1, 0.3, &c);
        assert!((a - 0.7310585786300049).abs() < 1e-15, "got {a}");

        // Zero argument sum gives exactly 0.5.
        let zero = PerfCoeffs { beta0: 0.0, beta1: 0.0, gamma_capacity: 0.0, eta: 0.0 };
        assert_eq!(performance_model(2.0, 3, 8, 4, 0.1, &zero), 0.5);

        // All terms together: sigmoid(1 - 4/32 - 0.3).
        let full = PerfCoeffs::default();
        let b = performance_model(1.0, 4, 8, 4, 0.3, &full);
        assert!((b - sigmoid(1.0 - 0.125 - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn accuracy_model_monotonicities() {
        let mut rng = stream(9, "test/layer_model/mono");
        for _ in 0..1000 {
            let c = PerfCoeffs {
                beta0: rng.gen_range(-1.0..1.0),
                beta1: rng.gen_range(0.1..3.0),
                gamma_capacity: rng.gen_range(0.1..2.0),
                eta: rng.gen_range(0.1..2.0),
            };
            let (num_layers, rank) = (16, 4);
            let s = rng.gen_range(0.0..2.0);
            let alpha = rng.gen_range(0.05..0.5);
            let layer = rng.gen_range(1..=15);

            let base = performance_model(s, layer, num_layers, rank, alpha, &c);
            assert!(base > 0.0 && base < 1.0);
            assert!(performance_model(s + 0.1, layer, num_layers, rank, alpha, &c) > base);
            assert!(performance_model(s, layer + 1, num_layers, rank, alpha, &c) < base);
            assert!(performance_model(s, layer, num_layers, rank, alpha + 0.1, &c) < base);
        }
    }

    #[test]
    fn loss_model_matches_hand_value() {
        // 2 + 0.5 * 0.2 * 1.5 = 2.15.
        let v = lm_loss_model(2.0, 0.5, 0.2, 1.5);
        assert!((v - 2.15).abs() < 1e-15, "got {v}");
        // Either factor at zero keeps the base loss.
        assert_eq!(lm_loss_model(2.0, 0.0, 0.2, 1.5), 2.0);
        assert_eq!(lm_loss_model(2.0, 0.5, 0.0, 1.5), 2.0);
    }

    #[test]
    fn normalization_three_point_and_degenerate_cases() {
        assert_eq!(min_max_normalize(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(min_max_normalize(&[5.0, 5.0, 5.0]), vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn utilities_three_entry_recomputation() {
        // A = [0.2, 0.5, 0.8], L = [1, 2, 3], w = 0.5. Normalized columns
        // are both [0, 0.5, 1], so the utilities cancel to zero exactly.
        let mut profile = profile_from(&[(1, 0.2, 1.0), (2, 0.5, 2.0), (3, 0.8, 3.0)]);
        normalize_and_utility(&mut profile, 0.5).unwrap();
        for r in &profile.records {
            assert!(r.utility.unwrap().abs() < 1e-15);
        }

        // Asymmetric weights break the tie toward accuracy.
        normalize_and_utility(&mut profile, 0.6).unwrap();
        let u: Vec<f64> = profile.records.iter().map(|r| r.utility.unwrap()).collect();
        assert!((u[0] - 0.0).abs() < 1e-15);
        assert!((u[1] - 0.1).abs() < 1e-15);
        assert!((u[2] - 0.2).abs() < 1e-15);
        assert_eq!(best_layer(&profile).unwrap().0, 3);
    }

    #[test]
    fn single_entry_gets_half_normalization() {
        let mut profile = profile_from(&[(4, 0.7, 2.5)]);
        normalize_and_utility(&mut profile, 0.7).unwrap();
        let r = &profile.records[0];
        assert_eq!(r.a_norm, Some(0.5));
        assert_eq!(r.l_norm, Some(0.5));
        assert!((r.utility.unwrap() - (0.7 * 0.5 - 0.3 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn measured_accuracy_overrides_the_model() {
        let mut profile = profile_from(&[(1, 0.9, 2.0), (2, 0.1, 2.0)]);
        // Layer 2 looked bad to the model but measured well.
        profile.records[1].a_empirical = Some(0.95);
        normalize_and_utility(&mut profile, 1.0).unwrap();
        assert_eq!(best_layer(&profile).unwrap().0, 2);
    }

    #[test]
    fn ties_break_toward_the_smaller_layer() {
        let mut profile = profile_from(&[(9, 0.5, 2.0), (5, 0.5, 2.0)]);
        normalize_and_utility(&mut profile, 0.5).unwrap();
        assert_eq!(best_layer(&profile).unwrap().0, 5);
    }

    #[test]
    fn utility_extremes_follow_single_columns() {
        let mut rng = stream(21, "test/layer_model/extremes");
        for _ in 0..1000 {
            let n = rng.gen_range(2..6);
            let entries: Vec<(usize, f64, f64)> = (0..n)
                .map(|i| (i + 1, rng.gen_range(0.0..1.0), rng.gen_range(1.0..4.0)))
                .collect();
            let mut profile = profile_from(&entries);

            // Normalized columns stay in [0, 1]; utilities in [-(1-w), w].
            let w = rng.gen_range(0.0..=1.0);
            normalize_and_utility(&mut profile, w).unwrap();
            for r in &profile.records {
                let (a, l) = (r.a_norm.unwrap(), r.l_norm.unwrap());
                assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&l));
                let u = r.utility.unwrap();
                assert!(u >= -(1.0 - w) - 1e-12 && u <= w + 1e-12);
            }

            // w = 1 ranks purely by accuracy; w = 0 purely by low loss.
            normalize_and_utility(&mut profile, 1.0).unwrap();
            let best_acc = best_layer(&profile).unwrap().0;
            let max_acc = entries.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(
                best_acc,
                entries.iter().filter(|e| e.1 == max_acc).map(|e| e.0).min().unwrap()
            );

            normalize_and_utility(&mut profile, 0.0).unwrap();
            let best_loss = best_layer(&profile).unwrap().0;
            let min_loss = entries.iter().map(|e| e.2).fold(f64::INFINITY, f64::min);
            assert_eq!(
                best_loss,
                entries.iter().filter(|e| e.2 == min_loss).map(|e| e.0).min().unwrap()
            );
        }
    }

    #[test]
    fn profile_errors() {
        let mut empty = LayerProfile::default();
        assert!(matches!(normalize_and_utility(&mut empty, 0.5), Err(Error::EmptyProfile(_))));
        assert!(matches!(best_layer(&empty), Err(Error::EmptyProfile(_))));

        let mut one = profile_from(&[(1, 0.5, 2.0)]);
        assert!(matches!(normalize_and_utility(&mut one, 1.5), Err(Error::Config(_))));
        // Utilities not yet filled.
        assert!(best_layer(&one).is_err());
    }

    #[test]
    fn coefficient_fit_recovers_exact_model() {
        // Accuracies generated exactly from known coefficients: the logit
        // regression must recover them to near machine precision.
        let truth = PerfCoeffs { beta0: -0.3, beta1: 1.7, gamma_capacity: 0.8, eta: 1.2 };
        let mut rng = stream(31, "test/layer_model/fit");
        let obs: Vec<PerfObservation> = (0..40)
            .map(|_| {
                let layer = rng.gen_range(1..=16);
                let separability = rng.gen_range(0.0..3.0);
                let alpha = rng.gen_range(0.05..0.5);
                let accuracy = performance_model(separability, layer, 16, 4, alpha, &truth);
                PerfObservation { separability, layer, num_layers: 16, rank: 4, alpha, accuracy }
            })
            .collect();
        let fit = fit_performance_coefficients(&obs).unwrap();
        for (got, want) in [
            (fit.beta0, truth.beta0),
            (fit.beta1, truth.beta1),
            (fit.gamma_capacity, truth.gamma_capacity),
            (fit.eta, truth.eta),
        ] {
            assert!((got - want).abs() <= 1e-8, "fit {got} vs truth {want}");
        }
    }

    #[test]
    fn coefficient_fit_rejects_degenerate_designs() {
        assert!(fit_performance_coefficients(&[]).is_err());
        // All observations identical: singular normal equations.
        let o = PerfObservation {
            separability: 1.0,
            layer: 4,
            num_layers: 8,
            rank: 4,
            alpha: 0.2,
            accuracy: 0.7,
        };
        assert!(fit_performance_coefficients(&[o; 8]).is_err());
    }
}
