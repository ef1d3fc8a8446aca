//! Probing datasets: per-layer hidden states plus token-level supervision.
//!
//! A [`Dataset`] is a list of [`TokenSequence`]s sharing one geometry
//! ([`DatasetMeta`]): hidden width, transformer depth, and optional vocab
//! size. Each sequence carries hidden states for one or more layers, an
//! attention mask, span annotations (hallucinated vs supported), derived
//! per-token labels, and optional per-token NLL and base/adapted token
//! distributions used by the distribution-shift loss term and the
//! entropy/perplexity baselines.
//!
//! Layers are 1-based (`1..=num_layers`). Spans use inclusive token indices
//! and must not overlap within a sequence, regardless of label.

mod io;
mod synth;

pub use io::{load_dataset, save_dataset, BLOB_FILE, FORMAT_VERSION, MAGIC, MANIFEST_FILE};
pub use synth::{generate_synthetic, Structure, SynthConfig};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// One annotated span, inclusive on both ends. `label` 1 marks a hallucinated
/// span, 0 a supported one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub start: usize,
    pub end: usize,
    pub label: u8,
}

impl SpanAnnotation {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false // inclusive bounds: a valid span always covers >= 1 token
    }

    pub fn contains(&self, token: usize) -> bool {
        self.start <= token && token <= self.end
    }

    pub fn overlaps(&self, other: &SpanAnnotation) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// One sequence of tokens with per-layer hidden states.
///
/// `states[l]` is a row-major `[num_tokens, hidden_dim]` matrix for layer `l`.
/// `mask` is the attention mask (1 = real token). `token_labels[i]` is 1 iff
/// token `i` lies inside a label-1 span. `dist_base`/`dist_adapted` are
/// row-major `[num_tokens, vocab_size]` probability matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub id: String,
    pub num_tokens: usize,
    pub states: BTreeMap<usize, Vec<f32>>,
    pub mask: Vec<u8>,
    pub spans: Vec<SpanAnnotation>,
    pub token_labels: Vec<u8>,
    pub nll: Option<Vec<f32>>,
    pub dist_base: Option<Vec<f32>>,
    pub dist_adapted: Option<Vec<f32>>,
}

impl TokenSequence {
    /// Hidden-state matrix for `layer`, row-major `[num_tokens, hidden_dim]`.
    pub fn layer_states(&self, layer: usize) -> Result<&[f32]> {
        self.states.get(&layer).map(Vec::as_slice).ok_or_else(|| {
            let available = self
                .states
                .keys()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(",");
            Error::MissingLayer {
                layer,
                available: if available.is_empty() { "none".into() } else { available },
            }
        })
    }

    /// Number of unmasked tokens.
    pub fn active_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Geometry and provenance shared by every sequence of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub vocab_size: Option<usize>,
    /// `seed=<n>;cfg=<hash>` for generated data, `"external"` otherwise.
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub sequences: Vec<TokenSequence>,
}

impl Dataset {
    /// Total tokens across sequences (masked ones included).
    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.num_tokens).sum()
    }

    /// Layers stored by every sequence (intersection).
    pub fn stored_layers(&self) -> Vec<usize> {
        let mut layers: Option<Vec<usize>> = None;
        for seq in &self.sequences {
            let keys: Vec<usize> = seq.states.keys().copied().collect();
            layers = Some(match layers {
                None => keys,
                Some(prev) => prev.into_iter().filter(|l| keys.contains(l)).collect(),
            });
        }
        layers.unwrap_or_default()
    }
}

/// A single consistency failure found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Offending sequence id, or `None` for dataset-level problems.
    pub sequence: Option<String>,
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.sequence {
            Some(id) => write!(f, "[{id}] {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// Check every structural invariant of a dataset and return all violations
/// found (empty means consistent). Never panics on malformed input.
pub fn validate(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |sequence: Option<&str>, field: &str, message: String| {
        out.push(Violation {
            sequence: sequence.map(str::to_owned),
            field: field.to_owned(),
            message,
        });
    };

    if ds.meta.hidden_dim == 0 {
        push(None, "meta.hidden_dim", "must be >= 1".into());
    }
    if ds.meta.num_layers == 0 {
        push(None, "meta.num_layers", "must be >= 1".into());
    }
    if ds.meta.vocab_size == Some(0) {
        push(None, "meta.vocab_size", "must be >= 1 when present".into());
    }

    let d = ds.meta.hidden_dim;
    for seq in &ds.sequences {
        let id = seq.id.as_str();
        let n = seq.num_tokens;

        if seq.mask.len() != n {
            push(Some(id), "mask", format!("length {} != num_tokens {}", seq.mask.len(), n));
        }
        if seq.mask.iter().any(|&m| m > 1) {
            push(Some(id), "mask", "entries must be 0 or 1".into());
        }
        if seq.token_labels.len() != n {
            push(
                Some(id),
                "token_labels",
                format!("length {} != num_tokens {}", seq.token_labels.len(), n),
            );
        }
        if seq.token_labels.iter().any(|&y| y > 1) {
            push(Some(id), "token_labels", "entries must be 0 or 1".into());
        }

        for (layer, mat) in &seq.states {
            if *layer == 0 || *layer > ds.meta.num_layers {
                push(
                    Some(id),
                    "states",
                    format!("layer {} outside 1..={}", layer, ds.meta.num_layers),
                );
            }
            if mat.len() != n * d {
                push(
                    Some(id),
                    "states",
                    format!("layer {} has {} values, expected {}", layer, mat.len(), n * d),
                );
            }
            if mat.iter().any(|v| !v.is_finite()) {
                push(Some(id), "states", format!("layer {layer} contains non-finite values"));
            }
        }

        let mut sorted: Vec<&SpanAnnotation> = seq.spans.iter().collect();
        sorted.sort_by_key(|s| s.start);
        for span in &seq.spans {
            if span.start > span.end {
                push(Some(id), "spans", format!("span {}..={} has start > end", span.start, span.end));
            }
            if span.end >= n {
                push(Some(id), "spans", format!("span {}..={} exceeds num_tokens {}", span.start, span.end, n));
            }
            if span.label > 1 {
                push(Some(id), "spans", format!("span {}..={} label must be 0 or 1", span.start, span.end));
            }
        }
        for pair in sorted.windows(2) {
            if pair[0].overlaps(pair[1]) {
                push(
                    Some(id),
                    "spans",
                    format!(
                        "spans {}..={} and {}..={} overlap",
                        pair[0].start, pair[0].end, pair[1].start, pair[1].end
                    ),
                );
            }
        }

        if seq.token_labels.len() == n && seq.spans.iter().all(|s| s.end < n) {
            let derived = labels_from_spans(n, &seq.spans);
            if derived != seq.token_labels {
                push(Some(id), "token_labels", "do not match label-1 span coverage".into());
            }
        }

        if let Some(nll) = &seq.nll {
            if nll.len() != n {
                push(Some(id), "nll", format!("length {} != num_tokens {}", nll.len(), n));
            }
            if nll.iter().any(|v| !v.is_finite() || *v < 0.0) {
                push(Some(id), "nll", "entries must be finite and >= 0".into());
            }
        }

        for (field, dist) in [("dist_base", &seq.dist_base), ("dist_adapted", &seq.dist_adapted)] {
            let Some(dist) = dist else { continue };
            let Some(v) = ds.meta.vocab_size else {
                push(Some(id), field, "present but meta.vocab_size is unset".into());
                continue;
            };
            if dist.len() != n * v {
                push(Some(id), field, format!("has {} values, expected {}", dist.len(), n * v));
                continue;
            }
            for t in 0..n {
                let row = &dist[t * v..(t + 1) * v];
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    push(Some(id), field, format!("row {t} has negative or non-finite entries"));
                    break;
                }
                let sum: f64 = row.iter().map(|&p| f64::from(p)).sum();
                if (sum - 1.0).abs() > 1e-6 {
                    push(Some(id), field, format!("row {t} sums to {sum}, expected 1 within 1e-6"));
                    break;
                }
            }
        }
    }

    let mut ids: Vec<&str> = ds.sequences.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    for pair in ids.windows(2) {
        if pair[0] == pair[1] {
            push(None, "sequences", format!("duplicate sequence id `{}`", pair[0]));
        }
    }

    out
}

/// Token labels implied by label-1 spans: 1 inside, 0 elsewhere.
pub fn labels_from_spans(num_tokens: usize, spans: &[SpanAnnotation]) -> Vec<u8> {
    let mut labels = vec![0u8; num_tokens];
    for span in spans.iter().filter(|s| s.label == 1) {
        for t in span.start..=span.end.min(num_tokens.saturating_sub(1)) {
            labels[t] = 1;
        }
    }
    labels
}

/// Split into train/validation by a seeded shuffle of whole sequences.
///
/// `train_fraction` must lie in (0, 1); both sides are guaranteed at least one
/// sequence, so the dataset needs two or more.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = ds.sequences.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "split needs at least 2 sequences, got {n}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, "dataset/split");
    // Fisher-Yates; explicit loop keeps the draw sequence stable across rand
    // versions.
    for i in (1..n).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        order.swap(i, j);
    }

    let mut n_train = (train_fraction * n as f64).floor() as usize;
    n_train = n_train.clamp(1, n - 1);

    let pick = |idx: &[usize]| Dataset {
        meta: ds.meta.clone(),
        sequences: idx.iter().map(|&i| ds.sequences[i].clone()).collect(),
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sequence(id: &str, n: usize, d: usize) -> TokenSequence {
        let spans = vec![SpanAnnotation { start: 1, end: 2, label: 1 }];
        TokenSequence {
            id: id.into(),
            num_tokens: n,
            states: BTreeMap::from([(1, vec![0.5f32; n * d])]),
            mask: vec![1; n],
            spans: spans.clone(),
            token_labels: labels_from_spans(n, &spans),
            nll: None,
            dist_base: None,
            dist_adapted: None,
        }
    }

    fn tiny_dataset() -> Dataset {
        Dataset {
            meta: DatasetMeta {
                hidden_dim: 3,
                num_layers: 2,
                vocab_size: None,
                fingerprint: "external".into(),
            },
            sequences: (0..10).map(|i| tiny_sequence(&format!("s{i}"), 6, 3)).collect(),
        }
    }

    #[test]
    fn valid_dataset_has_no_violations() {
        assert_eq!(validate(&tiny_dataset()), vec![]);
    }

    #[test]
    fn overlapping_spans_flagged() {
        let mut ds = tiny_dataset();
        ds.sequences[0].spans.push(SpanAnnotation { start: 2, end: 4, label: 0 });
        let violations = validate(&ds);
        assert!(violations.iter().any(|v| v.field == "spans" && v.message.contains("overlap")));
    }

    #[test]
    fn label_span_mismatch_flagged() {
        let mut ds = tiny_dataset();
        ds.sequences[1].token_labels[0] = 1;
        let violations = validate(&ds);
        assert!(
            violations.iter().any(|v| v.field == "token_labels"),
            "expected a token_labels violation, got {violations:?}"
        );
    }

    #[test]
    fn bad_layer_shape_flagged() {
        let mut ds = tiny_dataset();
        ds.sequences[2].states.insert(2, vec![0.0; 5]);
        let violations = validate(&ds);
        assert!(violations.iter().any(|v| v.field == "states" && v.message.contains("expected 18")));
    }

    #[test]
    fn dist_rows_must_normalize() {
        let mut ds = tiny_dataset();
        ds.meta.vocab_size = Some(2);
        ds.sequences[0].dist_base = Some(vec![0.7f32; 12]);
        let violations = validate(&ds);
        assert!(violations.iter().any(|v| v.field == "dist_base" && v.message.contains("sums")));
    }

    #[test]
    fn split_10_sequences_80_20() {
        let ds = tiny_dataset();
        let (train, val) = split(&ds, 0.8, 1).unwrap();
        assert_eq!(train.sequences.len(), 8);
        assert_eq!(val.sequences.len(), 2);

        let mut ids: Vec<&str> = train
            .sequences
            .iter()
            .chain(val.sequences.iter())
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 10, "split must partition the sequences");
    }

    #[test]
    fn split_is_seed_deterministic() {
        let ds = tiny_dataset();
        let (a_train, _) = split(&ds, 0.7, 9).unwrap();
        let (b_train, _) = split(&ds, 0.7, 9).unwrap();
        assert_eq!(a_train, b_train);
        let (c_train, _) = split(&ds, 0.7, 10).unwrap();
        assert_ne!(a_train.sequences.iter().map(|s| &s.id).collect::<Vec<_>>(),
                   c_train.sequences.iter().map(|s| &s.id).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_degenerate_inputs() {
        let ds = tiny_dataset();
        assert!(split(&ds, 0.0, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
        let single = Dataset { meta: ds.meta.clone(), sequences: vec![ds.sequences[0].clone()] };
        assert!(split(&single, 0.5, 1).is_err());
    }
}
