//! Deterministic synthetic dataset generator.
//!
//! The generator exists to give every downstream component a ground truth:
//! class separability follows a configurable layer profile, so the layer
//! search has a known optimum; the `xor`/`ring` structures are linearly
//! inseparable by construction, so linear and MLP probes must part ways; NLL
//! and token-distribution payloads are drawn independently of the labels, so
//! entropy/perplexity baselines have nothing to exploit.
//!
//! Layer `l` separates the classes by
//! `delta_l = max_separation * exp(-(l - peak_layer)^2 / (2 * profile_width^2))`,
//! peaking at `peak_layer`. `delta_l` is the distance between class centers:
//!
//! * `linear`: label-1 tokens get `+delta_l` on coordinate 0.
//! * `xor`: coordinates 0 and 1 get means `±delta_l/2`; the sign product is
//!   positive for label 1, negative for label 0. No hyperplane separates the
//!   four clusters, a two-layer network does.
//! * `ring`: label-0 tokens stay in the noise disk, label-1 tokens sit on a
//!   radius-`delta_l/2` ring in the coordinate-0/1 plane.
//!
//! Remaining coordinates are pure noise. Every draw comes from a sub-stream
//! named by sequence index, so generation is order-independent and could fan
//! out across threads without changing a single byte of the output.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

use super::{labels_from_spans, Dataset, DatasetMeta, SpanAnnotation, TokenSequence};

/// Geometry of the class structure at the informative coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Linear,
    Xor,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_sequences: usize,
    pub tokens_per_sequence: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Layer where class separation peaks, 1-based.
    pub peak_layer: usize,
    /// Width (in layers) of the Gaussian separability profile.
    pub profile_width: f64,
    /// Class-center distance at the peak layer, in units of `noise_scale`.
    pub max_separation: f64,
    pub structure: Structure,
    /// Fraction of tokens covered by label-1 spans, in (0, 0.5).
    pub positive_span_rate: f64,
    /// Mean of the geometric span-length distribution, >= 1.
    pub mean_span_length: f64,
    pub vocab_size: usize,
    /// Standard deviation of the coordinate noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_sequences: 64,
            tokens_per_sequence: 64,
            hidden_dim: 16,
            num_layers: 8,
            peak_layer: 6,
            profile_width: 2.0,
            max_separation: 3.0,
            structure: Structure::Linear,
            positive_span_rate: 0.05,
            mean_span_length: 3.0,
            vocab_size: 16,
            noise_scale: 1.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Strict validation used at the CLI boundary. Rejects `max_separation`
    /// <= 0; [`generate_synthetic`] itself accepts 0 so tests can build
    /// degenerate datasets with identical class distributions.
    pub fn validate(&self) -> Result<()> {
        self.validate_relaxed()?;
        if self.max_separation <= 0.0 {
            return Err(Error::Config(format!(
                "max_separation must be > 0, got {}",
                self.max_separation
            )));
        }
        Ok(())
    }

    fn validate_relaxed(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_sequences == 0 {
            return fail("num_sequences must be >= 1".into());
        }
        if self.tokens_per_sequence == 0 {
            return fail("tokens_per_sequence must be >= 1".into());
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim must be >= 1".into());
        }
        if matches!(self.structure, Structure::Xor | Structure::Ring) && self.hidden_dim < 2 {
            return fail(format!(
                "structure {:?} needs hidden_dim >= 2, got {}",
                self.structure, self.hidden_dim
            ));
        }
        if self.num_layers == 0 {
            return fail("num_layers must be >= 1".into());
        }
        if self.peak_layer == 0 || self.peak_layer > self.num_layers {
            return fail(format!(
                "peak_layer must be in 1..={}, got {}",
                self.num_layers, self.peak_layer
            ));
        }
        if !(self.profile_width > 0.0) {
            return fail(format!("profile_width must be > 0, got {}", self.profile_width));
        }
        if !(self.max_separation >= 0.0) {
            return fail(format!("max_separation must be >= 0, got {}", self.max_separation));
        }
        if !(self.positive_span_rate > 0.0 && self.positive_span_rate < 0.5) {
            return fail(format!(
                "positive_span_rate must be in (0, 0.5), got {}",
                self.positive_span_rate
            ));
        }
        if !(self.mean_span_length >= 1.0) {
            return fail(format!("mean_span_length must be >= 1, got {}", self.mean_span_length));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if !(self.noise_scale > 0.0) {
            return fail(format!("noise_scale must be > 0, got {}", self.noise_scale));
        }
        Ok(())
    }

    /// Class-center distance at `layer`.
    pub fn separation_at(&self, layer: usize) -> f64 {
        let d = layer as f64 - self.peak_layer as f64;
        self.max_separation * (-d * d / (2.0 * self.profile_width * self.profile_width)).exp()
    }

    /// Stable fingerprint of the full config including the seed.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("seed={};cfg={:016x}", self.seed, h)
    }
}

/// Generate a dataset per `cfg`. Identical configs give bit-identical
/// datasets.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate_relaxed()?;

    let sequences = (0..cfg.num_sequences)
        .map(|i| generate_sequence(cfg, i))
        .collect::<Vec<_>>();

    Ok(Dataset {
        meta: DatasetMeta {
            hidden_dim: cfg.hidden_dim,
            num_layers: cfg.num_layers,
            vocab_size: Some(cfg.vocab_size),
            fingerprint: cfg.fingerprint(),
        },
        sequences,
    })
}

fn generate_sequence(cfg: &SynthConfig, index: usize) -> TokenSequence {
    let n = cfg.tokens_per_sequence;
    let seed = cfg.seed;

    let spans = place_spans(cfg, index);
    let token_labels = labels_from_spans(n, &spans);

    let mut states = std::collections::BTreeMap::new();
    for layer in 1..=cfg.num_layers {
        let mut rng = stream(seed, &format!("synth/seq/{index}/layer/{layer}"));
        states.insert(layer, layer_states(cfg, layer, &token_labels, &mut rng));
    }

    let mut nll_rng = stream(seed, &format!("synth/seq/{index}/nll"));
    let exp = Exp::new(1.0).expect("rate > 0");
    let nll: Vec<f32> = (0..n).map(|_| exp.sample(&mut nll_rng) as f32).collect();

    let (dist_base, dist_adapted) = token_distributions(cfg, index);

    TokenSequence {
        id: format!("seq-{index:05}"),
        num_tokens: n,
        states,
        mask: vec![1; n],
        spans,
        token_labels,
        nll: Some(nll),
        dist_base: Some(dist_base),
        dist_adapted: Some(dist_adapted),
    }
}

/// Non-overlapping spans: label-1 spans until they cover about
/// `positive_span_rate` of the tokens, then as many label-0 spans again.
/// Lengths are geometric with mean `mean_span_length`; placements that would
/// overlap an existing span are rejected.
fn place_spans(cfg: &SynthConfig, index: usize) -> Vec<SpanAnnotation> {
    let n = cfg.tokens_per_sequence;
    let mut rng = stream(cfg.seed, &format!("synth/seq/{index}/spans"));
    let mut occupied = vec![false; n];
    let mut spans = Vec::new();

    let target = ((cfg.positive_span_rate * n as f64).round() as usize).max(1);
    for label in [1u8, 0u8] {
        let mut covered = 0usize;
        let mut attempts = 0usize;
        while covered < target && attempts < 50 * n.max(8) {
            attempts += 1;
            let len = geometric_len(&mut rng, cfg.mean_span_length).min(n);
            let start = rng.gen_range(0..=n - len);
            let end = start + len - 1;
            if occupied[start..=end].iter().any(|&o| o) {
                continue;
            }
            occupied[start..=end].iter_mut().for_each(|o| *o = true);
            spans.push(SpanAnnotation { start, end, label });
            covered += len;
        }
    }

    spans.sort_by_key(|s| s.start);
    spans
}

/// Geometric length with mean `mean_len` on support {1, 2, ...}.
fn geometric_len(rng: &mut impl Rng, mean_len: f64) -> usize {
    let p = 1.0 / mean_len;
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = rng.gen_range(0.0..1.0);
    1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as usize
}

fn layer_states(cfg: &SynthConfig, layer: usize, labels: &[u8], rng: &mut impl Rng) -> Vec<f32> {
    let n = labels.len();
    let d = cfg.hidden_dim;
    let delta = cfg.separation_at(layer);
    let normal = Normal::new(0.0, 1.0).expect("std > 0");

    let mut out = vec![0f32; n * d];
    for (t, &y) in labels.iter().enumerate() {
        let row = &mut out[t * d..(t + 1) * d];
        for v in row.iter_mut() {
            *v = (cfg.noise_scale * normal.sample(rng)) as f32;
        }
        match cfg.structure {
            Structure::Linear => {
                if y == 1 {
                    row[0] += delta as f32;
                }
            }
            Structure::Xor => {
                let s0: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let s1 = if y == 1 { s0 } else { -s0 };
                row[0] += (s0 * delta / 2.0) as f32;
                row[1] += (s1 * delta / 2.0) as f32;
            }
            Structure::Ring => {
                if y == 1 {
                    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    let radius = delta / 2.0 + 0.25 * cfg.noise_scale * normal.sample(rng);
                    // Replace (not shift) the planar noise so the ring stays thin.
                    row[0] = (radius * theta.cos() + 0.1 * cfg.noise_scale * normal.sample(rng)) as f32;
                    row[1] = (radius * theta.sin() + 0.1 * cfg.noise_scale * normal.sample(rng)) as f32;
                }
            }
        }
    }
    out
}

/// Base rows are Dirichlet(1, ..., 1); adapted rows multiply each entry by a
/// bounded log-normal factor and renormalize. Neither depends on the labels.
fn token_distributions(cfg: &SynthConfig, index: usize) -> (Vec<f32>, Vec<f32>) {
    let n = cfg.tokens_per_sequence;
    let v = cfg.vocab_size;
    let mut rng = stream(cfg.seed, &format!("synth/seq/{index}/dist"));
    let exp: Exp<f64> = Exp::new(1.0).expect("rate > 0");
    let normal: Normal<f64> = Normal::new(0.0, 1.0).expect("std > 0");

    let mut base = vec![0f32; n * v];
    let mut adapted = vec![0f32; n * v];
    for t in 0..n {
        let gammas: Vec<f64> = (0..v).map(|_| exp.sample(&mut rng).max(1e-12)).collect();
        let sum: f64 = gammas.iter().sum();
        let p: Vec<f64> = gammas.iter().map(|g| g / sum).collect();

        let factors: Vec<f64> = (0..v)
            .map(|_| (0.2 * normal.sample(&mut rng).clamp(-2.0, 2.0)).exp())
            .collect();
        let qsum: f64 = p.iter().zip(&factors).map(|(pi, f)| pi * f).sum();

        for k in 0..v {
            base[t * v + k] = p[k] as f32;
            adapted[t * v + k] = (p[k] * factors[k] / qsum) as f32;
        }
    }
    (base, adapted)
}
