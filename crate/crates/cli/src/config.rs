//! Run configuration: one JSON file covering every command, with dotted-path
//! overrides and a single global seed feeding named per-module sub-streams.
//!
//! `resolve()` rewrites every derived field (section seeds, mirrored knobs)
//! so the emitted `resolved_config.json` reproduces the run verbatim when
//! fed back through `--config`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use tphd::bayesopt::BOConfig;
use tphd::dataset::SynthConfig;
use tphd::layer_model::PerfCoeffs;
use tphd::loss::LossConfig;
use tphd::probe::ProbeKind;
use tphd::rng::sub_seed;
use tphd::trainer::TrainConfig;
use tphd::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub kind: ProbeKind,
    /// Layer to probe; unset picks the two-thirds-depth default for the
    /// dataset at hand.
    pub layer: Option<usize>,
    /// Initialization seed. Derived from the global seed at resolve time;
    /// setting it directly has no effect.
    pub seed: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection { kind: ProbeKind::Mlp, layer: None, seed: 42 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerModelSection {
    /// Coefficients of the modeled probe accuracy used by the layer search
    /// utility. Authoritative copy; mirrored into `bo.coeffs` at resolve.
    pub coeffs: PerfCoeffs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// False-positive-rate budget for the recall metric.
    pub fpr_target: f64,
    /// Decision threshold for the confusion-count metrics.
    pub threshold: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { fpr_target: 0.1, threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; every section seed is a named sub-stream of it.
    pub seed: u64,
    /// Train share of the sequence-level split used by `train`, `eval`,
    /// `ablate`, and the layer search.
    pub train_fraction: f64,
    pub synth: SynthConfig,
    pub probe: ProbeSection,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub bo: BOConfig,
    pub layer_model: LayerModelSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            train_fraction: 0.8,
            synth: SynthConfig::default(),
            probe: ProbeSection::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            bo: BOConfig::default(),
            layer_model: LayerModelSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl RunConfig {
    /// Overwrite every derived field with its authoritative source: seeds
    /// from the global seed, mirrored knobs from their owning section.
    /// Idempotent, so resolving an already-resolved config is a no-op.
    pub fn resolve(&mut self) {
        self.synth.seed = sub_seed(self.seed, "synth");
        self.probe.seed = sub_seed(self.seed, "probe");
        self.train.seed = sub_seed(self.seed, "train");
        self.bo.seed = sub_seed(self.seed, "bo");
        self.bo.train_fraction = self.train_fraction;
        self.bo.probe_kind = self.probe.kind;
        self.bo.coeffs = self.layer_model.coeffs;
        self.train.fpr_target = self.metrics.fpr_target;
        self.train.threshold = self.metrics.threshold;
    }

    /// Seed of the sequence-level train/val split shared by every
    /// dataset-consuming command.
    pub fn split_seed(&self) -> u64 {
        sub_seed(self.seed, "split")
    }

    /// Bounds shared by the training-flavored commands. The synth and bo
    /// sections are validated only by the commands that use them.
    pub fn validate_training(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.metrics.fpr_target > 0.0 && self.metrics.fpr_target < 1.0) {
            return Err(Error::Config(format!(
                "metrics.fpr_target must be in (0, 1), got {}",
                self.metrics.fpr_target
            )));
        }
        if !(0.0..=1.0).contains(&self.metrics.threshold) {
            return Err(Error::Config(format!(
                "metrics.threshold must be in [0, 1], got {}",
                self.metrics.threshold
            )));
        }
        self.loss.validate()?;
        self.train.validate()
    }
}

/// Load the config file (defaults when absent), apply `--set` overrides in
/// order, then the `--seed` flag, then resolve derived fields.
pub fn load_config(path: Option<&Path>, sets: &[String], seed_flag: Option<u64>) -> Result<RunConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?
        }
        None => serde_json::Value::Object(serde_json::Map::new()),
    };
    for spec in sets {
        apply_set(&mut value, spec)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(e.to_string()))?;
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    cfg.resolve();
    Ok(cfg)
}

/// Apply one `section.key=value` override onto the raw JSON tree. The value
/// is parsed as JSON when possible and kept as a string otherwise, so
/// `--set probe.kind=mlp` and `--set loss.tau=1.5` both do the obvious
/// thing. Intermediate objects are created on demand.
fn apply_set(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{spec}`")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("--set key `{path}` has an empty segment")));
    }
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_owned()));

    let segments: Vec<&str> = path.split('.').collect();
    let mut cursor = root;
    for seg in &segments[..segments.len() - 1] {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!("--set {path}: `{seg}` is not an object in the config"))
        })?;
        cursor = obj
            .entry((*seg).to_owned())
            .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
    }
    let last = *segments.last().expect("non-empty path");
    let obj = cursor.as_object_mut().ok_or_else(|| {
        Error::Config(format!("--set {path}: parent of `{last}` is not an object"))
    })?;
    obj.insert(last.to_owned(), parsed);
    Ok(())
}

/// Every command drops the fully-resolved config next to its outputs so a
/// run can be replayed from the artifact directory alone.
pub fn write_resolved_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    fs::write(out.join("resolved_config.json"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_is_idempotent() {
        let mut a = RunConfig::default();
        a.seed = 7;
        a.resolve();
        let mut b = a.clone();
        b.resolve();
        assert_eq!(a, b);
    }

    #[test]
    fn section_seeds_differ() {
        let mut cfg = RunConfig::default();
        cfg.resolve();
        let seeds = [cfg.synth.seed, cfg.probe.seed, cfg.train.seed, cfg.bo.seed];
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn set_overrides_nested_keys() {
        let mut value = serde_json::json!({});
        apply_set(&mut value, "loss.gamma_focal=3.0").unwrap();
        apply_set(&mut value, "probe.kind=linear").unwrap();
        apply_set(&mut value, "bo.gp.length_scale=0.3").unwrap();
        let mut cfg: RunConfig = serde_json::from_value(value).unwrap();
        cfg.resolve();
        assert_eq!(cfg.loss.gamma_focal, 3.0);
        assert_eq!(cfg.probe.kind, ProbeKind::Linear);
        assert_eq!(cfg.bo.gp.length_scale, 0.3);
        assert_eq!(cfg.bo.probe_kind, ProbeKind::Linear);
    }

    #[test]
    fn set_without_equals_is_rejected() {
        let mut value = serde_json::json!({});
        let err = apply_set(&mut value, "loss.gamma_focal").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = serde_json::from_value::<RunConfig>(serde_json::json!({"tpyo": 1}));
        assert!(err.is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.resolve();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
