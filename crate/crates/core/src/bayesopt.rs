//! Bayesian layer search: a Gaussian-process surrogate over per-layer
//! utility, expected-improvement / UCB acquisition, and the sequential
//! search loop.
//!
//! Each candidate evaluation is expensive (train a probe, measure recall at
//! the target FPR on the validation split), so the loop evaluates `n_init`
//! seeded random layers, then for up to `iterations` rounds fits a GP to
//! the utilities observed so far and evaluates the unevaluated candidate
//! that maximizes the acquisition. Candidates are never re-evaluated.
//!
//! Utilities are re-normalized over the observed set after every
//! evaluation (the [`crate::layer_model`] convention), so a past layer's
//! utility can change as new observations arrive. Both incumbent notions
//! therefore live under the *current* normalization:
//!
//! * acquisition uses the current best normalized utility, which is the
//!   quantity the GP models;
//! * the trace reports the argmax-utility evaluated layer after each
//!   re-normalization — the layer the search would recommend if stopped
//!   there, so the final entry's incumbent equals the outcome's best layer.
//!
//! Regret against a supplied oracle uses the oracle's own utility values,
//! so normalization drift never contaminates regret curves.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::dataset::{split, Dataset};
use crate::error::{Error, Result};
use crate::layer_model::{
    best_layer, estimate_separability, lm_loss_model, normalize_and_utility, performance_model,
    LayerProfile, LayerRecord, PerfCoeffs,
};
use crate::loss::LossConfig;
use crate::probe::{init_probe, ProbeArch, ProbeKind};
use crate::rng::{stream, sub_seed};
use crate::trainer::{evaluate, train, TrainConfig};

/// Jitter ladder tried when the Gram matrix is numerically indefinite.
const JITTERS: [f64; 5] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6];
/// Length-scale grid for the optional marginal-likelihood refresh.
const LS_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.5];
/// Below this posterior deviation the EI integral collapses to its mean part.
const EI_STD_FLOOR: f64 = 1e-5;

fn default_length_scale() -> f64 {
    0.2
}
fn default_signal_variance() -> f64 {
    1.0
}
fn default_noise_variance() -> f64 {
    1e-4
}

/// Squared-exponential GP hyperparameters over layer indices rescaled to
/// [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    /// Re-pick the length scale from a small grid by marginal likelihood
    /// every third observation.
    pub hyper_refresh: bool,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            length_scale: default_length_scale(),
            signal_variance: default_signal_variance(),
            noise_variance: default_noise_variance(),
            hyper_refresh: false,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0) {
            return Err(Error::Config(format!(
                "gp length_scale must be > 0, got {}",
                self.length_scale
            )));
        }
        if !(self.signal_variance > 0.0) {
            return Err(Error::Config(format!(
                "gp signal_variance must be > 0, got {}",
                self.signal_variance
            )));
        }
        if !(self.noise_variance >= 0.0) {
            return Err(Error::Config(format!(
                "gp noise_variance must be >= 0, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }
}

fn kernel(signal_variance: f64, length_scale: f64, a: f64, b: f64) -> f64 {
    let d = a - b;
    signal_variance * (-d * d / (2.0 * length_scale * length_scale)).exp()
}

/// Layer index mapped to [0, 1]; a one-layer model collapses to 0.
pub fn scale_layer(layer: usize, num_layers: usize) -> f64 {
    if num_layers <= 1 {
        return 0.0;
    }
    (layer as f64 - 1.0) / (num_layers as f64 - 1.0)
}

/// Zero-mean GP posterior fitted by Cholesky factorization.
#[derive(Debug, Clone)]
pub struct Gp {
    xs: Vec<f64>,
    signal_variance: f64,
    /// Length scale actually used (may differ from the config after a
    /// marginal-likelihood refresh).
    pub length_scale: f64,
    /// Row-major lower-triangular factor of K + (noise + jitter) I.
    chol: Vec<f64>,
    /// (K + noise I)^-1 y.
    alpha: Vec<f64>,
    log_marginal: f64,
}

/// In-place Cholesky of the row-major symmetric matrix; true on success.
fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return false;
                }
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
        for j in (i + 1)..n {
            a[i * n + j] = 0.0;
        }
    }
    true
}

fn forward_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

fn backward_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in (i + 1)..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

impl Gp {
    /// Fit at the configured length scale.
    pub fn fit(xs: &[f64], ys: &[f64], cfg: &GpConfig) -> Result<Gp> {
        Self::fit_at(xs, ys, cfg, cfg.length_scale)
    }

    /// Fit, refreshing the length scale from [`LS_GRID`] by marginal
    /// likelihood on every third observation when the config enables it.
    pub fn fit_auto(xs: &[f64], ys: &[f64], cfg: &GpConfig) -> Result<Gp> {
        if !cfg.hyper_refresh || xs.is_empty() || xs.len() % 3 != 0 {
            return Self::fit(xs, ys, cfg);
        }
        let mut best: Option<Gp> = None;
        for &ls in &LS_GRID {
            let gp = Self::fit_at(xs, ys, cfg, ls)?;
            let better = best.as_ref().map_or(true, |b| gp.log_marginal > b.log_marginal);
            if better {
                best = Some(gp);
            }
        }
        Ok(best.expect("grid is non-empty"))
    }

    fn fit_at(xs: &[f64], ys: &[f64], cfg: &GpConfig, length_scale: f64) -> Result<Gp> {
        cfg.validate()?;
        if xs.len() != ys.len() {
            return Err(Error::ShapeMismatch {
                context: "gp observations".into(),
                expected: xs.len(),
                got: ys.len(),
            });
        }
        let n = xs.len();
        if n == 0 {
            return Ok(Gp {
                xs: Vec::new(),
                signal_variance: cfg.signal_variance,
                length_scale,
                chol: Vec::new(),
                alpha: Vec::new(),
                log_marginal: 0.0,
            });
        }

        let mut base = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                base[i * n + j] = kernel(cfg.signal_variance, length_scale, xs[i], xs[j]);
            }
        }
        let mut chol = Vec::new();
        let mut ok = false;
        for &jitter in &JITTERS {
            chol = base.clone();
            for i in 0..n {
                chol[i * n + i] += cfg.noise_variance + jitter;
            }
            if cholesky_in_place(&mut chol, n) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::NotPositiveDefinite { max_jitter: *JITTERS.last().unwrap() });
        }

        let tmp = forward_solve(&chol, n, ys);
        let alpha = backward_solve(&chol, n, &tmp);
        let log_det_half: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum();
        let log_marginal = -0.5 * ys.iter().zip(&alpha).map(|(y, a)| y * a).sum::<f64>()
            - log_det_half
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

        Ok(Gp {
            xs: xs.to_vec(),
            signal_variance: cfg.signal_variance,
            length_scale,
            chol,
            alpha,
            log_marginal,
        })
    }

    /// Posterior mean and standard deviation of the latent function at `x`.
    pub fn posterior(&self, x: f64) -> (f64, f64) {
        let n = self.xs.len();
        if n == 0 {
            return (0.0, self.signal_variance.sqrt());
        }
        let k: Vec<f64> = self
            .xs
            .iter()
            .map(|&xi| kernel(self.signal_variance, self.length_scale, x, xi))
            .collect();
        let mean = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = forward_solve(&self.chol, n, &k);
        let var = self.signal_variance - v.iter().map(|vi| vi * vi).sum::<f64>();
        (mean, var.max(0.0).sqrt())
    }

    /// Log marginal likelihood of the fitted observations.
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal
    }

    pub fn num_observations(&self) -> usize {
        self.xs.len()
    }
}

// ---------------------------------------------------------------------------
// Acquisition functions
// ---------------------------------------------------------------------------

fn standard_normal() -> StdNormal {
    StdNormal::new(0.0, 1.0).expect("unit normal is valid")
}

/// Closed-form expected improvement over the incumbent. A collapsed
/// posterior (std at or below 1e-5) degenerates to `max(mean - incumbent,
/// 0)`, which is exactly 0 at a noiseless observed incumbent.
pub fn expected_improvement(mean: f64, std: f64, incumbent: f64) -> f64 {
    let gap = mean - incumbent;
    if std <= EI_STD_FLOOR {
        return gap.max(0.0);
    }
    let n = standard_normal();
    let zeta = gap / std;
    (gap * n.cdf(zeta) + std * n.pdf(zeta)).max(0.0)
}

/// Upper confidence bound `mean + sqrt(beta) * std`.
pub fn ucb(mean: f64, std: f64, beta: f64) -> f64 {
    mean + beta.sqrt() * std
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaSchedule {
    /// `beta_t = 2 ln(|CL| t^2 pi^2 / (6 delta))`: the standard
    /// high-probability schedule for finite candidate sets.
    Log { delta: f64 },
    Constant { value: f64 },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Log { delta: 0.1 }
    }
}

impl BetaSchedule {
    pub fn value(&self, t: usize, num_candidates: usize) -> f64 {
        match *self {
            BetaSchedule::Log { delta } => {
                let t = t.max(1) as f64;
                let m = num_candidates.max(1) as f64;
                let pi2 = std::f64::consts::PI * std::f64::consts::PI;
                2.0 * (m * t * t * pi2 / (6.0 * delta)).ln()
            }
            BetaSchedule::Constant { value } => value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    Ei,
    Ucb,
}

// ---------------------------------------------------------------------------
// Search configuration and trace
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BOConfig {
    /// Layers eligible for evaluation; deduplicated and sorted internally.
    pub candidate_layers: Vec<usize>,
    pub n_init: usize,
    pub iterations: usize,
    pub acquisition: Acquisition,
    pub beta: BetaSchedule,
    pub seed: u64,
    /// Accuracy-vs-loss tradeoff forwarded to the utility.
    pub tradeoff_w: f64,
    /// Loss-coupling strength in the modeled backbone loss.
    pub lambda_perturb: f64,
    /// Probe perturbation weight entering both models.
    pub probe_weight_alpha: f64,
    /// Adapter capacity in the depth penalty.
    pub lora_rank: usize,
    /// Backbone loss before any probe is attached.
    pub lm_loss_base: f64,
    /// Total layer count for kernel scaling and the depth penalty; 0 means
    /// use the largest candidate.
    pub num_layers: usize,
    pub gp: GpConfig,
    /// Train share of the internal split made by dataset-driven search.
    pub train_fraction: f64,
    /// Probe family trained at each evaluated layer.
    pub probe_kind: ProbeKind,
    /// Coefficients of the modeled accuracy entering the utility.
    pub coeffs: PerfCoeffs,
}

impl Default for BOConfig {
    fn default() -> Self {
        BOConfig {
            candidate_layers: Vec::new(),
            n_init: 3,
            iterations: 5,
            acquisition: Acquisition::Ei,
            beta: BetaSchedule::default(),
            seed: 42,
            tradeoff_w: 0.8,
            lambda_perturb: 0.5,
            probe_weight_alpha: 0.2,
            lora_rank: 4,
            lm_loss_base: 2.0,
            num_layers: 0,
            gp: GpConfig::default(),
            train_fraction: 0.8,
            probe_kind: ProbeKind::Mlp,
            coeffs: PerfCoeffs::default(),
        }
    }
}

impl BOConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_layers.is_empty() {
            return Err(Error::Config("candidate_layers must not be empty".into()));
        }
        if self.n_init == 0 {
            return Err(Error::Config("n_init must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tradeoff_w) {
            return Err(Error::Config(format!(
                "tradeoff_w must be in [0, 1], got {}",
                self.tradeoff_w
            )));
        }
        for (name, v) in [
            ("lambda_perturb", self.lambda_perturb),
            ("probe_weight_alpha", self.probe_weight_alpha),
            ("lm_loss_base", self.lm_loss_base),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        self.gp.validate()
    }

    fn sorted_candidates(&self) -> Vec<usize> {
        let mut c = self.candidate_layers.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// One candidate evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BOTraceEntry {
    /// 1-based evaluation index across both phases.
    pub t: usize,
    /// True for the seeded random initialization phase.
    pub from_init: bool,
    pub layer: usize,
    pub a_empirical: f64,
    pub separability: f64,
    pub lm_loss: f64,
    /// Utility of this layer right after this evaluation's re-normalization.
    pub utility: f64,
    /// Recommendation if the search stopped here: argmax-utility evaluated
    /// layer under this evaluation's re-normalization.
    pub incumbent_layer: usize,
    /// The incumbent's utility. Re-normalization can lower it between
    /// rounds, so it is not monotone; it is always >= `utility`.
    pub incumbent_utility: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BOTrace {
    pub entries: Vec<BOTraceEntry>,
}

/// Search result: the argmax-utility evaluated layer plus everything needed
/// to audit the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best_layer: usize,
    pub best_utility: f64,
    pub trace: BOTrace,
    pub profile: LayerProfile,
}

/// A failed search still reports the evaluations made before the failure.
#[derive(Debug)]
pub struct SearchFailure {
    pub error: Error,
    pub trace: BOTrace,
}

impl From<SearchFailure> for Error {
    fn from(f: SearchFailure) -> Error {
        f.error
    }
}

/// Measured outcome of evaluating one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    /// Recall at the target FPR on the validation split.
    pub a_empirical: f64,
    pub separability: f64,
}

/// Anything that can score a layer: the dataset-backed trainer in
/// production, synthetic oracles in tests.
pub trait LayerEvaluator {
    fn evaluate_layer(&mut self, layer: usize) -> Result<EvalOutcome>;
}

struct SearchState {
    profile: LayerProfile,
    trace: BOTrace,
    evaluated: BTreeSet<usize>,
}

impl SearchState {
    fn new() -> Self {
        SearchState {
            profile: LayerProfile::default(),
            trace: BOTrace::default(),
            evaluated: BTreeSet::new(),
        }
    }

    fn observe(
        &mut self,
        cfg: &BOConfig,
        num_layers: usize,
        layer: usize,
        outcome: EvalOutcome,
        from_init: bool,
    ) -> Result<()> {
        let lm_loss = lm_loss_model(
            cfg.lm_loss_base,
            cfg.lambda_perturb,
            cfg.probe_weight_alpha,
            outcome.separability,
        );
        let a_model = performance_model(
            outcome.separability,
            layer,
            num_layers,
            cfg.lora_rank,
            cfg.probe_weight_alpha,
            &cfg.coeffs,
        );
        let mut record = LayerRecord::new(layer, outcome.separability, a_model, lm_loss);
        record.a_empirical = Some(outcome.a_empirical);
        self.profile.records.push(record);
        normalize_and_utility(&mut self.profile, cfg.tradeoff_w)?;

        let utility = self
            .profile
            .records
            .iter()
            .find(|r| r.layer == layer)
            .and_then(|r| r.utility)
            .expect("record just pushed and normalized");
        let (incumbent_layer, incumbent_utility) = best_layer(&self.profile)?;

        self.trace.entries.push(BOTraceEntry {
            t: self.trace.entries.len() + 1,
            from_init,
            layer,
            a_empirical: outcome.a_empirical,
            separability: outcome.separability,
            lm_loss,
            utility,
            incumbent_layer,
            incumbent_utility,
        });
        self.evaluated.insert(layer);
        Ok(())
    }

    /// Scaled positions and current utilities of all evaluated layers.
    fn observations(&self, num_layers: usize) -> (Vec<f64>, Vec<f64>) {
        let xs = self
            .profile
            .records
            .iter()
            .map(|r| scale_layer(r.layer, num_layers))
            .collect();
        let ys = self
            .profile
            .records
            .iter()
            .map(|r| r.utility.expect("normalized after every observe"))
            .collect();
        (xs, ys)
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut impl rand::Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i as u64) as usize;
        items.swap(i, j);
    }
}

type SearchResult = std::result::Result<SearchOutcome, SearchFailure>;

fn fail(error: Error, state: &SearchState) -> SearchFailure {
    SearchFailure { error, trace: state.trace.clone() }
}

/// The search loop against an arbitrary evaluator.
pub fn run_search_with<E: LayerEvaluator>(evaluator: &mut E, cfg: &BOConfig) -> SearchResult {
    let mut state = SearchState::new();
    cfg.validate().map_err(|e| fail(e, &state))?;
    let candidates = cfg.sorted_candidates();
    let num_layers =
        if cfg.num_layers > 0 { cfg.num_layers } else { *candidates.last().expect("non-empty") };

    // Seeded random initialization over distinct candidates.
    let mut pool = candidates.clone();
    let mut rng = stream(cfg.seed, "bo/init");
    shuffle(&mut pool, &mut rng);
    for &layer in pool.iter().take(cfg.n_init.min(candidates.len())) {
        let outcome = evaluator.evaluate_layer(layer).map_err(|e| fail(e, &state))?;
        state.observe(cfg, num_layers, layer, outcome, true).map_err(|e| fail(e, &state))?;
    }

    for t in 1..=cfg.iterations {
        let unevaluated: Vec<usize> =
            candidates.iter().copied().filter(|l| !state.evaluated.contains(l)).collect();
        if unevaluated.is_empty() {
            break;
        }

        let (xs, ys) = state.observations(num_layers);
        let gp = Gp::fit_auto(&xs, &ys, &cfg.gp).map_err(|e| fail(e, &state))?;
        let incumbent = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let beta = cfg.beta.value(t, candidates.len());

        // Exhaustive scan; ties toward the smaller layer (candidates are
        // sorted ascending, so strict improvement keeps the first).
        let mut chosen: Option<(usize, f64)> = None;
        for &layer in &unevaluated {
            let (mean, std) = gp.posterior(scale_layer(layer, num_layers));
            let score = match cfg.acquisition {
                Acquisition::Ei => expected_improvement(mean, std, incumbent),
                Acquisition::Ucb => ucb(mean, std, beta),
            };
            if chosen.map_or(true, |(_, best)| score > best) {
                chosen = Some((layer, score));
            }
        }
        let (layer, _) = chosen.expect("unevaluated non-empty");
        let outcome = evaluator.evaluate_layer(layer).map_err(|e| fail(e, &state))?;
        state.observe(cfg, num_layers, layer, outcome, false).map_err(|e| fail(e, &state))?;
    }

    let (best, best_utility) = best_layer(&state.profile).map_err(|e| fail(e, &state))?;
    Ok(SearchOutcome {
        best_layer: best,
        best_utility,
        trace: state.trace,
        profile: state.profile,
    })
}

/// Baseline: evaluate `n_init + iterations` distinct seeded-random layers
/// with the same bookkeeping and no surrogate.
pub fn run_random_search<E: LayerEvaluator>(evaluator: &mut E, cfg: &BOConfig) -> SearchResult {
    let mut state = SearchState::new();
    cfg.validate().map_err(|e| fail(e, &state))?;
    let candidates = cfg.sorted_candidates();
    let num_layers =
        if cfg.num_layers > 0 { cfg.num_layers } else { *candidates.last().expect("non-empty") };

    let mut pool = candidates.clone();
    let mut rng = stream(cfg.seed, "bo/random");
    shuffle(&mut pool, &mut rng);
    let budget = (cfg.n_init + cfg.iterations).min(candidates.len());
    for (i, &layer) in pool.iter().take(budget).enumerate() {
        let outcome = evaluator.evaluate_layer(layer).map_err(|e| fail(e, &state))?;
        state
            .observe(cfg, num_layers, layer, outcome, i < cfg.n_init)
            .map_err(|e| fail(e, &state))?;
    }

    let (best, best_utility) = best_layer(&state.profile).map_err(|e| fail(e, &state))?;
    Ok(SearchOutcome {
        best_layer: best,
        best_utility,
        trace: state.trace,
        profile: state.profile,
    })
}

/// Dataset-backed evaluator: split once, train a probe per layer, measure
/// recall at the configured FPR on the validation split.
pub struct DatasetEvaluator {
    train_split: Dataset,
    val_split: Dataset,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    probe_kind: ProbeKind,
    seed: u64,
}

impl DatasetEvaluator {
    pub fn new(
        ds: &Dataset,
        bo_cfg: &BOConfig,
        loss_cfg: &LossConfig,
        train_cfg: &TrainConfig,
    ) -> Result<Self> {
        let (train_split, val_split) = split(ds, bo_cfg.train_fraction, bo_cfg.seed)?;
        Ok(DatasetEvaluator {
            train_split,
            val_split,
            loss_cfg: loss_cfg.clone(),
            train_cfg: train_cfg.clone(),
            probe_kind: bo_cfg.probe_kind,
            seed: bo_cfg.seed,
        })
    }
}

impl LayerEvaluator for DatasetEvaluator {
    fn evaluate_layer(&mut self, layer: usize) -> Result<EvalOutcome> {
        let d = self.train_split.meta.hidden_dim;
        let arch = match self.probe_kind {
            ProbeKind::Linear => ProbeArch::linear(d),
            ProbeKind::Mlp => ProbeArch::mlp_default(d)?,
        };
        let init = init_probe(&arch, sub_seed(self.seed, &format!("bo/probe/{layer}")))?;
        let (params, _) =
            train(init, &self.train_split, Some(&self.val_split), layer, &self.loss_cfg, &self.train_cfg)?;
        let (metrics, _) = evaluate(
            &params,
            &self.val_split,
            layer,
            &self.loss_cfg,
            self.train_cfg.fpr_target,
            self.train_cfg.threshold,
        )?;
        let separability = estimate_separability(&self.train_split, layer)?;
        Ok(EvalOutcome { a_empirical: metrics.recall_at_fpr, separability })
    }
}

/// Dataset-driven search: split, then run the loop with probes trained at
/// each evaluated layer.
pub fn run_search(
    ds: &Dataset,
    bo_cfg: &BOConfig,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> SearchResult {
    let empty = SearchState::new();
    let stored = ds.stored_layers();
    for layer in &bo_cfg.sorted_candidates() {
        if !stored.contains(layer) {
            let available = stored.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
            return Err(fail(Error::MissingLayer { layer: *layer, available }, &empty));
        }
    }
    let mut evaluator =
        DatasetEvaluator::new(ds, bo_cfg, loss_cfg, train_cfg).map_err(|e| fail(e, &empty))?;
    run_search_with(&mut evaluator, bo_cfg)
}

/// Regret curves against an oracle utility defined on every evaluated
/// layer: cumulative `R_k = sum_{t<=k} (U* - U(l_t))` and simple
/// `r_k = min_{t<=k} (U* - U(l_t))`, with `U*` the oracle maximum.
pub fn compute_regret(
    trace: &BOTrace,
    oracle: &std::collections::BTreeMap<usize, f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if oracle.is_empty() {
        return Err(Error::Config("regret oracle is empty".into()));
    }
    let u_star = oracle.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut cumulative = Vec::with_capacity(trace.entries.len());
    let mut simple = Vec::with_capacity(trace.entries.len());
    let mut running_sum = 0.0;
    let mut running_min = f64::INFINITY;
    for entry in &trace.entries {
        let u = oracle.get(&entry.layer).copied().ok_or_else(|| {
            let available = oracle.keys().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
            Error::MissingLayer { layer: entry.layer, available }
        })?;
        let gap = u_star - u;
        running_sum += gap;
        running_min = running_min.min(gap);
        cumulative.push(running_sum);
        simple.push(running_min);
    }
    Ok((cumulative, simple))
}
