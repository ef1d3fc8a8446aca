//! Mini-batch probe training over frozen hidden states.
//!
//! The trainer never touches the stored states: it reads one layer's
//! activations per sequence, runs the probe forward, differentiates the
//! batch loss with respect to the logits, and backpropagates through the
//! probe only. Shuffling, initialization, and every other random choice
//! come from named substreams of the config seed, so a rerun with the same
//! inputs reproduces the same parameters bit for bit (wall-clock timing is
//! the one recorded quantity allowed to differ).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::{total_loss, total_loss_with_grad, LossBreakdown, LossConfig};
use crate::metrics::{report, MetricsReport};
use crate::probe::{backward, forward, predict_proba, ProbeParams};
use crate::rng::stream;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_adam_eps() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Global L2 gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Run a validation pass every this many optimizer steps; 0 means only
    /// after the final step. Ignored without a validation split.
    pub eval_every: usize,
    /// Return the parameters from the validation pass with the highest
    /// recall at `fpr_target` instead of the final ones.
    pub select_best: bool,
    pub fpr_target: f64,
    /// Decision threshold for confusion counts in validation reports.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 5,
            batch_size: 8,
            seed: 42,
            optimizer: Optimizer::default(),
            grad_clip: Some(1.0),
            eval_every: 0,
            select_best: false,
            fpr_target: 0.1,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {clip}")));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config(format!(
                    "adam needs beta1, beta2 in [0, 1) and eps > 0, got ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        if !(self.fpr_target > 0.0 && self.fpr_target < 1.0) {
            return Err(Error::Config(format!(
                "fpr_target must be in (0, 1), got {}",
                self.fpr_target
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub report: MetricsReport,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Wall-clock time of the whole run. Informational only; never part of
    /// any determinism comparison.
    pub wall_ms: u64,
}

struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

fn apply_update(
    flat: &mut [f64],
    grad: &[f64],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
) {
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (p, g) in flat.iter_mut().zip(grad) {
                *p -= cfg.learning_rate * g;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            state.t += 1;
            let bc1 = 1.0 - beta1.powi(state.t as i32);
            let bc2 = 1.0 - beta2.powi(state.t as i32);
            for i in 0..flat.len() {
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let mhat = state.m[i] / bc1;
                let vhat = state.v[i] / bc2;
                flat[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn clip_gradient(grad: &mut [f64], clip: Option<f64>) {
    let Some(clip) = clip else { return };
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip {
        let scale = clip / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
}

/// Predicted probability and label for every unmasked token, in dataset
/// order. The score/label lists every metric in [`evaluate`] consumes.
fn collect_scores(
    params: &ProbeParams,
    ds: &Dataset,
    layer: usize,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for seq in &ds.sequences {
        let states = seq.layer_states(layer)?;
        let probs = predict_proba(params, states, seq.num_tokens)?;
        for t in 0..seq.num_tokens {
            if seq.mask[t] == 1 {
                scores.push(probs[t]);
                labels.push(seq.token_labels[t]);
            }
        }
    }
    Ok((scores, labels))
}

/// Metrics over unmasked tokens plus the loss breakdown of the whole split
/// treated as one batch.
pub fn evaluate(
    params: &ProbeParams,
    ds: &Dataset,
    layer: usize,
    loss_cfg: &LossConfig,
    fpr_target: f64,
    threshold: f64,
) -> Result<(MetricsReport, LossBreakdown)> {
    let (scores, labels) = collect_scores(params, ds, layer)?;
    let metrics = report(&scores, &labels, fpr_target, threshold)?;

    let refs: Vec<_> = ds.sequences.iter().collect();
    let mut logits = Vec::with_capacity(refs.len());
    for seq in &refs {
        let states = seq.layer_states(layer)?;
        logits.push(forward(params, states, seq.num_tokens)?.logits);
    }
    let breakdown = total_loss(&logits, &refs, loss_cfg)?;
    Ok((metrics, breakdown))
}

/// Train a probe on one layer's hidden states.
///
/// Returns the trained parameters (final, or best-on-validation when
/// `select_best` is set and a validation split is given) and the per-step
/// history. A non-finite batch loss aborts with the offending step number.
pub fn train(
    init: ProbeParams,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    layer: usize,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<(ProbeParams, TrainHistory)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train_ds.sequences.is_empty() {
        return Err(Error::Config("train: empty training split".into()));
    }
    if init.arch.input_dim() != train_ds.meta.hidden_dim {
        return Err(Error::ShapeMismatch {
            context: "train: probe input vs dataset hidden_dim".into(),
            expected: train_ds.meta.hidden_dim,
            got: init.arch.input_dim(),
        });
    }

    let started = Instant::now();
    let mut params = init;
    let mut flat = params.flatten();
    let mut opt = OptimizerState { m: vec![0.0; flat.len()], v: vec![0.0; flat.len()], t: 0 };

    let mut history = TrainHistory { steps: Vec::new(), evals: Vec::new(), wall_ms: 0 };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let n = train_ds.sequences.len();
    let mut step = 0usize;

    let run_eval = |step: usize,
                        params: &ProbeParams,
                        flat: &[f64],
                        history: &mut TrainHistory,
                        best: &mut Option<(f64, Vec<f64>)>|
     -> Result<()> {
        let Some(val) = val_ds else { return Ok(()) };
        let (metrics, loss) =
            evaluate(params, val, layer, loss_cfg, cfg.fpr_target, cfg.threshold)?;
        let score = metrics.recall_at_fpr;
        history.evals.push(EvalRecord { step, report: metrics, loss });
        let improved = best.as_ref().map_or(true, |(b, _)| score > *b);
        if improved {
            *best = Some((score, flat.to_vec()));
        }
        Ok(())
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream(cfg.seed, &format!("trainer/shuffle/{epoch}"));
        // Fisher-Yates, identical order for identical seed and epoch.
        for i in (1..n).rev() {
            let j = (rand::Rng::gen_range(&mut rng, 0..=i as u64)) as usize;
            order.swap(i, j);
        }

        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<_> = chunk.iter().map(|&i| &train_ds.sequences[i]).collect();

            let mut passes = Vec::with_capacity(batch.len());
            let mut logits = Vec::with_capacity(batch.len());
            for seq in &batch {
                let states = seq.layer_states(layer)?;
                let pass = forward(&params, states, seq.num_tokens)?;
                logits.push(pass.logits.clone());
                passes.push(pass);
            }

            let (breakdown, dz) = total_loss_with_grad(&logits, &batch, loss_cfg)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }

            let mut grad = vec![0.0f64; flat.len()];
            for (pass, upstream) in passes.iter().zip(&dz) {
                let g = backward(&params, pass, upstream)?.flatten();
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            clip_gradient(&mut grad, cfg.grad_clip);
            apply_update(&mut flat, &grad, cfg, &mut opt);
            params = ProbeParams::from_flat(&params.arch, &flat)?;

            history.steps.push(StepRecord { step, epoch, loss: breakdown });
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                run_eval(step, &params, &flat, &mut history, &mut best)?;
            }
        }
    }

    // Final validation pass unless the step cadence just produced one.
    let already = history.evals.last().map_or(false, |e| e.step == step);
    if !already {
        run_eval(step, &params, &flat, &mut history, &mut best)?;
    }

    if cfg.select_best {
        if let Some((_, best_flat)) = best {
            params = ProbeParams::from_flat(&params.arch, &best_flat)?;
        }
    }
    history.wall_ms = started.elapsed().as_millis() as u64;
    Ok((params, history))
}
