//! The five subcommands. Each writes its artifacts under `--out` next to the
//! fully-resolved config and prints a short console summary.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use tphd::bayesopt::{run_search, SearchOutcome};
use tphd::dataset::{generate_synthetic, load_dataset, save_dataset, split, validate, Dataset};
use tphd::loss::{LossBreakdown, LossConfig};
use tphd::metrics::MetricsReport;
use tphd::probe::{
    default_probe_layer, init_probe, load_checkpoint, save_checkpoint, CheckpointMeta, ProbeArch,
    ProbeKind, ProbeParams,
};
use tphd::trainer::{evaluate, train, EvalRecord, StepRecord, TrainHistory};
use tphd::{Error, Result};

use crate::config::{write_resolved_config, RunConfig};

pub const CHECKPOINT_FILE: &str = "probe.tpck";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LAYERS_FILE: &str = "layers.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Which part of the seeded sequence split a command evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitSel {
    /// The whole dataset, no split.
    All,
    /// The train side of the split.
    Train,
    /// The validation side of the split (default; matches what `train`
    /// reports).
    Val,
}

fn arch_for(kind: ProbeKind, hidden_dim: usize) -> Result<ProbeArch> {
    match kind {
        ProbeKind::Linear => Ok(ProbeArch::linear(hidden_dim)),
        ProbeKind::Mlp => ProbeArch::mlp_default(hidden_dim),
    }
}

fn probe_layer(cfg: &RunConfig, flag: Option<usize>, ds: &Dataset) -> usize {
    flag.or(cfg.probe.layer)
        .unwrap_or_else(|| default_probe_layer(ds.meta.num_layers))
}

/// Everything `metrics.json` carries; shared by train and eval so the two
/// files compare field for field.
#[derive(Serialize)]
struct MetricsArtifact<'a> {
    layer: usize,
    probe_kind: ProbeKind,
    split: &'a str,
    report: &'a MetricsReport,
    loss: &'a LossBreakdown,
}

fn write_metrics(out: &Path, artifact: &MetricsArtifact) -> Result<()> {
    let mut text = serde_json::to_string_pretty(artifact)?;
    text.push('\n');
    fs::write(out.join(METRICS_FILE), text)?;
    Ok(())
}

fn print_metrics_table(rows: &[(String, MetricsReport)], fpr_target: f64) {
    let r_label = format!("r@{fpr_target:.2}");
    println!("{:<16} {:>8} {:>8} {:>8} {:>9} {:>8}", "probe", "auc", r_label, "acc", "prec", "recall");
    for (name, m) in rows {
        let prec = match m.precision {
            Some(p) => format!("{p:.4}"),
            None => "-".to_owned(),
        };
        println!(
            "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>9} {:>8.4}",
            name, m.auc, m.recall_at_fpr, m.accuracy, prec, m.recall
        );
    }
}

// -------------------------------------------------------------------------
// gen
// -------------------------------------------------------------------------

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.synth.validate()?;
    let ds = generate_synthetic(&cfg.synth)?;
    let violations = validate(&ds);
    if let Some(first) = violations.first() {
        return Err(Error::Config(format!(
            "generated dataset failed validation ({} problem(s)); first: {first}",
            violations.len()
        )));
    }
    save_dataset(&ds, out)?;
    write_resolved_config(cfg, out)?;

    let active: usize = ds.sequences.iter().map(|s| s.active_tokens()).sum();
    let positives: usize = ds
        .sequences
        .iter()
        .map(|s| {
            (0..s.num_tokens)
                .filter(|&t| s.mask[t] == 1 && s.token_labels[t] == 1)
                .count()
        })
        .sum();
    let rate = if active == 0 { 0.0 } else { positives as f64 / active as f64 };
    println!(
        "wrote {}: {} sequences, {} tokens ({} unmasked), positive rate {:.4}",
        out.display(),
        ds.sequences.len(),
        ds.total_tokens(),
        active,
        rate
    );
    Ok(())
}

// -------------------------------------------------------------------------
// train
// -------------------------------------------------------------------------

fn write_history(out: &Path, history: &TrainHistory) -> Result<()> {
    #[derive(Serialize)]
    #[serde(tag = "event", rename_all = "snake_case")]
    enum Line<'a> {
        Step(&'a StepRecord),
        Eval(&'a EvalRecord),
    }

    let mut file = fs::File::create(out.join(HISTORY_FILE))?;
    // Merge the two ordered lists chronologically; evals land after the
    // step that triggered them.
    let mut evals = history.evals.iter().peekable();
    for step in &history.steps {
        serde_json::to_writer(&mut file, &Line::Step(step))?;
        file.write_all(b"\n")?;
        while evals.peek().is_some_and(|e| e.step <= step.step) {
            serde_json::to_writer(&mut file, &Line::Eval(evals.next().expect("peeked")))?;
            file.write_all(b"\n")?;
        }
    }
    for eval in evals {
        serde_json::to_writer(&mut file, &Line::Eval(eval))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, dataset_dir: &Path, out: &Path, layer_flag: Option<usize>) -> Result<()> {
    cfg.validate_training()?;
    let ds = load_dataset(dataset_dir)?;
    let layer = probe_layer(cfg, layer_flag, &ds);
    let (train_ds, val_ds) = split(&ds, cfg.train_fraction, cfg.split_seed())?;

    let arch = arch_for(cfg.probe.kind, ds.meta.hidden_dim)?;
    let init = init_probe(&arch, cfg.probe.seed)?;
    let (params, history) = train(init, &train_ds, Some(&val_ds), layer, &cfg.loss, &cfg.train)?;

    fs::create_dir_all(out)?;
    write_resolved_config(cfg, out)?;
    write_history(out, &history)?;

    let meta = CheckpointMeta {
        seed: cfg.probe.seed,
        layer,
        fingerprint: ds.meta.fingerprint.clone(),
    };
    let ckpt_path = out.join(CHECKPOINT_FILE);
    save_checkpoint(&params, &meta, &ckpt_path)?;

    // Report from the persisted artifact, not the in-memory parameters:
    // the checkpoint narrows to f32, and `eval` must reproduce these
    // numbers exactly from the file.
    let (persisted, _) = load_checkpoint(&ckpt_path)?;
    let (report, loss) = eval_on_split(cfg, &persisted, &ds, layer, SplitSel::Val)?;
    write_metrics(
        out,
        &MetricsArtifact { layer, probe_kind: cfg.probe.kind, split: "val", report: &report, loss: &loss },
    )?;

    println!(
        "trained {:?} probe on layer {layer}: {} steps, {} evals, {} ms",
        cfg.probe.kind,
        history.steps.len(),
        history.evals.len(),
        history.wall_ms
    );
    let label = format!("{:?}@{layer}", cfg.probe.kind).to_lowercase();
    print_metrics_table(&[(label, report)], cfg.metrics.fpr_target);
    Ok(())
}

// -------------------------------------------------------------------------
// eval
// -------------------------------------------------------------------------

fn eval_on_split(
    cfg: &RunConfig,
    params: &ProbeParams,
    ds: &Dataset,
    layer: usize,
    sel: SplitSel,
) -> Result<(MetricsReport, LossBreakdown)> {
    let part;
    let target = match sel {
        SplitSel::All => ds,
        SplitSel::Train => {
            part = split(ds, cfg.train_fraction, cfg.split_seed())?.0;
            &part
        }
        SplitSel::Val => {
            part = split(ds, cfg.train_fraction, cfg.split_seed())?.1;
            &part
        }
    };
    evaluate(params, target, layer, &cfg.loss, cfg.metrics.fpr_target, cfg.metrics.threshold)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    dataset_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    sel: SplitSel,
) -> Result<()> {
    cfg.validate_training()?;
    let ds = load_dataset(dataset_dir)?;
    let (params, meta) = load_checkpoint(checkpoint)?;
    let (report, loss) = eval_on_split(cfg, &params, &ds, meta.layer, sel)?;

    write_resolved_config(cfg, out)?;
    let split_name = match sel {
        SplitSel::All => "all",
        SplitSel::Train => "train",
        SplitSel::Val => "val",
    };
    write_metrics(
        out,
        &MetricsArtifact {
            layer: meta.layer,
            probe_kind: cfg.probe.kind,
            split: split_name,
            report: &report,
            loss: &loss,
        },
    )?;

    let label = format!("{:?}@{}", cfg.probe.kind, meta.layer).to_lowercase();
    print_metrics_table(&[(label, report)], cfg.metrics.fpr_target);
    Ok(())
}

// -------------------------------------------------------------------------
// layer-search
// -------------------------------------------------------------------------

fn write_trace(out: &Path, outcome: &SearchOutcome) -> Result<()> {
    let mut file = fs::File::create(out.join(TRACE_FILE))?;
    for entry in &outcome.trace.entries {
        serde_json::to_writer(&mut file, entry)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

fn write_layers_csv(out: &Path, outcome: &SearchOutcome) -> Result<()> {
    let mut text = String::from("layer,separability,a_model,a_empirical,lm_loss,a_norm,l_norm,utility\n");
    let mut records = outcome.profile.records.clone();
    records.sort_by_key(|r| r.layer);
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for r in &records {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.layer,
            r.separability,
            r.a_model,
            opt(r.a_empirical),
            r.lm_loss,
            opt(r.a_norm),
            opt(r.l_norm),
            opt(r.utility),
        ));
    }
    fs::write(out.join(LAYERS_FILE), text)?;
    Ok(())
}

pub fn cmd_layer_search(cfg: &RunConfig, dataset_dir: &Path, out: &Path) -> Result<()> {
    cfg.validate_training()?;
    let ds = load_dataset(dataset_dir)?;

    let mut bo = cfg.bo.clone();
    if bo.candidate_layers.is_empty() {
        bo.candidate_layers = ds.stored_layers();
    }
    if bo.candidate_layers.len() == 1 {
        eprintln!(
            "warning: single candidate layer {}; the search reduces to one evaluation",
            bo.candidate_layers[0]
        );
    }

    write_resolved_config(cfg, out)?;
    match run_search(&ds, &bo, &cfg.loss, &cfg.train) {
        Ok(outcome) => {
            write_trace(out, &outcome)?;
            write_layers_csv(out, &outcome)?;
            #[derive(Serialize)]
            struct Summary<'a> {
                best_layer: usize,
                best_utility: f64,
                evaluations: usize,
                candidates: &'a [usize],
            }
            let summary = Summary {
                best_layer: outcome.best_layer,
                best_utility: outcome.best_utility,
                evaluations: outcome.trace.entries.len(),
                candidates: &bo.candidate_layers,
            };
            let mut text = serde_json::to_string_pretty(&summary)?;
            text.push('\n');
            fs::write(out.join(SUMMARY_FILE), text)?;
            println!(
                "best layer {} (utility {:.4}) after {} evaluations",
                outcome.best_layer,
                outcome.best_utility,
                outcome.trace.entries.len()
            );
            Ok(())
        }
        Err(failure) => {
            // Keep whatever the search managed to evaluate for post-mortems.
            let mut file = fs::File::create(out.join(TRACE_FILE))?;
            for entry in &failure.trace.entries {
                serde_json::to_writer(&mut file, entry)?;
                file.write_all(b"\n")?;
            }
            Err(failure.error)
        }
    }
}

// -------------------------------------------------------------------------
// ablate
// -------------------------------------------------------------------------

/// The four leave-one-out variants, keyed by the removed component.
fn ablation_variants(full: &LossConfig) -> Vec<(&'static str, LossConfig)> {
    let mut out = Vec::new();
    let mut v = full.clone();
    v.focal_weight = 0.0;
    out.push(("focal", v));
    let mut v = full.clone();
    v.lambda_span = 0.0;
    out.push(("span", v));
    let mut v = full.clone();
    v.lambda_sparse = 0.0;
    out.push(("sparse", v));
    let mut v = full.clone();
    v.lambda_kl = 0.0;
    out.push(("kl", v));
    out
}

pub fn cmd_ablate(cfg: &RunConfig, dataset_dir: &Path, out: &Path) -> Result<()> {
    cfg.validate_training()?;
    let ds = load_dataset(dataset_dir)?;
    let layer = probe_layer(cfg, None, &ds);
    let (train_ds, val_ds) = split(&ds, cfg.train_fraction, cfg.split_seed())?;
    let arch = arch_for(cfg.probe.kind, ds.meta.hidden_dim)?;

    // Identical initialization, split, and training seed everywhere: the
    // loss configuration is the only moving part.
    let run_variant = |loss_cfg: &LossConfig| -> Result<MetricsReport> {
        let init = init_probe(&arch, cfg.probe.seed)?;
        let (params, _) = train(init, &train_ds, Some(&val_ds), layer, loss_cfg, &cfg.train)?;
        let (report, _) = evaluate(
            &params,
            &val_ds,
            layer,
            loss_cfg,
            cfg.metrics.fpr_target,
            cfg.metrics.threshold,
        )?;
        Ok(report)
    };

    let full = run_variant(&cfg.loss)?;
    let mut rows = Vec::new();
    for (name, variant_cfg) in ablation_variants(&cfg.loss) {
        let report = run_variant(&variant_cfg)?;
        rows.push((name, report));
    }

    fs::create_dir_all(out)?;
    write_resolved_config(cfg, out)?;

    let mut csv = String::from("removed,auc,recall_at_fpr,delta_auc,delta_recall\n");
    for (name, report) in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            name,
            report.auc,
            report.recall_at_fpr,
            report.auc - full.auc,
            report.recall_at_fpr - full.recall_at_fpr,
        ));
    }
    fs::write(out.join(ABLATION_FILE), csv)?;

    #[derive(Serialize)]
    struct AblationRow<'a> {
        removed: &'a str,
        report: &'a MetricsReport,
        delta_auc: f64,
        delta_recall: f64,
    }
    #[derive(Serialize)]
    struct AblationArtifact<'a> {
        layer: usize,
        full: &'a MetricsReport,
        variants: Vec<AblationRow<'a>>,
    }
    let artifact = AblationArtifact {
        layer,
        full: &full,
        variants: rows
            .iter()
            .map(|(name, report)| AblationRow {
                removed: name,
                report,
                delta_auc: report.auc - full.auc,
                delta_recall: report.recall_at_fpr - full.recall_at_fpr,
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&artifact)?;
    text.push('\n');
    fs::write(out.join("ablation.json"), text)?;

    let mut table = vec![("(full)".to_owned(), full)];
    for (name, report) in rows {
        table.push((format!("-{name}"), report));
    }
    print_metrics_table(&table, cfg.metrics.fpr_target);
    Ok(())
}
